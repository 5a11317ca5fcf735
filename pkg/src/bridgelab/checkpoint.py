"""Self-describing checkpoint files.

Layout::

    BRIDGELAB-CHECKPOINT\\n
    key = value lines (format_version, model.* config, vocab_size, tensor_count, extras)\\n
    \\n                                   blank line ends the header
    vocab_size lines, one token each
    per tensor: "tensor <name> <ndim> <dim0> ... <dimN-1>\\n" then the values as
    little-endian float32 in C order

Everything before the tensor records is UTF-8 text.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

import numpy as np

from .corpus import Vocabulary
from .model import ModelConfig, Seq2SeqTransformer, parameter_shapes

MAGIC = b"BRIDGELAB-CHECKPOINT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: Seq2SeqTransformer, vocab: Vocabulary, extra: dict | None = None) -> None:
    cfg = model.config
    if len(vocab) != cfg.vocab_size:
        raise CheckpointError(f"vocabulary has {len(vocab)} tokens, model expects {cfg.vocab_size}")
    header = [f"format_version = {FORMAT_VERSION}"]
    header += [f"model.{k} = {v}" for k, v in cfg.to_dict().items()]
    header += [f"vocab_size = {len(vocab)}", f"tensor_count = {len(model.params)}"]
    for key, value in sorted((extra or {}).items()):
        header.append(f"extra.{key} = {value}")
    chunks = [MAGIC, ("\n".join(header) + "\n\n").encode("utf-8")]
    chunks.append(("".join(tok + "\n" for tok in vocab.itos)).encode("utf-8"))
    for name, tensor in model.named_parameters():
        arr = np.ascontiguousarray(tensor.data, dtype="<f4")
        dims = " ".join(str(d) for d in arr.shape)
        chunks.append(f"tensor {name} {arr.ndim} {dims}\n".encode("utf-8"))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def _readline(buf: bytes, pos: int) -> tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise CheckpointError("truncated checkpoint")
    return buf[pos:end].decode("utf-8"), end + 1


def read_header(path) -> tuple[dict[str, str], int, bytes]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    pos = len(MAGIC)
    header: dict[str, str] = {}
    while True:
        line, pos = _readline(buf, pos)
        if not line:
            break
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"bad header line {line!r}")
        header[key.strip()] = value.strip()
    if int(header.get("format_version", -1)) != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format_version')}")
    return header, pos, buf


def _model_config(header: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        raw = header[f"model.{f.name}"]
        kwargs[f.name] = float(raw) if f.type in ("float", float) else int(raw)
    return ModelConfig(**kwargs)


def load_checkpoint(path) -> tuple[Seq2SeqTransformer, Vocabulary, dict[str, str]]:
    """Return (model in eval mode, vocabulary, header dict)."""
    header, pos, buf = read_header(path)
    cfg = _model_config(header)
    tokens = []
    for _ in range(int(header["vocab_size"])):
        tok, pos = _readline(buf, pos)
        tokens.append(tok)
    vocab = Vocabulary(tokens)
    expected = parameter_shapes(cfg)
    state = {}
    for _ in range(int(header["tensor_count"])):
        line, pos = _readline(buf, pos)
        parts = line.split()
        if len(parts) < 3 or parts[0] != "tensor":
            raise CheckpointError(f"bad tensor record {line!r}")
        name, ndim = parts[1], int(parts[2])
        shape = tuple(int(d) for d in parts[3 : 3 + ndim])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise CheckpointError(f"truncated data for tensor {name}")
        state[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if set(state) != set(expected):
        raise CheckpointError("checkpoint tensors do not match the model configuration")
    model = Seq2SeqTransformer(cfg)
    model.load_state_dict(state)
    return model.eval(), vocab, header

"""Transformer encoder-decoder with one embedding table shared by encoder input,
decoder input and the output projection."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS, EOS, PAD


class ModelInputError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    model_dim: int = 64
    num_heads: int = 4
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    feedforward_dim: int = 128
    max_sequence_length: int = 64
    dropout_rate: float = 0.1

    def __post_init__(self):
        for name in ("vocab_size", "model_dim", "num_heads", "num_encoder_layers",
                     "num_decoder_layers", "feedforward_dim", "max_sequence_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.vocab_size <= 4:
            raise ValueError("vocab_size must exceed the 4 reserved ids")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderState:
    hidden: np.ndarray  # (S, model_dim)
    mask: np.ndarray  # (S,) True for real tokens


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.model_dim, cfg.feedforward_dim
    shapes: dict[str, tuple[int, ...]] = {"embedding": (cfg.vocab_size, d)}

    def attn(prefix):
        for name in ("q", "k", "v", "o"):
            shapes[f"{prefix}.w{name}"] = (d, d)
            shapes[f"{prefix}.b{name}"] = (d,)

    def norm(prefix):
        shapes[f"{prefix}.gain"] = (d,)
        shapes[f"{prefix}.bias"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    for i in range(cfg.num_encoder_layers):
        p = f"encoder.{i}"
        norm(f"{p}.norm1"), attn(f"{p}.self_attn"), norm(f"{p}.norm2"), ffn(f"{p}.ffn")
    norm("encoder.final_norm")
    for i in range(cfg.num_decoder_layers):
        p = f"decoder.{i}"
        norm(f"{p}.norm1"), attn(f"{p}.self_attn"), norm(f"{p}.norm2"), attn(f"{p}.cross_attn")
        norm(f"{p}.norm3"), ffn(f"{p}.ffn")
    norm("decoder.final_norm")
    return shapes


class Seq2SeqTransformer:
    """Pre-norm transformer encoder-decoder.

    Batched methods take padded (B, T) int arrays with PAD = 0. The
    single-sequence methods (``encode``, ``decode_step``, ``forward_teacher``,
    ``forward_mixed``) wrap them for one context/response pair.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32, init_range: float = 0.1):
        self.config = config
        self.dtype = np.dtype(dtype).type
        self.training = False
        self.dropout_rng = np.random.default_rng([seed, 1])
        init_rng = np.random.default_rng([seed, 0])
        self.params: dict[str, Tensor] = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith(".gain"):
                value = np.ones(shape)
            elif name.endswith(".bias") and "norm" in name:
                value = np.zeros(shape)
            else:
                value = init_rng.uniform(-init_range, init_range, size=shape)
            self.params[name] = Tensor(value.astype(self.dtype), requires_grad=True)
        self._positions = sinusoidal_positions(config.max_sequence_length + 1, config.model_dim).astype(self.dtype)

    # -- parameter plumbing -------------------------------------------------

    @property
    def embedding(self) -> Tensor:
        return self.params["embedding"]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def train(self, mode: bool = True) -> "Seq2SeqTransformer":
        self.training = mode
        return self

    def eval(self) -> "Seq2SeqTransformer":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = parameter_shapes(self.config)
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise ValueError(f"state mismatch; missing={missing} unexpected={extra}")
        for name, value in state.items():
            if tuple(value.shape) != expected[name]:
                raise ValueError(f"{name}: shape {value.shape} != {expected[name]}")
            self.params[name].data = np.array(value, dtype=self.dtype)

    # -- building blocks ----------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return ad.layer_norm(x, self._p(f"{prefix}.gain"), self._p(f"{prefix}.bias"))

    def _dropout(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.config.dropout_rate, self.dropout_rng, self.training)

    def _attention(self, prefix: str, x: Tensor, memory: Tensor, allowed: np.ndarray) -> Tensor:
        p = self._p
        q = ad.linear(x, p(f"{prefix}.wq"), p(f"{prefix}.bq"))
        k = ad.linear(memory, p(f"{prefix}.wk"), p(f"{prefix}.bk"))
        v = ad.linear(memory, p(f"{prefix}.wv"), p(f"{prefix}.bv"))
        heads = ad.attention(q, k, v, allowed, self.config.num_heads)
        return ad.linear(heads, p(f"{prefix}.wo"), p(f"{prefix}.bo"))

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        p = self._p
        h = ad.gelu(ad.linear(x, p(f"{prefix}.w1"), p(f"{prefix}.b1")))
        return ad.linear(h, p(f"{prefix}.w2"), p(f"{prefix}.b2"))

    def _embed(self, ids: np.ndarray) -> Tensor:
        T = ids.shape[1]
        if T > self._positions.shape[0]:
            raise ModelInputError(f"sequence length {T} exceeds max_sequence_length {self.config.max_sequence_length}")
        x = ad.embedding(self.embedding, ids) * math.sqrt(self.config.model_dim)
        return self._dropout(x + Tensor(self._positions[:T]))

    # -- batched forward ----------------------------------------------------

    def encode_batch(self, src: np.ndarray) -> tuple[Tensor, np.ndarray]:
        src = np.asarray(src, dtype=np.int64)
        src_mask = src != PAD
        allowed = src_mask[:, None, None, :]
        x = self._embed(src)
        for i in range(self.config.num_encoder_layers):
            pre = f"encoder.{i}"
            h = self._norm(x, f"{pre}.norm1")
            x = x + self._dropout(self._attention(f"{pre}.self_attn", h, h, allowed))
            h = self._norm(x, f"{pre}.norm2")
            x = x + self._dropout(self._ffn(f"{pre}.ffn", h))
        return self._norm(x, "encoder.final_norm"), src_mask

    def decode_batch(self, tgt_in: np.ndarray, memory: Tensor, src_mask: np.ndarray) -> Tensor:
        """Logits (B, T, V) for every decoder position."""
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        T = tgt_in.shape[1]
        causal = np.tril(np.ones((T, T), dtype=bool))
        self_allowed = causal[None, None, :, :] & (tgt_in != PAD)[:, None, None, :]
        # a PAD query row would otherwise be fully masked; let it see itself
        self_allowed = self_allowed | np.eye(T, dtype=bool)[None, None]
        cross_allowed = src_mask[:, None, None, :]
        x = self._embed(tgt_in)
        for i in range(self.config.num_decoder_layers):
            pre = f"decoder.{i}"
            h = self._norm(x, f"{pre}.norm1")
            x = x + self._dropout(self._attention(f"{pre}.self_attn", h, h, self_allowed))
            h = self._norm(x, f"{pre}.norm2")
            x = x + self._dropout(self._attention(f"{pre}.cross_attn", h, memory, cross_allowed))
            h = self._norm(x, f"{pre}.norm3")
            x = x + self._dropout(self._ffn(f"{pre}.ffn", h))
        x = self._norm(x, "decoder.final_norm")
        B = x.shape[0]
        flat = x.reshape(B * T, self.config.model_dim)
        logits = ad.matmul(flat, ad.transpose(self.embedding))
        return logits.reshape(B, T, self.config.vocab_size)

    def batch_nll(self, src: np.ndarray, tgt_in: np.ndarray, tgt_out: np.ndarray) -> Tensor:
        """Summed token NLL of ``tgt_out`` given decoder inputs ``tgt_in``; PAD targets are skipped."""
        memory, src_mask = self.encode_batch(src)
        logits = self.decode_batch(tgt_in, memory, src_mask)
        V = self.config.vocab_size
        return ad.cross_entropy(logits.reshape(-1, V), np.asarray(tgt_out).reshape(-1), ignore_index=PAD)

    def batch_log_probs(self, src: np.ndarray, tgt_in: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            memory, src_mask = self.encode_batch(src)
            logits = self.decode_batch(tgt_in, memory, src_mask).data
        return ad._log_softmax_np(logits, -1)

    # -- single-sequence API ------------------------------------------------

    def _check_ids(self, ids: Sequence[int], what: str, allow_empty: bool = False) -> np.ndarray:
        arr = np.asarray(ids, dtype=np.int64).reshape(-1)
        if arr.size == 0 and not allow_empty:
            raise ModelInputError(f"{what} is empty")
        if arr.size > self.config.max_sequence_length:
            raise ModelInputError(
                f"{what} has {arr.size} tokens; max_sequence_length is {self.config.max_sequence_length}"
            )
        if arr.size and (arr.min() < 0 or arr.max() >= self.config.vocab_size):
            raise ModelInputError(f"{what} holds ids outside [0, {self.config.vocab_size})")
        return arr

    def encode(self, context: Sequence[int]) -> EncoderState:
        src = self._check_ids(context, "context")
        with ad.no_grad():
            memory, mask = self.encode_batch(src[None, :])
        return EncoderState(memory.data[0], mask[0])

    def decode_step(self, prefix: Sequence[int], enc: EncoderState) -> np.ndarray:
        """Distribution over the vocabulary for the token after ``prefix`` (which starts with BOS)."""
        arr = self._check_ids(prefix, "prefix")
        if arr[0] != BOS:
            raise ModelInputError("prefix must start with BOS")
        with ad.no_grad():
            memory = Tensor(enc.hidden[None])
            logits = self.decode_batch(arr[None, :], memory, enc.mask[None]).data[0, -1]
        return ad._softmax_np(logits.astype(np.float64), -1)

    def forward_teacher(self, context: Sequence[int], response: Sequence[int]) -> tuple[np.ndarray, Tensor]:
        """Step distributions (T+1, V) under gold prefixes, and the summed NLL of response + EOS."""
        src = self._check_ids(context, "context")
        resp = self._check_ids(response, "response")
        tgt_in = np.concatenate([[BOS], resp])[None, :]
        tgt_out = np.concatenate([resp, [EOS]])[None, :]
        memory, src_mask = self.encode_batch(src[None, :])
        logits = self.decode_batch(tgt_in, memory, src_mask)
        V = self.config.vocab_size
        nll = ad.cross_entropy(logits.reshape(-1, V), tgt_out.reshape(-1))
        return ad._softmax_np(logits.data[0].astype(np.float64), -1), nll

    def forward_mixed(self, context: Sequence[int], mixed_inputs: Sequence[int], targets: Sequence[int]) -> Tensor:
        """Summed NLL of ``targets`` + EOS when the decoder is fed BOS + ``mixed_inputs``."""
        if len(mixed_inputs) != len(targets):
            raise ModelInputError(f"mixed inputs ({len(mixed_inputs)}) and targets ({len(targets)}) differ in length")
        src = self._check_ids(context, "context")
        mixed = self._check_ids(mixed_inputs, "mixed inputs")
        tgt = self._check_ids(targets, "targets")
        tgt_in = np.concatenate([[BOS], mixed])[None, :]
        tgt_out = np.concatenate([tgt, [EOS]])[None, :]
        return self.batch_nll(src[None, :], tgt_in, tgt_out)

    def generate_greedy(self, context: Sequence[int], max_len: int) -> list[int]:
        from .decoding import greedy_search

        return greedy_search(self._step_fn(context), BOS, EOS, max_len)

    def generate_beam(self, context: Sequence[int], beam_width: int = 5, max_len: int = 20,
                      length_penalty: float = 1.0) -> list[int]:
        from .decoding import beam_search

        return beam_search(self._step_fn(context), BOS, EOS, beam_width, max_len, length_penalty).tokens

    def _step_fn(self, context: Sequence[int]):
        enc = self.encode(context)

        def step(prefixes: np.ndarray) -> np.ndarray:
            n = prefixes.shape[0]
            with ad.no_grad():
                memory = Tensor(np.broadcast_to(enc.hidden, (n,) + enc.hidden.shape))
                mask = np.broadcast_to(enc.mask, (n,) + enc.mask.shape)
                logits = self.decode_batch(prefixes, memory, mask).data[:, -1]
            return ad._log_softmax_np(logits.astype(np.float64), -1)

        return step

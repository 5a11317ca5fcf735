"""Train / evaluate / decode / compare workflows."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig
from .corpus import (BOS, EOS, PAD, UNK, DialoguePair, Vocabulary, build_vocab, load_corpus,
                     split, synth_corpus, tokenize)
from .metrics import BleuConfig, MetricReport, ah_bleu, bleu, distinct_n, perplexity
from .model import Seq2SeqTransformer
from .sampling import batch_adapbridge_mask
from .schedule import adap_alpha, adap_beta, ss_decay_alpha

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "alpha", "beta", "train_nll", "replaced_fraction", "valid_ppl", "wall_time")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class EpochLog:
    epoch: int
    alpha: float
    beta: float
    train_nll: float  # mean per target token
    replaced_fraction: float
    valid_ppl: float
    wall_time: float

    def tsv(self) -> str:
        return "\t".join(repr(float(getattr(self, c))) if c != "epoch" else str(self.epoch) for c in LOG_COLUMNS)


@dataclass
class TrainResult:
    model: Seq2SeqTransformer
    vocab: Vocabulary
    logs: list[EpochLog]
    best_valid_ppl: float
    best_state: dict[str, np.ndarray] | None = None

    def best_model(self) -> Seq2SeqTransformer:
        """The weights with the lowest validation PPL (the final weights without a valid split)."""
        if self.best_state is None:
            return self.model
        model = Seq2SeqTransformer(self.model.config)
        model.load_state_dict(self.best_state)
        return model.eval()


@dataclass
class DataSplits:
    train: list[DialoguePair]
    valid: list[DialoguePair]
    test: list[DialoguePair]


def load_data(cfg: TrainConfig) -> DataSplits:
    if cfg.uses_synthetic_data:
        return DataSplits(*split(synth_corpus(cfg.synth), cfg.split_ratios, cfg.split_seed))
    cfg.check_paths()
    read = lambda p: load_corpus(p, cfg.max_responses, cfg.drop_contained, cfg.split_seed) if p else []
    return DataSplits(read(cfg.train_path), read(cfg.valid_path), read(cfg.test_path))


# ---------------------------------------------------------------------------
# batching


@dataclass
class Example:
    src: list[int]
    tgt: list[int]


def encode_pairs(pairs: Sequence[DialoguePair], vocab: Vocabulary, max_len: int) -> list[Example]:
    """One example per (context, response); sequences longer than ``max_len`` are truncated."""
    out = []
    for pair in pairs:
        src = vocab.encode(pair.context)[:max_len]
        for resp in pair.responses:
            out.append(Example(src, vocab.encode(resp)[:max_len]))
    return out


def make_batches(examples: Sequence[Example], batch_tokens: int, rng: np.random.Generator | None) -> list[list[int]]:
    """Group similar-length examples so each batch holds at most ``batch_tokens`` target tokens.

    With an rng, equal-length examples are shuffled and the batch order is shuffled.
    """
    noise = rng.random(len(examples)) if rng is not None else np.arange(len(examples))
    order = sorted(range(len(examples)), key=lambda i: (len(examples[i].tgt), len(examples[i].src), noise[i]))
    batches, current, widest = [], [], 0
    for i in order:
        width = max(widest, len(examples[i].tgt) + 1)
        if current and width * (len(current) + 1) > batch_tokens:
            batches.append(current)
            current, width = [], len(examples[i].tgt) + 1
        current.append(i)
        widest = width
    if current:
        batches.append(current)
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def pad(seqs: Sequence[Sequence[int]], prefix: int | None = None, suffix: int | None = None) -> np.ndarray:
    rows = [([prefix] if prefix is not None else []) + list(s) + ([suffix] if suffix is not None else []) for s in seqs]
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def teacher_forced_nll(model: Seq2SeqTransformer, examples: Sequence[Example], batch_tokens: int = 2048) -> tuple[float, int]:
    """Total NLL (response tokens + EOS) and token count under gold prefixes, dropout off."""
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    with ad.no_grad():
        for batch in make_batches(examples, batch_tokens, None):
            exs = [examples[i] for i in batch]
            src = pad([e.src for e in exs])
            tgt_in = pad([e.tgt for e in exs], prefix=BOS)
            tgt_out = pad([e.tgt for e in exs], suffix=EOS)
            total += float(model.batch_nll(src, tgt_in, tgt_out).data)
            count += int((tgt_out != PAD).sum())
    model.train(was_training)
    return total, count


# ---------------------------------------------------------------------------
# training


class Trainer:
    """Runs the epoch loop for one TrainConfig.

    Random streams are split by purpose (init, dropout, batching, sampler) so
    strategies run with the same seed see the same initial weights, batch order
    and dropout masks.
    """

    def __init__(self, cfg: TrainConfig, data: DataSplits | None = None,
                 on_epoch: Callable[[EpochLog], None] | None = None):
        self.cfg = cfg
        self.data = data or load_data(cfg)
        if not self.data.train:
            raise ConfigError("training corpus is empty")
        self.vocab = build_vocab(self.data.train, cfg.model.vocab_size)
        model_cfg = dataclasses.replace(cfg.model, vocab_size=len(self.vocab))
        self.model = Seq2SeqTransformer(model_cfg, seed=cfg.seed)
        self.optimizer = ad.Adam(self.model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.98), eps=1e-8)
        self.batch_rng = np.random.default_rng([cfg.seed, 3])
        self.sampler_rng = np.random.default_rng([cfg.seed, 2])
        self.on_epoch = on_epoch
        max_len = model_cfg.max_sequence_length
        self.train_examples = encode_pairs(self.data.train, self.vocab, max_len)
        self.valid_examples = encode_pairs(self.data.valid, self.vocab, max_len)
        self.step_count = 0

    def schedule_values(self, n: int) -> tuple[float, float]:
        """(alpha, beta) to log and use at schedule position n."""
        cfg = self.cfg
        if cfg.strategy == "adapbridge":
            alpha = adap_alpha(n, cfg.schedule)
            return alpha, adap_beta(alpha, cfg.schedule.gamma)
        if cfg.strategy == "scheduled":
            return ss_decay_alpha(n, cfg.schedule.k), float("nan")
        return 0.0, float("nan")

    def _generated(self, src: np.ndarray, tgt_in: np.ndarray) -> np.ndarray:
        # teacher-forced argmax with dropout off; position t predicts gold token t
        was_training = self.model.training
        self.model.eval()
        logp = self.model.batch_log_probs(src, tgt_in)
        self.model.train(was_training)
        return logp[:, :-1].argmax(axis=-1)

    def mixed_inputs(self, src, gold, lengths, n) -> tuple[np.ndarray, np.ndarray]:
        """Decoder input (BOS + mixed tokens) and the switch mask for one batch."""
        cfg = self.cfg
        B, T = gold.shape
        tgt_in = np.concatenate([np.full((B, 1), BOS, dtype=np.int64), gold], axis=1)
        mask = np.zeros((B, T), dtype=bool)
        valid = np.arange(T)[None, :] < lengths[:, None]
        if cfg.strategy == "adapbridge":
            alpha, beta = self.schedule_values(n)
            gate = self.sampler_rng.random(B) < alpha
            if gate.any():
                gen = self._generated(src, tgt_in)
                mask = batch_adapbridge_mask(gen, gold, lengths, self.model.embedding.data, gate, beta)
        elif cfg.strategy == "scheduled":
            keep = ss_decay_alpha(n, cfg.schedule.k)
            draws = np.ones((B, T))
            for b in range(B):
                draws[b, : lengths[b]] = self.sampler_rng.random(lengths[b])
            mask = (draws >= keep) & valid
            if mask.any():
                gen = self._generated(src, tgt_in)
                mask &= (gold != PAD) & (gold != BOS)
        if mask.any():
            tgt_in[:, 1:] = np.where(mask, gen, gold)
        return tgt_in, mask

    def run_epoch(self, epoch: int) -> EpochLog:
        start = time.perf_counter()
        cfg = self.cfg
        self.model.train()
        total_nll, total_tokens, replaced, positions = 0.0, 0, 0, 0
        batches = make_batches(self.train_examples, cfg.batch_tokens, self.batch_rng)
        for b_idx, batch in enumerate(batches):
            n = epoch if cfg.schedule_unit == "epoch" else self.step_count
            exs = [self.train_examples[i] for i in batch]
            src = pad([e.src for e in exs])
            gold = pad([e.tgt for e in exs])
            lengths = np.asarray([len(e.tgt) for e in exs])
            tgt_out = pad([e.tgt for e in exs], suffix=EOS)
            tgt_in, mask = self.mixed_inputs(src, gold, lengths, n)
            ntok = int((tgt_out != PAD).sum())
            loss = self.model.batch_nll(src, tgt_in, tgt_out)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch} batch {b_idx}")
            self.optimizer.zero_grad()
            (loss * (1.0 / ntok)).backward()
            self.optimizer.step()
            self.step_count += 1
            total_nll += value
            total_tokens += ntok
            replaced += int(mask.sum())
            positions += int(lengths.sum())
        alpha, beta = self.schedule_values(epoch if cfg.schedule_unit == "epoch" else self.step_count)
        valid_ppl = float("nan")
        if self.valid_examples:
            nll, count = teacher_forced_nll(self.model, self.valid_examples)
            valid_ppl = perplexity(nll, count)
        return EpochLog(epoch, alpha, beta, total_nll / total_tokens, replaced / max(positions, 1),
                        valid_ppl, time.perf_counter() - start)

    def run(self) -> TrainResult:
        cfg = self.cfg
        ckpt = Path(cfg.checkpoint)
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        best_path = ckpt.with_name(ckpt.stem + ".best" + ckpt.suffix)
        log_path = Path(cfg.log_path)
        logs: list[EpochLog] = []
        best, best_state = math.inf, None
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write("\t".join(LOG_COLUMNS) + "\n")
            for epoch in range(cfg.epochs):
                entry = self.run_epoch(epoch)
                logs.append(entry)
                fh.write(entry.tsv() + "\n")
                fh.flush()
                log.info("epoch %d alpha=%.4f nll=%.4f replaced=%.4f valid_ppl=%.3f",
                         epoch, entry.alpha, entry.train_nll, entry.replaced_fraction, entry.valid_ppl)
                if self.on_epoch:
                    self.on_epoch(entry)
                if math.isfinite(entry.valid_ppl) and entry.valid_ppl < best:
                    best = entry.valid_ppl
                    best_state = self.model.state_dict()
                    save_checkpoint(best_path, self.model, self.vocab, {"epoch": epoch, "valid_ppl": repr(best)})
        save_checkpoint(ckpt, self.model, self.vocab, {"epoch": cfg.epochs - 1, "strategy": cfg.strategy})
        self.model.eval()
        return TrainResult(self.model, self.vocab, logs, best, best_state)


def train(cfg: TrainConfig, data: DataSplits | None = None, on_epoch=None) -> TrainResult:
    return Trainer(cfg, data, on_epoch).run()


# ---------------------------------------------------------------------------
# evaluation and decoding


def _check_vocab(vocab: Vocabulary, pairs: Sequence[DialoguePair]) -> None:
    tokens = [t for p in pairs for seq in (p.context, *p.responses) for t in seq]
    if tokens and sum(t not in vocab for t in tokens) * 2 > len(tokens):
        raise ConfigError("most corpus tokens are missing from the checkpoint vocabulary; wrong checkpoint?")


def generate(model: Seq2SeqTransformer, context_ids: Sequence[int], beam: int, greedy: bool,
             max_len: int, length_penalty: float = 1.0) -> list[int]:
    if greedy:
        return model.generate_greedy(context_ids, max_len)
    return model.generate_beam(context_ids, beam, max_len, length_penalty)


def evaluate_model(model: Seq2SeqTransformer, vocab: Vocabulary, test: Sequence[DialoguePair],
                   beam: int = 5, greedy: bool = False, max_len: int = 20,
                   length_penalty: float = 1.0) -> MetricReport:
    if not test:
        raise ConfigError("test corpus is empty")
    _check_vocab(vocab, test)
    model.eval()
    limit = model.config.max_sequence_length
    nll, count = teacher_forced_nll(model, encode_pairs(test, vocab, limit))
    candidates, reference_sets = [], []
    for pair in test:
        ids = generate(model, vocab.encode(pair.context)[:limit], beam, greedy, min(max_len, limit), length_penalty)
        candidates.append(tuple(vocab.decode(ids)))
        reference_sets.append(list(pair.responses))

    def mean_bleu(order):
        cfg = BleuConfig(max_order=order)
        return float(np.mean([bleu(c, refs, cfg) if c else 0.0 for c, refs in zip(candidates, reference_sets)]))

    def safe_distinct(n):
        try:
            return distinct_n(candidates, n)
        except ValueError:
            return 0.0

    return MetricReport(
        ppl=perplexity(nll, count),
        bleu2=mean_bleu(2),
        bleu4=mean_bleu(4),
        distinct1=safe_distinct(1),
        distinct2=safe_distinct(2),
        ah_bleu2=float(ah_bleu(candidates, reference_sets, 2)),
        num_contexts=len(test),
        num_references=sum(len(p.responses) for p in test),
    )


def evaluate(checkpoint, test_path, beam: int = 5, greedy: bool = False, max_len: int = 20,
             length_penalty: float = 1.0) -> MetricReport:
    model, vocab, _ = load_checkpoint(checkpoint)
    return evaluate_model(model, vocab, load_corpus(test_path), beam, greedy, max_len, length_penalty)


def decode_lines(model: Seq2SeqTransformer, vocab: Vocabulary, lines: Sequence[str], beam: int = 5,
                 greedy: bool = False, max_len: int = 20, length_penalty: float = 1.0) -> list[str]:
    """One response per input line; text after a TAB is ignored, blank lines give blank output."""
    out = []
    limit = model.config.max_sequence_length
    for line in lines:
        tokens = tokenize(line.split("\t", 1)[0])
        if not tokens:
            out.append("")
            continue
        ids = vocab.encode(tokens)[:limit]
        gen = generate(model, ids, beam, greedy, min(max_len, limit), length_penalty)
        out.append(" ".join(vocab.decode(gen)))
    return out


def decode_file(checkpoint, contexts_path, out_path, beam: int = 5, greedy: bool = False,
                max_len: int = 20, length_penalty: float = 1.0) -> list[str]:
    model, vocab, _ = load_checkpoint(checkpoint)
    lines = Path(contexts_path).read_text(encoding="utf-8").splitlines()
    responses = decode_lines(model, vocab, lines, beam, greedy, max_len, length_penalty)
    Path(out_path).write_text("".join(r + "\n" for r in responses), encoding="utf-8")
    return responses


# ---------------------------------------------------------------------------
# strategy comparison


@dataclass
class CompareRow:
    label: str
    seed: str
    report: MetricReport
    logs: list[EpochLog] | None = None


def run_label(cfg: TrainConfig) -> str:
    if cfg.strategy == "teacher":
        return "teacher"
    s = cfg.schedule
    if cfg.strategy == "scheduled":
        return f"scheduled(k={s.k:g})"
    return f"adapbridge(k={s.k:g},w={s.w},gamma={s.gamma:g})"


def compare(configs: Sequence[TrainConfig], seeds: Sequence[int] | None = None, out_dir=None,
            on_run: Callable[[str, int, MetricReport], None] | None = None) -> list[CompareRow]:
    """Train and evaluate every config for every seed on one shared dataset.

    Each run is evaluated at its best validation-PPL epoch when a valid split exists.

    With more than one seed, a ``mean`` row per config follows its per-seed rows.
    """
    if not configs:
        raise ConfigError("nothing to compare")
    signature = configs[0].data_signature()
    if any(c.data_signature() != signature for c in configs[1:]):
        raise ConfigError("configs to compare must share the same corpus settings")
    seeds = list(seeds) if seeds else [configs[0].seed]
    data = load_data(configs[0])
    if not data.test:
        raise ConfigError("comparison needs a nonempty test split")
    out = Path(out_dir) if out_dir else None
    rows: list[CompareRow] = []
    for idx, base in enumerate(configs):
        label = run_label(base)
        reports = []
        for seed in seeds:
            cfg = dataclasses.replace(base, seed=seed)
            if out is not None:
                out.mkdir(parents=True, exist_ok=True)
                cfg.checkpoint = str(out / f"run{idx}_{base.strategy}_seed{seed}.ckpt")
                cfg.log = None
            result = train(cfg, data)
            report = evaluate_model(result.best_model(), result.vocab, data.test, cfg.beam, cfg.greedy,
                                    cfg.max_decode_len, cfg.length_penalty)
            reports.append(report)
            rows.append(CompareRow(label, str(seed), report, result.logs))
            if on_run:
                on_run(label, seed, report)
        if len(seeds) > 1:
            mean = MetricReport(*[float(np.mean([getattr(r, f) for r in reports]))
                                  for f in ("ppl", "bleu2", "bleu4", "distinct1", "distinct2", "ah_bleu2")],
                                num_contexts=reports[0].num_contexts, num_references=reports[0].num_references)
            rows.append(CompareRow(label, "mean", mean))
    return rows


def comparison_table(rows: Sequence[CompareRow]) -> str:
    header = MetricReport.tsv_header("model").split("\t")
    lines = ["\t".join([header[0], "seed"] + header[1:])]
    for row in rows:
        cells = row.report.tsv_row(row.label).split("\t")
        lines.append("\t".join([cells[0], row.seed] + cells[1:]))
    return "\n".join(lines) + "\n"

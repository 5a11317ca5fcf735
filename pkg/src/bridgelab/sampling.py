"""Sampling functions that build the decoder input from gold and generated tokens.

Three strategies share one signature: they receive the gold response tokens and
the model's own (teacher-forced argmax) predictions for the same positions and
return a :class:`MixedSequence` to feed the decoder.

* ``teacher``: always the gold tokens.
* ``scheduled``: per position, keep gold with a decaying probability.
* ``adapbridge``: with probability alpha, replace each gold token by the
  generated one when the generated token's best cosine similarity to any gold
  token exceeds beta.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import BOS, PAD

STRATEGIES = ("teacher", "scheduled", "adapbridge")


class DegenerateEmbeddingError(ValueError):
    """An embedding row with zero norm makes cosine similarity undefined."""


@dataclass(frozen=True)
class MixedSequence:
    tokens: tuple[int, ...]
    generated: tuple[bool, ...]

    @property
    def replaced_count(self) -> int:
        return sum(self.generated)

    def __len__(self) -> int:
        return len(self.tokens)


def argmax_generate(distributions) -> list[int]:
    """Most probable token per step; ties go to the lowest id (``np.argmax`` semantics)."""
    dist = np.asarray(distributions)
    if dist.ndim != 2:
        raise ValueError(f"expected a (steps, vocab) array, got shape {dist.shape}")
    return [int(i) for i in dist.argmax(axis=-1)]


def _unit_rows(emb: np.ndarray, ids: np.ndarray) -> np.ndarray:
    rows = np.asarray(emb, dtype=np.float64)[ids]
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        bad = sorted({int(i) for i in np.asarray(ids).reshape(-1)[(norms == 0.0).reshape(-1)]})
        raise DegenerateEmbeddingError(f"zero-norm embedding rows for token ids {bad}")
    return rows / norms


def sim_matrix(gen: Sequence[int], gold: Sequence[int], emb: np.ndarray) -> np.ndarray:
    """Cosine similarity between every generated token and every gold token, shape (len(gen), len(gold))."""
    if len(gen) == 0 or len(gold) == 0:
        raise ValueError("sim_matrix needs nonempty token sequences")
    emb = np.asarray(emb)
    gen_ids = np.asarray(gen, dtype=np.int64)
    gold_ids = np.asarray(gold, dtype=np.int64)
    for ids in (gen_ids, gold_ids):
        if ids.min() < 0 or ids.max() >= emb.shape[0]:
            raise IndexError(f"token id out of range for embedding table with {emb.shape[0]} rows")
    sims = _unit_rows(emb, gen_ids) @ _unit_rows(emb, gold_ids).T
    return np.clip(sims, -1.0, 1.0)


def switch_mask(sim: np.ndarray, beta: float) -> np.ndarray:
    """1 where the row's best similarity is strictly above ``beta``.

    Any beta >= 1 switches nothing, since similarities are clipped to [-1, 1].
    """
    if math.isnan(beta):
        raise ValueError("beta is NaN")
    sim = np.asarray(sim)
    return (sim.max(axis=1) > beta).astype(np.int8)


def _protect_special(gold: Sequence[int], mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool).copy()
    gold = np.asarray(gold)
    mask &= (gold != PAD) & (gold != BOS)
    return mask


def mix(gen: Sequence[int], gold: Sequence[int], mask: Sequence[int]) -> MixedSequence:
    if not len(gen) == len(gold) == len(mask):
        raise ValueError(f"mix needs equal lengths, got gen={len(gen)} gold={len(gold)} mask={len(mask)}")
    flags = tuple(bool(m) for m in mask)
    tokens = tuple(int(g) if f else int(y) for g, y, f in zip(gen, gold, flags))
    return MixedSequence(tokens, flags)


def samfun_teacher(gen: Sequence[int], gold: Sequence[int]) -> MixedSequence:
    return MixedSequence(tuple(int(y) for y in gold), (False,) * len(gold))


def samfun_scheduled(
    gen: Sequence[int], gold: Sequence[int], alpha_keep: float, rng: np.random.Generator
) -> MixedSequence:
    """Word-level scheduled sampling: keep each gold token independently with prob ``alpha_keep``."""
    if len(gen) != len(gold):
        raise ValueError(f"gen and gold lengths differ: {len(gen)} vs {len(gold)}")
    take_generated = rng.random(len(gold)) >= alpha_keep
    return mix(gen, gold, _protect_special(gold, take_generated))


def samfun_adapbridge(
    gen: Sequence[int],
    gold: Sequence[int],
    emb: np.ndarray,
    alpha: float,
    beta: float,
    rng: np.random.Generator,
) -> MixedSequence:
    """Similarity-gated switch for one sequence.

    One uniform draw ``m`` decides whether the switch runs at all (``m < alpha``).
    If it does, position i takes the generated token when
    ``max_j cos(E[gen_i], E[gold_j]) > beta``.
    """
    m = rng.random()
    if not m < alpha or len(gold) == 0:
        return samfun_teacher(gen, gold)
    if len(gen) != len(gold):
        raise ValueError(f"gen and gold lengths differ: {len(gen)} vs {len(gold)}")
    mask = switch_mask(sim_matrix(gen, gold, emb), beta)
    return mix(gen, gold, _protect_special(gold, mask))


def batch_adapbridge_mask(
    gen: np.ndarray,
    gold: np.ndarray,
    lengths: np.ndarray,
    emb: np.ndarray,
    gate_open: np.ndarray,
    beta: float,
) -> np.ndarray:
    """Vectorised switch mask for a padded batch.

    ``gen`` and ``gold`` are (B, T) id arrays, ``lengths`` the logical length of
    each row and ``gate_open`` the per-row outcome of the ``m < alpha`` draw.
    Padding positions never switch and never serve as gold comparison targets.
    Row b of the result equals ``switch_mask(sim_matrix(gen[b,:n], gold[b,:n], emb), beta)``
    when the gate is open, else zeros.
    """
    B, T = gold.shape
    out = np.zeros((B, T), dtype=bool)
    rows = np.flatnonzero(gate_open)
    if rows.size == 0:
        return out
    valid = np.arange(T)[None, :] < lengths[rows, None]
    gold_rows = np.where(valid, gold[rows], gold[rows, :1])
    g_unit = _unit_rows(emb, np.where(valid, gen[rows], gold_rows))
    y_unit = _unit_rows(emb, gold_rows)
    sims = np.clip(np.einsum("bid,bjd->bij", g_unit, y_unit), -1.0, 1.0)
    sims = np.where(valid[:, None, :], sims, -np.inf)
    out[rows] = (sims.max(axis=-1) > beta) & valid & (gold_rows != PAD) & (gold_rows != BOS)
    return out

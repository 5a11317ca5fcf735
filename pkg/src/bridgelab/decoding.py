"""Greedy and beam search over any next-token log-probability function.

``step_fn`` receives an (n, t) int array of prefixes (each starting with BOS)
and returns (n, V) log-probabilities for the next token.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

StepFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Hypothesis:
    tokens: list[int]  # generated tokens, BOS and EOS stripped
    log_prob: float
    length: int  # generated steps, counting EOS when emitted
    score: float


def normalized_score(log_prob: float, length: int, length_penalty: float) -> float:
    return log_prob / (max(length, 1) ** length_penalty)


def greedy_hypothesis(step_fn: StepFn, bos: int, eos: int, max_len: int, length_penalty: float = 1.0) -> Hypothesis:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    prefix = [bos]
    total = 0.0
    for step in range(1, max_len + 1):
        logp = step_fn(np.asarray([prefix], dtype=np.int64))[0]
        token = int(np.argmax(logp))
        total += float(logp[token])
        if token == eos:
            break
        prefix.append(token)
    return Hypothesis(prefix[1:], total, step, normalized_score(total, step, length_penalty))


def greedy_search(step_fn: StepFn, bos: int, eos: int, max_len: int) -> list[int]:
    return greedy_hypothesis(step_fn, bos, eos, max_len).tokens


def beam_search(
    step_fn: StepFn, bos: int, eos: int, beam_width: int, max_len: int, length_penalty: float = 1.0
) -> Hypothesis:
    """Keep the ``beam_width`` best extensions per step by cumulative log-probability.

    Extensions ending in EOS leave the beam as finished hypotheses; beams alive
    at ``max_len`` are finished as they stand. The winner maximises
    ``log_prob / length ** length_penalty``. Ties keep the earlier candidate in
    (beam, token id) order, so ``beam_width=1`` reproduces greedy search.

    With a wider beam the greedy path is also scored, and wins if the beam's
    best falls below it, so the result never scores worse than greedy.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    prefixes = np.asarray([[bos]], dtype=np.int64)
    scores = np.zeros(1)
    finished: list[Hypothesis] = []
    for step in range(1, max_len + 1):
        logp = step_fn(prefixes)
        V = logp.shape[1]
        cand = (scores[:, None] + logp).reshape(-1)
        order = np.argsort(-cand, kind="stable")[:beam_width]
        keep_rows, keep_tokens, keep_scores = [], [], []
        for idx in order:
            row, token = divmod(int(idx), V)
            if token == eos:
                toks = prefixes[row, 1:].tolist()
                finished.append(Hypothesis(toks, float(cand[idx]), step, normalized_score(cand[idx], step, length_penalty)))
            else:
                keep_rows.append(row)
                keep_tokens.append(token)
                keep_scores.append(cand[idx])
        if not keep_rows:
            break
        prefixes = np.concatenate([prefixes[keep_rows], np.asarray(keep_tokens)[:, None]], axis=1)
        scores = np.asarray(keep_scores)
        if step == max_len:
            for row in range(prefixes.shape[0]):
                finished.append(
                    Hypothesis(prefixes[row, 1:].tolist(), float(scores[row]), step,
                               normalized_score(scores[row], step, length_penalty))
                )
    best = finished[0]
    for hyp in finished[1:]:
        if hyp.score > best.score:
            best = hyp
    if beam_width > 1:
        greedy = greedy_hypothesis(step_fn, bos, eos, max_len, length_penalty)
        if greedy.score > best.score:
            best = greedy
    return best

"""Generation metrics: sentence BLEU, Distinct-n, AH-BLEU and perplexity."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Sequence

Tokens = Sequence[Hashable]

SMOOTHING_EPSILON = 1e-9

# column order of the comparison table
TABLE_COLUMNS = ("PPL", "BLEU-2", "BLEU-4", "DIS-1", "DIS-2", "AH-BLEU-2")


@dataclass(frozen=True)
class BleuConfig:
    max_order: int = 4
    smoothing: str = "epsilon"  # "none" or "epsilon"
    brevity_penalty: bool = True

    def __post_init__(self):
        if self.max_order < 1:
            raise ValueError("max_order must be >= 1")
        if self.smoothing not in ("none", "epsilon"):
            raise ValueError(f"unknown smoothing {self.smoothing!r}")


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def modified_precisions(candidate: Tokens, references: Sequence[Tokens], max_order: int) -> list[tuple[int, int]]:
    """(clipped matches, candidate n-gram count) for orders 1..max_order.

    Each candidate n-gram count is clipped at its maximum count in any single reference.
    """
    out = []
    for n in range(1, max_order + 1):
        cand = ngrams(candidate, n)
        max_ref: Counter = Counter()
        for ref in references:
            max_ref |= ngrams(ref, n)
        matched = sum(min(c, max_ref[g]) for g, c in cand.items())
        out.append((matched, max(len(candidate) - n + 1, 0)))
    return out


def closest_ref_length(candidate_len: int, references: Sequence[Tokens]) -> int:
    # ties go to the shorter reference
    return min((abs(len(r) - candidate_len), len(r)) for r in references)[1]


def bleu(candidate: Tokens, references: Sequence[Tokens], cfg: BleuConfig = BleuConfig()) -> float:
    """Sentence-level multi-reference BLEU with uniform weights over orders 1..max_order.

    With epsilon smoothing, an order with no clipped matches contributes
    ``1e-9 / max(count, 1)`` instead of zero.
    """
    if not references:
        raise ValueError("bleu needs at least one reference")
    if len(candidate) == 0:
        raise ValueError("bleu needs a nonempty candidate")
    log_sum = 0.0
    for matched, total in modified_precisions(candidate, references, cfg.max_order):
        if matched == 0:
            if cfg.smoothing == "none":
                return 0.0
            p = SMOOTHING_EPSILON / max(total, 1)
        else:
            p = matched / total
        log_sum += math.log(p) / cfg.max_order
    score = math.exp(log_sum)
    if cfg.brevity_penalty:
        c = len(candidate)
        r = closest_ref_length(c, references)
        if c < r:
            score *= math.exp(1.0 - r / c)
    return score


def distinct_n(responses: Sequence[Tokens], n: int) -> float:
    """Unique n-grams over total n-grams, pooled across all responses."""
    if not responses:
        raise ValueError("distinct_n needs a nonempty corpus")
    pooled: Counter = Counter()
    for r in responses:
        pooled.update(ngrams(r, n))
    total = sum(pooled.values())
    if total == 0:
        raise ValueError(f"every response is shorter than n={n}")
    return len(pooled) / total


def ah_bleu(
    candidates: Sequence[Tokens],
    reference_sets: Sequence[Sequence[Tokens]],
    n: int = 2,
    smoothing: str = "epsilon",
) -> float:
    """Per context, best single-reference BLEU-n over its references; mean over contexts."""
    if len(candidates) != len(reference_sets):
        raise ValueError(f"{len(candidates)} candidates but {len(reference_sets)} reference sets")
    if not candidates:
        raise ValueError("ah_bleu needs at least one context")
    cfg = BleuConfig(max_order=n, smoothing=smoothing)
    best = []
    for cand, refs in zip(candidates, reference_sets):
        if len(cand) == 0:
            best.append(0.0)
            continue
        best.append(max(bleu(cand, [ref], cfg) for ref in refs))
    return sum(best) / len(best)


def perplexity(total_nll: float, token_count: int) -> float:
    if token_count <= 0:
        raise ValueError("perplexity needs a positive token count")
    return math.exp(total_nll / token_count)


@dataclass
class MetricReport:
    ppl: float
    bleu2: float
    bleu4: float
    distinct1: float
    distinct2: float
    ah_bleu2: float
    num_contexts: int
    num_references: int

    def table_row(self) -> dict[str, float]:
        return dict(zip(TABLE_COLUMNS, (self.ppl, self.bleu2, self.bleu4, self.distinct1, self.distinct2, self.ah_bleu2)))

    def to_text(self) -> str:
        lines = ["# bleu: sentence-level, averaged over contexts; add-epsilon smoothing 1e-9"]
        lines += [f"{key} = {value!r}" for key, value in self.table_row().items()]
        lines += [f"contexts = {self.num_contexts}", f"references = {self.num_references}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        kv = {}
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        vals = [float(kv[c]) for c in TABLE_COLUMNS]
        return cls(*vals, num_contexts=int(kv["contexts"]), num_references=int(kv["references"]))

    def tsv_row(self, label: str) -> str:
        return "\t".join([label] + [f"{v:.6f}" for v in self.table_row().values()])

    @staticmethod
    def tsv_header(label: str = "model") -> str:
        return "\t".join((label,) + TABLE_COLUMNS)

"""Vocabulary, one-to-many dialogue corpora, and a synthetic corpus generator.

Corpus files are UTF-8 text with one ``context<TAB>response`` pair per line.
Lines that share the exact same context are grouped into one
:class:`DialoguePair` with several responses.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
MAX_RESPONSES_PER_CONTEXT = 20


class CorpusFormatError(ValueError):
    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.line_no = line_no


def tokenize(text: str, mode: str = "whitespace") -> tuple[str, ...]:
    if mode == "whitespace":
        return tuple(text.split())
    if mode == "char":
        return tuple(ch for ch in text if not ch.isspace())
    raise ValueError(f"unknown tokenization mode {mode!r}")


def detokenize(tokens: Iterable[str]) -> str:
    return " ".join(tokens)


@dataclass(frozen=True)
class DialoguePair:
    context: tuple[str, ...]
    responses: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if not self.responses:
            raise ValueError("a dialogue pair needs at least one response")


class Vocabulary:
    """Token/id bijection with PAD, BOS, EOS, UNK fixed at ids 0-3."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED_TOKENS:
            tokens = list(RESERVED_TOKENS) + [t for t in tokens if t not in RESERVED_TOKENS]
        self.itos: list[str] = tokens
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(tokens)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary tokens must be unique")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[int(i)] for i in ids]


def _all_sequences(corpus) -> Iterable[Sequence[str]]:
    for item in corpus:
        if isinstance(item, DialoguePair):
            yield item.context
            yield from item.responses
        else:
            yield item


def build_vocab(corpus, max_size: int) -> Vocabulary:
    """Keep the most frequent tokens, ``max_size`` entries in total including the 4 reserved ones.

    Frequency ties are broken lexicographically. ``corpus`` may hold
    :class:`DialoguePair` objects or plain token sequences.
    """
    counts: Counter[str] = Counter()
    empty = True
    for seq in _all_sequences(corpus):
        empty = False
        counts.update(t for t in seq if t not in RESERVED_TOKENS)
    if empty:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if max_size < len(RESERVED_TOKENS):
        raise ValueError(f"max_size must be at least {len(RESERVED_TOKENS)}")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ranked[: max_size - len(RESERVED_TOKENS)]]
    return Vocabulary(list(RESERVED_TOKENS) + keep)


# ---------------------------------------------------------------------------
# file I/O


def load_corpus(
    path,
    max_responses: int = MAX_RESPONSES_PER_CONTEXT,
    drop_contained: bool = False,
    seed: int = 0,
    mode: str = "whitespace",
) -> list[DialoguePair]:
    """Read ``context<TAB>response`` lines and group them by exact context.

    Contexts with more than ``max_responses`` responses keep a seeded random
    subset (original order preserved). With ``drop_contained`` set, pairs where
    one side's tokens contain the other's as a contiguous run are discarded.
    Blank lines are ignored.
    """
    groups: dict[tuple[str, ...], list[tuple[str, ...]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CorpusFormatError(path, line_no, f"expected exactly one TAB, found {len(parts) - 1}")
            context, response = tokenize(parts[0], mode), tokenize(parts[1], mode)
            if not context or not response:
                raise CorpusFormatError(path, line_no, "empty context or response")
            if drop_contained and (_contains(context, response) or _contains(response, context)):
                continue
            groups.setdefault(context, []).append(response)

    rng = np.random.default_rng(seed)
    pairs = []
    for context, responses in groups.items():
        if len(responses) > max_responses:
            keep = np.sort(rng.choice(len(responses), size=max_responses, replace=False))
            responses = [responses[i] for i in keep]
        pairs.append(DialoguePair(context, tuple(responses)))
    return pairs


def _contains(haystack: Sequence[str], needle: Sequence[str]) -> bool:
    n = len(needle)
    return any(tuple(haystack[i : i + n]) == tuple(needle) for i in range(len(haystack) - n + 1))


def save_corpus(pairs: Iterable[DialoguePair], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            ctx = detokenize(pair.context)
            for resp in pair.responses:
                fh.write(f"{ctx}\t{detokenize(resp)}\n")


def flatten(pairs: Iterable[DialoguePair]) -> list[tuple[tuple[str, ...], tuple[str, ...]]]:
    return [(p.context, r) for p in pairs for r in p.responses]


# ---------------------------------------------------------------------------
# synthetic one-to-many corpus


@dataclass(frozen=True)
class SynthParams:
    """Knobs for :func:`synth_corpus`.

    Every context maps, through a fixed seeded lexicon, to a common stem of
    ``stem_len`` words. Each response is that stem plus one topic phrase of
    ``phrase_len`` specific words, placed before or after the stem; a context's
    responses use distinct phrases, so they overlap on the stem only.
    """

    num_contexts: int = 2000
    responses_per_context: int = 4
    context_pool: int = 80
    common_pool: int = 40
    specific_pool: int = 80
    context_len: tuple[int, int] = (4, 7)
    stem_len: int = 3
    phrase_len: int = 2
    phrases_per_topic: int = 6
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.context_len
        if self.responses_per_context < 2:
            raise ValueError("responses_per_context must be >= 2")
        if self.num_contexts < 1 or self.context_pool < 1 or self.common_pool < 1:
            raise ValueError("num_contexts, context_pool and common_pool must be positive")
        if not 1 <= self.stem_len <= lo <= hi:
            raise ValueError("need 1 <= stem_len <= min context length <= max context length")
        if self.specific_pool < 0:
            raise ValueError("specific_pool must be >= 0")
        if self.specific_pool:
            if self.phrases_per_topic < self.responses_per_context:
                raise ValueError("phrases_per_topic must be >= responses_per_context")
            if self.specific_pool // self.phrase_len < self.phrases_per_topic:
                raise ValueError("specific_pool too small for one topic of phrases")
        if self.num_contexts > self.context_pool ** lo * (hi - lo + 1):
            raise ValueError("num_contexts exceeds the number of distinct contexts available")


def synth_corpus(params: SynthParams) -> list[DialoguePair]:
    rng = np.random.default_rng(params.seed)
    ctx_words = [f"c{i}" for i in range(params.context_pool)]
    common_words = [f"m{i}" for i in range(params.common_pool)]
    specific_words = [f"s{i}" for i in range(params.specific_pool)]

    lexicon = rng.integers(params.common_pool, size=params.context_pool)
    topics: list[list[tuple[str, ...]]] = []
    if params.specific_pool:
        order = rng.permutation(params.specific_pool)
        n_phrases = params.specific_pool // params.phrase_len
        phrases = [
            tuple(specific_words[j] for j in order[i * params.phrase_len : (i + 1) * params.phrase_len])
            for i in range(n_phrases)
        ]
        n_topics = n_phrases // params.phrases_per_topic
        topics = [phrases[t * params.phrases_per_topic : (t + 1) * params.phrases_per_topic] for t in range(n_topics)]
        topic_of = rng.integers(n_topics, size=params.context_pool)

    lo, hi = params.context_len
    seen: set[tuple[int, ...]] = set()
    pairs = []
    while len(pairs) < params.num_contexts:
        length = int(rng.integers(lo, hi + 1))
        ctx = tuple(int(i) for i in rng.integers(params.context_pool, size=length))
        if ctx in seen:
            continue
        seen.add(ctx)
        stem = tuple(common_words[lexicon[i]] for i in ctx[: params.stem_len])
        if topics:
            options = topics[topic_of[ctx[0]]]
            chosen = rng.choice(len(options), size=params.responses_per_context, replace=False)
            before = rng.random(params.responses_per_context) < 0.5
            responses = tuple(
                options[c] + stem if b else stem + options[c] for c, b in zip(chosen, before)
            )
        else:
            responses = (stem,) * params.responses_per_context
        pairs.append(DialoguePair(tuple(ctx_words[i] for i in ctx), responses))
    return pairs


def split(corpus: Sequence[DialoguePair], ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Shuffle contexts and cut into (train, valid, test); a context never straddles splits."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"split ratios must be three nonnegative numbers summing to 1, got {ratios}")
    n = len(corpus)
    order = np.random.default_rng(seed).permutation(n)
    n_valid = int(math.floor(ratios[1] * n))
    n_test = int(math.floor(ratios[2] * n))
    n_train = n - n_valid - n_test
    train = [corpus[i] for i in order[:n_train]]
    valid = [corpus[i] for i in order[n_train : n_train + n_valid]]
    test = [corpus[i] for i in order[n_train + n_valid :]]
    return train, valid, test

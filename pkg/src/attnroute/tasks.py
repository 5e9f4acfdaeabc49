"""Synthetic task generators.

Two task families drive all training and evaluation:

* retrieval: key/value pairs scattered through filler noise, then queries at
  the suffix. Answering requires attending back to the queried pair, which
  can be forced outside (or inside) the sink+local window of sparse layers.
* holistic: a cyclic token pattern repeated for the whole stream; the next
  token is fully determined by a short local history, so a sparse layer loses
  nothing.

Token id layout (single shared vocab, byte-scale):
  [0, 16)   keys        [16, 32)  values      [32, 48)  filler
  [48, 62)  holistic    62 = pair marker      63 = query marker
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

VOCAB_SIZE = 64
N_KEYS = 16
KEY_BASE = 0
VALUE_BASE = 16
FILLER_BASE = 32
N_FILLER = 16
HOLISTIC_BASE = 48
N_HOLISTIC = 14
PAIR_TOKEN = 62
QUERY_TOKEN = 63

RETRIEVAL = "retrieval"
HOLISTIC = "holistic"


@dataclass
class TaskSpec:
    """A named task with its sparsity budget and generator parameters."""

    name: str
    category: str
    budget: float  # target fraction of sparse computation, in (0, 1]
    seq_range: tuple[int, int] = (256, 256)
    n_pairs: int = 8
    n_queries: int = 4
    needle: str = "anywhere"  # or "outside_window" / "inside_window"
    window: tuple[int, int] = (4, 60)  # (sink, local) used for needle placement
    pattern_len: tuple[int, int] = (3, 8)
    query_marker: bool = False  # True tags suffix queries with a distinct token

    def __post_init__(self):
        if self.category not in (RETRIEVAL, HOLISTIC):
            raise ContractError(f"unknown task category {self.category!r}")
        if not (0.0 < self.budget <= 1.0):
            raise ContractError(f"budget must lie in (0, 1], got {self.budget}")
        if self.needle not in ("anywhere", "outside_window", "inside_window"):
            raise ContractError(f"unknown needle policy {self.needle!r}")
        if self.seq_range[0] > self.seq_range[1] or self.seq_range[0] < 32:
            raise ContractError(f"bad seq_range {self.seq_range}")
        if self.n_queries > self.n_pairs or self.n_pairs > N_KEYS:
            raise ContractError("need n_queries <= n_pairs <= number of keys")

    def sample_length(self, rng: np.random.Generator) -> int:
        lo, hi = self.seq_range
        return int(rng.integers(lo, hi + 1))


@dataclass
class Example:
    """One generated sequence plus its supervision mask.

    ``loss_positions`` lists input positions i where predicting token[i+1]
    contributes to the training loss. ``eval_positions`` is the subset that
    defines task accuracy (the suffix queries, for retrieval), with
    ``answers`` holding their target tokens.
    """

    tokens: np.ndarray
    loss_positions: np.ndarray
    eval_positions: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    answers: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    needle_positions: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def lm_inputs(self) -> np.ndarray:
        return self.tokens[:-1]

    def lm_targets(self, ignore_index: int = -1) -> np.ndarray:
        t = np.full(self.tokens.size - 1, ignore_index, dtype=np.int64)
        t[self.loss_positions] = self.tokens[self.loss_positions + 1]
        return t


def gen_retrieval_example(spec: TaskSpec, seed: int, length: int) -> Example:
    """In-context key/value recall with depth-controlled needles.

    The stream interleaves ``n_pairs`` (key, value) bindings in repeated
    randomly permuted rounds; each key keeps the same value all sequence, so
    every occurrence after the first is a supervised recall. ``n_queries``
    of the pairs retire early: they stop appearing after a chosen depth and
    are asked again at the suffix, which makes their final pre-suffix
    occurrence a needle whose depth follows ``spec.needle``:

    * anywhere        - retire depth uniform over the context
    * outside_window  - needle invisible to the suffix under sink+local
    * inside_window   - pair never retires; its last occurrence stays local
    """
    rng = np.random.default_rng(seed)
    nq, npairs = spec.n_queries, spec.n_pairs
    query_len = 2 * nq
    context_len = length - query_len
    sink, local = spec.window
    round_len = 2 * npairs
    if context_len < 2 * round_len + 4:
        raise ContractError(f"length {length} too short for {npairs} recurring pairs")

    keys = rng.choice(N_KEYS, size=npairs, replace=False) + KEY_BASE
    values = rng.integers(0, N_KEYS, size=npairs) + VALUE_BASE
    queried = rng.choice(npairs, size=nq, replace=False)

    if spec.needle == "outside_window":
        lo, hi = round_len, context_len - local - 2
    elif spec.needle == "inside_window":
        lo = hi = context_len  # never retires; appears through the last round
    else:
        lo, hi = round_len, context_len - 2
    if hi < lo:
        raise ContractError(f"needle policy {spec.needle!r} impossible at length {length}")
    retire_at = {int(idx): int(rng.integers(lo, hi + 1)) for idx in queried}

    tokens = np.empty(length, dtype=np.int64)
    seen_once: set[int] = set()
    supervised: list[int] = []
    last_value_pos = {int(idx): -1 for idx in queried}
    pos = 0
    while pos < context_len - 1:
        order = rng.permutation(npairs)
        for idx in order:
            idx = int(idx)
            if pos >= context_len - 1:
                break
            if idx in retire_at and pos > retire_at[idx]:
                continue
            tokens[pos] = keys[idx]
            tokens[pos + 1] = values[idx]
            if idx in seen_once:
                supervised.append(pos)
            if idx in last_value_pos:
                last_value_pos[idx] = pos + 1
            seen_once.add(idx)
            pos += 2
    while pos < context_len:  # odd leftover: pad with filler
        tokens[pos] = FILLER_BASE + int(rng.integers(0, N_FILLER))
        pos += 1

    eval_positions = np.empty(nq, dtype=np.int64)
    answers = np.empty(nq, dtype=np.int64)
    for j, idx in enumerate(queried):
        idx = int(idx)
        base = context_len + 2 * j
        tokens[base] = keys[idx]
        tokens[base + 1] = values[idx]
        eval_positions[j] = base
        answers[j] = values[idx]

    loss_positions = np.sort(np.concatenate(
        [np.asarray(supervised, dtype=np.int64), eval_positions]
    ))
    loss_positions = loss_positions[loss_positions < length - 1]
    needles = np.array([last_value_pos[int(i)] for i in queried], dtype=np.int64)
    return Example(tokens, loss_positions, eval_positions, answers, needles)


def gen_holistic_example(spec: TaskSpec, seed: int, length: int) -> Example:
    """Locally predictable stream: repeated short patterns, resampled in segments.

    Each segment repeats its own random cyclic pattern, then the pattern is
    redrawn. Only recent history predicts the next token, so the stream is
    exactly as solvable through a small local window as through full history;
    distant context never helps. Supervision skips the first period of every
    segment (where the new pattern is still unknown).
    """
    rng = np.random.default_rng(seed)
    tokens = np.empty(length, dtype=np.int64)
    supervised = np.zeros(length, dtype=bool)
    pos = 0
    while pos < length:
        m = int(rng.integers(spec.pattern_len[0], spec.pattern_len[1] + 1))
        seg = int(rng.integers(4 * m, 8 * m))
        seg = min(seg, length - pos)
        pattern = HOLISTIC_BASE + rng.choice(N_HOLISTIC, size=m, replace=False)
        tokens[pos:pos + seg] = np.tile(pattern, seg // m + 1)[:seg]
        supervised[pos + m:pos + seg] = True
        pos += seg
    loss_positions = np.flatnonzero(supervised[: length - 1])
    return Example(tokens, loss_positions)


def gen_example(spec: TaskSpec, seed: int, length: int) -> Example:
    if spec.category == RETRIEVAL:
        return gen_retrieval_example(spec, seed, length)
    return gen_holistic_example(spec, seed, length)


def gen_batch(spec: TaskSpec, seeds: np.ndarray, length: int) -> list[Example]:
    return [gen_example(spec, int(s), length) for s in seeds]


def batch_arrays(examples: list[Example]):
    """Stack same-length examples into (inputs, targets) for batched prefill."""
    inputs = np.stack([e.lm_inputs() for e in examples])
    targets = np.stack([e.lm_targets() for e in examples])
    return inputs, targets


def bigram_perplexity(sequences: list[np.ndarray], alpha: float = 0.1) -> float:
    """In-sample smoothed bigram model perplexity: the holistic baseline."""
    counts = np.zeros((VOCAB_SIZE, VOCAB_SIZE))
    for seq in sequences:
        np.add.at(counts, (seq[:-1], seq[1:]), 1.0)
    probs = (counts + alpha) / (counts.sum(axis=1, keepdims=True) + alpha * VOCAB_SIZE)
    total, n = 0.0, 0
    for seq in sequences:
        total += -np.log(probs[seq[:-1], seq[1:]]).sum()
        n += seq.size - 1
    return float(np.exp(total / n))

"""Full and sparse attention kernels with a pluggable visibility pattern.

Both kernels are pure functions over the autodiff :class:`~attnroute.tensor.Tensor`
type (prefilled, batched, causal) and include the 1/sqrt(head_dim) scale.
Sparse attention restricts each query's softmax to the pattern's visible key
set by additive masking, so it matches a masked dense computation to float
precision. :func:`decode_attention` is the single-token numpy fast path used
during generation; it attends over exactly the tokens a cache hands it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from . import tensor as T

MASK_NEG = -1e30  # additive logit for invisible keys; exp() underflows to 0.0

FA = "FA"


@dataclass(frozen=True)
class SSA:
    """Streaming sparse mode: sink prefix plus trailing local window."""

    sink: int
    local: int

    def __post_init__(self):
        if self.sink < 0 or self.local < 1:
            raise ContractError(f"SSA needs sink >= 0 and local >= 1, got {self}")

    @property
    def window(self) -> int:
        return self.sink + self.local


@dataclass(frozen=True, eq=False)
class BlockMask:
    """Block-granular visibility grid (lower-triangular at block level)."""

    block_size: int
    grid: np.ndarray  # bool [n_blocks, n_blocks]

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=bool)
        if self.block_size < 1 or g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ContractError(f"BlockMask needs square grid and block_size >= 1")
        if np.triu(g, 1).any():
            raise ContractError("BlockMask grid must be lower-triangular (causality)")
        if not np.diag(g).all():
            raise ContractError("BlockMask diagonal blocks must be visible (self-visibility)")
        object.__setattr__(self, "grid", g)


class SparsePattern:
    """Per-query visible key sets over a fixed sequence length.

    Construct via :func:`make_ssa_pattern`, :func:`make_block_pattern`, or
    :func:`make_full_pattern`. The boolean visibility matrix is causal and
    has every query seeing itself.
    """

    def __init__(self, seq_len: int, visibility: np.ndarray, descriptor: str):
        visibility = np.asarray(visibility, dtype=bool)
        if visibility.shape != (seq_len, seq_len):
            raise ShapeError(f"visibility {visibility.shape} vs seq_len {seq_len}")
        if np.triu(visibility, 1).any():
            raise ContractError("pattern must be causal")
        if not np.diag(visibility).all():
            raise ContractError("every query must see itself")
        self.seq_len = seq_len
        self._vis = visibility
        self._additive: dict[str, np.ndarray] = {}
        self.descriptor = descriptor

    def visible(self, q: int) -> np.ndarray:
        """Sorted visible key positions for query position ``q``."""
        return np.flatnonzero(self._vis[q])

    def mask(self) -> np.ndarray:
        """Boolean [s, s] visibility matrix (True = key visible)."""
        return self._vis

    def additive_mask(self, dtype) -> np.ndarray:
        dtype = np.dtype(dtype)
        cached = self._additive.get(dtype.name)
        if cached is None:
            cached = np.where(self._vis, 0.0, MASK_NEG).astype(dtype)
            self._additive[dtype.name] = cached
        return cached

    def max_visible(self) -> int:
        return int(self._vis.sum(axis=1).max())

    def is_full_causal(self) -> bool:
        return bool(self._vis.sum() == self.seq_len * (self.seq_len + 1) // 2)


def make_full_pattern(seq_len: int) -> SparsePattern:
    """Degenerate pattern: every query sees the whole causal history."""
    return SparsePattern(seq_len, np.tril(np.ones((seq_len, seq_len), bool)), "full")


def make_ssa_pattern(seq_len: int, sink: int, local: int) -> SparsePattern:
    """Sink-plus-local streaming pattern.

    visible(q) = [0, min(sink, q+1)) union [max(0, q-local+1), q]; the two
    ranges may overlap for small q (union semantics).
    """
    if seq_len < 1:
        raise ContractError("seq_len must be >= 1")
    SSA(sink, local)  # validates parameter ranges
    rows = np.arange(seq_len)[:, None]
    cols = np.arange(seq_len)[None, :]
    vis = (cols <= rows) & ((cols < sink) | (cols > rows - local))
    return SparsePattern(seq_len, vis, f"ssa(sink={sink},local={local})")


def make_block_pattern(seq_len: int, block_size: int, grid: np.ndarray) -> SparsePattern:
    """Expand a block-level grid to token-level visibility, trimmed causal."""
    bm = BlockMask(block_size, grid)
    nb = bm.grid.shape[0]
    if nb * block_size < seq_len:
        raise ShapeError(f"grid covers {nb * block_size} tokens < seq_len {seq_len}")
    idx = np.arange(seq_len) // block_size
    vis = bm.grid[np.ix_(idx, idx)]
    vis = vis & (np.arange(seq_len)[None, :] <= np.arange(seq_len)[:, None])
    return SparsePattern(seq_len, vis, f"block(size={block_size})")


def _heads_first(x: T.Tensor) -> T.Tensor:
    # (..., s, H, d') -> (..., H, s, d')
    axes = list(range(x.data.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return T.transpose(x, tuple(axes))


def _attend(q: T.Tensor, k: T.Tensor, v: T.Tensor, additive: np.ndarray) -> T.Tensor:
    # V may carry a different channel count than Q/K (standard d_v != d_k)
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"Q/K/V shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    if q.data.ndim < 3:
        raise ShapeError(f"expected (..., s, heads, head_dim), got {q.shape}")
    d_head = q.shape[-1]
    qh, kh, vh = _heads_first(q), _heads_first(k), _heads_first(v)
    kt = list(range(qh.data.ndim))
    kt[-1], kt[-2] = kt[-2], kt[-1]
    logits = T.matmul(qh, T.transpose(kh, tuple(kt))) * (1.0 / np.sqrt(d_head))
    if additive.dtype != q.data.dtype:
        additive = additive.astype(q.data.dtype)
    logits = logits + T.Tensor(additive)
    weights = T.softmax_lastdim(logits)
    return _heads_first(T.matmul(weights, vh))


_CAUSAL_CACHE: dict[tuple[int, str], np.ndarray] = {}


def _causal_additive(s: int, dtype) -> np.ndarray:
    key = (s, np.dtype(dtype).name)
    if key not in _CAUSAL_CACHE:
        tri = np.tril(np.ones((s, s), bool))
        _CAUSAL_CACHE[key] = np.where(tri, 0.0, MASK_NEG).astype(dtype)
    return _CAUSAL_CACHE[key]


def full_attention(q: T.Tensor, k: T.Tensor, v: T.Tensor, causal: bool = True) -> T.Tensor:
    """Scaled dot-product attention over the whole (causal) history."""
    s = q.shape[-3]
    if causal:
        additive = _causal_additive(s, q.data.dtype)
    else:
        additive = np.zeros((s, s), dtype=q.data.dtype)
    return _attend(q, k, v, additive)


def sparse_attention(q: T.Tensor, k: T.Tensor, v: T.Tensor, pattern: SparsePattern) -> T.Tensor:
    """Attention restricted to the pattern's visible keys per query."""
    s = q.shape[-3]
    if pattern.seq_len != s:
        raise ShapeError(f"pattern seq_len {pattern.seq_len} vs sequence {s}")
    vis = pattern.mask()
    if not vis.any(axis=1).all():
        raise ContractError("a query has an empty visible set; cannot normalize")
    return _attend(q, k, v, pattern.additive_mask(q.data.dtype))


def decode_attention(q: np.ndarray, cache_keys: np.ndarray, cache_values: np.ndarray) -> np.ndarray:
    """Single-token attention over cached history (numpy fast path).

    ``q`` is (heads, head_dim); caches are (heads, tokens, head_dim) and hold
    exactly the tokens the layer's policy kept. Returns (heads, head_dim).
    """
    if q.ndim == 3 and q.shape[0] == 1:
        q = q[0]
    H, d_head = q.shape
    if cache_keys.shape[1] == 0:
        raise ContractError("decode over an empty cache")
    if (cache_keys.shape[:2] != cache_values.shape[:2] or cache_keys.shape[0] != H
            or cache_keys.shape[2] != d_head):
        raise ShapeError(f"cache shapes {cache_keys.shape}/{cache_values.shape} vs q {q.shape}")
    logits = np.matmul(cache_keys, q[:, :, None])[:, :, 0] * (1.0 / np.sqrt(d_head))
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return np.matmul(w[:, None, :], cache_values)[:, 0, :]

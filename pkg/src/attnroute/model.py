"""Decoder-only transformer whose every layer routes between full and sparse attention.

The backbone (pre-norm blocks, learned positional embeddings, byte-level
vocab) stays frozen once pretrained. Each layer owns a router that reads the
layer's query tensor. Prefill supports three routing modes:

* ``SoftRouting``  - training: both branches run and blend per Gumbel-Softmax.
* ``HardRouting``  - inference: argmax per layer, one branch runs, and the
  layer's KV cache policy follows the decision (full history vs sink+local).
* ``ForcedRouting`` - a caller-supplied plan, bypassing routers entirely.

Decode never re-invokes the router: the plan decided at prefill is reused for
every generated token, and sparse layers touch only their windowed cache.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import attention as A
from . import router as R
from . import tensor as T
from .errors import ContractError, ShapeError


@dataclass
class ModelConfig:
    n_layers: int = 6
    n_heads: int = 4
    head_dim: int = 16
    vocab_size: int = 96
    max_seq_len: int = 512
    ssa_sink: int = 4
    ssa_local: int = 60
    mlp_mult: int = 4
    router_hidden: int | None = None  # default 4 * model_dim at router init
    pool_size: int = 100
    tie_head: bool = True  # output head shares the token embedding
    recency_bias: bool = True  # per-head distance slopes via an extra QK channel

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "head_dim", "vocab_size", "max_seq_len",
                     "ssa_local", "mlp_mult", "pool_size"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.ssa_sink < 0:
            raise ContractError("ssa_sink must be >= 0")

    @property
    def model_dim(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def router_in_dim(self) -> int:
        return 2 * self.model_dim

    @property
    def router_hidden_dim(self) -> int:
        return self.router_hidden if self.router_hidden else 4 * self.model_dim

    @property
    def recency_slopes(self) -> np.ndarray:
        """Geometric per-head slopes; head h biases attention toward the most
        recent ~2^(2(h+1)) tokens, leaving the last head nearly uniform."""
        h = np.arange(1, self.n_heads + 1)
        return np.power(2.0, -8.0 * h / self.n_heads)

    def make_routers(self, rng: np.random.Generator, dtype=np.float32) -> R.LayerRouters:
        return R.LayerRouters.init(
            self.n_layers, self.router_in_dim, self.router_hidden_dim, rng,
            pool_size=self.pool_size, dtype=dtype,
        )


@dataclass
class LayerWeights:
    wq: T.Tensor
    wk: T.Tensor
    wv: T.Tensor
    wo: T.Tensor
    ln1_g: T.Tensor
    ln1_b: T.Tensor
    ln2_g: T.Tensor
    ln2_b: T.Tensor
    mlp_w1: T.Tensor
    mlp_b1: T.Tensor
    mlp_w2: T.Tensor
    mlp_b2: T.Tensor

    def params(self) -> list[T.Tensor]:
        return [self.wq, self.wk, self.wv, self.wo, self.ln1_g, self.ln1_b,
                self.ln2_g, self.ln2_b, self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2]


def sinusoid_table(n_positions: int, dim: int, scale: float = 0.1) -> np.ndarray:
    """Classic interleaved sin/cos table; a trainable-position init that makes
    relative-offset attention linearly expressible from the start."""
    pos = np.arange(n_positions)[:, None]
    freq = np.exp(-np.log(10_000.0) * (np.arange(dim // 2) / max(1, dim // 2)))
    angles = pos * freq[None, :]
    table = np.zeros((n_positions, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : dim - dim // 2])
    return scale * table


@dataclass
class TransformerWeights:
    config: ModelConfig
    tok_embed: T.Tensor
    pos_embed: T.Tensor
    layers: list[LayerWeights]
    final_g: T.Tensor
    final_b: T.Tensor
    head_w: T.Tensor | None  # None when the head is tied to tok_embed
    frozen: bool = False

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        d, hd = config.model_dim, config.mlp_mult * config.n_heads * config.head_dim

        def lin(fan_in, fan_out, std=None):
            std = std if std is not None else 1.0 / np.sqrt(fan_in)
            return T.Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)).astype(dtype), True)

        def ones(n):
            return T.Tensor(np.ones(n, dtype=dtype), True)

        def zeros(n):
            return T.Tensor(np.zeros(n, dtype=dtype), True)

        layers = [
            LayerWeights(
                wq=lin(d, d), wk=lin(d, d), wv=lin(d, d),
                wo=lin(d, d, std=1.0 / np.sqrt(d * 2 * config.n_layers)),
                ln1_g=ones(d), ln1_b=zeros(d), ln2_g=ones(d), ln2_b=zeros(d),
                mlp_w1=lin(d, hd), mlp_b1=zeros(hd),
                mlp_w2=lin(hd, d, std=1.0 / np.sqrt(hd * 2 * config.n_layers)),
                mlp_b2=zeros(d),
            )
            for _ in range(config.n_layers)
        ]
        emb = T.Tensor(rng.normal(0.0, 0.08, size=(config.vocab_size, d)).astype(dtype), True)
        pos = T.Tensor(sinusoid_table(config.max_seq_len, d).astype(dtype), True)
        head = None if config.tie_head else lin(d, config.vocab_size)
        return cls(config, emb, pos, layers, ones(d), zeros(d), head)

    def params(self) -> list[T.Tensor]:
        out = [self.tok_embed, self.pos_embed]
        for layer in self.layers:
            out.extend(layer.params())
        out.extend([self.final_g, self.final_b])
        if self.head_w is not None:
            out.append(self.head_w)
        return out

    def set_frozen(self, flag: bool) -> None:
        self.frozen = flag
        for p in self.params():
            p.requires_grad = not flag


@dataclass(frozen=True)
class RoutingPlan:
    """Per-layer binary decisions plus the soft probabilities behind them."""

    r_hard: tuple[int, ...]  # 1 = full attention
    r_soft: tuple[float, ...]
    decided_at: int  # sequence length at decision time

    def __post_init__(self):
        if len(self.r_hard) != len(self.r_soft):
            raise ContractError("r_hard / r_soft length mismatch")
        if any(r not in (0, 1) for r in self.r_hard):
            raise ContractError("r_hard entries must be binary")

    @property
    def n_layers(self) -> int:
        return len(self.r_hard)


def forced_plan(decisions, decided_at: int = 0) -> RoutingPlan:
    """Plan from explicit per-layer choices (1/True = full attention)."""
    hard = tuple(int(bool(d)) for d in decisions)
    return RoutingPlan(hard, tuple(float(h) for h in hard), decided_at)


@dataclass(frozen=True)
class SoftRouting:
    tau: float
    rng: np.random.Generator


@dataclass(frozen=True)
class HardRouting:
    pass


@dataclass(frozen=True)
class ForcedRouting:
    plan: RoutingPlan


def model_sparsity_ratio(plan: RoutingPlan, n_heads: int) -> float:
    """Fraction of (layer, head) slots running sparse.

    Routing is layer-level, so all heads of a layer share its mode and the
    ratio reduces to (#sparse layers) / n_layers, independent of head count.
    """
    if plan.n_layers == 0:
        raise ContractError("empty plan")
    sparse_slots = sum(n_heads * (1 - r) for r in plan.r_hard)
    return sparse_slots / (n_heads * plan.n_layers)


def kv_cache_tokens(plan: RoutingPlan, seq_len: int, sink: int, local: int):
    """Stored token count per layer and in total for a generation of ``seq_len``."""
    if seq_len < 1:
        raise ContractError("seq_len must be >= 1")
    per_layer = [seq_len if r == 1 else min(seq_len, sink + local) for r in plan.r_hard]
    return per_layer, sum(per_layer)


class LayerCache:
    """Preallocated per-layer K/V storage, heads-first layout.

    ``full`` keeps every token; ``windowed`` keeps the sink prefix plus the
    trailing local window, evicting the oldest non-sink token on overflow.
    """

    def __init__(self, policy: str, n_heads: int, head_dim: int, capacity: int,
                 sink: int = 0, local: int = 0, dtype=np.float32):
        if policy not in ("full", "windowed"):
            raise ContractError(f"unknown cache policy {policy!r}")
        if policy == "windowed":
            capacity = min(capacity, sink + local)
        self.policy = policy
        self.sink = sink
        self.local = local
        self.k = np.empty((n_heads, capacity, head_dim), dtype=dtype)
        self.v = np.empty((n_heads, capacity, head_dim), dtype=dtype)
        self.length = 0

    def bulk_load(self, k_tokens: np.ndarray, v_tokens: np.ndarray) -> None:
        """Load prefill K/V, (s, heads, head_dim), applying the policy."""
        s = k_tokens.shape[0]
        if self.policy == "windowed" and s > self.sink + self.local:
            keep = np.r_[0:self.sink, s - self.local:s]
            k_tokens, v_tokens = k_tokens[keep], v_tokens[keep]
            s = k_tokens.shape[0]
        self.k[:, :s] = k_tokens.transpose(1, 0, 2)
        self.v[:, :s] = v_tokens.transpose(1, 0, 2)
        self.length = s

    def append(self, k_tok: np.ndarray, v_tok: np.ndarray) -> None:
        """Add one token, (heads, head_dim)."""
        if self.length < self.k.shape[1]:
            self.k[:, self.length] = k_tok
            self.v[:, self.length] = v_tok
            self.length += 1
        else:
            # windowed overflow: shift the local region left, drop oldest non-sink
            self.k[:, self.sink:-1] = self.k[:, self.sink + 1:]
            self.v[:, self.sink:-1] = self.v[:, self.sink + 1:]
            self.k[:, -1] = k_tok
            self.v[:, -1] = v_tok

    def view(self):
        return self.k[:, :self.length], self.v[:, :self.length]


class KVCache:
    """Per-layer caches plus the global token counter."""

    def __init__(self, layers: list[LayerCache], seq_len: int = 0):
        self.layers = layers
        self.seq_len = seq_len

    @classmethod
    def for_plan(cls, config: ModelConfig, plan: RoutingPlan, capacity: int | None = None,
                 dtype=np.float32):
        capacity = capacity or config.max_seq_len
        layers = [
            LayerCache(
                "full" if r == 1 else "windowed",
                config.n_heads, config.head_dim, capacity,
                sink=config.ssa_sink, local=config.ssa_local, dtype=dtype,
            )
            for r in plan.r_hard
        ]
        return cls(layers)

    def stored_tokens(self) -> list[int]:
        return [c.length for c in self.layers]


@dataclass
class PrefillResult:
    logits: T.Tensor  # (..., s, vocab)
    plan: RoutingPlan | list[RoutingPlan]
    cache: KVCache | None
    r_soft: list  # per layer: Tensor (soft mode) or float
    hidden: list | None = None  # per layer block outputs when capture_hidden


@lru_cache(maxsize=64)
def _ssa_pattern(seq_len: int, sink: int, local: int) -> A.SparsePattern:
    return A.make_ssa_pattern(seq_len, sink, local)


def _dense(x: T.Tensor, w: T.Tensor) -> T.Tensor:
    """x @ w with leading dims flattened into one 2-D GEMM."""
    lead = x.shape[:-1]
    if len(lead) <= 1:
        return T.matmul(x, w)
    flat = T.reshape(x, (-1, x.shape[-1]))
    return T.reshape(T.matmul(flat, w), lead + (w.shape[-1],))


def _mlp(x: T.Tensor, layer: LayerWeights) -> T.Tensor:
    h = T.gelu(_dense(x, layer.mlp_w1) + layer.mlp_b1)
    return _dense(h, layer.mlp_w2) + layer.mlp_b2


def prefill(
    tokens: np.ndarray,
    weights: TransformerWeights,
    routers: R.LayerRouters | None,
    routing: SoftRouting | HardRouting | ForcedRouting,
    capture_hidden: bool = False,
    cache_capacity: int | None = None,
) -> PrefillResult:
    """Run the full prompt through the model under the given routing mode.

    Soft mode computes both attention branches per layer and blends them with
    the sampled routing weight (one Gumbel pair per layer, shared across the
    batch); Hard mode runs only the routed branch; Forced bypasses routers.
    A decode-ready cache is built for unbatched prompts.
    """
    tokens = np.asarray(tokens)
    batched = tokens.ndim == 2
    cfg = weights.config
    s = tokens.shape[-1]
    if s < 1 or s > cfg.max_seq_len:
        raise ContractError(f"prompt length {s} outside [1, {cfg.max_seq_len}]")
    if isinstance(routing, (SoftRouting, HardRouting)) and routers is None:
        raise ContractError("routed prefill needs routers")
    if isinstance(routing, HardRouting) and batched:
        raise ContractError("hard routing prefills one sequence at a time")
    if isinstance(routing, ForcedRouting) and routing.plan.n_layers != cfg.n_layers:
        raise ContractError("forced plan layer count mismatch")

    soft = isinstance(routing, SoftRouting)
    pattern = _ssa_pattern(s, cfg.ssa_sink, cfg.ssa_local)

    x = T.embed(tokens, weights.tok_embed) + weights.pos_embed[:s]
    hard_bits: list[int] = []
    soft_vals: list[float] = []
    r_soft_nodes: list = []
    layer_kv: list[tuple[np.ndarray, np.ndarray]] = []
    hidden: list[np.ndarray] | None = [] if capture_hidden else None

    for li, layer in enumerate(weights.layers):
        xn = T.layer_norm(x, layer.ln1_g, layer.ln1_b)
        head_shape = x.shape[:-1] + (cfg.n_heads, cfg.head_dim)
        q = T.reshape(_dense(xn, layer.wq), head_shape)
        k = T.reshape(_dense(xn, layer.wk), head_shape)
        v = T.reshape(_dense(xn, layer.wv), head_shape)

        if soft:
            desc = R.pool_prefix_suffix(q, routers.pooling.pool_size)
            logits2 = R.router_logits(desc, routers.layers[li])
            noise = R.sample_gumbel(routing.rng)
            pi_fa = logits2[..., R.FA_INDEX]
            pi_sa = logits2[..., R.SA_INDEX]
            r = R.gumbel_soft(pi_fa, pi_sa, routing.tau, noise)
            r_soft_nodes.append(r)
            gap = pi_fa.data - pi_sa.data
            hard_bits.append(int(np.mean(gap) >= 0))
            soft_vals.append(float(np.mean(r.data)))
            fa_out = A.full_attention(q, k, v)
            sa_out = A.sparse_attention(q, k, v, pattern)
            rb = T.reshape(r, r.shape + (1, 1, 1)) if batched else r
            attn = rb * fa_out + (1.0 - rb) * sa_out
        else:
            if isinstance(routing, HardRouting):
                with T.no_grad():
                    desc = R.pool_prefix_suffix(q, routers.pooling.pool_size)
                    logits2 = R.router_logits(desc, routers.layers[li])
                bit = R.hard_route(float(logits2.data[R.FA_INDEX]), float(logits2.data[R.SA_INDEX]))
                soft_vals.append(
                    R.gumbel_soft(float(logits2.data[R.FA_INDEX]), float(logits2.data[R.SA_INDEX]),
                                  1.0, R.GumbelNoise(0.0, 0.0))
                )
            else:
                bit = routing.plan.r_hard[li]
                soft_vals.append(float(routing.plan.r_soft[li]))
            hard_bits.append(bit)
            r_soft_nodes.append(soft_vals[-1])
            attn = A.full_attention(q, k, v) if bit == 1 else A.sparse_attention(q, k, v, pattern)

        flat_shape = x.shape[:-1] + (cfg.model_dim,)
        x = x + _dense(T.reshape(attn, flat_shape), layer.wo)
        x = x + _mlp(T.layer_norm(x, layer.ln2_g, layer.ln2_b), layer)
        if not batched:
            layer_kv.append((k.data, v.data))
        if capture_hidden:
            hidden.append(x.data.copy())

    final = T.layer_norm(x, weights.final_g, weights.final_b)
    if weights.head_w is not None:
        logits = _dense(final, weights.head_w)
    else:
        logits = _dense(final, T.transpose(weights.tok_embed))

    plan = RoutingPlan(tuple(hard_bits), tuple(soft_vals), decided_at=s)
    cache = None
    if not batched:
        cache = KVCache.for_plan(cfg, plan, capacity=cache_capacity,
                                 dtype=weights.tok_embed.data.dtype)
        for lc, (kd, vd) in zip(cache.layers, layer_kv):
            lc.bulk_load(kd, vd)
        cache.seq_len = s
    return PrefillResult(logits, plan, cache, r_soft_nodes, hidden)


# -- decode fast path (plain numpy, no graph) -----------------------------------


def _ln_np(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean()
    xc = x - mu
    var = (xc * xc).mean()
    return xc * (1.0 / np.sqrt(var + eps)) * g + b


def _gelu_np(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    u = np.sqrt(2.0 / np.pi) * x * (1.0 + 0.044715 * x2)
    return 0.5 * x * (1.0 + np.tanh(u))


def decode_step(
    token: int,
    weights: TransformerWeights,
    cache: KVCache,
    plan: RoutingPlan,
) -> np.ndarray:
    """Append one token and return next-token logits.

    The routing plan is fixed; each layer attends over exactly its cached
    tokens (full history or sink+local window) and the router is not invoked.
    """
    cfg = weights.config
    if len(cache.layers) != cfg.n_layers or plan.n_layers != cfg.n_layers:
        raise ContractError("cache/plan layer count mismatch with model")
    pos = cache.seq_len
    if pos >= cfg.max_seq_len:
        raise ContractError(f"position {pos} exceeds max_seq_len {cfg.max_seq_len}")
    if not (0 <= token < cfg.vocab_size):
        raise IndexError(f"token id {token} out of range")

    H, dh = cfg.n_heads, cfg.head_dim
    x = weights.tok_embed.data[token] + weights.pos_embed.data[pos]
    for layer, lc in zip(weights.layers, cache.layers):
        xn = _ln_np(x, layer.ln1_g.data, layer.ln1_b.data)
        q = (xn @ layer.wq.data).reshape(H, dh)
        k = (xn @ layer.wk.data).reshape(H, dh)
        v = (xn @ layer.wv.data).reshape(H, dh)
        lc.append(k, v)
        keys, values = lc.view()
        o = A.decode_attention(q, keys, values)
        x = x + o.reshape(cfg.model_dim) @ layer.wo.data
        xm = _ln_np(x, layer.ln2_g.data, layer.ln2_b.data)
        h = _gelu_np(xm @ layer.mlp_w1.data + layer.mlp_b1.data)
        x = x + h @ layer.mlp_w2.data + layer.mlp_b2.data
    cache.seq_len = pos + 1
    final = _ln_np(x, weights.final_g.data, weights.final_b.data)
    head = weights.head_w.data if weights.head_w is not None else weights.tok_embed.data.T
    return final @ head

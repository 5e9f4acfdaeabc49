"""Per-layer router: pooled query features -> full/sparse decision.

The router sees the layer's post-projection query tensor, squeezes it into a
fixed-size descriptor by mean-pooling the first and last ``pool_size`` tokens
(so its cost does not grow with sequence length), runs a small MLP, and emits
two logits: one for full attention, one for sparse. Training relaxes the
argmax with Gumbel-Softmax noise at temperature tau; inference takes the
noise-free argmax.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError

FA_INDEX = 0  # logit column order: (full, sparse)
SA_INDEX = 1


@dataclass
class PoolingConfig:
    pool_size: int = 100

    def __post_init__(self):
        if self.pool_size < 1:
            raise ContractError("pool_size must be >= 1")


@dataclass
class TemperatureSchedule:
    """Linear decay from tau_init to tau_final over total_steps."""

    tau_init: float = 1.0
    tau_final: float = 0.1
    total_steps: int = 300

    def __post_init__(self):
        if not (self.tau_init >= self.tau_final > 0):
            raise ContractError(f"need tau_init >= tau_final > 0, got {self}")


def anneal(schedule: TemperatureSchedule, step: int) -> float:
    """Temperature at ``step``; out-of-range steps clamp to the endpoints."""
    step = min(max(step, 0), schedule.total_steps)
    frac = step / schedule.total_steps
    return schedule.tau_init + (schedule.tau_final - schedule.tau_init) * frac


@dataclass(frozen=True)
class GumbelNoise:
    g_fa: float
    g_sa: float


def sample_gumbel(rng: np.random.Generator) -> GumbelNoise:
    g = sample_gumbel_array(rng, 2)
    return GumbelNoise(float(g[0]), float(g[1]))


def sample_gumbel_array(rng: np.random.Generator, n: int) -> np.ndarray:
    u = np.clip(rng.random(n), 1e-300, 1.0 - 1e-16)
    return -np.log(-np.log(u))


@dataclass
class RouterWeights:
    """Two affine encoder layers with smooth-ramp nonlinearity, plus a 2-logit head."""

    enc1_w: T.Tensor
    enc1_b: T.Tensor
    enc2_w: T.Tensor
    enc2_b: T.Tensor
    head_w: T.Tensor
    head_b: T.Tensor

    @classmethod
    def init(cls, in_dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        """Random encoder, zero head: the router starts neutral (logits 0, 0)."""

        def lin(fan_in, fan_out):
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
            return T.Tensor(w.astype(dtype), requires_grad=True)

        def zeros(*shape):
            return T.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        return cls(
            enc1_w=lin(in_dim, hidden),
            enc1_b=zeros(hidden),
            enc2_w=lin(hidden, hidden),
            enc2_b=zeros(hidden),
            head_w=zeros(hidden, 2),
            head_b=zeros(2),
        )

    def params(self) -> list[T.Tensor]:
        return [self.enc1_w, self.enc1_b, self.enc2_w, self.enc2_b, self.head_w, self.head_b]

    @property
    def in_dim(self) -> int:
        return self.enc1_w.shape[0]


@dataclass
class LayerRouters:
    """One independently parameterized router per transformer layer."""

    layers: list[RouterWeights]
    pooling: PoolingConfig = field(default_factory=PoolingConfig)

    @classmethod
    def init(cls, n_layers: int, in_dim: int, hidden: int, rng: np.random.Generator,
             pool_size: int = 100, dtype=np.float32):
        layers = [RouterWeights.init(in_dim, hidden, rng, dtype) for _ in range(n_layers)]
        return cls(layers, PoolingConfig(pool_size))

    def params(self) -> list[T.Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def __len__(self) -> int:
        return len(self.layers)


def pool_prefix_suffix(x_q: T.Tensor, pool_size: int) -> T.Tensor:
    """Concatenate mean features of the first and last ``pool_size`` tokens.

    ``x_q`` is (..., s, heads, head_dim); the result is (..., 2*heads*head_dim).
    For s <= 2*pool_size the windows overlap, which is allowed.
    """
    if pool_size < 1:
        raise ContractError("pool_size must be >= 1")
    ndim = x_q.data.ndim
    if ndim < 3:
        raise ShapeError(f"expected (..., s, heads, head_dim), got {x_q.shape}")
    s = x_q.shape[-3]
    p = min(pool_size, s)
    token_axis = ndim - 3
    sl_prefix = (slice(None),) * token_axis + (slice(0, p),)
    sl_suffix = (slice(None),) * token_axis + (slice(s - p, s),)
    prefix = T.tmean(x_q[sl_prefix], axis=token_axis)
    suffix = T.tmean(x_q[sl_suffix], axis=token_axis)
    feat = prefix.shape[-1] * prefix.shape[-2]
    lead = prefix.shape[:-2]
    return T.concat([T.reshape(prefix, lead + (feat,)), T.reshape(suffix, lead + (feat,))], axis=-1)


def router_logits(descriptor: T.Tensor, weights: RouterWeights) -> T.Tensor:
    """Map a pooled descriptor to unnormalized (full, sparse) logits."""
    if descriptor.shape[-1] != weights.in_dim:
        raise ContractError(
            f"descriptor dim {descriptor.shape[-1]} vs router input {weights.in_dim}"
        )
    single = descriptor.data.ndim == 1
    if single:
        descriptor = T.reshape(descriptor, (1, weights.in_dim))
    h = T.gelu(T.matmul(descriptor, weights.enc1_w) + weights.enc1_b)
    h = T.gelu(T.matmul(h, weights.enc2_w) + weights.enc2_b)
    out = T.matmul(h, weights.head_w) + weights.head_b
    return T.reshape(out, (2,)) if single else out


def gumbel_soft(pi_fa, pi_sa, tau: float, noise: GumbelNoise):
    """Relaxed routing weight: probability mass on the full-attention branch.

    Equals sigmoid(((pi_fa + g_fa) - (pi_sa + g_sa)) / tau); differentiable in
    the logits when they are Tensors.
    """
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    if isinstance(pi_fa, T.Tensor) or isinstance(pi_sa, T.Tensor):
        if not isinstance(pi_fa, T.Tensor):
            pi_fa = T.Tensor(np.asarray(pi_fa))
        if not isinstance(pi_sa, T.Tensor):
            pi_sa = T.Tensor(np.asarray(pi_sa))
        gap = (pi_fa - pi_sa) + (noise.g_fa - noise.g_sa)
        return T.sigmoid(gap * (1.0 / tau))
    gap = (pi_fa + noise.g_fa) - (pi_sa + noise.g_sa)
    return _sigmoid_scalar(gap / tau)


def _sigmoid_scalar(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def hard_route(pi_fa: float, pi_sa: float) -> int:
    """Argmax decision; 1 selects full attention. Ties break toward full."""
    return 1 if pi_fa >= pi_sa else 0

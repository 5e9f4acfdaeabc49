"""Bit-exact binary checkpoint container.

Layout: magic ``FLXA``, u32 version, u32 tensor count, then per tensor:
u16 name length, UTF-8 name, u8 dtype (0 = f32, 1 = f64), u8 rank,
u64 dims[rank], raw little-endian row-major data. Backbone and router
tensors share one container; router entries are named ``router.layer<i>.*``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import router as R
from . import tensor as T
from .errors import ContractError
from .model import LayerWeights, ModelConfig, TransformerWeights

MAGIC = b"FLXA"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    buf = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _CODES:
            raise ContractError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        buf.append(struct.pack("<H", len(nb)))
        buf.append(nb)
        buf.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        buf.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    Path(path).write_bytes(b"".join(buf))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContractError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ContractError(f"{path}: unsupported version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        code, rank = struct.unpack_from("<BB", raw, off)
        off += 2
        dims = struct.unpack_from(f"<{rank}Q", raw, off)
        off += 8 * rank
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims)) * dtype.itemsize if rank else dtype.itemsize
        arr = np.frombuffer(raw, dtype=dtype, count=max(1, int(np.prod(dims))), offset=off)
        out[name] = arr.reshape(dims).copy()
        off += nbytes
    return out


# -- model <-> tensor-dict mapping --------------------------------------------

_LAYER_FIELDS = (
    ("wq", "wq"), ("wk", "wk"), ("wv", "wv"), ("wo", "wo"),
    ("ln1.gain", "ln1_g"), ("ln1.bias", "ln1_b"),
    ("ln2.gain", "ln2_g"), ("ln2.bias", "ln2_b"),
    ("mlp.w1", "mlp_w1"), ("mlp.b1", "mlp_b1"),
    ("mlp.w2", "mlp_w2"), ("mlp.b2", "mlp_b2"),
)
_ROUTER_FIELDS = (
    ("enc1.w", "enc1_w"), ("enc1.b", "enc1_b"),
    ("enc2.w", "enc2_w"), ("enc2.b", "enc2_b"),
    ("head.w", "head_w"), ("head.b", "head_b"),
)


def backbone_state(weights: TransformerWeights) -> dict[str, np.ndarray]:
    state = {"tok_embed": weights.tok_embed.data, "pos_embed": weights.pos_embed.data}
    for i, layer in enumerate(weights.layers):
        for suffix, attr in _LAYER_FIELDS:
            state[f"layer{i}.{suffix}"] = getattr(layer, attr).data
    state["final.gain"] = weights.final_g.data
    state["final.bias"] = weights.final_b.data
    if weights.head_w is not None:
        state["head.w"] = weights.head_w.data
    return state


def router_state(routers: R.LayerRouters) -> dict[str, np.ndarray]:
    state: dict[str, np.ndarray] = {}
    for i, layer in enumerate(routers.layers):
        for suffix, attr in _ROUTER_FIELDS:
            state[f"router.layer{i}.{suffix}"] = getattr(layer, attr).data
    return state


def save_model(path, weights: TransformerWeights, routers: R.LayerRouters | None = None) -> None:
    state = backbone_state(weights)
    if routers is not None:
        state.update(router_state(routers))
    save_checkpoint(path, state)


def _take(state: dict[str, np.ndarray], name: str) -> np.ndarray:
    if name not in state:
        raise ContractError(f"checkpoint missing tensor {name!r}")
    return state[name]


def load_backbone(state: dict[str, np.ndarray], config: ModelConfig,
                  frozen: bool = True) -> TransformerWeights:
    def tens(name):
        return T.Tensor(_take(state, name), requires_grad=not frozen)

    layers = []
    for i in range(config.n_layers):
        kwargs = {attr: tens(f"layer{i}.{suffix}") for suffix, attr in _LAYER_FIELDS}
        layers.append(LayerWeights(**kwargs))
    head = None if config.tie_head else tens("head.w")
    weights = TransformerWeights(
        config, tens("tok_embed"), tens("pos_embed"), layers,
        tens("final.gain"), tens("final.bias"), head, frozen=frozen,
    )
    if weights.tok_embed.shape != (config.vocab_size, config.model_dim):
        raise ContractError(
            f"checkpoint embedding {weights.tok_embed.shape} does not match config "
            f"({config.vocab_size}, {config.model_dim})"
        )
    return weights


def load_routers(state: dict[str, np.ndarray], config: ModelConfig) -> R.LayerRouters:
    layers = []
    for i in range(config.n_layers):
        kwargs = {
            attr: T.Tensor(_take(state, f"router.layer{i}.{suffix}"), requires_grad=True)
            for suffix, attr in _ROUTER_FIELDS
        }
        layers.append(R.RouterWeights(**kwargs))
    return R.LayerRouters(layers, R.PoolingConfig(config.pool_size))


def has_router(state: dict[str, np.ndarray]) -> bool:
    return any(name.startswith("router.") for name in state)

"""Decoder-only transformer with rotary attention and parallel residual blocks.

Each block computes ``x + attn(ln(x)) + mlp(ln(x))`` from one shared layer
norm. Parameters are a flat ``dict[str, np.ndarray]``; the forward pass wraps
them as leaf tensors so the same code serves training and inference.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import Tensor

ModelParams = dict[str, np.ndarray]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    head_dim: int = 16
    context_len: int = 128
    vocab_size: int = 28
    rotary_dim: int | None = None
    tie_embeddings: bool = False
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "head_dim", "context_len", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.context_len < 2:
            raise ConfigError("context_len must be >= 2")
        rd = self.rotary
        if rd % 2 or rd > self.head_dim or rd < 0:
            raise ConfigError(f"rotary_dim must be even and <= head_dim, got {rd}")

    @property
    def d_model(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def rotary(self) -> int:
        return self.head_dim if self.rotary_dim is None else self.rotary_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


# Standard model sizes (vocab sized for our alphabet).
PRESETS = {
    "small": ModelConfig(n_layers=12, n_heads=16, head_dim=64, context_len=1024),
    "medium": ModelConfig(n_layers=27, n_heads=16, head_dim=96, context_len=1024),
    "base": ModelConfig(n_layers=27, n_heads=16, head_dim=96, context_len=2048),
    "large": ModelConfig(n_layers=32, n_heads=32, head_dim=80, context_len=1024),
    "xlarge": ModelConfig(n_layers=32, n_heads=16, head_dim=256, context_len=1024),
}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, v = config.d_model, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"wte": (v, d)}
    for i in range(config.n_layers):
        p = f"h.{i}."
        shapes.update({
            p + "ln.gain": (d,),
            p + "ln.bias": (d,),
            p + "attn.qkv.w": (d, 3 * d),
            p + "attn.qkv.b": (3 * d,),
            p + "attn.out.w": (d, d),
            p + "attn.out.b": (d,),
            p + "mlp.fc_in.w": (d, 4 * d),
            p + "mlp.fc_in.b": (4 * d,),
            p + "mlp.fc_out.w": (4 * d, d),
            p + "mlp.fc_out.b": (d,),
        })
    shapes["ln_f.gain"] = (d,)
    shapes["ln_f.bias"] = (d,)
    if not config.tie_embeddings:
        shapes["lm_head.w"] = (d, v)
    shapes["lm_head.b"] = (v,)
    return shapes


def is_norm_or_bias(name: str) -> bool:
    return name.endswith((".gain", ".bias", ".b"))


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Normal(0, 0.02) weights; residual output projections scaled by 1/sqrt(2*n_layers)."""
    rng = np.random.default_rng(seed)
    dtype = nx.default_dtype()
    out_scale = 1.0 / math.sqrt(2 * config.n_layers)
    params: ModelParams = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif is_norm_or_bias(name):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
            if name.endswith(("attn.out.w", "mlp.fc_out.w")):
                arr *= out_scale
        params[name] = arr.astype(dtype)
    return params


def check_params(params: Mapping[str, np.ndarray], config: ModelConfig) -> None:
    expected = param_shapes(config)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ConfigError(f"parameter names differ from config (missing={missing[:3]}, extra={extra[:3]})")
    for k, shape in expected.items():
        if tuple(params[k].shape) != shape:
            raise ConfigError(f"{k}: shape {params[k].shape} != {shape}")


# ---------------------------------------------------------------------------
# rotary encoding
# ---------------------------------------------------------------------------


def rotary_angles(positions: np.ndarray, rotary_dim: int, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape [len(positions), rotary_dim // 2]."""
    if rotary_dim % 2:
        raise ConfigError("rotary_dim must be even")
    inv_freq = 10000.0 ** (-np.arange(0, rotary_dim, 2, dtype=np.float64) / rotary_dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, rd: int) -> np.ndarray:
    # channel pairs (2i, 2i+1) are rotated by angle pos * theta_i
    out = x.copy()
    x1 = x[..., 0:rd:2]
    x2 = x[..., 1:rd:2]
    out[..., 0:rd:2] = x1 * cos - x2 * sin
    out[..., 1:rd:2] = x1 * sin + x2 * cos
    return out


def rotary(x: Tensor, positions: np.ndarray, rotary_dim: int | None = None) -> Tensor:
    """Rotate the first ``rotary_dim`` channels of ``x[..., seq, head_dim]`` pairwise.

    ``positions`` gives the absolute position of each entry along the
    second-to-last axis. Remaining channels pass through unchanged.
    """
    head_dim = x.shape[-1]
    rd = head_dim if rotary_dim is None else rotary_dim
    if rd % 2 or rd > head_dim:
        raise ConfigError(f"rotary_dim must be even and <= {head_dim}, got {rd}")
    positions = np.asarray(positions)
    if positions.shape != (x.shape[-2],):
        raise nx.ShapeError(f"positions {positions.shape} vs sequence axis {x.shape[-2]}")
    cos, sin = rotary_angles(positions, rd, x.data.dtype)
    out = _rotate(x.data, cos, sin, rd)
    # the transpose of a rotation is the rotation by the negated angle
    return nx.custom_op(out, (x,), lambda g: (_rotate(g, cos, -sin, rd),))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class KVCache:
    """Per-layer rotated keys and values for incremental decoding."""

    keys: list[np.ndarray | None] = field(default_factory=list)
    values: list[np.ndarray | None] = field(default_factory=list)
    length: int = 0


@dataclass
class ForwardOutput:
    logits: Tensor
    cache: KVCache | None = None


def _causal_mask(q_len: int, k_len: int, offset: int) -> np.ndarray:
    qpos = offset + np.arange(q_len)[:, None]
    kpos = np.arange(k_len)[None, :]
    return kpos <= qpos


def attention(
    h: Tensor,
    p: Mapping[str, Tensor],
    prefix: str,
    config: ModelConfig,
    offset: int = 0,
    cache: KVCache | None = None,
    layer: int = 0,
) -> Tensor:
    """Causal multi-head self-attention with rotary queries/keys."""
    b, t, d = h.shape
    nh, hd = config.n_heads, config.head_dim
    qkv = nx.add(nx.matmul(h, p[prefix + "attn.qkv.w"]), p[prefix + "attn.qkv.b"])
    qkv = nx.transpose(nx.reshape(qkv, (b, t, 3, nh, hd)), (2, 0, 3, 1, 4))  # [3, b, nh, t, hd]
    q = nx.reshape(_slice0(qkv, 0), (b, nh, t, hd))
    k = nx.reshape(_slice0(qkv, 1), (b, nh, t, hd))
    v = nx.reshape(_slice0(qkv, 2), (b, nh, t, hd))
    positions = offset + np.arange(t)
    q = rotary(q, positions, config.rotary)
    k = rotary(k, positions, config.rotary)
    if cache is not None:
        if cache.keys[layer] is not None:
            k = nx.concat([Tensor(cache.keys[layer]), k], axis=2)
            v = nx.concat([Tensor(cache.values[layer]), v], axis=2)
        cache.keys[layer] = k.data
        cache.values[layer] = v.data
    k_len = k.shape[2]
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    scores = nx.where(_causal_mask(t, k_len, offset), scores, -1e30 if scores.data.dtype == np.float64 else -1e9)
    probs = nx.softmax(scores, axis=-1)
    ctx = nx.matmul(probs, v)  # [b, nh, t, hd]
    ctx = nx.reshape(nx.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    return nx.add(nx.matmul(ctx, p[prefix + "attn.out.w"]), p[prefix + "attn.out.b"])


def _slice0(x: Tensor, i: int) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[i] = g
        return (full,)

    return nx.custom_op(x.data[i], (x,), backward)


def mlp(h: Tensor, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    u = nx.gelu(nx.add(nx.matmul(h, p[prefix + "mlp.fc_in.w"]), p[prefix + "mlp.fc_in.b"]))
    return nx.add(nx.matmul(u, p[prefix + "mlp.fc_out.w"]), p[prefix + "mlp.fc_out.b"])


def block(
    x: Tensor,
    p: Mapping[str, Tensor],
    layer: int,
    config: ModelConfig,
    offset: int = 0,
    cache: KVCache | None = None,
) -> Tensor:
    """Parallel residual block: ``x + attn(ln(x)) + mlp(ln(x))``."""
    prefix = f"h.{layer}."
    h = nx.layer_norm(x, p[prefix + "ln.gain"], p[prefix + "ln.bias"], config.layer_norm_eps)
    a = attention(h, p, prefix, config, offset, cache, layer)
    m = mlp(h, p, prefix)
    return nx.add(nx.add(x, a), m)


def as_tensors(params: Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def forward(
    params: Mapping[str, np.ndarray | Tensor],
    config: ModelConfig,
    inputs: np.ndarray,
    cache: KVCache | None = None,
) -> ForwardOutput:
    """Logits for every position of ``inputs`` ([batch, seq] token ids).

    With ``cache`` the inputs continue the cached prefix and the cache is
    extended in place.
    """
    inputs = np.asarray(inputs)
    if inputs.ndim == 1:
        inputs = inputs[None, :]
    if inputs.ndim != 2:
        raise nx.ShapeError(f"inputs must be [batch, seq], got {inputs.shape}")
    if inputs.size and (inputs.min() < 0 or inputs.max() >= config.vocab_size):
        raise IndexError(f"token id out of range [0, {config.vocab_size})")
    offset = 0
    if cache is not None:
        if not cache.keys:
            cache.keys = [None] * config.n_layers
            cache.values = [None] * config.n_layers
        offset = cache.length
    if offset + inputs.shape[1] > config.context_len:
        raise ValueError(f"sequence length {offset + inputs.shape[1]} exceeds context_len {config.context_len}")
    p = {k: (v if isinstance(v, Tensor) else Tensor(v)) for k, v in params.items()}

    x = nx.embedding(p["wte"], inputs)
    for i in range(config.n_layers):
        x = block(x, p, i, config, offset, cache)
    x = nx.layer_norm(x, p["ln_f.gain"], p["ln_f.bias"], config.layer_norm_eps)
    head = p["lm_head.w"] if not config.tie_embeddings else nx.transpose(p["wte"], (1, 0))
    logits = nx.add(nx.matmul(x, head), p["lm_head.b"])
    if cache is not None:
        cache.length = offset + inputs.shape[1]
    return ForwardOutput(logits, cache)


def loss(logits: Tensor, targets: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy over masked positions."""
    targets = np.asarray(targets)
    mask = np.asarray(loss_mask, dtype=bool)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise nx.ShapeError(f"loss: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise nx.ContractError("loss mask selects no positions")
    picked = nx.pick(nx.log_softmax(logits, axis=-1), np.where(mask, targets, 0))
    weights = Tensor(mask.astype(logits.data.dtype))
    return nx.scale(nx.sum(nx.mul(picked, weights)), -1.0 / n)


def loss_and_grads(
    params: Mapping[str, np.ndarray],
    config: ModelConfig,
    inputs: np.ndarray,
    targets: np.ndarray,
    loss_mask: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    leaves = as_tensors(params, requires_grad=True)
    out = forward(leaves, config, inputs)
    value = loss(out.logits, targets, loss_mask)
    grads = nx.backward(value, leaves.values())
    return float(value.data), dict(zip(leaves.keys(), grads))


def token_log_probs(params: Mapping[str, np.ndarray], config: ModelConfig, tokens) -> np.ndarray:
    """ln p(x_i | x_<i) for i = 1..n-1 of a single token sequence."""
    ids = np.asarray(tokens, dtype=np.int64)[None, :]
    logits = forward(params, config, ids).logits.data[0].astype(np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return logp[np.arange(ids.shape[1] - 1), ids[0, 1:]]

"""Minimal differentiable numerics over float64 numpy arrays.

Every differentiable operation comes as a forward/backward pair: the
forward returns ``(value, cache)`` and the backward consumes the upstream
gradient plus that cache. Models own a fixed, known graph and chain the
backwards explicitly in reverse order; there is no tape.

Training math runs at float64 so finite-difference checks can be tight.
File I/O (checkpoints, feature payloads) is the float32 boundary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

Array = np.ndarray

CHECKPOINT_VERSION = 1


class NumericsError(ArithmeticError):
    """An operation produced or received non-finite values."""


class DimMismatch(ValueError):
    """Operand shapes are incompatible."""


def as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def require_finite(name: str, x: Array) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class AttentionConfig:
    """Shape and seeding knobs for the attention stacks."""

    model_dim: int = 64
    n_heads: int = 4
    n_layers: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.model_dim <= 0 or self.n_heads <= 0 or self.n_layers <= 0:
            raise ValueError("model_dim, n_heads and n_layers must be positive")
        if self.model_dim % self.n_heads != 0:
            raise DimMismatch(
                f"model_dim {self.model_dim} is not divisible by n_heads {self.n_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads


class ParamStore:
    """Named float64 parameter tensors with paired gradient buffers.

    Parameters are created in construction order from a seeded stream, so a
    fixed seed yields bit-identical initial values. Reads are safe to share;
    gradient accumulation and optimizer steps are single-writer.
    """

    def __init__(self, seed: int = 0):
        self._params: dict[str, Array] = {}
        self._grads: dict[str, Array] = {}
        self._rng = np.random.default_rng(seed)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Array:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def add(self, name: str, shape: tuple[int, ...], fan_in: int | None = None) -> Array:
        """Create a parameter initialized uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if fan_in is None:
            fan_in = shape[0]
        bound = 1.0 / math.sqrt(fan_in)
        value = self._rng.uniform(-bound, bound, size=shape)
        self._params[name] = value
        self._grads[name] = np.zeros(shape)
        return value

    def add_zeros(self, name: str, shape: tuple[int, ...]) -> Array:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._params[name] = np.zeros(shape)
        self._grads[name] = np.zeros(shape)
        return self._params[name]

    def set_(self, name: str, value: Array) -> None:
        """Overwrite a parameter in place (shape-checked)."""
        cur = self._params[name]
        value = as_f64(value)
        if value.shape != cur.shape:
            raise DimMismatch(f"{name}: expected shape {cur.shape}, got {value.shape}")
        cur[...] = value

    def grad(self, name: str) -> Array:
        return self._grads[name]

    def accumulate(self, name: str, g: Array) -> None:
        self._grads[name] += g

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    # -- checkpoint I/O (manifest JSON + raw little-endian f32 payload) ----

    def save(self, manifest_path: str | Path) -> None:
        manifest_path = Path(manifest_path)
        payload_name = manifest_path.stem + ".f32"
        order = self.names()
        manifest = {
            "version": CHECKPOINT_VERSION,
            "dtype": "float32",
            "endianness": "little",
            "file": payload_name,
            "tensors": [{"name": n, "shape": list(self._params[n].shape)} for n in order],
        }
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        with open(manifest_path.parent / payload_name, "wb") as fh:
            for n in order:
                fh.write(self._params[n].astype("<f4").tobytes())

    @classmethod
    def load(cls, manifest_path: str | Path) -> "ParamStore":
        manifest_path = Path(manifest_path)
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("dtype") != "float32" or manifest.get("endianness") != "little":
            raise ValueError("unsupported checkpoint dtype/endianness")
        raw = (manifest_path.parent / manifest["file"]).read_bytes()
        store = cls(seed=0)
        offset = 0
        for spec in manifest["tensors"]:
            shape = tuple(spec["shape"])
            n_items = int(np.prod(shape)) if shape else 1
            n_bytes = n_items * 4
            chunk = raw[offset : offset + n_bytes]
            if len(chunk) != n_bytes:
                raise ValueError(
                    f"checkpoint payload truncated: expected {n_bytes} bytes for "
                    f"{spec['name']}, found {len(chunk)}"
                )
            arr = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float64)
            store._params[spec["name"]] = arr
            store._grads[spec["name"]] = np.zeros(shape)
            offset += n_bytes
        if offset != len(raw):
            raise ValueError(f"checkpoint payload has {len(raw) - offset} trailing bytes")
        return store


# -- linear ----------------------------------------------------------------


def linear_forward(x: Array, w: Array, b: Array) -> tuple[Array, tuple]:
    """y = x @ w + b for x [m, i], w [i, o], b [o]."""
    if x.shape[-1] != w.shape[0]:
        raise DimMismatch(f"linear: input dim {x.shape[-1]} vs weight dim {w.shape[0]}")
    return x @ w + b, (x, w)


def linear_backward(dy: Array, cache: tuple) -> tuple[Array, Array, Array]:
    x, w = cache
    dx = dy @ w.T
    dw = x.T @ dy if x.ndim == 2 else np.outer(x, dy)
    db = dy.sum(axis=0) if dy.ndim == 2 else dy
    return dx, dw, db


# -- softmax ---------------------------------------------------------------


def softmax(x: Array, axis: int = -1) -> Array:
    """Numerically stable softmax (max-subtraction)."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dy: Array, y: Array, axis: int = -1) -> Array:
    """Gradient through softmax given its output y."""
    inner = (dy * y).sum(axis=axis, keepdims=True)
    return y * (dy - inner)


# -- layer norm ------------------------------------------------------------


def layer_norm_forward(
    x: Array, gamma: Array, beta: Array, eps: float = 1e-5
) -> tuple[Array, tuple]:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def layer_norm_backward(dy: Array, cache: tuple) -> tuple[Array, Array, Array]:
    xhat, inv, gamma = cache
    d = xhat.shape[-1]
    dxhat = dy * gamma
    dx = (
        inv
        / d
        * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
    )
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    return dx, dgamma, dbeta


# -- relu ------------------------------------------------------------------


def relu_forward(x: Array) -> tuple[Array, Array]:
    return np.maximum(x, 0.0), (x > 0.0)


def relu_backward(dy: Array, mask: Array) -> Array:
    return dy * mask


# -- multi-head attention ----------------------------------------------------

MHA_WEIGHTS = ("wq", "wk", "wv", "wo")
MHA_BIASES = ("bq", "bk", "bv", "bo")


def init_mha_params(store: ParamStore, prefix: str, dim: int) -> None:
    """Register the eight projection tensors of one attention block."""
    for nm in MHA_WEIGHTS:
        store.add(f"{prefix}.{nm}", (dim, dim))
    for nm in MHA_BIASES:
        store.add(f"{prefix}.{nm}", (dim,), fan_in=dim)


def _split_heads(x: Array, n_heads: int) -> Array:
    m, d = x.shape
    return x.reshape(m, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x: Array) -> Array:
    h, m, dh = x.shape
    return x.transpose(1, 0, 2).reshape(m, h * dh)


def mha_forward(
    q_in: Array, kv_in: Array, store: ParamStore, prefix: str, n_heads: int
) -> tuple[Array, tuple]:
    """Scaled dot-product multi-head attention; softmax over the key axis.

    q_in [m, d] attends to kv_in [n, d]; output [m, d]. Scores are scaled
    by 1/sqrt(head_dim). The per-head attention weights live in the cache
    (used both for backprop and as a frame-mass readout).
    """
    d = q_in.shape[1]
    if kv_in.shape[1] != d:
        raise DimMismatch(f"attention: query dim {d} vs key/value dim {kv_in.shape[1]}")
    if d % n_heads != 0:
        raise DimMismatch(f"attention: dim {d} not divisible by {n_heads} heads")
    p = {nm: store[f"{prefix}.{nm}"] for nm in MHA_WEIGHTS + MHA_BIASES}
    q, cq = linear_forward(q_in, p["wq"], p["bq"])
    k, ck = linear_forward(kv_in, p["wk"], p["bk"])
    v, cv = linear_forward(kv_in, p["wv"], p["bv"])
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    scale = 1.0 / math.sqrt(d // n_heads)
    scores = qh @ kh.transpose(0, 2, 1) * scale  # [h, m, n]
    attn = softmax(scores, axis=-1)
    ctx = attn @ vh  # [h, m, dh]
    merged = _merge_heads(ctx)
    out, co = linear_forward(merged, p["wo"], p["bo"])
    cache = (prefix, n_heads, scale, cq, ck, cv, co, qh, kh, vh, attn)
    return out, cache


def mha_backward(dout: Array, cache: tuple, store: ParamStore) -> tuple[Array, Array]:
    """Accumulate block gradients into the store; return (dq_in, dkv_in)."""
    prefix, n_heads, scale, cq, ck, cv, co, qh, kh, vh, attn = cache
    dmerged, dwo, dbo = linear_backward(dout, co)
    dctx = _split_heads(dmerged, n_heads)
    dattn = dctx @ vh.transpose(0, 2, 1)
    dvh = attn.transpose(0, 2, 1) @ dctx
    dscores = softmax_backward(dattn, attn, axis=-1) * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 2, 1) @ qh
    dq, dwq, dbq = linear_backward(_merge_heads(dqh), cq)
    dk, dwk, dbk = linear_backward(_merge_heads(dkh), ck)
    dv, dwv, dbv = linear_backward(_merge_heads(dvh), cv)
    for nm, g in (
        ("wq", dwq), ("bq", dbq), ("wk", dwk), ("bk", dbk),
        ("wv", dwv), ("bv", dbv), ("wo", dwo), ("bo", dbo),
    ):
        store.accumulate(f"{prefix}.{nm}", g)
    return dq, dk + dv


def mha_attention_weights(cache: tuple) -> Array:
    """Per-head attention weights [h, m, n] from a forward cache."""
    return cache[10]


def multihead_attention(
    queries: Array, keys_values: Array, cfg: AttentionConfig, store: ParamStore,
    prefix: str = "attn",
) -> Array:
    """Forward-only attention with finiteness checking on the output."""
    out, _ = mha_forward(as_f64(queries), as_f64(keys_values), store, prefix, cfg.n_heads)
    require_finite("attention output", out)
    return out


# -- cosine similarity -------------------------------------------------------


class CosineResult(NamedTuple):
    value: float
    degenerate: bool  # true when either input had zero norm


def cosine_forward(a: Array, b: Array) -> tuple[CosineResult, tuple]:
    a = as_f64(a)
    b = as_f64(b)
    if a.shape != b.shape or a.ndim != 1:
        raise DimMismatch(f"cosine: incompatible shapes {a.shape} vs {b.shape}")
    require_finite("cosine input a", a)
    require_finite("cosine input b", b)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return CosineResult(0.0, True), (a, b, na, nb, 0.0, True)
    raw = float(a @ b / (na * nb))
    value = min(1.0, max(-1.0, raw))
    return CosineResult(value, False), (a, b, na, nb, raw, False)


def cosine_backward(dvalue: float, cache: tuple) -> tuple[Array, Array]:
    a, b, na, nb, raw, degenerate = cache
    if degenerate:
        return np.zeros_like(a), np.zeros_like(b)
    da = dvalue * (b / (na * nb) - raw * a / (na * na))
    db = dvalue * (a / (na * nb) - raw * b / (nb * nb))
    return da, db


def cosine_similarity(a: Array, b: Array) -> CosineResult:
    """Cosine of the angle between two vectors; zero-norm inputs map to 0, flagged."""
    result, _ = cosine_forward(a, b)
    return result


# -- cross entropy -----------------------------------------------------------


def softmax_cross_entropy(logits: Array, gold: int) -> tuple[float, Array]:
    """Stable cross-entropy of softmax(logits) against a gold index.

    Returns (loss, gradient) where gradient = softmax(logits) - onehot(gold).
    """
    z = as_f64(logits)
    if z.ndim != 1:
        raise DimMismatch("logits must be a vector")
    require_finite("logits", z)
    if not 0 <= gold < z.shape[0]:
        raise IndexError(f"gold index {gold} out of range for {z.shape[0]} logits")
    m = float(z.max())
    e = np.exp(z - m)
    total = float(e.sum())
    loss = m + math.log(total) - float(z[gold])
    grad = e / total
    grad[gold] -= 1.0
    return loss, grad


def kl_divergence(p: Array, q: Array) -> float:
    """KL(p || q) for two distributions over the same support."""
    p = as_f64(p)
    q = as_f64(q)
    if p.shape != q.shape or p.ndim != 1:
        raise DimMismatch("distributions must be same-shape vectors")
    for name, dist in (("p", p), ("q", q)):
        require_finite(name, dist)
        if np.any(dist < 0) or abs(float(dist.sum()) - 1.0) > 1e-6:
            raise ValueError(f"{name} is not a probability distribution")
    mask = p > 0
    if np.any(q[mask] == 0):
        return math.inf
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))

"""Deconfounded attention over the current sample and a clustered codebook.

Each layer computes three attention reads from the same token matrix ``x``:

* ``m_self``  -- self-sampling over the sample's own tokens (queries ``h(x)``)
* ``m_conf``  -- self-sampling over the codebook (queries ``f(x)``)
* ``x_hat``   -- cross-sampling: queries ``h(x)`` against the codebook

and fuses ``[x_hat; m_self; m_conf]`` with a linear map, residual add and
layer normalisation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor

MASK_VALUE = -1e30


# --- k-means ------------------------------------------------------------------

def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[chosen]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_dists(points, points[idx:idx + 1])[:, 0])
    return points[chosen].copy()


def kmeans(points, k: int, max_iters: int = 50, tol: float = 1e-4, seed: int = 0):
    """Lloyd's algorithm with k-means++ seeding.

    Returns ``(centroids, assignments, objective_trace)``. The trace holds
    the within-cluster sum of squares after seeding and after every
    completed iteration, and never increases.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError(f"points must be [N, d], got shape {list(pts.shape)}")
    n = len(pts)
    if k < 1 or n < k:
        raise ValueError(f"k-means needs 1 <= K <= N, got K={k}, N={n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(pts, k, rng)
    d2 = _sq_dists(pts, centroids)
    assign = d2.argmin(axis=1)
    objective = float(d2[np.arange(n), assign].sum())
    trace = [objective]
    for _ in range(max_iters):
        if objective == 0.0:
            break
        new = centroids.copy()
        point_d2 = d2[np.arange(n), assign].copy()
        for c in range(k):
            members = assign == c
            if members.any():
                new[c] = pts[members].mean(axis=0)
            else:
                far = int(point_d2.argmax())
                new[c] = pts[far]
                point_d2[far] = 0.0
        new_d2 = _sq_dists(pts, new)
        new_assign = new_d2.argmin(axis=1)
        new_obj = float(new_d2[np.arange(n), new_assign].sum())
        if new_obj > objective:
            # rounding noise at a fixed point; keep the previous solution
            break
        improvement = (objective - new_obj) / max(objective, 1e-300)
        centroids, d2, assign, objective = new, new_d2, new_assign, new_obj
        trace.append(objective)
        if improvement < tol:
            break
    return centroids, assign, trace


# --- codebook -----------------------------------------------------------------

@dataclass
class GlobalDictionary:
    keys: Tensor
    values: Tensor
    source: str
    kmeans_objective_trace: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.keys, self.values]


def build_dictionary(train_features, k: int, seed: int = 0, source: str = "regions",
                     max_iters: int = 50, tol: float = 1e-4) -> GlobalDictionary:
    """Cluster pooled training features; keys and values both start at the centroids."""
    centroids, _, trace = kmeans(train_features, k, max_iters=max_iters, tol=tol, seed=seed)
    return GlobalDictionary(
        keys=Tensor(centroids.copy(), requires_grad=True),
        values=Tensor(centroids.copy(), requires_grad=True),
        source=source,
        kmeans_objective_trace=trace,
    )


# --- layer parameters ---------------------------------------------------------

def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> Tensor:
    return Tensor(rng.normal(scale=gain / math.sqrt(fan_in), size=(fan_in, fan_out)), requires_grad=True)


@dataclass
class IdaLayerParams:
    query_proj_m: Tensor   # h(.)
    query_proj_c: Tensor   # f(.)
    key_proj: Tensor
    value_proj: Tensor
    fusion: Tensor         # [3d, d]
    fusion_bias: Tensor
    norm_gain: Tensor
    norm_bias: Tensor
    heads: int = 4

    @classmethod
    def init(cls, d: int, heads: int, rng: np.random.Generator, fusion_gain: float = 0.1) -> "IdaLayerParams":
        if d % heads:
            raise ContractError(f"model dim {d} not divisible by {heads} heads")
        # Attention maps start at identity: each token initially reads mostly
        # itself and its nearest codebook entries, instead of a sample average.
        return cls(
            query_proj_m=Tensor(np.eye(d), requires_grad=True),
            query_proj_c=Tensor(np.eye(d), requires_grad=True),
            key_proj=Tensor(np.eye(d), requires_grad=True),
            value_proj=Tensor(np.eye(d), requires_grad=True),
            fusion=_linear_init(rng, 3 * d, d, gain=fusion_gain),
            fusion_bias=Tensor(np.zeros(d), requires_grad=True),
            norm_gain=Tensor(np.ones(d), requires_grad=True),
            norm_bias=Tensor(np.zeros(d), requires_grad=True),
            heads=heads,
        )

    @property
    def dim(self) -> int:
        return self.key_proj.shape[0]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, getattr(self, n)) for n in
                ("query_proj_m", "query_proj_c", "key_proj", "value_proj",
                 "fusion", "fusion_bias", "norm_gain", "norm_bias")]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


@dataclass
class Attended:
    value: Tensor      # [B, t, d]
    weights: Tensor    # [B, heads, t, s]


@dataclass
class IdaLayerOutput:
    output: Tensor
    attn_self: Tensor
    attn_conf: Tensor
    attn_cross: Tensor


# --- attention ----------------------------------------------------------------

def _split_heads(x: Tensor, heads: int) -> Tensor:
    # [B, t, d] -> [B, h, t, d/h]
    b, t, d = x.shape
    return nx.transpose(nx.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int, key_mask: Optional[np.ndarray] = None) -> Attended:
    """Multi-head scaled dot-product read.

    ``q`` is ``[B, t, d]``; ``k``/``v`` are ``[B, s, d]`` or a shared ``[s, d]``
    table. ``key_mask`` (bool ``[B, s]``) marks valid keys.
    """
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ContractError(f"attention dim mismatch: q {list(q.shape)}, k {list(k.shape)}, v {list(v.shape)}")
    if k.ndim == 2:
        k = nx.reshape(k, (1,) + k.shape)
        v = nx.reshape(v, (1,) + v.shape)
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = nx.scale(nx.matmul(qh, nx.transpose(kh)), 1.0 / math.sqrt(d // heads))
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, MASK_VALUE)[:, None, None, :]
        scores = nx.add(scores, bias)
    w = nx.softmax(scores, axis=-1)
    return Attended(_merge_heads(nx.matmul(w, vh)), w)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return nx.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ContractError(f"tokens must be [t, d] or [B, t, d], got {list(x.shape)}")
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return nx.reshape(x, x.shape[1:]) if squeeze else x


def _check_dict(x: Tensor, params: IdaLayerParams, dictionary: GlobalDictionary) -> None:
    if x.shape[-1] != params.dim or dictionary.dim != params.dim:
        raise ContractError(
            f"dim mismatch: tokens {x.shape[-1]}, layer {params.dim}, dictionary {dictionary.dim}")
    if x.shape[-2] < 1:
        raise ContractError("need at least one token")


def self_sample(x: Tensor, params: IdaLayerParams, dictionary: GlobalDictionary,
                key_mask: Optional[np.ndarray] = None) -> tuple[Attended, Attended]:
    """Self-sampling reads: over the sample's own tokens and over the codebook."""
    _check_dict(x, params, dictionary)
    xb, squeeze = _batched(x)
    q_m = nx.matmul(xb, params.query_proj_m)
    q_c = nx.matmul(xb, params.query_proj_c)
    k_m = nx.matmul(xb, params.key_proj)
    v_m = nx.matmul(xb, params.value_proj)
    m_self = attend(q_m, k_m, v_m, params.heads, key_mask)
    m_conf = attend(q_c, dictionary.keys, dictionary.values, params.heads)
    if squeeze:
        m_self = Attended(_unbatch(m_self.value, True), m_self.weights)
        m_conf = Attended(_unbatch(m_conf.value, True), m_conf.weights)
    return m_self, m_conf


def cross_sample(x: Tensor, params: IdaLayerParams, dictionary: GlobalDictionary) -> Attended:
    """Cross-sampling read: ``h(x)`` queries against codebook keys/values."""
    _check_dict(x, params, dictionary)
    xb, squeeze = _batched(x)
    q_m = nx.matmul(xb, params.query_proj_m)
    out = attend(q_m, dictionary.keys, dictionary.values, params.heads)
    if squeeze:
        out = Attended(_unbatch(out.value, True), out.weights)
    return out


def ida_layer(x: Tensor, params: IdaLayerParams, dictionary: GlobalDictionary,
              key_mask: Optional[np.ndarray] = None) -> IdaLayerOutput:
    _check_dict(x, params, dictionary)
    xb, squeeze = _batched(x)
    q_m = nx.matmul(xb, params.query_proj_m)
    q_c = nx.matmul(xb, params.query_proj_c)
    k_m = nx.matmul(xb, params.key_proj)
    v_m = nx.matmul(xb, params.value_proj)
    m_self = attend(q_m, k_m, v_m, params.heads, key_mask)
    m_conf = attend(q_c, dictionary.keys, dictionary.values, params.heads)
    x_hat = attend(q_m, dictionary.keys, dictionary.values, params.heads)
    fused = nx.add(nx.matmul(nx.concat([x_hat.value, m_self.value, m_conf.value], axis=-1), params.fusion),
                   params.fusion_bias)
    out = nx.layer_norm(nx.add(xb, fused), params.norm_gain, params.norm_bias)
    return IdaLayerOutput(_unbatch(out, squeeze), m_self.weights, m_conf.weights, x_hat.weights)


def ida_forward(x: Tensor, layers: list, dictionary: Optional[GlobalDictionary],
                key_mask: Optional[np.ndarray] = None, bypass: bool = False,
                trace: Optional[list] = None) -> Tensor:
    """Run the layer stack; ``bypass`` returns ``x`` untouched.

    Per-layer :class:`IdaLayerOutput` objects are appended to ``trace`` when given.
    """
    if bypass or not layers:
        return x
    for params in layers:
        res = ida_layer(x, params, dictionary, key_mask)
        if trace is not None:
            trace.append(res)
        x = res.output
    return x

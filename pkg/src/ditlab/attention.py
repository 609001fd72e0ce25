"""Multi-head self-attention with a per-head perturbation hook.

Implements the standard projections / scaled-dot-product / output
concatenation pipeline plus the full operator family used for
attention-perturbation guidance:

==================  ====================================================
method              attention map transform
==================  ====================================================
none                unchanged
pag                 A -> I (identity replacement)
soft_pag            A -> (1 - u) A + u I
uniform             A -> U (every entry 1/N)
soft_uniform        A -> (1 - u) A + u U
soft_seg            A -> (1 - u) A + u A_seg, A_seg from the mean query
temperature         A -> softmax(log A / tau)
max_guidance        A -> one-hot rows at each row's maximum
soft_max_guidance   A -> (1 - u) A + u one-hot(A)
==================  ====================================================

All transforms preserve row-stochasticity.  Perturbations are routed by
a PerturbSpec holding a set of (layer, head) pairs; heads outside the
set are bit-identical to the unperturbed path.  Everything here is a
pure function of its inputs, safe for concurrent evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import matmul, softmax_rows

__all__ = [
    "METHODS",
    "SOFT_METHODS",
    "TARGET_KINDS",
    "HeadId",
    "PerturbSpec",
    "NO_PERTURB",
    "AttentionLayerWeights",
    "attention_map",
    "perturb_target",
    "soft_mix",
    "temperature_scale",
    "apply_perturbation",
    "multi_head_attention",
    "multi_head_attention_layer",
]

METHODS = (
    "none",
    "pag",
    "soft_pag",
    "uniform",
    "soft_uniform",
    "soft_seg",
    "temperature",
    "max_guidance",
    "soft_max_guidance",
)

# Methods whose strength is the interpolation weight u; u = 0 makes them
# an exact no-op (soft_mix returns the input unchanged).
SOFT_METHODS = ("soft_pag", "soft_uniform", "soft_seg", "soft_max_guidance")

TARGET_KINDS = ("identity", "uniform", "mean_query", "argmax")

# Probabilities are clamped here before the log in temperature_scale;
# softmax output can underflow to exact zero in float64.
_LOG_FLOOR = 1e-300


@dataclass(frozen=True, order=True)
class HeadId:
    """A (layer, head) pair, both 0-based.  Ordering is lexicographic."""

    layer: int
    head: int

    def __post_init__(self):
        if self.layer < 0 or self.head < 0:
            raise ValueError(f"HeadId indices must be non-negative: {self}")


@dataclass(frozen=True)
class PerturbSpec:
    """A head set S plus the perturbation method and its parameters.

    Parameters
    ----------
    heads : iterable of HeadId
        The selected (layer, head) pairs; stored as a frozenset.
    method : str
        One of METHODS.  "none" ignores the head set entirely.
    u : float
        Interpolation weight in [0, 1] for the soft_* methods.
    tau : float
        Temperature in (0, inf) for the temperature method.
    """

    heads: frozenset = field(default_factory=frozenset)
    method: str = "none"
    u: float = 0.25
    tau: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "heads", frozenset(self.heads))
        for h in self.heads:
            if not isinstance(h, HeadId):
                raise TypeError(f"PerturbSpec heads must be HeadId, got {h!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown perturbation method {self.method!r}")
        if not 0.0 <= self.u <= 1.0:
            raise ValueError(f"u must lie in [0, 1], got {self.u}")
        if not self.tau > 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")


NO_PERTURB = PerturbSpec()


@dataclass
class AttentionLayerWeights:
    """Per-head projection matrices and the output projection of one layer.

    Fields
    ------
    wq, wk, wv : ndarray [H, d, d_head]
        Head-specific query/key/value projections.
    wo : ndarray [H * d_head, d]
        Output projection applied to the concatenated head outputs.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    def __post_init__(self):
        for name in ("wq", "wk", "wv"):
            m = getattr(self, name)
            if m.ndim != 3:
                raise ValueError(f"{name} must be [heads, d, d_head], got {m.shape}")
            if m.shape != self.wq.shape:
                raise ValueError(
                    f"projection shapes disagree: wq {self.wq.shape}, {name} {m.shape}"
                )
        h, d, d_head = self.wq.shape
        if self.wo.ndim != 2 or self.wo.shape[0] != h * d_head:
            raise ValueError(
                f"wo must be [{h * d_head}, d], got {self.wo.shape} "
                f"for {h} heads of width {d_head}"
            )
        for name in ("wq", "wk", "wv", "wo"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"attention weights {name} contain non-finite values")

    @property
    def head_count(self) -> int:
        return self.wq.shape[0]

    @property
    def model_dim(self) -> int:
        return self.wq.shape[1]

    @property
    def head_dim(self) -> int:
        return self.wq.shape[2]


def attention_map(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Row-stochastic attention map softmax(q k^T / sqrt(d_head)).

    q and k have shape [..., N, d_head]; the result is [..., N, N].
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"attention_map: head dims disagree {q.shape} vs {k.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = matmul(q, np.swapaxes(k, -1, -2)) * scale
    return softmax_rows(scores)


def perturb_target(
    kind: str,
    a: np.ndarray,
    q: np.ndarray | None = None,
    k: np.ndarray | None = None,
) -> np.ndarray:
    """Replacement attention map of the requested kind.

    Parameters
    ----------
    kind : one of TARGET_KINDS
        identity   -> I_N
        uniform    -> all entries 1/N
        mean_query -> softmax(qbar k^T / sqrt(d_head)) where qbar is the
                      token-mean query; every output row is identical.
        argmax     -> one-hot rows at each row's maximum entry, ties
                      broken toward the lowest column index.
    a : ndarray [..., N, N]
        The original map; defines the output shape, and supplies the
        rows for the argmax kind.
    q, k : ndarray [..., N, d_head], required for mean_query only.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[-1]
    if kind == "identity":
        return np.broadcast_to(np.eye(n), a.shape).copy()
    if kind == "uniform":
        return np.full_like(a, 1.0 / n)
    if kind == "mean_query":
        if q is None or k is None:
            raise ValueError("perturb_target: mean_query requires q and k")
        # One attention row from the mean query, broadcast to all N rows
        # (identical result to materializing the replicated qbar, N times
        # cheaper; the all-rows-equal property is asserted in tests).
        qbar = np.asarray(q, dtype=np.float64).mean(axis=-2, keepdims=True)
        row = attention_map(qbar, k)
        return np.broadcast_to(row, a.shape).copy()
    if kind == "argmax":
        idx = np.argmax(a, axis=-1)  # ties resolve to the lowest index
        out = np.zeros_like(a)
        np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
        return out
    raise ValueError(f"unknown perturbation target kind {kind!r}")


def soft_mix(a: np.ndarray, target: np.ndarray, u: float) -> np.ndarray:
    """Convex interpolation (1 - u) a + u target.

    The endpoints return exact copies of the corresponding operand so
    that u = 0 is bit-identical to the input and u = 1 to the target.
    """
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"soft_mix: u must lie in [0, 1], got {u}")
    a = np.asarray(a, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if a.shape != target.shape:
        raise ValueError(f"soft_mix: shapes disagree {a.shape} vs {target.shape}")
    if u == 0.0:
        return a.copy()
    if u == 1.0:
        return target.copy()
    return (1.0 - u) * a + u * target


def temperature_scale(a: np.ndarray, tau: float) -> np.ndarray:
    """Temperature-rescaled map softmax(log a / tau).

    tau = 1 reproduces the input within roundoff; tau -> inf approaches
    the uniform map; tau -> 0 approaches one-hot argmax rows.  Entries
    are clamped at 1e-300 before the log so exact zeros stay finite.
    """
    if not tau > 0.0:
        raise ValueError(f"temperature_scale: tau must be positive, got {tau}")
    a = np.asarray(a, dtype=np.float64)
    return softmax_rows(np.log(np.maximum(a, _LOG_FLOOR)) / tau)


def apply_perturbation(
    a: np.ndarray,
    spec: PerturbSpec,
    q: np.ndarray | None = None,
    k: np.ndarray | None = None,
) -> np.ndarray:
    """Transform one attention map according to spec.method."""
    m = spec.method
    if m == "none":
        return a.copy()
    if m == "pag":
        return perturb_target("identity", a)
    if m == "soft_pag":
        return soft_mix(a, perturb_target("identity", a), spec.u)
    if m == "uniform":
        return perturb_target("uniform", a)
    if m == "soft_uniform":
        return soft_mix(a, perturb_target("uniform", a), spec.u)
    if m == "soft_seg":
        return soft_mix(a, perturb_target("mean_query", a, q, k), spec.u)
    if m == "temperature":
        return temperature_scale(a, spec.tau)
    if m == "max_guidance":
        return perturb_target("argmax", a)
    if m == "soft_max_guidance":
        return soft_mix(a, perturb_target("argmax", a), spec.u)
    raise ValueError(f"unknown perturbation method {m!r}")


def _project_head(x_q, x_k, x_v, weights, h):
    q = matmul(x_q, weights.wq[h])
    k = matmul(x_k, weights.wk[h])
    v = matmul(x_v, weights.wv[h])
    return q, k, v


def multi_head_attention(
    x_q: np.ndarray,
    x_k: np.ndarray,
    x_v: np.ndarray,
    weights: AttentionLayerWeights,
    layer: int,
    spec: PerturbSpec = NO_PERTURB,
    cache: dict | None = None,
) -> np.ndarray:
    """Multi-head attention with head-selective perturbation.

    Per head h: project inputs, compute the attention map, replace it
    with the spec's transform when (layer, h) is in spec.heads, apply
    it to the values, then concatenate all heads and project with wo.
    Heads not selected follow exactly the same operations as an
    unperturbed forward, so they are bit-identical to it.

    Parameters
    ----------
    x_q, x_k, x_v : ndarray [..., N, d]
        Token sequences (self-attention passes the same array thrice).
    layer : int
        This layer's index, matched against spec.heads.
    cache : dict, optional
        When given, filled with per-head intermediates ("per_head", a
        list of dicts with q/k/v/a/o, and "concat") for the backward
        pass and for inspection.

    Raises
    ------
    ValueError
        If d does not match the weights, or spec names a head index
        this layer does not have.
    """
    if x_q.shape[-1] != weights.model_dim:
        raise ValueError(
            f"multi_head_attention: input dim {x_q.shape[-1]} != "
            f"model dim {weights.model_dim}"
        )
    h_count = weights.head_count
    for hid in spec.heads:
        if hid.layer == layer and hid.head >= h_count:
            raise ValueError(
                f"HeadId out of range: {hid} but layer {layer} has {h_count} heads"
            )
    selected = (
        {hid.head for hid in spec.heads if hid.layer == layer}
        if spec.method != "none"
        else frozenset()
    )

    outs = []
    per_head = [] if cache is not None else None
    for h in range(h_count):
        q, k, v = _project_head(x_q, x_k, x_v, weights, h)
        a = attention_map(q, k)
        if h in selected:
            a = apply_perturbation(a, spec, q, k)
        o = matmul(a, v)
        outs.append(o)
        if per_head is not None:
            per_head.append({"q": q, "k": k, "v": v, "a": a, "o": o})
    concat = np.concatenate(outs, axis=-1)
    if cache is not None:
        cache["per_head"] = per_head
        cache["concat"] = concat
    return matmul(concat, weights.wo)


def multi_head_attention_layer(
    x_q: np.ndarray,
    x_k: np.ndarray,
    x_v: np.ndarray,
    weights: AttentionLayerWeights,
    spec: PerturbSpec,
) -> np.ndarray:
    """Layer-level perturbation path: transform every head of the layer.

    This is the reference for the layer/head equivalence property: a
    PerturbSpec enumerating all heads of a layer must reproduce this
    result bit-exactly.  It is deliberately a separate plain loop with
    no head-membership bookkeeping.
    """
    outs = []
    for h in range(weights.head_count):
        q, k, v = _project_head(x_q, x_k, x_v, weights, h)
        a = attention_map(q, k)
        a = apply_perturbation(a, spec, q, k)
        outs.append(matmul(a, v))
    return matmul(np.concatenate(outs, axis=-1), weights.wo)

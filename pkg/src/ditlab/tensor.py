"""Dense float64 tensor kernel and a deterministic counter-based PRNG.

Tensors throughout this package are plain numpy float64 arrays in C
(row-major) order.  This module pins down the few numerical contracts
everything else leans on: matmul with explicit shape errors, a
numerically stable row softmax, layer normalization with eps inside the
square root, and an Rng whose output stream is a pure function of its
seed.

The Rng is a counter-based splitmix64: draw number i mixes
(seed + i * GAMMA) through the 64-bit finalizer, so vectorized
generation, skipping, and child-stream derivation are all cheap
bookkeeping on top of one bit-exact integer stream.  Uniform draws are
therefore identical on every platform; normal draws apply Box-Muller on
top of that stream in a fixed order (their bits additionally depend on
the C library's log/cos/sin, which the test suite pins by regression).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "matmul",
    "softmax_rows",
    "layernorm",
    "layernorm_stats",
    "require_finite",
    "Rng",
]

# splitmix64 constants (Steele, Lea & Flood 2014).
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D4A2C62A2AE145)

# 2**-53: maps the top 53 bits of a uint64 onto [0, 1).
_UNIT = float(2.0**-53)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product c[i, j] = sum_p a[i, p] * b[p, j] in float64.

    Parameters
    ----------
    a, b : ndarray
        Operands of shape [m, k] and [k, n].  Leading batch dimensions
        are allowed and broadcast as in ``np.matmul``.

    Returns
    -------
    ndarray of shape [m, n] (plus any batch dimensions).

    Raises
    ------
    ValueError
        If either operand has fewer than two dimensions or the inner
        extents disagree; the message carries both shapes.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    return np.matmul(a, b)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis with max subtraction.

    Each output row sums to 1 within 1e-9; subtracting the per-row
    maximum first keeps exp() from overflowing for any finite input.
    """
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layernorm_stats(x: np.ndarray, eps: float = 1e-5):
    """Normalization core shared by layernorm and its backward pass.

    Returns
    -------
    (xhat, inv_std) : pair of ndarray
        xhat is the per-row zero-mean unit-variance normalization of x;
        inv_std = 1 / sqrt(var + eps) with eps inside the square root.
    """
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return xc * inv_std, inv_std


def layernorm(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Layer normalization over the last axis, then affine gain and bias.

    Parameters
    ----------
    x : ndarray [..., d]
    gain, bias : ndarray [d]
    eps : float
        Added to the variance inside the square root (default 1e-5).

    Raises
    ------
    ValueError
        If gain or bias extents do not match the last axis of x.
    """
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layernorm: gain {gain.shape} / bias {bias.shape} do not match d={d}"
        )
    xhat, _ = layernorm_stats(x, eps)
    return xhat * gain + bias


def require_finite(x: np.ndarray, context: str) -> None:
    """Raise FloatingPointError naming `context` if x has NaN or Inf."""
    if not np.isfinite(x).all():
        raise FloatingPointError(f"{context}: non-finite values encountered")


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer on uint64 scalars or arrays (wrapping mul)."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


class Rng:
    """Deterministic counter-based PRNG (splitmix64 core).

    The stream is indexed: output i equals mix64(seed + i * GAMMA), so
    the full sequence is a pure function of the seed and the number of
    values drawn so far.  A given seed yields the identical uniform
    stream on every platform.

    Normal variates use Box-Muller: each pair of outputs consumes two
    uniforms (radius from the first, angle from the second).  A request
    for an odd count still consumes the full pair block and discards
    the spare, keeping the draw position independent of call shapes.

    Rng instances are single-owner; concurrent work derives child
    streams via :meth:`split` instead of sharing one instance.
    """

    def __init__(self, seed: int):
        if not isinstance(seed, (int, np.integer)):
            raise TypeError(f"Rng seed must be an integer, got {type(seed).__name__}")
        self._seed = np.uint64(int(seed) % (1 << 64))
        self._drawn = 0  # count of raw 64-bit values consumed

    def raw(self, n: int) -> np.ndarray:
        """Next n raw uint64 values from the stream."""
        if n < 0:
            raise ValueError("raw: n must be non-negative")
        idx = np.arange(self._drawn + 1, self._drawn + n + 1, dtype=np.uint64)
        self._drawn += n
        with np.errstate(over="ignore"):
            return _mix64(self._seed + idx * _GAMMA)

    def uniform(self, n: int | None = None):
        """Uniform draws on [0, 1): a float for n=None, else a 1-D array.

        Each value is (raw >> 11) * 2**-53, i.e. the top 53 bits of the
        integer stream, so uniforms are bit-exact across platforms.
        """
        if n is None:
            return float(self.raw(1)[0] >> np.uint64(11)) * _UNIT
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _UNIT

    def normal(self, shape=None):
        """Standard-normal draws via Box-Muller in a fixed order.

        Parameters
        ----------
        shape : None, int, or tuple of int
            None returns a scalar float; otherwise an array.
        """
        if shape is None:
            return float(self.normal(1)[0])
        dims = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
        count = int(np.prod(dims)) if dims else 1
        pairs = (count + 1) // 2
        u1 = self.uniform(pairs)
        u2 = self.uniform(pairs)
        # 1 - u1 lies in (0, 1], so the log never sees zero.
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = (2.0 * np.pi) * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:count].reshape(dims)

    def integers(self, bound: int, n: int | None = None):
        """Uniform integers on [0, bound) derived from uniform draws.

        The bias from the float mapping is below 2**-53 per value,
        negligible for the small bounds used here (batch indexing,
        jitter selection).
        """
        if bound <= 0:
            raise ValueError("integers: bound must be positive")
        if n is None:
            return int(self.uniform() * bound)
        return (self.uniform(n) * bound).astype(np.int64)

    def split(self) -> "Rng":
        """Derive an independent child stream (consumes one raw draw)."""
        return Rng(int(self.raw(1)[0]))

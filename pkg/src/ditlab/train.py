"""Training engine: flow-matching loss, manual backward passes, Adam,
and a central finite-difference gradient verifier.

The model is small enough that every layer's backward pass is derived
by hand (linear, layernorm, GELU, softmax attention, embeddings) and
checked against central finite differences; there is no autodiff tape.
All stochastic draws (timestep, noise, conditioning dropout, batch
indices) come from one run Rng in a documented order, so a seed fully
determines the loss curve and the final weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import NO_PERTURB
from .model import DitWeights, dit_forward, gelu_grad, param_shapes, patchify
from .tensor import Rng

__all__ = [
    "NoiseSchedule",
    "FlowMatchingSchedule",
    "FLOW_SCHEDULE",
    "flow_interpolate",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "fm_loss",
    "fm_loss_and_grads",
    "backward",
    "finite_diff_check",
    "randomize_output_projection",
    "Adam",
    "train",
]

# Training aborts once the loss exceeds this bound.
DIVERGENCE_LIMIT = 1e3


class NoiseSchedule:
    """Forward-diffusion schedule abstraction x_t = alpha(t) x0 + sigma(t) eps.

    Only the flow-matching instance ships; other schedules would plug in
    here by supplying the three methods.
    """

    def alpha(self, t):
        raise NotImplementedError

    def sigma(self, t):
        raise NotImplementedError

    def velocity_target(self, x0, eps, t):
        raise NotImplementedError


class FlowMatchingSchedule(NoiseSchedule):
    """Linear noise-data path: alpha = 1 - t, sigma = t, u = eps - x0."""

    def alpha(self, t):
        return 1.0 - t

    def sigma(self, t):
        return t

    def velocity_target(self, x0, eps, t):
        return eps - x0


FLOW_SCHEDULE = FlowMatchingSchedule()


def flow_interpolate(x0, eps, t, schedule: NoiseSchedule = FLOW_SCHEDULE):
    """Interpolate x_t = alpha(t) x0 + sigma(t) eps and its velocity target.

    Parameters
    ----------
    x0, eps : ndarray with matching shapes
    t : scalar in [0, 1], or array broadcastable over the batch axis

    Returns
    -------
    (x_t, target_v)
        For the flow-matching schedule: x_t = (1 - t) x0 + t eps and
        target_v = eps - x0.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"flow_interpolate: shapes disagree {x0.shape} vs {eps.shape}")
    tb = np.asarray(t, dtype=np.float64)
    if tb.min() < 0.0 or tb.max() > 1.0:
        raise ValueError(f"t must lie in [0, 1], got range [{tb.min()}, {tb.max()}]")
    while tb.ndim < x0.ndim:
        tb = tb[..., None]
    x_t = schedule.alpha(tb) * x0 + schedule.sigma(tb) * eps
    return x_t, schedule.velocity_target(x0, eps, tb)


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 32
    steps: int = 3000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    cfg_dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.cfg_dropout <= 1.0:
            raise ValueError("cfg_dropout must lie in [0, 1]")


class TrainingDiverged(ArithmeticError):
    """Raised when the loss exceeds the divergence limit or any
    gradient turns non-finite; the message names the offender."""


def _draw_batch(rng: Rng, x0: np.ndarray, cls: np.ndarray, dropout: float, null_class: int):
    """One batch worth of stochastic draws, in the documented order:
    timesteps t (batch uniforms), noise eps (batch normal block), then
    conditioning-dropout uniforms.  Classes drop to the null class with
    probability `dropout`."""
    b = x0.shape[0]
    t = rng.uniform(b)
    eps = rng.normal(x0.shape)
    drop = rng.uniform(b)
    cond = np.where(drop < dropout, null_class, np.asarray(cls, dtype=np.int64))
    x_t, target = flow_interpolate(x0, eps, t)
    return x_t, t, cond, target


def fm_loss(
    weights: DitWeights,
    x0: np.ndarray,
    cls: np.ndarray,
    rng: Rng,
    cfg_dropout: float = 0.1,
    forward_fn=None,
) -> float:
    """Flow-matching loss: mean squared error between the velocity
    prediction at a random timestep and the target eps - x0.

    Parameters
    ----------
    x0 : ndarray [B, 16, 16], cls : int array [B]
        The data batch; must be non-empty.
    rng : Rng
        Supplies t, eps, and conditioning dropout (see _draw_batch).
    forward_fn : callable, optional
        Replaces dit_forward; signature (weights, x_t, t, cond, spec).
        A mock predicting the exact target yields loss zero, which the
        tests use to pin the draw-order contract.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 3 or x0.shape[0] < 1:
        raise ValueError(f"fm_loss: batch must be [B, H, W] non-empty, got {x0.shape}")
    x_t, t, cond, target = _draw_batch(
        rng, x0, cls, cfg_dropout, weights.config.null_class
    )
    fwd = forward_fn if forward_fn is not None else dit_forward
    pred = fwd(weights, x_t, t, cond, NO_PERTURB)
    diff = pred - target
    return float(np.mean(diff * diff))


def _linear_backward(x, w, dy):
    """Backward of y = x @ w + b: returns (dx, dw, db).

    dx = dy w^T, dw = x^T dy summed over leading axes, db = sum of dy.
    """
    lead = tuple(range(x.ndim - 1))
    dx = np.matmul(dy, w.T)
    dw = np.tensordot(x, dy, axes=(lead, lead))
    db = dy.sum(axis=lead)
    return dx, dw, db


def _ln_backward(dy, ln_cache, gain):
    """Backward of layernorm with affine: returns (dx, dgain, dbias)."""
    xhat = ln_cache["xhat"]
    inv_std = ln_cache["inv_std"]
    lead = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=lead)
    dbias = dy.sum(axis=lead)
    dxhat = dy * gain
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def _attention_backward(weights, layer, lc, dy, grads):
    """Backward through one unperturbed multi-head attention block.

    dy is the gradient at the attention output [B, N, d].  Returns the
    gradient at the layernormed input a_in and fills the projection
    gradients for this layer.
    """
    p = weights.params
    lp = f"layers.{layer}.attn"
    per_head = lc["attn"]["per_head"]
    concat = lc["attn"]["concat"]
    a_in = lc["a_in"]
    h_count = weights.config.heads_per_layer
    d_head = weights.config.head_dim
    scale = 1.0 / math.sqrt(d_head)
    lead = (0, 1)

    d_concat = np.matmul(dy, p[f"{lp}.wo"].T)
    grads[f"{lp}.wo"] += np.tensordot(concat, dy, axes=(lead, lead))

    da_in = np.zeros_like(a_in)
    for h in range(h_count):
        ph = per_head[h]
        q, k, v, a = ph["q"], ph["k"], ph["v"], ph["a"]
        do = d_concat[..., h * d_head : (h + 1) * d_head]
        da = np.matmul(do, np.swapaxes(v, -1, -2))
        dv = np.matmul(np.swapaxes(a, -1, -2), do)
        # softmax backward: ds = a * (da - rowsum(da * a))
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True))
        dq = np.matmul(ds, k) * scale
        dk = np.matmul(np.swapaxes(ds, -1, -2), q) * scale
        grads[f"{lp}.wq"][h] += np.tensordot(a_in, dq, axes=(lead, lead))
        grads[f"{lp}.wk"][h] += np.tensordot(a_in, dk, axes=(lead, lead))
        grads[f"{lp}.wv"][h] += np.tensordot(a_in, dv, axes=(lead, lead))
        da_in += np.matmul(dq, weights.params[f"{lp}.wq"][h].T)
        da_in += np.matmul(dk, weights.params[f"{lp}.wk"][h].T)
        da_in += np.matmul(dv, weights.params[f"{lp}.wv"][h].T)
    return da_in


def backward(weights: DitWeights, cache: dict, d_out: np.ndarray) -> dict:
    """Analytic gradients of the cached forward pass.

    Parameters
    ----------
    cache : dict
        Intermediates recorded by dit_forward(..., cache=...) on an
        unperturbed pass (the only path that is trained).
    d_out : ndarray [B, 16, 16]
        Gradient of the scalar loss with respect to the prediction.

    Returns
    -------
    dict mapping parameter name -> gradient array (same shapes as the
    parameters).
    """
    cfg = weights.config
    p = weights.params
    grads = {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()}

    dout_tok = patchify(np.asarray(d_out, dtype=np.float64), cfg.patch)
    xf = cache["x_final"]
    lead = (0, 1)
    grads["out_proj.w"] += np.tensordot(xf[:, 1:, :], dout_tok, axes=(lead, lead))
    grads["out_proj.b"] += dout_tok.sum(axis=lead)
    dxf = np.zeros_like(xf)
    dxf[:, 1:, :] = np.matmul(dout_tok, p["out_proj.w"].T)
    dx, dg, db = _ln_backward(dxf, cache["final_ln"], p["final_ln.gain"])
    grads["final_ln.gain"] += dg
    grads["final_ln.bias"] += db

    for l in reversed(range(cfg.layers)):
        lc = cache["layers"][l]
        lp = f"layers.{l}"
        # MLP residual branch.
        dmg, dw2, db2 = _linear_backward(lc["mlp_g"], p[f"{lp}.mlp.w2"], dx)
        grads[f"{lp}.mlp.w2"] += dw2
        grads[f"{lp}.mlp.b2"] += db2
        dmh = dmg * gelu_grad(lc["mlp_h"])
        dm_in, dw1, db1 = _linear_backward(lc["m_in"], p[f"{lp}.mlp.w1"], dmh)
        grads[f"{lp}.mlp.w1"] += dw1
        grads[f"{lp}.mlp.b1"] += db1
        dxl, dg2, db2n = _ln_backward(dm_in, lc["ln2"], p[f"{lp}.ln2.gain"])
        grads[f"{lp}.ln2.gain"] += dg2
        grads[f"{lp}.ln2.bias"] += db2n
        dx = dx + dxl
        # Attention residual branch.
        da_in = _attention_backward(weights, l, lc, dx, grads)
        dxl, dg1, db1n = _ln_backward(da_in, lc["ln1"], p[f"{lp}.ln1.gain"])
        grads[f"{lp}.ln1.gain"] += dg1
        grads[f"{lp}.ln1.bias"] += db1n
        dx = dx + dxl

    # Time embedding was added to every token.
    dtemb = dx.sum(axis=1)
    dtg, dtw2, dtb2 = _linear_backward(cache["time_g"], p["time_mlp.w2"], dtemb)
    grads["time_mlp.w2"] += dtw2
    grads["time_mlp.b2"] += dtb2
    dth = dtg * gelu_grad(cache["time_h"])
    _, dtw1, dtb1 = _linear_backward(cache["time_feats"], p["time_mlp.w1"], dth)
    grads["time_mlp.w1"] += dtw1
    grads["time_mlp.b1"] += dtb1

    grads["pos_embed"] += dx.sum(axis=0)
    np.add.at(grads["class_embed"], cache["cond"], dx[:, 0, :])
    dtok = dx[:, 1:, :]
    grads["patch_embed.w"] += np.tensordot(cache["patches"], dtok, axes=(lead, lead))
    grads["patch_embed.b"] += dtok.sum(axis=lead)
    return grads


def fm_loss_and_grads(
    weights: DitWeights,
    x0: np.ndarray,
    cls: np.ndarray,
    rng: Rng,
    cfg_dropout: float = 0.1,
):
    """Flow-matching loss plus analytic parameter gradients.

    Uses the same draw order as :func:`fm_loss`; the two agree
    bit-exactly on the loss for identical Rng states.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x_t, t, cond, target = _draw_batch(
        rng, x0, cls, cfg_dropout, weights.config.null_class
    )
    cache: dict = {}
    pred = dit_forward(weights, x_t, t, cond, NO_PERTURB, cache=cache)
    diff = pred - target
    loss = float(np.mean(diff * diff))
    d_out = (2.0 / diff.size) * diff
    return loss, backward(weights, cache, d_out)


def randomize_output_projection(weights: DitWeights, seed: int = 1) -> DitWeights:
    """Copy of the weights with the zero-initialized output projection
    replaced by small random values.  A fresh model predicts exactly
    zero, which zeroes most parameter gradients; gradient checks use
    this helper so every parameter group gets nonzero flow."""
    w = weights.copy()
    rng = Rng(seed)
    for name in ("out_proj.w", "out_proj.b"):
        w.params[name] = rng.normal(w.params[name].shape) * 0.02
    return w


def finite_diff_check(
    weights: DitWeights,
    probe_count: int = 64,
    seed: int = 0,
    batch: int = 4,
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central finite-difference
    gradients over randomly probed scalar parameters.

    The probe batch (inputs, timesteps, conditioning) is drawn once and
    frozen; each probe perturbs one parameter by +-step and compares
    (f(p + h) - f(p - h)) / 2h against the analytic gradient.  Probes
    round-robin over parameter names so every parameter group is
    covered once probe_count reaches the parameter count.

    Relative error uses max(|analytic|, |numeric|, 1e-6) in the
    denominator so near-zero gradient pairs do not inflate the ratio.
    """
    cfg = weights.config
    rng = Rng(seed)
    npix = cfg.image_size * cfg.image_size
    x0 = rng.uniform(batch * npix).reshape(batch, cfg.image_size, cfg.image_size)
    cls = rng.integers(cfg.class_count, batch)
    # Dropout 0.5 makes the frozen batch exercise the null class too.
    x_t, t, cond, target = _draw_batch(rng, x0, cls, 0.5, cfg.null_class)

    w = weights.copy()

    def loss_at(wts):
        pred = dit_forward(wts, x_t, t, cond, NO_PERTURB)
        diff = pred - target
        return float(np.mean(diff * diff))

    cache: dict = {}
    pred = dit_forward(w, x_t, t, cond, NO_PERTURB, cache=cache)
    diff = pred - target
    grads = backward(w, cache, (2.0 / diff.size) * diff)

    names = list(w.params.keys())
    worst = 0.0
    for i in range(probe_count):
        name = names[i % len(names)]
        flat = w.params[name].reshape(-1)
        idx = rng.integers(flat.size)
        orig = flat[idx]
        flat[idx] = orig + step
        up = loss_at(w)
        flat[idx] = orig - step
        down = loss_at(w)
        flat[idx] = orig
        numeric = (up - down) / (2.0 * step)
        analytic = grads[name].reshape(-1)[idx]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, rel)
    return worst


class Adam:
    """Standard Adam with bias correction.  A zero gradient leaves the
    parameters bit-identical (the moments stay zero from a fresh
    optimizer, so the update term is exactly zero)."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[name] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainResult:
    weights: DitWeights
    losses: np.ndarray
    initial_loss: float
    final_loss: float

    @property
    def ratio(self) -> float:
        return self.final_loss / self.initial_loss


def _check_grads_finite(grads: dict, step: int) -> None:
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDiverged(
                f"non-finite gradient in {name} at step {step}"
            )


def train(
    weights: DitWeights,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    loss_csv: str | None = None,
    log_every: int = 50,
    log_fn=None,
) -> TrainResult:
    """Train a copy of the weights on the dataset; deterministic per seed.

    Per step the run Rng draws batch indices, then the loss draws of
    :func:`fm_loss` (t, eps, dropout).  The loss is recorded every step
    (and appended to loss_csv as "step,loss" rows when given); log_fn,
    if provided, receives a progress line every log_every steps.  The
    reported final loss is the mean of the last 50 recorded steps.

    Raises
    ------
    TrainingDiverged
        If the loss exceeds 1e3, or any gradient goes non-finite (the
        message names the offending parameter group).
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] < 1:
        raise ValueError("train: dataset must be non-empty")
    rng = Rng(cfg.seed)
    w = weights.copy()
    opt = Adam(w.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    losses = np.zeros(cfg.steps)

    csv = open(loss_csv, "w", newline="\n") if loss_csv else None
    try:
        if csv:
            csv.write("step,loss\n")
        for s in range(cfg.steps):
            idx = rng.integers(images.shape[0], cfg.batch)
            loss, grads = fm_loss_and_grads(
                w, images[idx], labels[idx], rng, cfg.cfg_dropout
            )
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {s}")
            if loss > DIVERGENCE_LIMIT:
                raise TrainingDiverged(
                    f"loss diverged at step {s}: {loss} > {DIVERGENCE_LIMIT}"
                )
            _check_grads_finite(grads, s)
            opt.step(w.params, grads)
            losses[s] = loss
            if csv:
                csv.write(f"{s},{loss!r}\n")
            if log_fn is not None and s % log_every == 0:
                log_fn(f"step {s}: loss {loss:.6f}")
    finally:
        if csv:
            csv.close()

    if cfg.steps == 0:
        return TrainResult(w, losses, float("nan"), float("nan"))
    tail = losses[-min(50, cfg.steps):]
    return TrainResult(w, losses, float(losses[0]), float(tail.mean()))

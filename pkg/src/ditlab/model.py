"""Micro diffusion transformer predicting a flow-matching velocity field.

Pipeline: patchify the 16x16 image into 2x2 patches, embed the 64 patch
tokens, prepend one learned class token (conditioning), add positional
embeddings and an additive sinusoidal-time MLP embedding on all tokens,
run L pre-layernorm transformer blocks (multi-head self-attention plus
a GELU MLP, both residual), then layernorm and project token features
back to patch pixels.

Conditioning uses a prepended class token rather than adaptive norms so
the condition token takes part in attention exactly like image tokens
and is perturbable by the same head-level hooks.  A dedicated null
class implements the unconditional branch for classifier-free guidance.

The output projection is zero-initialized, so a freshly initialized
model predicts exactly zero velocity everywhere.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import erf

from .attention import (
    NO_PERTURB,
    AttentionLayerWeights,
    PerturbSpec,
    multi_head_attention,
    multi_head_attention_layer,
)
from .tensor import Rng, layernorm_stats, matmul

__all__ = [
    "DitConfig",
    "DitWeights",
    "param_shapes",
    "init_weights",
    "patchify",
    "unpatchify",
    "gelu",
    "gelu_grad",
    "time_features",
    "dit_forward",
]

INIT_STD = 0.02

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class DitConfig:
    """Model hyperparameters.  Defaults are the desk-scale recipe:
    a 4-layer, 4-heads-per-layer transformer (16-head pool) on 16x16
    single-channel images cut into 2x2 patches, with 4 shape classes
    plus a dedicated null class for classifier-free guidance."""

    image_size: int = 16
    channels: int = 1
    patch: int = 2
    layers: int = 4
    heads_per_layer: int = 4
    model_dim: int = 64
    head_dim: int = 16
    mlp_ratio: int = 4
    class_count: int = 4

    def __post_init__(self):
        if self.model_dim != self.heads_per_layer * self.head_dim:
            raise ValueError(
                f"model_dim {self.model_dim} != heads_per_layer "
                f"{self.heads_per_layer} * head_dim {self.head_dim}"
            )
        if self.image_size % self.patch != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch {self.patch}"
            )
        if self.channels != 1:
            raise ValueError("only single-channel images are supported")
        for name in ("image_size", "patch", "layers", "heads_per_layer",
                     "model_dim", "head_dim", "mlp_ratio", "class_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def tokens_per_side(self) -> int:
        return self.image_size // self.patch

    @property
    def token_count(self) -> int:
        return self.tokens_per_side * self.tokens_per_side

    @property
    def seq_len(self) -> int:
        return self.token_count + 1  # one prepended condition token

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def null_class(self) -> int:
        return self.class_count

    @property
    def mlp_hidden(self) -> int:
        return self.model_dim * self.mlp_ratio

    @property
    def head_pool(self) -> int:
        return self.layers * self.heads_per_layer

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: DitConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter name -> shape map.  This order defines the
    initialization draw order and the checkpoint buffer layout."""
    d = cfg.model_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.w": (cfg.patch_dim, d),
        "patch_embed.b": (d,),
        "pos_embed": (cfg.seq_len, d),
        "class_embed": (cfg.class_count + 1, d),
        "time_mlp.w1": (d, d),
        "time_mlp.b1": (d,),
        "time_mlp.w2": (d, d),
        "time_mlp.b2": (d,),
    }
    for l in range(cfg.layers):
        p = f"layers.{l}"
        shapes[f"{p}.ln1.gain"] = (d,)
        shapes[f"{p}.ln1.bias"] = (d,)
        shapes[f"{p}.attn.wq"] = (cfg.heads_per_layer, d, cfg.head_dim)
        shapes[f"{p}.attn.wk"] = (cfg.heads_per_layer, d, cfg.head_dim)
        shapes[f"{p}.attn.wv"] = (cfg.heads_per_layer, d, cfg.head_dim)
        shapes[f"{p}.attn.wo"] = (cfg.heads_per_layer * cfg.head_dim, d)
        shapes[f"{p}.ln2.gain"] = (d,)
        shapes[f"{p}.ln2.bias"] = (d,)
        shapes[f"{p}.mlp.w1"] = (d, cfg.mlp_hidden)
        shapes[f"{p}.mlp.b1"] = (cfg.mlp_hidden,)
        shapes[f"{p}.mlp.w2"] = (cfg.mlp_hidden, d)
        shapes[f"{p}.mlp.b2"] = (d,)
    shapes["final_ln.gain"] = (d,)
    shapes["final_ln.bias"] = (d,)
    shapes["out_proj.w"] = (d, cfg.patch_dim)
    shapes["out_proj.b"] = (cfg.patch_dim,)
    return shapes


class DitWeights:
    """Named parameter store for the model.

    Parameters live in an ordered dict of float64 arrays whose names
    and shapes must match :func:`param_shapes` for the config.  The
    same dict drives the optimizer, gradients, and checkpoints.
    """

    def __init__(self, config: DitConfig, params: dict[str, np.ndarray]):
        expected = param_shapes(config)
        if list(params.keys()) != list(expected.keys()):
            raise ValueError(
                "parameter names do not match the config "
                f"(got {len(params)}, expected {len(expected)})"
            )
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(
                    f"parameter {name}: shape {params[name].shape} != {shape}"
                )
        self.config = config
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def copy(self) -> "DitWeights":
        return DitWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    def attn(self, layer: int) -> AttentionLayerWeights:
        p = f"layers.{layer}.attn"
        return AttentionLayerWeights(
            wq=self.params[f"{p}.wq"],
            wk=self.params[f"{p}.wk"],
            wv=self.params[f"{p}.wv"],
            wo=self.params[f"{p}.wo"],
        )

    def allclose(self, other: "DitWeights") -> bool:
        return all(
            np.array_equal(v, other.params[k]) for k, v in self.params.items()
        )


def init_weights(cfg: DitConfig, seed: int = 0) -> DitWeights:
    """Seeded initialization: projections and embeddings from a normal
    with std 0.02, layernorm gains one, all biases zero, and the output
    projection zero so the fresh model predicts zero velocity.  Draws
    happen in param_shapes order, which fixes the stream layout."""
    rng = Rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("out_proj."):
            params[name] = np.zeros(shape)
        elif leaf == "gain":
            params[name] = np.ones(shape)
        elif leaf in ("b", "b1", "b2", "bias"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(shape) * INIT_STD
    return DitWeights(cfg, params)


def patchify(img: np.ndarray, patch: int = 2) -> np.ndarray:
    """[..., H, W] image -> [..., (H/p)(W/p), p*p] token array.

    Tokens enumerate patches row-major; slots enumerate pixels within a
    patch row-major, so pixel (0, 1) lands in token 0, slot 1.  The
    inverse is :func:`unpatchify`; the round trip is bit-exact.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    if h % patch or w % patch:
        raise ValueError(f"patchify: image {h}x{w} not divisible by patch {patch}")
    lead = img.shape[:-2]
    gh, gw = h // patch, w // patch
    x = img.reshape(lead + (gh, patch, gw, patch))
    x = np.moveaxis(x, -3, -2)  # [..., gh, gw, p, p]
    return x.reshape(lead + (gh * gw, patch * patch))


def unpatchify(tokens: np.ndarray, image_size: int = 16, patch: int = 2) -> np.ndarray:
    """Inverse of :func:`patchify` back to [..., image_size, image_size]."""
    tokens = np.asarray(tokens, dtype=np.float64)
    g = image_size // patch
    n, s = tokens.shape[-2:]
    if n != g * g or s != patch * patch:
        raise ValueError(
            f"unpatchify: token array {tokens.shape[-2:]} does not match "
            f"image_size {image_size}, patch {patch}"
        )
    lead = tokens.shape[:-2]
    x = tokens.reshape(lead + (g, g, patch, patch))
    x = np.moveaxis(x, -2, -3)  # [..., g, p, g, p]
    return x.reshape(lead + (image_size, image_size))


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU x * Phi(x) via the error function."""
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx GELU = Phi(x) + x * phi(x)."""
    phi = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * phi


def time_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of t in [0, 1]: sin / cos at dim/2 log-spaced
    frequencies between 1 and 1000 rad."""
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), half))
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _ln_cached(x, gain, bias, store: dict | None, key: str):
    xhat, inv_std = layernorm_stats(x)
    if store is not None:
        store[key] = {"xhat": xhat, "inv_std": inv_std}
    return xhat * gain + bias


def _normalize_cond(cond, batch: int, cfg: DitConfig) -> np.ndarray:
    """cond may be None (null class), an int id, or an int array [B]."""
    if cond is None:
        idx = np.full(batch, cfg.null_class, dtype=np.int64)
    elif np.isscalar(cond) or isinstance(cond, np.integer):
        idx = np.full(batch, int(cond), dtype=np.int64)
    else:
        idx = np.asarray(cond, dtype=np.int64)
        if idx.shape != (batch,):
            raise ValueError(f"cond array shape {idx.shape} != ({batch},)")
    if idx.min() < 0 or idx.max() > cfg.null_class:
        raise ValueError(
            f"invalid class id in cond: valid range is 0..{cfg.class_count - 1} "
            f"plus null class {cfg.null_class}"
        )
    return idx


def dit_forward(
    weights: DitWeights,
    x_t: np.ndarray,
    t,
    cond,
    spec: PerturbSpec = NO_PERTURB,
    layer_oracle: frozenset = frozenset(),
    cache: dict | None = None,
) -> np.ndarray:
    """Velocity prediction for x_t at time t under condition cond.

    Parameters
    ----------
    x_t : ndarray [16, 16] or [B, 16, 16]
    t : scalar in [0, 1], or array [B]
    cond : None (null class), int class id, or int array [B]
    spec : PerturbSpec
        Head-selective attention perturbation for this pass.
    layer_oracle : frozenset of int
        Layers forced through the layer-level perturbation path, which
        transforms every head using spec's method regardless of
        spec.heads.  Used by the layer/head equivalence checks.
    cache : dict, optional
        When given, filled with every intermediate the manual backward
        pass needs.  Only the unperturbed forward is differentiated, so
        callers requesting a cache pass spec=NO_PERTURB.

    The prediction is deterministic: same inputs, same bits.
    """
    cfg = weights.config
    p = weights.params

    x_t = np.asarray(x_t, dtype=np.float64)
    single = x_t.ndim == 2
    if single:
        x_t = x_t[None]
    if x_t.shape[-2:] != (cfg.image_size, cfg.image_size):
        raise ValueError(f"dit_forward: image shape {x_t.shape[-2:]} != config")
    batch = x_t.shape[0]

    t_arr = np.asarray(t, dtype=np.float64)
    if t_arr.ndim == 0:
        t_arr = np.full(batch, float(t_arr))
    if t_arr.min() < 0.0 or t_arr.max() > 1.0:
        raise ValueError(f"t must lie in [0, 1], got range "
                         f"[{t_arr.min()}, {t_arr.max()}]")

    cond_idx = _normalize_cond(cond, batch, cfg)

    for hid in spec.heads:
        if hid.layer >= cfg.layers or hid.head >= cfg.heads_per_layer:
            raise ValueError(f"HeadId out of range for config: {hid}")
    for l in layer_oracle:
        if not 0 <= l < cfg.layers:
            raise ValueError(f"layer_oracle index out of range: {l}")

    store = cache if cache is not None else None

    # Embed: patches -> tokens, prepend class token, add position + time.
    patches = patchify(x_t, cfg.patch)
    tok = matmul(patches, p["patch_embed.w"]) + p["patch_embed.b"]
    cls = p["class_embed"][cond_idx]
    x = np.concatenate([cls[:, None, :], tok], axis=1)
    x = x + p["pos_embed"]
    tf = time_features(t_arr, cfg.model_dim)
    th = matmul(tf, p["time_mlp.w1"]) + p["time_mlp.b1"]
    tg = gelu(th)
    temb = matmul(tg, p["time_mlp.w2"]) + p["time_mlp.b2"]
    x = x + temb[:, None, :]

    if store is not None:
        store.update(
            patches=patches, cond=cond_idx, time_feats=tf, time_h=th,
            time_g=tg, layers=[],
        )

    for l in range(cfg.layers):
        lp = f"layers.{l}"
        lstore: dict | None = {} if store is not None else None
        a_in = _ln_cached(x, p[f"{lp}.ln1.gain"], p[f"{lp}.ln1.bias"], lstore, "ln1")
        attn_cache: dict | None = {} if lstore is not None else None
        if l in layer_oracle:
            y = multi_head_attention_layer(a_in, a_in, a_in, weights.attn(l), spec)
        else:
            y = multi_head_attention(
                a_in, a_in, a_in, weights.attn(l), l, spec, cache=attn_cache
            )
        x = x + y
        m_in = _ln_cached(x, p[f"{lp}.ln2.gain"], p[f"{lp}.ln2.bias"], lstore, "ln2")
        mh = matmul(m_in, p[f"{lp}.mlp.w1"]) + p[f"{lp}.mlp.b1"]
        mg = gelu(mh)
        x = x + matmul(mg, p[f"{lp}.mlp.w2"]) + p[f"{lp}.mlp.b2"]
        if lstore is not None:
            lstore.update(a_in=a_in, attn=attn_cache, m_in=m_in, mlp_h=mh, mlp_g=mg)
            store["layers"].append(lstore)

    xf = _ln_cached(x, p["final_ln.gain"], p["final_ln.bias"], store, "final_ln")
    if store is not None:
        store["x_final"] = xf
    out_tok = matmul(xf[:, 1:, :], p["out_proj.w"]) + p["out_proj.b"]
    v = unpatchify(out_tok, cfg.image_size, cfg.patch)
    return v[0] if single else v

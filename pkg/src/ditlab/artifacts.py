"""All persistence: checkpoints, PGM export, ledgers, selection docs.

Every writer here is byte-deterministic given identical inputs: no
timestamps, no locale formatting, LF line endings, floats rendered
with repr (shortest round-trip form).  That keeps golden-file tests
and rerun-identity checks meaningful.

The checkpoint container is a JSON header inside a binary file: the
metadata stays human-inspectable (`head -c 400 model.ckpt`) while the
parameter payload round-trips bit-exactly.  Layout:

    bytes 0..7    magic "DITCKPT1"
    bytes 8..11   header length, 32-bit little-endian
    header        UTF-8 JSON: model config + ordered (name, shape) list
    payload       little-endian float64 buffers, concatenated in
                  header order

Images are exported as binary PGM (P5): no compression dependencies,
so golden bytes are stable across platforms.  The pixel mapping is an
affine remap of the sampler's [-3, 3] working range onto 0..255 with
round-half-up.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .attention import HeadId, PerturbSpec
from .model import DitConfig, DitWeights, param_shapes
from .tensor import require_finite

__all__ = [
    "CheckpointError",
    "CheckpointMagicError",
    "CheckpointTruncatedError",
    "CheckpointShapeError",
    "SelectionFormatError",
    "save_checkpoint",
    "load_checkpoint",
    "write_pgm",
    "montage",
    "selection_doc",
    "load_selection",
    "write_ledger_csv",
    "write_trajectory_csv",
    "write_run_config",
]

MAGIC = b"DITCKPT1"
SELECTION_FORMAT = "ditlab-selection-v1"


class CheckpointError(ValueError):
    """Base class for malformed checkpoint files."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the checkpoint magic bytes."""


class CheckpointTruncatedError(CheckpointError):
    """Payload size disagrees with the header-declared element count."""


class CheckpointShapeError(CheckpointError):
    """Header-declared parameters do not match the declared config."""


class SelectionFormatError(ValueError):
    """Selection document is missing fields or malformed."""


def save_checkpoint(weights: DitWeights, path) -> None:
    """Serialize weights; save -> load -> save is byte-identical."""
    names = list(param_shapes(weights.config))
    header = {
        "format_version": 1,
        "config": weights.config.to_dict(),
        "params": [[name, list(weights.params[name].shape)] for name in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(weights.params[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> DitWeights:
    """Parse a checkpoint back into DitWeights.

    Raises CheckpointMagicError, CheckpointTruncatedError, or
    CheckpointShapeError so callers can tell a wrong file from a cut
    download from a config mismatch.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC):
        raise CheckpointMagicError(f"{path}: file shorter than the magic prefix")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointMagicError(
            f"{path}: bad magic {data[: len(MAGIC)]!r}, expected {MAGIC!r}"
        )
    if len(data) < len(MAGIC) + 4:
        raise CheckpointTruncatedError(f"{path}: missing header length field")
    (header_len,) = struct.unpack_from("<I", data, len(MAGIC))
    body = len(MAGIC) + 4
    if len(data) < body + header_len:
        raise CheckpointTruncatedError(
            f"{path}: header declares {header_len} bytes, "
            f"only {len(data) - body} present"
        )
    try:
        header = json.loads(data[body : body + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: header is not valid JSON: {exc}") from exc
    try:
        config = DitConfig(**header["config"])
        declared = [(str(n), tuple(int(d) for d in s)) for n, s in header["params"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from exc
    expected = [(n, s) for n, s in param_shapes(config).items()]
    if declared != expected:
        raise CheckpointShapeError(
            f"{path}: declared parameters do not match the config layout"
        )
    payload = data[body + header_len :]
    total = sum(int(np.prod(s)) for _, s in declared)
    if len(payload) != total * 8:
        raise CheckpointTruncatedError(
            f"{path}: payload holds {len(payload)} bytes, "
            f"header requires {total * 8}"
        )
    params = {}
    offset = 0
    for name, shape in declared:
        count = int(np.prod(shape))
        flat = np.frombuffer(payload, dtype="<f8", count=count, offset=offset * 8)
        params[name] = flat.reshape(shape).astype(np.float64)
        offset += count
    return DitWeights(config, params)


def write_pgm(img: np.ndarray, path) -> None:
    """Export an image as binary PGM (P5, maxval 255).

    Pixel mapping: clamp (v + 3) / 6 to [0, 1], scale to 255, round
    half up.  So -3 -> 0, 0 -> 128, +3 -> 255.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"write_pgm expects a 2-d image, got shape {img.shape}")
    require_finite(img, "pgm image")
    unit = np.clip((img + 3.0) / 6.0, 0.0, 1.0)
    pixels = np.floor(unit * 255.0 + 0.5).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def montage(images, pad: int = 1, fill: float = 3.0) -> np.ndarray:
    """Concatenate same-shaped images into one horizontal strip.

    Separator columns use `fill` in the sampler's [-3, 3] range (the
    default renders white).  Meant to be fed straight to write_pgm.
    """
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise ValueError("montage needs at least one image")
    shape = images[0].shape
    for im in images:
        if im.shape != shape:
            raise ValueError(f"montage images disagree: {im.shape} vs {shape}")
    sep = np.full((shape[0], pad), fill)
    parts = []
    for i, im in enumerate(images):
        if i:
            parts.append(sep)
        parts.append(im)
    return np.concatenate(parts, axis=1)


def _round_digests(state, k: int):
    digests = []
    for r, ranking in enumerate(state.ledger):
        picked = min(k, len(ranking))
        best_head, best_score = ranking[0]
        digests.append(
            {
                "round": r + 1,
                "candidates": len(ranking),
                "picked": [[h.layer, h.head] for h, _ in ranking[:picked]],
                "best": [best_head.layer, best_head.head, best_score],
            }
        )
    return digests


def selection_doc(state, cfg, path) -> dict:
    """Persist a finished search as JSON; returns the document.

    Holds the search config echo, the ordered selected heads, and a
    per-round digest of the ledger (the full ledger belongs in the CSV
    written by write_ledger_csv).  Raises ValueError on an empty
    search: a selection with no completed rounds has nothing to apply.
    """
    if not state.ledger:
        raise ValueError("selection_doc: search ran no rounds")
    doc = {
        "format": SELECTION_FORMAT,
        "config": {
            "k": cfg.k,
            "rounds": cfg.rounds,
            "method": cfg.method,
            "u": cfg.u,
            "tau": cfg.tau,
            "objective": cfg.objective,
            "pairs": [[c, s] for c, s in cfg.pairs],
            "guidance": {
                "w_cfg": cfg.guidance.w_cfg,
                "w_pert": cfg.guidance.w_pert,
                "steps": cfg.guidance.steps,
                "pert_anchor": cfg.guidance.pert_anchor,
            },
        },
        "selected": [[h.layer, h.head] for h in state.selected],
        "rounds": _round_digests(state, cfg.k),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return doc


def load_selection(path):
    """Read a selection document back.

    Returns (heads, spec, doc): the ordered head tuple, a PerturbSpec
    ready for the sampler, and the raw document.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SelectionFormatError(f"{path}: not valid JSON: {exc}") from exc
    try:
        if doc["format"] != SELECTION_FORMAT:
            raise SelectionFormatError(
                f"{path}: unknown format {doc['format']!r}"
            )
        heads = tuple(HeadId(int(l), int(h)) for l, h in doc["selected"])
        cfg = doc["config"]
        spec = PerturbSpec(
            frozenset(heads), cfg["method"], float(cfg["u"]), float(cfg["tau"])
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SelectionFormatError):
            raise
        raise SelectionFormatError(f"{path}: malformed document: {exc}") from exc
    return heads, spec, doc


def write_ledger_csv(state, path) -> None:
    """Dump the full per-round ledger: round,layer,head,score,rank.

    Rounds and ranks are 1-based; scores use repr so every row
    re-parses to the exact float.
    """
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("round,layer,head,score,rank\n")
        for r, ranking in enumerate(state.ledger):
            for rank, (head, sc) in enumerate(ranking):
                fh.write(f"{r + 1},{head.layer},{head.head},{sc!r},{rank + 1}\n")


def write_trajectory_csv(result, baseline, path) -> None:
    """Per-node sampling statistics next to an unguided twin run.

    Columns: step, t, mean, std, l2_to_unguided, where the L2 distance
    compares like-indexed states of the guided and baseline runs.
    Both runs must share the step count (same node times).
    """
    if len(result.states) != len(baseline.states):
        raise ValueError(
            "trajectory runs disagree: "
            f"{len(result.states)} vs {len(baseline.states)} states"
        )
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("step,t,mean,std,l2_to_unguided\n")
        for i, (x, t) in enumerate(zip(result.states, result.ts)):
            dist = float(np.sqrt(np.sum((x - baseline.states[i]) ** 2)))
            fh.write(
                f"{i},{t!r},{float(np.mean(x))!r},{float(np.std(x))!r},{dist!r}\n"
            )


def write_run_config(config: dict, path) -> None:
    """Persist the flags a run was invoked with, for reproducibility."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(config, fh, sort_keys=True, indent=2)
        fh.write("\n")

"""Programmatic image objectives used to score generated samples.

These closed-form scorers stand in for learned reward models in the
head-selection search: each one is a pure, total function of a finite
image, so every search result can be re-derived exactly.

===================  ===================================================
objective            definition
===================  ===================================================
brightness           mean pixel value
darkness             negated brightness
sharpness            mean |forward difference| over both axes
h_symmetry           -mean |img - mirror(img)| (0 is perfect symmetry)
template_corr:<c>    Pearson correlation with class c's clean template
class_consistency    1 if the best-correlated template matches the
                     condition, else 0
===================  ===================================================

Template matching uses Pearson correlation rather than a raw dot
product so it is invariant to affine brightness shifts; brightness-like
and structure-like objectives therefore pull in independent directions.
"""

from __future__ import annotations

import numpy as np

from . import data

__all__ = ["list_objectives", "score", "pearson"]

_BASE = ("brightness", "darkness", "sharpness", "h_symmetry", "class_consistency")


def list_objectives() -> tuple[str, ...]:
    """All valid objective ids, including one template_corr per class."""
    return _BASE[:-1] + tuple(
        f"template_corr:{name}" for name in data.CLASSES
    ) + (_BASE[-1],)


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two equal-size arrays; 0.0 when either
    side has zero variance (correlation is undefined there)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"pearson: sizes disagree {a.size} vs {b.size}")
    ac = a - a.mean()
    bc = b - b.mean()
    va = float(ac @ ac)
    vb = float(bc @ bc)
    if va == 0.0 or vb == 0.0:
        return 0.0
    return float(ac @ bc) / np.sqrt(va * vb)


def _template(selector: str) -> np.ndarray:
    return data.templates()[data.class_id(
        int(selector) if selector.isdigit() else selector
    )]


def score(objective: str, img: np.ndarray, cond=None) -> float:
    """Score one image under the named objective.

    Parameters
    ----------
    objective : str
        An id from :func:`list_objectives`; template_corr takes its
        class as a suffix, by name or id (e.g. "template_corr:circle").
    img : ndarray [16, 16], finite
    cond : int or None
        The generating condition; only class_consistency reads it, and
        it must then be a concrete class id (not None, not the null
        class).
    """
    img = np.asarray(img, dtype=np.float64)
    if objective == "brightness":
        return float(img.mean())
    if objective == "darkness":
        return -float(img.mean())
    if objective == "sharpness":
        dx = np.abs(np.diff(img, axis=1))
        dy = np.abs(np.diff(img, axis=0))
        return float((dx.sum() + dy.sum()) / (dx.size + dy.size))
    if objective == "h_symmetry":
        return -float(np.abs(img - img[:, ::-1]).mean())
    if objective.startswith("template_corr:"):
        return pearson(img, _template(objective.split(":", 1)[1]))
    if objective == "class_consistency":
        if cond is None or cond == data.NULL_CLASS:
            raise ValueError("class_consistency requires a concrete class id")
        corrs = [pearson(img, tmpl) for tmpl in data.templates()]
        return 1.0 if int(np.argmax(corrs)) == int(cond) else 0.0
    raise ValueError(f"unknown objective {objective!r}")

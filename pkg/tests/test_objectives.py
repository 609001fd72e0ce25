"""Image-statistic objectives against scalar-loop oracles and the
closed-form examples."""

import numpy as np
import pytest

from ditlab.data import render, templates
from ditlab.objectives import list_objectives, pearson, score
from ditlab.tensor import Rng


def scalar_pearson(a, b):
    a = a.ravel()
    b = b.ravel()
    ma = sum(a) / len(a)
    mb = sum(b) / len(b)
    num = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    da = sum((x - ma) ** 2 for x in a) ** 0.5
    db = sum((y - mb) ** 2 for y in b) ** 0.5
    return num / (da * db)


def test_listing_contains_every_family():
    names = list_objectives()
    assert "brightness" in names and "class_consistency" in names
    assert "template_corr:circle" in names
    assert len([n for n in names if n.startswith("template_corr:")]) == 4


def test_constant_image_scores():
    img = np.full((16, 16), 0.5)
    assert score("brightness", img) == 0.5
    assert score("darkness", img) == -0.5
    assert score("sharpness", img) == 0.0
    assert score("h_symmetry", img) == 0.0


def test_brightness_darkness_sum_to_zero():
    for seed in range(5):
        img = Rng(seed).uniform(256).reshape(16, 16)
        assert score("brightness", img) + score("darkness", img) == 0.0


def test_template_self_correlation_is_one():
    for i, name in enumerate(("circle", "square", "cross", "stripes")):
        assert score(f"template_corr:{name}", templates()[i]) == pytest.approx(1.0)


def test_pearson_matches_scalar_oracle():
    rng = Rng(9)
    a, b = rng.normal((16, 16)), rng.normal((16, 16))
    assert pearson(a, b) == pytest.approx(scalar_pearson(a, b), abs=1e-12)
    assert score("template_corr:square", a) == pytest.approx(
        scalar_pearson(a, render("square")), abs=1e-12
    )


def test_pearson_zero_variance_returns_zero():
    assert pearson(np.ones((4, 4)), np.arange(16.0).reshape(4, 4)) == 0.0


def test_pearson_affine_invariance():
    rng = Rng(10)
    img = rng.uniform(256).reshape(16, 16)
    base = score("template_corr:cross", img)
    assert score("template_corr:cross", img * 3.0 + 0.2) == pytest.approx(
        base, abs=1e-12
    )


def test_sharpness_counts_forward_differences():
    img = np.zeros((16, 16))
    img[:, 8:] = 1.0  # one vertical edge: 16 horizontal jumps of 1
    # normalization is over all 2*16*15 difference slots
    assert score("sharpness", img) == pytest.approx(16.0 / 480.0, abs=1e-15)


def test_h_symmetry_penalizes_asymmetry():
    img = np.zeros((16, 16))
    img[:, 0] = 1.0
    assert score("h_symmetry", img) < 0.0
    assert score("h_symmetry", render("cross")) == 0.0


def test_class_consistency_picks_argmax():
    assert score("class_consistency", templates()[2], 2) == 1.0
    assert score("class_consistency", templates()[2], 1) == 0.0


def test_class_consistency_requires_condition():
    with pytest.raises(ValueError):
        score("class_consistency", templates()[0], None)
    with pytest.raises(ValueError):
        score("class_consistency", templates()[0], 4)


def test_template_selector_by_digit():
    img = Rng(11).uniform(256).reshape(16, 16)
    assert score("template_corr:1", img) == score("template_corr:square", img)


def test_unknown_objective_rejected():
    with pytest.raises(ValueError, match="sparkle"):
        score("sparkle", np.zeros((16, 16)))


def test_scorers_total_on_finite_inputs():
    wild = Rng(12).normal((16, 16)) * 1e6
    for name in ("brightness", "darkness", "sharpness", "h_symmetry",
                 "template_corr:stripes"):
        assert np.isfinite(score(name, wild))

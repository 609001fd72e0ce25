"""Two orthogonal strength knobs: guidance scale w vs interpolation u.

Sweeps soft_pag on all heads of layer 1 over a small (w, u) grid and
prints the brightness matrix.  The u=0 column is exactly constant (the
mix returns the original map bit-for-bit, so there is nothing to
extrapolate from, whatever w is); everywhere else the two knobs trade
off against each other.
"""

import os
from dataclasses import replace

from ditlab.artifacts import load_checkpoint
from ditlab.attention import HeadId, PerturbSpec
from ditlab.model import DitConfig, init_weights
from ditlab.objectives import score
from ditlab.sampler import GuidanceConfig, sample
from ditlab.train import randomize_output_projection

OUT = os.path.join(os.path.dirname(__file__), "out")
CKPT = os.path.join(OUT, "model.ckpt")

W_GRID = (0.0, 1.0, 3.0, 6.0)
U_GRID = (0.0, 0.25, 0.5, 1.0)


def load_weights():
    if os.path.exists(CKPT):
        print(f"using trained checkpoint {CKPT}")
        return load_checkpoint(CKPT)
    print("no checkpoint found (run demo 02 first for a trained one)")
    return randomize_output_projection(init_weights(DitConfig(), seed=0), seed=1)


def main():
    weights = load_weights()
    heads = frozenset(HeadId(1, h) for h in range(weights.config.heads_per_layer))
    base = GuidanceConfig(cond=0, steps=20, seed=7)

    print()
    print("brightness over the (w, u) grid, soft_pag on layer 1:")
    print("  w\\u " + "".join(f"{u:>8.2f}" for u in U_GRID))
    best = None
    for w in W_GRID:
        row = []
        for u in U_GRID:
            spec = PerturbSpec(heads, "soft_pag", u=u)
            img = sample(weights, replace(base, w_pert=w), spec).image
            value = score("brightness", img, base.cond)
            row.append(value)
            if best is None or value > best[0]:
                best = (value, w, u)
        print(f"  {w:4.1f}" + "".join(f"{v:>8.3f}" for v in row))

    print()
    print(f"best cell: w={best[1]} u={best[2]} brightness={best[0]:.3f}")


if __name__ == "__main__":
    main()

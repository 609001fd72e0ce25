"""Baseline vs head-perturbation guidance, side by side.

Loads demos/out/model.ckpt if demo 02 produced one (otherwise falls
back to an untrained model with a randomized output projection, which
still shows the mechanics).  Samples one image per guidance scale with
PAG on all heads of layer 1 and writes a montage: leftmost panel is
the unguided baseline, then w_pert = 1, 3, 6.
"""

import os

from ditlab.artifacts import load_checkpoint, montage, write_pgm
from ditlab.attention import HeadId, PerturbSpec
from ditlab.model import DitConfig, init_weights
from ditlab.sampler import GuidanceConfig, sample
from ditlab.train import randomize_output_projection

OUT = os.path.join(os.path.dirname(__file__), "out")
CKPT = os.path.join(OUT, "model.ckpt")


def load_weights():
    if os.path.exists(CKPT):
        print(f"using trained checkpoint {CKPT}")
        return load_checkpoint(CKPT)
    print("no checkpoint found (run demo 02 first for a trained one)")
    return randomize_output_projection(init_weights(DitConfig(), seed=0), seed=1)


def main():
    os.makedirs(OUT, exist_ok=True)
    weights = load_weights()
    heads = frozenset(
        HeadId(1, h) for h in range(weights.config.heads_per_layer)
    )
    spec = PerturbSpec(heads, "pag")

    panels = []
    for w_pert in (0.0, 1.0, 3.0, 6.0):
        g = GuidanceConfig(w_pert=w_pert, cond=0, steps=20, seed=7)
        result = sample(weights, g, spec)
        panels.append(result.image)
        span = result.image.max() - result.image.min()
        print(f"w_pert={w_pert:3.1f}  mean {result.image.mean():+.3f}  "
              f"span {span:.3f}")

    path = os.path.join(OUT, "guidance_strip.pgm")
    write_pgm(montage(panels), path)
    print(f"wrote {path} (baseline, then w_pert = 1, 3, 6)")


if __name__ == "__main__":
    main()

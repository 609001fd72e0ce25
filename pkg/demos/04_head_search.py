"""Greedy head search against the brightness objective.

Runs three rounds of k=1 selection over all 16 heads, printing the
per-round ranking as it goes, then replays the cumulative selections
to show the objective climbing.  Uses the demo-02 checkpoint when
available; the search itself is identical either way.
"""

import os

from ditlab.artifacts import load_checkpoint
from ditlab.model import DitConfig, init_weights
from ditlab.sampler import GuidanceConfig
from ditlab.search import SearchConfig, evaluate_selection, headhunter
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
    weights = load_weights()
    cfg = SearchConfig(
        k=1,
        rounds=3,
        pairs=((0, 11), (1, 12), (2, 13), (3, 14)),
        guidance=GuidanceConfig(w_pert=3.0, steps=20),
        method="pag",
        objective="brightness",
        jobs=4,
    )
    state = headhunter(weights, cfg)

    for r, ranking in enumerate(state.ledger, start=1):
        head, best = ranking[0]
        print(f"round {r}: best {head.layer}:{head.head} at {best:.4f} "
              f"(worst of {len(ranking)} candidates: {ranking[-1][1]:.4f})")

    print()
    print("objective with the cumulative selection:")
    baseline = evaluate_selection(weights, (), cfg)
    print(f"  0 heads: {baseline:.4f} (unguided)")
    for r in range(1, len(state.selected) + 1):
        value = evaluate_selection(weights, state.selected[:r], cfg)
        print(f"  {r} heads: {value:.4f} ({value - baseline:+.4f})")


if __name__ == "__main__":
    main()

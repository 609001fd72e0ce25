"""Short training run on the shape dataset.

Trains the default 4-layer model for 300 steps (about a minute), which
is enough to watch the flow-matching loss fall well below its noise
floor at initialization.  Writes the checkpoint and loss curve next to
this script; demo 03/04/05 will pick the checkpoint up if present.

For the full recipe (3000 steps, loss roughly 10x lower) run:
    ditlab train --config demos/train_config.toml --out demos/out/model.ckpt
"""

import os

from ditlab.artifacts import save_checkpoint
from ditlab.data import make_dataset
from ditlab.model import DitConfig, init_weights
from ditlab.train import TrainConfig, train

OUT = os.path.join(os.path.dirname(__file__), "out")


def main():
    os.makedirs(OUT, exist_ok=True)
    images, labels, seeds = make_dataset(256, seed=0, noise_sigma=0.05)
    print(f"dataset: {len(images)} images, classes {sorted({int(c) for c in labels})}")

    weights = init_weights(DitConfig(), seed=0)
    cfg = TrainConfig(batch=32, steps=300, lr=1e-3, cfg_dropout=0.1, seed=0)
    result = train(
        weights, images, labels, cfg,
        loss_csv=os.path.join(OUT, "demo_loss.csv"),
        log_every=50, log_fn=print,
    )
    print(f"initial loss {result.initial_loss:.4f} -> final {result.final_loss:.4f}")

    ckpt = os.path.join(OUT, "model.ckpt")
    save_checkpoint(result.weights, ckpt)
    print(f"wrote {ckpt}")


if __name__ == "__main__":
    main()

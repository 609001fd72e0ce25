"""Tour of the attention perturbation operators on one random map.

Builds a 6-token attention map from seeded q/k, applies every method,
and prints what each one does to the rows: entropy (uniform raises it,
identity/argmax collapse it), row sums (always exactly 1), and where
the mass sits.  No model, no training; just the map algebra.
"""

import numpy as np

from ditlab.attention import (
    METHODS,
    PerturbSpec,
    apply_perturbation,
    attention_map,
    temperature_scale,
)
from ditlab.tensor import Rng


def entropy(a):
    p = np.clip(a, 1e-12, None)
    return float(-(p * np.log(p)).sum(axis=-1).mean())


def main():
    rng = Rng(0)
    n, d = 6, 4
    q, k = rng.normal((n, d)), rng.normal((n, d))
    a = attention_map(q, k)

    print(f"original map: {n} tokens, mean row entropy {entropy(a):.3f} "
          f"(uniform would be {np.log(n):.3f})")
    print()
    print(f"{'method':>18}  {'entropy':>7}  {'max row sum err':>15}")
    for method in METHODS:
        spec = PerturbSpec(method=method, u=0.5, tau=0.5)
        out = apply_perturbation(a, spec, q=q, k=k)
        err = np.abs(out.sum(axis=-1) - 1.0).max()
        print(f"{method:>18}  {entropy(out):7.3f}  {err:15.1e}")

    print()
    print("soft_pag walks from the original map (u=0) to identity (u=1):")
    for u in (0.0, 0.25, 0.5, 0.75, 1.0):
        out = apply_perturbation(a, PerturbSpec(method="soft_pag", u=u))
        diag = float(np.trace(out) / n)
        print(f"  u={u:4.2f}  mean diagonal {diag:.3f}")

    print()
    print("temperature sweeps between the same extremes:")
    for tau in (2.0**-6, 0.25, 1.0, 4.0, 2.0**20):
        out = temperature_scale(a, tau)
        print(f"  tau={tau:<9.4g} entropy {entropy(out):.3f}")


if __name__ == "__main__":
    main()

"""Operator surface: subcommands wiring the pipeline end to end.

    ditlab train    --config cfg.toml --out model.ckpt
    ditlab sample   --ckpt model.ckpt --cond circle --heads all --out out/
    ditlab headhunt --ckpt model.ckpt --objective brightness \
                    --k 3 --rounds 5 --pairs pairs.csv --out out/
    ditlab sweep    --ckpt model.ckpt --heads all --w-grid 0,1,2,4,6 \
                    --u-grid 0,0.25,0.5,0.75,1 --out sweep.csv
    ditlab inspect  --ckpt model.ckpt --selection out/selection.json

Exit codes: 0 ok, 2 usage or config error, 3 numeric failure
(divergence during training or sampling).  Every subcommand is
deterministic given its flags: artifacts carry no timestamps, so a
rerun with identical inputs produces byte-identical files.

Head sets are spelled as "all", a comma list "l:h,l:h", or a per-layer
wildcard "L3:*" (layer-level guidance is just a head set spanning the
layer, so there is no separate layer mode).  Pair files for headhunt
and sweep are CSV with header "cond,seed"; cond is a class name, a
class index, or "null" for unconditional.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import artifacts, data, objectives
from .attention import METHODS, HeadId, PerturbSpec
from .model import DitConfig, init_weights
from .sampler import GuidanceConfig, sample
from .search import SearchConfig, headhunter
from .train import TrainConfig, train

__all__ = ["main", "CliError"]


class CliError(Exception):
    """Usage or configuration problem; maps to exit code 2."""

    code = 2


# ---------------------------------------------------------------------------
# flag parsing helpers


def parse_heads(text: str, config: DitConfig) -> frozenset:
    """Parse the --heads grammar into a head set.

    Accepts "all", comma-separated "layer:head" entries, and the
    per-layer wildcard "L3:*" (the layer prefix letter is optional).
    """
    text = text.strip()
    if text.lower() == "all":
        return frozenset(
            HeadId(l, h)
            for l in range(config.layers)
            for h in range(config.heads_per_layer)
        )
    heads = set()
    if not text:
        raise CliError("--heads must not be empty (use 'all' or 'l:h,...')")
    for part in text.split(","):
        m = re.fullmatch(r"[Ll]?(\d+):(\d+|\*)", part.strip())
        if m is None:
            raise CliError(
                f"bad --heads entry {part.strip()!r}: expected 'l:h', 'L3:*', or 'all'"
            )
        layer = int(m.group(1))
        if layer >= config.layers:
            raise CliError(
                f"--heads layer {layer} out of range for {config.layers} layers"
            )
        if m.group(2) == "*":
            heads.update(HeadId(layer, h) for h in range(config.heads_per_layer))
        else:
            head = int(m.group(2))
            if head >= config.heads_per_layer:
                raise CliError(
                    f"--heads head {head} out of range for "
                    f"{config.heads_per_layer} heads per layer"
                )
            heads.add(HeadId(layer, head))
    return frozenset(heads)


def parse_cond(text: str):
    """Class name, class index, or null/none for unconditional."""
    text = text.strip()
    if text.lower() in ("null", "none", ""):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return data.class_id(text)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def parse_grid(text: str, flag: str) -> tuple:
    entries = [p.strip() for p in text.split(",") if p.strip()]
    if not entries:
        raise CliError(f"{flag}: grid must hold at least one value")
    try:
        return tuple(float(p) for p in entries)
    except ValueError as exc:
        raise CliError(f"{flag}: {exc}") from exc


def read_pairs(path) -> tuple:
    """Read a 'cond,seed' CSV of evaluation pairs."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except OSError as exc:
        raise CliError(f"cannot read pairs file: {exc}") from exc
    if not lines or lines[0].replace(" ", "").lower() != "cond,seed":
        raise CliError(f"{path}: first line must be the header 'cond,seed'")
    pairs = []
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != 2:
            raise CliError(f"{path}: bad pair row {ln!r}")
        try:
            seed = int(cells[1])
        except ValueError as exc:
            raise CliError(f"{path}: bad seed in row {ln!r}") from exc
        pairs.append((parse_cond(cells[0]), seed))
    if not pairs:
        raise CliError(f"{path}: no pairs after the header")
    return tuple(pairs)


def _check_objective(objective: str) -> None:
    """Cheap validation probe; unknown names become usage errors."""
    try:
        objectives.score(objective, np.zeros((data.SIZE, data.SIZE)), cond=0)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def _load_weights(path):
    try:
        return artifacts.load_checkpoint(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint: {exc}") from exc
    except artifacts.CheckpointError as exc:
        raise CliError(str(exc)) from exc


def _guidance_from(args, cond=0, seed=0) -> GuidanceConfig:
    return GuidanceConfig(
        w_cfg=args.w_cfg,
        w_pert=args.w_pert,
        cond=cond,
        steps=args.steps,
        seed=seed,
        pert_anchor=args.pert_anchor,
    )


def _cond_label(cond) -> str:
    return "null" if cond is None else str(cond)


# ---------------------------------------------------------------------------
# train


_TRAIN_KEYS = {"batch", "steps", "lr", "cfg_dropout", "seed"}
_TRAIN_OPTIONAL = {"beta1", "beta2", "adam_eps"}
_DATA_DEFAULTS = {"count": 256, "seed": 0, "noise_sigma": 0.05}


def _load_config_file(path) -> dict:
    try:
        if str(path).endswith(".json"):
            with open(path, "r", encoding="utf-8") as fh:
                return json.load(fh)
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}") from exc
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise CliError(f"{path}: parse error: {exc}") from exc


def _train_configs(doc: dict, path):
    """Turn a parsed config document into (TrainConfig, DitConfig, data)."""
    if "train" not in doc:
        raise CliError(f"{path}: config missing key 'train'")
    section = doc["train"]
    for key in sorted(_TRAIN_KEYS):
        if key not in section:
            raise CliError(f"{path}: config missing key 'train.{key}'")
    unknown = set(section) - _TRAIN_KEYS - _TRAIN_OPTIONAL
    if unknown:
        raise CliError(f"{path}: unknown train key(s): {sorted(unknown)}")

    model_section = dict(doc.get("model", {}))
    init_seed = model_section.pop("init_seed", 0)
    allowed = {f.name for f in fields(DitConfig)}
    unknown = set(model_section) - allowed
    if unknown:
        raise CliError(f"{path}: unknown model key(s): {sorted(unknown)}")

    data_section = dict(doc.get("data", {}))
    unknown = set(data_section) - set(_DATA_DEFAULTS)
    if unknown:
        raise CliError(f"{path}: unknown data key(s): {sorted(unknown)}")
    data_cfg = {**_DATA_DEFAULTS, **data_section}

    extra = set(doc) - {"train", "model", "data"}
    if extra:
        raise CliError(f"{path}: unknown config section(s): {sorted(extra)}")
    try:
        train_cfg = TrainConfig(**section)
        model_cfg = DitConfig(**model_section)
    except (TypeError, ValueError) as exc:
        raise CliError(f"{path}: {exc}") from exc
    return train_cfg, model_cfg, data_cfg, int(init_seed)


def cmd_train(args) -> int:
    doc = _load_config_file(args.config)
    train_cfg, model_cfg, data_cfg, init_seed = _train_configs(doc, args.config)
    if args.steps is not None:
        train_cfg = replace(train_cfg, steps=args.steps)

    images, labels, _ = data.make_dataset(
        data_cfg["count"], data_cfg["seed"], data_cfg["noise_sigma"]
    )
    weights = init_weights(model_cfg, seed=init_seed)
    loss_csv = os.path.splitext(args.out)[0] + "_loss.csv"
    result = train(
        weights, images, labels, train_cfg,
        loss_csv=loss_csv, log_every=200, log_fn=print,
    )
    artifacts.save_checkpoint(result.weights, args.out)
    print(
        f"trained {train_cfg.steps} steps: "
        f"initial loss {result.initial_loss:.4f}, final {result.final_loss:.4f}"
    )
    print(f"wrote {args.out} and {loss_csv}")
    return 0


# ---------------------------------------------------------------------------
# sample


def cmd_sample(args) -> int:
    weights = _load_weights(args.ckpt)
    heads = parse_heads(args.heads, weights.config)
    try:
        spec = PerturbSpec(heads, args.method, args.u, args.tau)
        g = _guidance_from(args, cond=parse_cond(args.cond), seed=args.seed)
    except ValueError as exc:
        raise CliError(str(exc)) from exc

    result = sample(weights, g, spec)
    baseline = sample(weights, replace(g, w_cfg=0.0, w_pert=0.0))

    os.makedirs(args.out, exist_ok=True)
    img_path = os.path.join(args.out, "sample.pgm")
    artifacts.write_pgm(result.image, img_path)
    artifacts.write_pgm(baseline.image, os.path.join(args.out, "baseline.pgm"))
    artifacts.write_trajectory_csv(
        result, baseline, os.path.join(args.out, "trajectory.csv")
    )
    artifacts.write_run_config(
        {
            "command": "sample",
            "cond": g.cond,
            "w_cfg": g.w_cfg,
            "w_pert": g.w_pert,
            "method": spec.method,
            "u": spec.u,
            "tau": spec.tau,
            "heads": sorted([h.layer, h.head] for h in heads),
            "steps": g.steps,
            "seed": g.seed,
            "pert_anchor": g.pert_anchor,
        },
        os.path.join(args.out, "run_config.json"),
    )
    print(f"wrote {img_path}")
    return 0


# ---------------------------------------------------------------------------
# headhunt


def _round_prefixes(state, k: int):
    """Cumulative selections after each round: [(), round1, round1+2, ...]."""
    prefixes = [()]
    taken = 0
    for ranking in state.ledger:
        taken += min(k, len(ranking))
        prefixes.append(state.selected[:taken])
    return prefixes


def cmd_headhunt(args) -> int:
    weights = _load_weights(args.ckpt)
    _check_objective(args.objective)
    pairs = read_pairs(args.pairs)
    try:
        cfg = SearchConfig(
            k=args.k,
            rounds=args.rounds,
            pairs=pairs,
            guidance=_guidance_from(args),
            method=args.method,
            u=args.u,
            tau=args.tau,
            objective=args.objective,
            jobs=args.jobs,
        )
    except ValueError as exc:
        raise CliError(str(exc)) from exc

    state = headhunter(weights, cfg)

    os.makedirs(args.out, exist_ok=True)
    artifacts.write_ledger_csv(state, os.path.join(args.out, "ledger.csv"))
    artifacts.selection_doc(state, cfg, os.path.join(args.out, "selection.json"))
    artifacts.write_run_config(
        {
            "command": "headhunt",
            "objective": cfg.objective,
            "k": cfg.k,
            "rounds": cfg.rounds,
            "method": cfg.method,
            "u": cfg.u,
            "tau": cfg.tau,
            "pairs": [[c, s] for c, s in cfg.pairs],
            "w_cfg": cfg.guidance.w_cfg,
            "w_pert": cfg.guidance.w_pert,
            "steps": cfg.guidance.steps,
            "pert_anchor": cfg.guidance.pert_anchor,
        },
        os.path.join(args.out, "run_config.json"),
    )

    # Round-wise curve and sample grids: round 0 is the unguided
    # baseline, round r applies the cumulative selection.
    curve_path = os.path.join(args.out, "rounds_curve.csv")
    with open(curve_path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("round,selected,objective\n")
        for r, prefix in enumerate(_round_prefixes(state, cfg.k)):
            spec = PerturbSpec(frozenset(prefix), cfg.method, cfg.u, cfg.tau)
            imgs, total = [], 0.0
            for cond, seed in cfg.pairs:
                g = replace(cfg.guidance, cond=cond, seed=seed)
                res = sample(weights, g, spec)
                imgs.append(res.image)
                total += objectives.score(cfg.objective, res.image, cond)
            mean = total / len(cfg.pairs)
            fh.write(f"{r},{len(prefix)},{mean!r}\n")
            artifacts.write_pgm(
                artifacts.montage(imgs),
                os.path.join(args.out, f"round{r}_samples.pgm"),
            )
            print(f"round {r}: {len(prefix)} heads, {cfg.objective} = {mean:.4f}")

    chain = " ".join(f"{h.layer}:{h.head}" for h in state.selected)
    print(f"selected {len(state.selected)} heads: {chain}")
    print(f"wrote ledger, selection, and per-round grids to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# sweep


def cmd_sweep(args) -> int:
    weights = _load_weights(args.ckpt)
    _check_objective(args.objective)
    heads = parse_heads(args.heads, weights.config)
    w_grid = parse_grid(args.w_grid, "--w-grid")
    u_grid = parse_grid(args.u_grid, "--u-grid")
    pairs = read_pairs(args.pairs) if args.pairs else ((0, 0),)

    tasks = [
        (w, u, cond, seed) for w in w_grid for u in u_grid for cond, seed in pairs
    ]

    def cell(task):
        w, u, cond, seed = task
        try:
            spec = PerturbSpec(heads, args.method, u, args.tau)
            g = replace(_guidance_from(args, cond=cond, seed=seed), w_pert=w)
        except ValueError as exc:
            raise CliError(str(exc)) from exc
        return objectives.score(args.objective, sample(weights, g, spec).image, cond)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as ex:
            scores = list(ex.map(cell, tasks))
    else:
        scores = [cell(t) for t in tasks]

    with open(args.out, "w", encoding="ascii", newline="\n") as fh:
        fh.write("w,u,cond,seed,score\n")
        for (w, u, cond, seed), sc in zip(tasks, scores):
            fh.write(f"{w!r},{u!r},{_cond_label(cond)},{seed},{sc!r}\n")

    # Aggregated matrix: rows are w, columns are u, cells the pair mean.
    by_cell = {}
    for (w, u, _, _), sc in zip(tasks, scores):
        by_cell.setdefault((w, u), []).append(sc)
    matrix_path = os.path.splitext(args.out)[0] + "_matrix.csv"
    best = None
    with open(matrix_path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("w/u," + ",".join(repr(u) for u in u_grid) + "\n")
        for w in w_grid:
            row = []
            for u in u_grid:
                mean = sum(by_cell[(w, u)]) / len(by_cell[(w, u)])
                row.append(mean)
                if best is None or mean > best[2]:
                    best = (w, u, mean)
            fh.write(repr(w) + "," + ",".join(repr(v) for v in row) + "\n")

    artifacts.write_run_config(
        {
            "command": "sweep",
            "objective": args.objective,
            "method": args.method,
            "tau": args.tau,
            "heads": sorted([h.layer, h.head] for h in heads),
            "w_grid": list(w_grid),
            "u_grid": list(u_grid),
            "pairs": [[c, s] for c, s in pairs],
            "w_cfg": args.w_cfg,
            "steps": args.steps,
            "pert_anchor": args.pert_anchor,
            "best": {"w": best[0], "u": best[1], "score": best[2]},
        },
        os.path.splitext(args.out)[0] + "_best.json",
    )
    print(f"best cell: w={best[0]!r} u={best[1]!r} {args.objective}={best[2]:.4f}")
    print(f"wrote {args.out} and {matrix_path}")
    return 0


# ---------------------------------------------------------------------------
# inspect


def _load_selection_checked(path, config):
    try:
        heads, spec, doc = artifacts.load_selection(path)
    except OSError as exc:
        raise CliError(f"cannot read selection: {exc}") from exc
    except artifacts.SelectionFormatError as exc:
        raise CliError(str(exc)) from exc
    for h in heads:
        if h.layer >= config.layers or h.head >= config.heads_per_layer:
            raise CliError(
                f"{path}: head {h.layer}:{h.head} out of range for this checkpoint"
            )
    return heads, spec, doc


def cmd_inspect(args) -> int:
    weights = _load_weights(args.ckpt)
    config = weights.config
    heads, spec, doc = _load_selection_checked(args.selection[0], config)

    histogram = [0] * config.layers
    for h in heads:
        histogram[h.layer] += 1
    chain = " ".join(f"{h.layer}:{h.head}" for h in heads)
    print(f"selection: {args.selection[0]}")
    print(f"method: {spec.method} (u={spec.u!r}, tau={spec.tau!r})")
    print(f"heads ({len(heads)}): {chain}")
    print(f"layer histogram: {histogram}")
    for entry in doc.get("rounds", []):
        best = entry["best"]
        print(
            f"round {entry['round']}: {entry['candidates']} candidates, "
            f"best {best[0]}:{best[1]} score {best[2]:.4f}"
        )

    for other_path in args.selection[1:]:
        other, _, _ = _load_selection_checked(other_path, config)
        a, b = set(heads), set(other)
        union = a | b
        pct = 100.0 * len(a & b) / len(union) if union else 0.0
        print(f"overlap with {other_path}: {pct:.1f}%")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_guidance_flags(p, w_pert_default=3.0):
    p.add_argument("--w-cfg", type=float, default=0.0,
                   help="class-conditional guidance scale (default 0)")
    p.add_argument("--w-pert", type=float, default=w_pert_default,
                   help=f"perturbation guidance scale (default {w_pert_default})")
    p.add_argument("--steps", type=int, default=20,
                   help="sampler steps (default 20)")
    p.add_argument("--pert-anchor", choices=("cond", "cfg"), default="cond",
                   help="prediction the perturbed branch extrapolates from")


def _add_method_flags(p, default="pag"):
    p.add_argument("--method", choices=METHODS, default=default,
                   help=f"perturbation method (default {default})")
    p.add_argument("--u", type=float, default=0.25,
                   help="interpolation strength for soft methods (default 0.25)")
    p.add_argument("--tau", type=float, default=1.0,
                   help="softmax temperature for method=temperature (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ditlab",
        description="Toy diffusion-transformer lab: train, sample with "
        "attention-perturbation guidance, search for effective heads.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("train", help="train a model from a TOML/JSON config")
    p.add_argument("--config", required=True, help="TOML or JSON config file")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--steps", type=int, default=None,
                   help="override train.steps from the config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw one guided sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cond", default="0", help="class name, index, or null")
    p.add_argument("--heads", default="all",
                   help='"all", "l:h,l:h", or "L3:*" (default all)')
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    _add_method_flags(p)
    _add_guidance_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("headhunt", help="greedy head search against an objective")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--objective", default="brightness")
    p.add_argument("--k", type=int, default=3, help="heads added per round")
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--pairs", required=True,
                   help="CSV of evaluation pairs with header cond,seed")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel candidate evaluations (fixed-order reduction)")
    p.add_argument("--out", required=True, help="output directory")
    _add_method_flags(p)
    _add_guidance_flags(p)
    p.set_defaults(func=cmd_headhunt)

    p = sub.add_parser("sweep", help="objective over a (w, u) grid")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--heads", required=True)
    p.add_argument("--w-grid", required=True, help='e.g. "0,1,2,4,6"')
    p.add_argument("--u-grid", required=True, help='e.g. "0,0.25,0.5,0.75,1"')
    p.add_argument("--objective", default="brightness")
    p.add_argument("--pairs", default=None,
                   help="optional pairs CSV (default: cond 0, seed 0)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="per-pair CSV output path")
    p.add_argument("--method", choices=METHODS, default="soft_pag",
                   help="perturbation method (default soft_pag)")
    p.add_argument("--tau", type=float, default=1.0)
    _add_guidance_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect", help="summarize a selection document")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--selection", required=True, action="append",
                   help="selection JSON; repeat to report head-set overlap")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code is None else int(exc.code)
    if getattr(args, "func", None) is None:
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except CliError as exc:
        print(f"ditlab: error: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, ValueError) as exc:
        print(f"ditlab: error: {exc}", file=sys.stderr)
        return 2
    except ArithmeticError as exc:
        print(f"ditlab: numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Iterative objective-aware head selection plus its brute-force oracle.

Each round scores every remaining candidate head joined with the
already-selected set: the candidate spec is sampled over the M
configured (condition, seed) pairs, the objective is averaged, and the
top-k candidates (ties broken lexicographically by (layer, head))
join the selection in score order.  Repeat for R rounds or until the
pool is exhausted; a pool smaller than k contributes all its remaining
heads and ends the search.

Candidate evaluation is a pure function of (weights, selected set,
candidate, config), so rounds may fan out over worker threads; scores
are always reduced in fixed candidate order, keeping results identical
at any jobs setting.  A candidate whose sampler diverges scores -inf
and is logged rather than aborting the round, and the full per-round
ledger of (head, score) rows is kept so any entry can be re-derived
exactly.

The exhaustive single-head oracle scores every head alone; by
construction its top-k equals round 1 of the greedy search, which the
acceptance suite asserts.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

from .attention import METHODS, HeadId, PerturbSpec
from .model import DitWeights
from .objectives import score
from .sampler import GuidanceConfig, sample

__all__ = [
    "SearchConfig",
    "SearchState",
    "initial_state",
    "evaluate_selection",
    "evaluate_candidate",
    "run_round",
    "headhunter",
    "exhaustive_single_head",
]

log = logging.getLogger("ditlab.search")


@dataclass(frozen=True)
class SearchConfig:
    """Search inputs: heads per round k, round count R, the M
    (condition, seed) evaluation pairs, the guidance settings used for
    candidate sampling (cond and seed are overridden per pair), the
    perturbation method with its u / tau parameters, and the objective.

    jobs > 1 fans candidate evaluation out over that many threads.
    """

    k: int
    rounds: int
    pairs: tuple
    guidance: GuidanceConfig
    method: str = "pag"
    u: float = 0.25
    tau: float = 1.0
    objective: str = "brightness"
    jobs: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        pairs = tuple(
            (None if c is None else int(c), int(s)) for c, s in self.pairs
        )
        if len(pairs) < 1:
            raise ValueError("at least one (cond, seed) pair is required")
        object.__setattr__(self, "pairs", pairs)
        if self.method not in METHODS:
            raise ValueError(f"unknown perturbation method {self.method!r}")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")


@dataclass(frozen=True)
class SearchState:
    """Selection progress: the ordered selected heads, the remaining
    pool (in fixed lexicographic enumeration order), and the per-round
    ledger of every (head, score) row sorted by descending score."""

    selected: tuple = ()
    pool: tuple = ()
    ledger: tuple = ()


def initial_state(weights: DitWeights) -> SearchState:
    cfg = weights.config
    pool = tuple(
        HeadId(l, h)
        for l in range(cfg.layers)
        for h in range(cfg.heads_per_layer)
    )
    return SearchState(selected=(), pool=pool, ledger=())


def _spec_for(heads, cfg: SearchConfig) -> PerturbSpec:
    return PerturbSpec(frozenset(heads), cfg.method, cfg.u, cfg.tau)


def evaluate_selection(weights: DitWeights, heads, cfg: SearchConfig) -> float:
    """Mean objective over the configured pairs for a fixed head set.

    An empty head set scores the unguided baseline (the no-op spec
    skips the perturbed branch entirely).  Images are scored raw, as
    returned by the sampler.
    """
    spec = _spec_for(heads, cfg)
    total = 0.0
    for cond, seed in cfg.pairs:
        g = replace(cfg.guidance, cond=cond, seed=seed)
        result = sample(weights, g, spec)
        total += score(cfg.objective, result.image, cond)
    return total / len(cfg.pairs)


def evaluate_candidate(
    weights: DitWeights, state: SearchState, cand: HeadId, cfg: SearchConfig
) -> float:
    """Score selected + {candidate}; side-effect-free on the state.

    A sampler failure marks the candidate with -inf instead of
    aborting, and logs the event.
    """
    if cand not in state.pool:
        raise ValueError(f"candidate {cand} is not in the remaining pool")
    try:
        return evaluate_selection(weights, state.selected + (cand,), cfg)
    except ArithmeticError as exc:
        log.warning("candidate %s failed during sampling: %s", cand, exc)
        return float("-inf")


def _score_pool(weights, state, cfg):
    """Scores for every pool candidate, reduced in fixed pool order."""
    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as ex:
            return list(
                ex.map(
                    lambda cand: evaluate_candidate(weights, state, cand, cfg),
                    state.pool,
                )
            )
    return [evaluate_candidate(weights, state, cand, cfg) for cand in state.pool]


def run_round(weights: DitWeights, state: SearchState, cfg: SearchConfig) -> SearchState:
    """One greedy expansion round; returns the successor state.

    All pool candidates are scored against the current selection; the
    ranking breaks score ties lexicographically by (layer, head).  The
    top-k join the selection in score order.  A pool smaller than k is
    selected whole, which ends the search.
    """
    if not state.pool:
        raise ValueError("run_round: candidate pool is empty")
    scores = _score_pool(weights, state, cfg)
    ranking = sorted(
        zip(state.pool, scores), key=lambda e: (-e[1], e[0].layer, e[0].head)
    )
    winners = ranking[: min(cfg.k, len(ranking))]
    chosen = tuple(head for head, _ in winners)
    return SearchState(
        selected=state.selected + chosen,
        pool=tuple(h for h in state.pool if h not in set(chosen)),
        ledger=state.ledger + (tuple(ranking),),
    )


def headhunter(weights: DitWeights, cfg: SearchConfig) -> SearchState:
    """Run up to R rounds of greedy head selection.

    Deterministic given (weights, cfg); the final selection holds
    min(k * R, head pool size) heads.
    """
    state = initial_state(weights)
    for _ in range(cfg.rounds):
        if not state.pool:
            break
        state = run_round(weights, state, cfg)
    return state


def exhaustive_single_head(weights: DitWeights, cfg: SearchConfig):
    """Brute-force oracle: every head scored alone, ranked descending
    with the same tie rule as the greedy search.  Feasible here because
    the toy pool is only layers x heads_per_layer heads."""
    state = initial_state(weights)
    scores = _score_pool(weights, state, cfg)
    return tuple(
        sorted(zip(state.pool, scores), key=lambda e: (-e[1], e[0].layer, e[0].head))
    )

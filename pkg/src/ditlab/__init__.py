"""ditlab: a desk-scale lab for attention-perturbation guidance.

A micro diffusion transformer (16x16 grayscale shapes, 4 layers x 4
heads) trained with flow matching on synthetic data, plus the full
head-level guidance toolkit: PAG and its soft variants, uniform and
mean-query perturbations, temperature scaling and its argmax limit,
classifier-free guidance, and a greedy objective-driven search over
(layer, head) pairs with an exhaustive oracle to check it.

Everything is seeded, deterministic, and small enough to verify
against finite differences and closed-form oracles on one CPU core.
"""

from .attention import (
    METHODS,
    SOFT_METHODS,
    NO_PERTURB,
    AttentionLayerWeights,
    HeadId,
    PerturbSpec,
    apply_perturbation,
    attention_map,
    multi_head_attention,
    perturb_target,
    soft_mix,
    temperature_scale,
)
from .artifacts import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    load_checkpoint,
    load_selection,
    save_checkpoint,
    selection_doc,
    write_ledger_csv,
    write_pgm,
    write_trajectory_csv,
)
from .data import CLASSES, NULL_CLASS, gen_sample, make_dataset, render, templates
from .model import DitConfig, DitWeights, dit_forward, init_weights, param_shapes
from .objectives import list_objectives, score
from .sampler import (
    GuidanceConfig,
    SamplerDiverged,
    SampleResult,
    apg_combine,
    cfg_combine,
    combined_velocity,
    sample,
    spec_is_noop,
)
from .search import (
    SearchConfig,
    SearchState,
    evaluate_candidate,
    evaluate_selection,
    exhaustive_single_head,
    headhunter,
    run_round,
)
from .tensor import Rng, layernorm, matmul, require_finite, softmax_rows
from .train import (
    Adam,
    FlowMatchingSchedule,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    backward,
    finite_diff_check,
    flow_interpolate,
    fm_loss,
    fm_loss_and_grads,
    train,
)

__version__ = "0.1.0"

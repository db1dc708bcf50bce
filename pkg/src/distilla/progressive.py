"""Multi-stage distillation driver.

Stage i synthesizes new images conditioned on the frozen union of stages
1..i-1, then the per-seed checkpoint networks take a transition-training
pass on the union of stages 1..i before the next stage begins. Ablation
switches can skip the transition (fresh initializations every stage) or
drop the conditioning (each stage synthesized in isolation).

Every random stream is derived from declared seeds with mix_seed, so a run
is a pure function of (config, data) and the checkpoint lineage can be
replayed bit-exactly from the saved artifacts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable

from . import nn
from .core import (
    LabeledDataset,
    StageSequence,
    StageUnion,
    SyntheticSet,
    mix_seed,
    save_stage_sequence,
    union_stages,
)
from .distill import (
    DistillBudget,
    distill_stage_gradmatch,
    distill_stage_trajmatch,
    generate_expert_trajectories,
)
from .nn import ModelSpec, ParameterVector, TrainConfig

BASES = ("gradmatch-synthetic", "gradmatch-real", "trajmatch")

CHECKPOINTS_DIR = "checkpoints"
RUN_FILE = "run.json"

# Reference training length: with P stages, each of the P+1 training
# intervals (P synthesis stages plus the final consumer pass) gets
# 2000/(P+1) epochs, keeping the total epoch budget at 2000 regardless
# of the stage count.
_EPOCH_BUDGET = 2000


@dataclass(frozen=True)
class ProgressiveConfig:
    """Everything a staged run needs besides the dataset itself.

    ``seeds`` carries one entry per checkpoint lineage (expert_count of
    them); ``expert`` doubles as the student-update config for gradient
    matching and as the expert-training config for trajectory matching.
    """

    stages: int
    per_stage_ipc: int
    base: str
    model: ModelSpec
    budget: DistillBudget
    transition: TrainConfig
    expert: TrainConfig
    expert_count: int
    seeds: tuple[int, ...]
    no_transition: bool = False
    no_conditioning: bool = False
    init_mode: str = "real-sample"

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError(f"stages must be >= 1, got {self.stages}")
        if self.per_stage_ipc < 1:
            raise ValueError(f"per_stage_ipc must be >= 1, got {self.per_stage_ipc}")
        if self.base not in BASES:
            raise ValueError(f"unknown base {self.base!r}, expected one of {BASES}")
        if self.budget.ipc != self.per_stage_ipc:
            raise ValueError(
                f"budget.ipc ({self.budget.ipc}) must equal per_stage_ipc "
                f"({self.per_stage_ipc})"
            )
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds:
            raise ValueError("need at least one checkpoint seed")
        if self.expert_count != len(seeds):
            raise ValueError(
                f"expert_count ({self.expert_count}) must equal len(seeds) ({len(seeds)})"
            )
        if self.base == "trajmatch" and self.expert.snapshot_every < 1:
            raise ValueError("trajectory matching needs expert.snapshot_every >= 1")
        object.__setattr__(self, "seeds", seeds)


def config_digest(config: ProgressiveConfig) -> str:
    """Stable content hash of a config; lands in sequence manifests."""
    payload = dataclasses.asdict(config)
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------


def schedule_stage_epochs(stages: int, multiplier: float = 1.0) -> int:
    """Epochs per training interval for a given stage count.

    The 2000-epoch budget is split evenly over the P+1 intervals; a
    multiplier scales the whole schedule for desk-size runs.
    """
    if stages < 1:
        raise ValueError(f"stages must be >= 1, got {stages}")
    if multiplier <= 0:
        raise ValueError(f"multiplier must be positive, got {multiplier}")
    return int(_EPOCH_BUDGET * multiplier / (stages + 1))


def total_training_iterations(stages: int, per_class: int, batch_size: int) -> int:
    """Total optimizer steps of a full progressive training pass.

    A consumer training on the staged output sees i * per_class images per
    class during interval i, for 2000/(P+1) epochs each. The phase sum is
    accumulated exactly (rationals) and floored once at the end; it
    collapses to 1000 * P * n / B.
    """
    if stages < 1 or per_class < 1 or batch_size < 1:
        raise ValueError(
            f"stages, per_class, batch_size must all be >= 1, got "
            f"({stages}, {per_class}, {batch_size})"
        )
    epochs_per_interval = Fraction(_EPOCH_BUDGET, stages + 1)
    total = Fraction(0)
    for i in range(1, stages + 1):
        total += i * epochs_per_interval * Fraction(per_class, batch_size)
    return int(total)


# ---------------------------------------------------------------------------
# seed derivations (public so replays use the exact same streams)
# ---------------------------------------------------------------------------


def stage_init_seed(config: ProgressiveConfig, stage: int, lineage: int) -> int:
    return mix_seed(config.seeds[lineage], "stage-init", stage)


def stage_transition_seed(config: ProgressiveConfig, stage: int, lineage: int) -> int:
    return mix_seed(config.transition.seed, "transition", stage, lineage)


def stage_distill_seed(config: ProgressiveConfig, stage: int) -> int:
    master = mix_seed("progressive-master", *config.seeds)
    return mix_seed(master, "distill-stage", stage)


def stage_expert_seed(config: ProgressiveConfig, stage: int) -> int:
    return mix_seed(config.expert.seed, "expert-stage", stage)


# ---------------------------------------------------------------------------
# transition training
# ---------------------------------------------------------------------------


def transition_train(
    spec: ModelSpec,
    theta_prev: ParameterVector,
    union_so_far: StageUnion | None,
    cfg: TrainConfig,
) -> ParameterVector:
    """Continue training a checkpoint on everything synthesized so far.

    An empty union is a no-op (the checkpoint passes through unchanged).
    """
    if union_so_far is None or union_so_far.count == 0:
        return theta_prev
    return nn.train(spec, theta_prev, union_so_far, cfg).params


# ---------------------------------------------------------------------------
# the stage loop
# ---------------------------------------------------------------------------


@dataclass
class StageRecord:
    """Provenance of one stage: the checkpoints it started from, the seeds
    that drove it, and its outer-loop loss trace."""

    index: int
    start_checkpoints: tuple[ParameterVector, ...]
    distill_seed: int
    losses: list[float]
    transition_seeds: tuple[int, ...] | None = None


@dataclass
class ProgressiveResult:
    sequence: StageSequence
    checkpoints: tuple[ParameterVector, ...]
    stage_records: list[StageRecord]
    config: ProgressiveConfig


def run_progressive(
    config: ProgressiveConfig,
    data: LabeledDataset,
    stage_data_fn: Callable[[int], LabeledDataset] | None = None,
    digest: str | None = None,
) -> ProgressiveResult:
    """Run the full staged loop: distill, append, transition, repeat.

    ``stage_data_fn`` lets a caller hand each stage its own slice of the
    real data (used by the forgetting curriculum); the default gives every
    stage the whole dataset. ``digest`` overrides the recorded config
    digest for callers whose authoritative config lives outside the
    dataclass (the command line does this).
    """
    spec = config.model
    lineages = range(config.expert_count)
    checkpoints = tuple(
        nn.init_params(spec, stage_init_seed(config, 1, k)) for k in lineages
    )
    stages: list[SyntheticSet] = []
    records: list[StageRecord] = []

    for i in range(1, config.stages + 1):
        stage_data = stage_data_fn(i) if stage_data_fn is not None else data
        if config.no_transition and i > 1:
            checkpoints = tuple(
                nn.init_params(spec, stage_init_seed(config, i, k)) for k in lineages
            )
        if stages and not config.no_conditioning:
            frozen = union_stages(StageSequence(tuple(stages)), len(stages))
        else:
            frozen = None
        dseed = stage_distill_seed(config, i)
        record = StageRecord(
            index=i,
            start_checkpoints=tuple(c.clone() for c in checkpoints),
            distill_seed=dseed,
            losses=[],
        )
        if config.base == "trajmatch":
            origin = "fresh-init" if (i == 1 or config.no_transition) else "transition-checkpoint"
            store = generate_expert_trajectories(
                spec,
                stage_data,
                checkpoints,
                replace(config.expert, seed=stage_expert_seed(config, i)),
                config.expert_count,
                config.expert.snapshot_every,
                stage_index=i,
                origin=origin,
            )
            synthetic, losses = distill_stage_trajmatch(
                spec, store, frozen, config.budget, dseed,
                stage_index=i, data=stage_data, init_mode=config.init_mode,
            )
        else:
            mode = "synthetic-traj" if config.base == "gradmatch-synthetic" else "real-traj"
            synthetic, losses = distill_stage_gradmatch(
                spec, checkpoints, stage_data, frozen, config.budget, dseed,
                mode=mode, student_cfg=config.expert,
                stage_index=i, init_mode=config.init_mode,
            )
        record.losses = losses
        stages.append(synthetic)
        if not config.no_transition:
            union = union_stages(StageSequence(tuple(stages)), len(stages))
            tseeds = tuple(stage_transition_seed(config, i, k) for k in lineages)
            checkpoints = tuple(
                transition_train(
                    spec, checkpoints[k], union, replace(config.transition, seed=tseeds[k])
                )
                for k in lineages
            )
            record.transition_seeds = tseeds
        records.append(record)

    sequence = StageSequence(
        stages=tuple(stages),
        config_digest=digest if digest is not None else config_digest(config),
        dataset_name=data.name,
    )
    return ProgressiveResult(
        sequence=sequence,
        checkpoints=checkpoints,
        stage_records=records,
        config=config,
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _checkpoint_path(directory: Path, stage: int, lineage: int) -> Path:
    return Path(directory) / CHECKPOINTS_DIR / f"stage_{stage}_seed_{lineage}.f32"


def save_progressive_result(result: ProgressiveResult, directory) -> None:
    """Write the stage sequence plus the checkpoint lineage.

    stage_i_seed_k.f32 holds the parameters lineage k started stage i
    from; stage_{P+1}_seed_k.f32 holds the final post-transition
    checkpoints. run.json records the derived seeds and loss traces so a
    replay can reproduce the lineage byte for byte.
    """
    directory = Path(directory)
    save_stage_sequence(result.sequence, directory)
    for record in result.stage_records:
        for k, pv in enumerate(record.start_checkpoints):
            nn.write_flat_f32(pv.values, _checkpoint_path(directory, record.index, k))
    final_stage = result.config.stages + 1
    for k, pv in enumerate(result.checkpoints):
        nn.write_flat_f32(pv.values, _checkpoint_path(directory, final_stage, k))
    run = {
        "version": 1,
        "config": dataclasses.asdict(result.config),
        "config_digest": config_digest(result.config),
        "model": nn.spec_to_dict(result.config.model),
        "stage_distill_seeds": [r.distill_seed for r in result.stage_records],
        "transition_seeds": [
            list(r.transition_seeds) if r.transition_seeds is not None else None
            for r in result.stage_records
        ],
        "stage_losses": [r.losses for r in result.stage_records],
    }
    (directory / RUN_FILE).write_text(
        json.dumps(run, sort_keys=True, indent=2, default=str) + "\n", encoding="utf-8"
    )


def load_checkpoint(directory, stage: int, lineage: int, spec: ModelSpec) -> ParameterVector:
    layout = nn.parameter_layout(spec)
    numel = layout[-1].offset + layout[-1].size
    path = _checkpoint_path(Path(directory), stage, lineage)
    if not path.is_file():
        raise ValueError(f"missing checkpoint file: {path}")
    return ParameterVector(nn.read_flat_f32(path, numel), layout)

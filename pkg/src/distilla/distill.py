"""Single-stage distillers and their shared machinery.

Two bases are implemented. Gradient matching optimizes current-stage pixels
so that parameter gradients on the synthetic union imitate gradients on
real batches, class by class, while a student network walks forward either
on the synthetic data itself or on real batches. Trajectory matching
unrolls a few full-batch student steps on the synthetic union and pushes
the endpoint toward a stored expert checkpoint, optimizing a learnable
student learning rate alongside the pixels.

In both cases the conditioning (earlier-stage) images enter every student
update and every matching loss but are never leaves of the outer
optimization, so they cannot change.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import nn
from .core import (
    LabeledDataset,
    StageUnion,
    SyntheticSet,
    init_synthetic_set,
    mix_seed,
)
from .nn import ModelSpec, ParameterVector, TrainConfig

MATCH_METRICS = ("layerwise-cosine", "l2")
STUDENT_MODES = ("synthetic-traj", "real-traj")
AUGMENT_OPS = ("flip", "shift", "cutout")

DEGENERATE_DENOM_TOL = 1e-12

# Fixed outer-loop optimizer behavior; the step size itself comes from the
# budget. Gradient matching smooths pixel updates with heavy-ball momentum,
# trajectory matching uses plain gradient steps on pixels and learning rate.
_PIXEL_MOMENTUM = 0.5
_MIN_LEARNED_LR = 1e-6


class DegenerateTrajectoryError(RuntimeError):
    """Raised when an expert segment's start and end coincide, which would
    make the normalized trajectory loss divide by (numerically) zero."""


@dataclass(frozen=True)
class DistillBudget:
    """Knobs for one stage of distillation.

    ipc is images per class to synthesize. outer_iterations counts pixel
    updates; inner_steps counts student updates per outer iteration (for
    trajectory matching, the unroll length N). expert_span is the number of
    raw expert training steps M the student endpoint is matched against.
    """

    ipc: int
    outer_iterations: int
    inner_steps: int
    expert_span: int = 1
    outer_lr: float = 0.1
    match_metric: str = "layerwise-cosine"
    real_batch_per_class: int = 64
    augment: tuple[str, ...] = ()
    student_lr_init: float = 0.01
    max_anchor_step: int | None = None

    def __post_init__(self):
        if self.ipc < 1:
            raise ValueError(f"ipc must be >= 1, got {self.ipc}")
        if self.outer_iterations < 1:
            raise ValueError(f"outer_iterations must be >= 1, got {self.outer_iterations}")
        if self.inner_steps < 1:
            raise ValueError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.expert_span < 1:
            raise ValueError(f"expert_span must be >= 1, got {self.expert_span}")
        if self.outer_lr < 0:
            raise ValueError(f"outer_lr must be >= 0, got {self.outer_lr}")
        if self.match_metric not in MATCH_METRICS:
            raise ValueError(
                f"unknown match_metric {self.match_metric!r}, expected one of {MATCH_METRICS}"
            )
        if self.real_batch_per_class < 1:
            raise ValueError(
                f"real_batch_per_class must be >= 1, got {self.real_batch_per_class}"
            )
        ops = tuple(self.augment)
        for op in ops:
            if op not in AUGMENT_OPS:
                raise ValueError(f"unknown augment op {op!r}, expected one of {AUGMENT_OPS}")
        object.__setattr__(self, "augment", ops)
        if not self.student_lr_init > 0:
            raise ValueError(f"student_lr_init must be positive, got {self.student_lr_init}")
        if self.max_anchor_step is not None and self.max_anchor_step < 0:
            raise ValueError(f"max_anchor_step must be >= 0, got {self.max_anchor_step}")


# ---------------------------------------------------------------------------
# gradient distance
# ---------------------------------------------------------------------------


def _distance_tensor(
    a: torch.Tensor,
    b: torch.Tensor,
    layout: Sequence[nn.LayoutEntry],
    metric: str,
) -> torch.Tensor:
    if metric == "l2":
        return (a - b).square().sum()
    total = a.new_zeros(())
    for entry in layout:
        ga = a[entry.offset : entry.offset + entry.size]
        gb = b[entry.offset : entry.offset + entry.size]
        na = ga.norm()
        nb = gb.norm()
        # An all-zero layer carries no direction to compare, so it counts
        # as maximal mismatch instead of producing 0/0.
        if float(na.detach()) == 0.0 or float(nb.detach()) == 0.0:
            total = total + 1.0
        else:
            total = total + (1.0 - (ga * gb).sum() / (na * nb))
    return total


def grad_distance(a: ParameterVector, b: ParameterVector, metric: str = "layerwise-cosine") -> float:
    """Distance between two parameter-space gradients.

    ``layerwise-cosine`` sums 1 - cos(angle) per layout entry (an all-zero
    entry on either side contributes 1); ``l2`` is the plain squared norm
    of the difference. Both are symmetric.
    """
    if metric not in MATCH_METRICS:
        raise ValueError(f"unknown metric {metric!r}, expected one of {MATCH_METRICS}")
    nn._check_same_layout(a, b, "grad_distance")
    return float(_distance_tensor(a.values, b.values, a.layout, metric))


# ---------------------------------------------------------------------------
# gradient matching
# ---------------------------------------------------------------------------


@dataclass
class ConditionedSynthetic:
    """Current-stage pixels plus the frozen earlier-stage union.

    ``images`` may be a leaf with requires_grad; the frozen part is always
    treated as constant.
    """

    images: torch.Tensor
    labels: torch.Tensor
    frozen_images: torch.Tensor | None = None
    frozen_labels: torch.Tensor | None = None

    def union(self) -> tuple[torch.Tensor, torch.Tensor]:
        if self.frozen_images is None:
            return self.images, self.labels
        return (
            torch.cat([self.frozen_images.detach(), self.images], dim=0),
            torch.cat([self.frozen_labels, self.labels], dim=0),
        )


def _match_loss(
    spec: ModelSpec,
    values: torch.Tensor,
    syn_images: torch.Tensor,
    syn_labels: torch.Tensor,
    real_images: torch.Tensor,
    real_labels: torch.Tensor,
    metric: str,
) -> torch.Tensor:
    """Sum over classes of distance(grad on synthetic, grad on real).

    The synthetic-side gradient keeps its graph so the result is
    differentiable in the synthetic pixels; the real side is a constant
    target.
    """
    layout = nn.parameter_layout(spec)
    theta = values.detach().requires_grad_(True)
    total = syn_images.new_zeros(())
    for cls in torch.unique(real_labels).tolist():
        real_mask = real_labels == cls
        syn_mask = syn_labels == cls
        if not bool(syn_mask.any()):
            continue
        syn_loss = nn.cross_entropy(spec, theta, syn_images[syn_mask], syn_labels[syn_mask])
        (g_syn,) = torch.autograd.grad(syn_loss, theta, create_graph=True)
        real_loss = nn.cross_entropy(spec, theta, real_images[real_mask], real_labels[real_mask])
        (g_real,) = torch.autograd.grad(real_loss, theta)
        total = total + _distance_tensor(g_syn, g_real.detach(), layout, metric)
    return total


def gradient_match_loss(
    spec: ModelSpec,
    params: ParameterVector,
    synth: ConditionedSynthetic,
    real_images,
    real_labels,
    budget: DistillBudget,
) -> tuple[float, torch.Tensor]:
    """Per-class gradient-matching loss and its gradient in the
    current-stage pixels (the frozen part gets none by construction)."""
    dtype = params.values.dtype
    real_x = nn._to_image_tensor(real_images, dtype)
    real_y = nn._to_label_tensor(real_labels)
    if real_y.numel() == 0:
        raise ValueError("real batch is empty")
    pixels = synth.images.detach().clone().to(dtype).requires_grad_(True)
    probe = replace_images(synth, pixels)
    syn_x, syn_y = probe.union()
    loss = _match_loss(spec, params.values, syn_x, syn_y, real_x, real_y, budget.match_metric)
    (grad,) = torch.autograd.grad(loss, pixels, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(pixels)
    return float(loss.detach()), grad.detach()


def replace_images(synth: ConditionedSynthetic, images: torch.Tensor) -> ConditionedSynthetic:
    return ConditionedSynthetic(
        images=images,
        labels=synth.labels,
        frozen_images=synth.frozen_images,
        frozen_labels=synth.frozen_labels,
    )


# ---------------------------------------------------------------------------
# student updates
# ---------------------------------------------------------------------------


def update_student_params(
    mode: str,
    spec: ModelSpec,
    params: ParameterVector,
    synth: ConditionedSynthetic,
    real_data,
    cfg: TrainConfig,
    rng: torch.Generator | None = None,
    momentum_state: ParameterVector | None = None,
) -> tuple[ParameterVector, ParameterVector]:
    """One student step along the inner trajectory.

    ``synthetic-traj`` takes a full-batch step on the (detached) synthetic
    union; ``real-traj`` takes a minibatch step on real data, sampled
    without replacement through ``rng``. Returns the new parameters and the
    momentum state so callers can chain steps.
    """
    if mode not in STUDENT_MODES:
        raise ValueError(f"unknown student mode {mode!r}, expected one of {STUDENT_MODES}")
    if mode == "synthetic-traj":
        images, labels = synth.union()
        images = images.detach()
    else:
        if real_data is None:
            raise ValueError("real-traj student updates need real data")
        images, labels = nn._collection_tensors(real_data, params.values.dtype)
        n = labels.shape[0]
        if n == 0:
            raise ValueError("real data is empty")
        if rng is None:
            rng = torch.Generator().manual_seed(mix_seed(cfg.seed, "student-batch"))
        take = min(cfg.batch_size, n)
        idx = torch.randperm(n, generator=rng)[:take]
        images, labels = images[idx], labels[idx]
    _, grad = nn.loss_and_grad(spec, params, images, labels)
    return nn.sgd_step(params, grad, momentum_state, cfg)


# ---------------------------------------------------------------------------
# paired augmentation
# ---------------------------------------------------------------------------


def _shift_images(x: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    h, w = x.shape[2], x.shape[3]
    ady, adx = abs(dy), abs(dx)
    if ady == 0 and adx == 0:
        return x
    padded = torch.nn.functional.pad(x, (adx, adx, ady, ady))
    return padded[:, :, ady - dy : ady - dy + h, adx - dx : adx - dx + w]


def _cutout_images(x: torch.Tensor, cy: int, cx: int, size: int) -> torch.Tensor:
    h, w = x.shape[2], x.shape[3]
    mask = torch.ones((1, 1, h, w), dtype=x.dtype)
    y0, y1 = max(0, cy), min(h, cy + size)
    x0, x1 = max(0, cx), min(w, cx + size)
    if y1 > y0 and x1 > x0:
        mask[:, :, y0:y1, x0:x1] = 0.0
    return x * mask


def _sample_transform(ops: tuple[str, ...], height: int, width: int, gen: torch.Generator):
    """Pick one op and its parameters; returns a closure or None for identity."""
    if not ops:
        return None
    op = ops[int(torch.randint(len(ops), (1,), generator=gen))]
    if op == "flip":
        return lambda x: torch.flip(x, dims=(3,))
    if op == "shift":
        max_dy = max(1, round(0.125 * height))
        max_dx = max(1, round(0.125 * width))
        dy = int(torch.randint(-max_dy, max_dy + 1, (1,), generator=gen))
        dx = int(torch.randint(-max_dx, max_dx + 1, (1,), generator=gen))
        return lambda x: _shift_images(x, dy, dx)
    size = max(1, height // 2)
    cy = int(torch.randint(0, height, (1,), generator=gen))
    cx = int(torch.randint(0, width, (1,), generator=gen))
    return lambda x: _cutout_images(x, cy, cx, size)


def paired_augment(
    real_batch: torch.Tensor,
    synth_batch: torch.Tensor,
    ops: Sequence[str],
    seed: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Apply one randomly chosen op with identical parameters to both
    batches. Differentiable through the synthetic side. Empty ops is the
    identity."""
    ops = tuple(ops)
    for op in ops:
        if op not in AUGMENT_OPS:
            raise ValueError(f"unknown augment op {op!r}, expected one of {AUGMENT_OPS}")
    if not ops:
        return real_batch, synth_batch
    gen = torch.Generator().manual_seed(mix_seed(seed, "paired-augment"))
    transform = _sample_transform(ops, synth_batch.shape[2], synth_batch.shape[3], gen)
    return transform(real_batch), transform(synth_batch)


# ---------------------------------------------------------------------------
# expert trajectories
# ---------------------------------------------------------------------------

EXPERTS_MANIFEST = "manifest.json"
EXPERT_ORIGINS = ("fresh-init", "transition-checkpoint")


@dataclass
class ExpertTrajectory:
    seed: int
    snapshots: list[tuple[int, ParameterVector]]

    def step_index(self) -> dict[int, int]:
        return {step: i for i, (step, _) in enumerate(self.snapshots)}


@dataclass
class ExpertTrajectoryStore:
    """Parameter snapshots from networks trained on real data.

    Every trajectory holds at least two snapshots with strictly increasing
    step counts; all snapshots share one layout.
    """

    spec: ModelSpec
    stage_index: int
    origin: str
    experts: list[ExpertTrajectory]

    def __post_init__(self):
        if self.origin not in EXPERT_ORIGINS:
            raise ValueError(
                f"unknown origin {self.origin!r}, expected one of {EXPERT_ORIGINS}"
            )
        if not self.experts:
            raise ValueError("store needs at least one expert trajectory")
        layout = nn.parameter_layout(self.spec)
        for k, expert in enumerate(self.experts):
            if len(expert.snapshots) < 2:
                raise ValueError(
                    f"expert {k} has {len(expert.snapshots)} snapshots, need at least 2"
                )
            steps = [s for s, _ in expert.snapshots]
            if any(b <= a for a, b in zip(steps, steps[1:])):
                raise ValueError(f"expert {k} snapshot steps must strictly increase: {steps}")
            for _, pv in expert.snapshots:
                if pv.layout != layout:
                    raise ValueError(f"expert {k} snapshot layout does not match spec")

    @property
    def expert_count(self) -> int:
        return len(self.experts)


def generate_expert_trajectories(
    spec: ModelSpec,
    data,
    start_params_per_expert: Sequence[ParameterVector],
    cfg: TrainConfig,
    n_experts: int,
    snapshot_every: int,
    stage_index: int = 1,
    origin: str = "fresh-init",
) -> ExpertTrajectoryStore:
    """Train n_experts networks on real data, snapshotting every
    ``snapshot_every`` steps (plus start and final parameters). Each expert
    gets its own shuffle stream derived from (cfg.seed, expert index)."""
    if n_experts < 1:
        raise ValueError(f"n_experts must be >= 1, got {n_experts}")
    if len(start_params_per_expert) != n_experts:
        raise ValueError(
            f"got {len(start_params_per_expert)} start parameter vectors for {n_experts} experts"
        )
    if snapshot_every < 1:
        raise ValueError(f"snapshot_every must be >= 1, got {snapshot_every}")
    experts = []
    for k, start in enumerate(start_params_per_expert):
        seed_k = mix_seed(cfg.seed, "expert", k)
        run_cfg = replace(cfg, seed=seed_k, snapshot_every=snapshot_every)
        result = nn.train(spec, start, data, run_cfg)
        if len(result.snapshots) < 2:
            raise ValueError(
                f"expert {k} produced {len(result.snapshots)} snapshots; "
                "training must take at least one step"
            )
        experts.append(ExpertTrajectory(seed=seed_k, snapshots=result.snapshots))
    return ExpertTrajectoryStore(
        spec=spec, stage_index=stage_index, origin=origin, experts=experts
    )


def save_expert_store(store: ExpertTrajectoryStore, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layout = nn.parameter_layout(store.spec)
    manifest = {
        "version": 1,
        "kind": "expert-store",
        "spec": nn.spec_to_dict(store.spec),
        "stage_index": store.stage_index,
        "origin": store.origin,
        "seeds": [e.seed for e in store.experts],
        "snapshot_steps": [[s for s, _ in e.snapshots] for e in store.experts],
    }
    (directory / EXPERTS_MANIFEST).write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    (directory / nn.LAYOUT_FILE).write_text(
        json.dumps(nn.layout_to_dict(layout), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    for k, expert in enumerate(store.experts):
        edir = directory / f"e{k}"
        edir.mkdir(exist_ok=True)
        for step, pv in expert.snapshots:
            nn.write_flat_f32(pv.values, edir / f"step_{step}.f32")


def load_expert_store(directory) -> ExpertTrajectoryStore:
    directory = Path(directory)
    manifest_path = directory / EXPERTS_MANIFEST
    if not manifest_path.is_file():
        raise ValueError(f"missing expert store manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    spec = nn.spec_from_dict(manifest["spec"])
    layout = nn.parameter_layout(spec)
    numel = layout[-1].offset + layout[-1].size
    experts = []
    for k, steps in enumerate(manifest["snapshot_steps"]):
        snaps = []
        for step in steps:
            path = directory / f"e{k}" / f"step_{step}.f32"
            if not path.is_file():
                raise ValueError(f"missing expert snapshot file: {path}")
            snaps.append((int(step), ParameterVector(nn.read_flat_f32(path, numel), layout)))
        experts.append(ExpertTrajectory(seed=int(manifest["seeds"][k]), snapshots=snaps))
    return ExpertTrajectoryStore(
        spec=spec,
        stage_index=int(manifest["stage_index"]),
        origin=manifest["origin"],
        experts=experts,
    )


# ---------------------------------------------------------------------------
# trajectory matching
# ---------------------------------------------------------------------------


def trajectory_match_loss(theta_student_end, theta_student_start, theta_expert_end):
    """Normalized squared endpoint error:

        |end - expert_end|^2 / |start - expert_end|^2

    Accepts ParameterVectors (returns a float) or flat tensors (returns a
    torch scalar, differentiable). Raises DegenerateTrajectoryError when
    the denominator falls below 1e-12.
    """
    tensor_mode = torch.is_tensor(theta_student_end)
    if tensor_mode:
        end, start, target = theta_student_end, theta_student_start, theta_expert_end
    else:
        nn._check_same_layout(theta_student_end, theta_student_start, "trajectory_match_loss")
        nn._check_same_layout(theta_student_end, theta_expert_end, "trajectory_match_loss")
        end = theta_student_end.values
        start = theta_student_start.values
        target = theta_expert_end.values
    denom = (start - target).square().sum()
    if float(denom.detach()) < DEGENERATE_DENOM_TOL:
        raise DegenerateTrajectoryError(
            f"expert segment start and end coincide (denominator {float(denom.detach()):.3e})"
        )
    ratio = (end - target).square().sum() / denom
    return ratio if tensor_mode else float(ratio)


def unrolled_trajectory_loss(
    spec: ModelSpec,
    start_values: torch.Tensor,
    target_values: torch.Tensor,
    images: torch.Tensor,
    labels: torch.Tensor,
    lr,
    n_steps: int,
) -> torch.Tensor:
    """Run n_steps of full-batch gradient descent on (images, labels) from
    ``start_values`` and return the normalized endpoint error against
    ``target_values``. Differentiable in images and lr."""
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    theta = start_values.detach().clone().requires_grad_(True)
    start = theta
    for _ in range(n_steps):
        loss = nn.cross_entropy(spec, theta, images, labels)
        (grad,) = torch.autograd.grad(loss, theta, create_graph=True)
        theta = theta - lr * grad
    return trajectory_match_loss(theta, start.detach(), target_values.detach())


def _valid_anchors(
    store: ExpertTrajectoryStore, budget: DistillBudget
) -> list[list[tuple[int, int]]]:
    """Per expert: (start snapshot index, target snapshot index) pairs whose
    steps are exactly expert_span apart and respect max_anchor_step."""
    anchors = []
    for k, expert in enumerate(store.experts):
        index = expert.step_index()
        pairs = []
        for i, (step, _) in enumerate(expert.snapshots):
            if budget.max_anchor_step is not None and step > budget.max_anchor_step:
                continue
            target_step = step + budget.expert_span
            if target_step in index:
                pairs.append((i, index[target_step]))
        if not pairs:
            last = expert.snapshots[-1][0]
            raise ValueError(
                f"expert {k} has no anchor with span {budget.expert_span} "
                f"(snapshot steps reach {last}); lower expert_span or record more steps"
            )
        anchors.append(pairs)
    return anchors


# ---------------------------------------------------------------------------
# stage distillers
# ---------------------------------------------------------------------------


def _frozen_tensors(frozen_union: StageUnion | None, dtype):
    if frozen_union is None or frozen_union.count == 0:
        return None, None
    return (
        torch.tensor(frozen_union.images, dtype=dtype),
        torch.tensor(frozen_union.labels, dtype=torch.long),
    )


def _finalize_pixels(cur: torch.Tensor) -> np.ndarray:
    """Stage outputs are images: the unconstrained optimization variable is
    clamped to [0, 1] on the way into the finalized set, so in-memory and
    reloaded sequences train identically."""
    return np.clip(cur.detach().numpy(), 0.0, 1.0).astype(np.float32)


@dataclass
class _TensorData:
    images: torch.Tensor
    labels: torch.Tensor


def distill_stage_gradmatch(
    spec: ModelSpec,
    starts: Sequence[ParameterVector],
    data: LabeledDataset,
    frozen_union: StageUnion | None,
    budget: DistillBudget,
    seed: int,
    mode: str = "real-traj",
    student_cfg: TrainConfig | None = None,
    stage_index: int = 1,
    init_mode: str = "real-sample",
) -> tuple[SyntheticSet, list[float]]:
    """One stage of gradient-matching distillation.

    Each outer iteration picks a start network, walks it inner_steps
    student updates, matches per-class gradients at every visited point,
    then applies one accumulated momentum step to the current-stage pixels.
    Returns the synthesized set and the mean matching loss per outer
    iteration.
    """
    if not starts:
        raise ValueError("need at least one start parameter vector")
    if mode not in STUDENT_MODES:
        raise ValueError(f"unknown student mode {mode!r}, expected one of {STUDENT_MODES}")
    if student_cfg is None:
        raise ValueError("gradient matching needs a student_cfg for inner updates")

    dtype = starts[0].values.dtype
    init = init_synthetic_set(data, budget.ipc, init_mode, mix_seed(seed, "init"), stage_index)
    cur = torch.tensor(init.images, dtype=dtype).requires_grad_(True)
    cur_labels = torch.tensor(init.labels, dtype=torch.long)
    frozen_x, frozen_y = _frozen_tensors(frozen_union, dtype)
    synth = ConditionedSynthetic(cur, cur_labels, frozen_x, frozen_y)

    real = _TensorData(
        torch.tensor(data.images, dtype=dtype),
        torch.tensor(data.labels, dtype=torch.long),
    )
    pools = {
        cls: torch.tensor(data.class_indices(cls), dtype=torch.long)
        for cls in range(data.class_count)
    }

    gen = torch.Generator().manual_seed(mix_seed(seed, "outer-loop"))
    velocity = torch.zeros_like(cur)
    losses: list[float] = []

    for it in range(budget.outer_iterations):
        start = starts[int(torch.randint(len(starts), (1,), generator=gen))]
        student = start
        student_momentum = None
        transform = _sample_transform(
            budget.augment, cur.shape[2], cur.shape[3], gen
        )
        grad_accum = torch.zeros_like(cur)
        loss_accum = 0.0
        for _ in range(budget.inner_steps):
            batches = []
            for cls in range(data.class_count):
                pool = pools[cls]
                take = min(budget.real_batch_per_class, pool.numel())
                pick = pool[torch.randperm(pool.numel(), generator=gen)[:take]]
                batches.append(pick)
            batch_idx = torch.cat(batches)
            real_x = real.images[batch_idx]
            real_y = real.labels[batch_idx]
            syn_x, syn_y = synth.union()
            if transform is not None:
                real_x = transform(real_x)
                syn_x = transform(syn_x)
            loss = _match_loss(
                spec, student.values, syn_x, syn_y, real_x, real_y, budget.match_metric
            )
            (pix_grad,) = torch.autograd.grad(loss, cur, allow_unused=True)
            if pix_grad is not None:
                grad_accum += pix_grad
            loss_accum += float(loss.detach())
            student, student_momentum = update_student_params(
                mode, spec, student, synth, real, student_cfg,
                rng=gen, momentum_state=student_momentum,
            )
        with torch.no_grad():
            velocity.mul_(_PIXEL_MOMENTUM).add_(grad_accum)
            cur.sub_(budget.outer_lr * velocity)
        losses.append(loss_accum / budget.inner_steps)

    synthetic = SyntheticSet(
        images=_finalize_pixels(cur),
        labels=init.labels,
        ipc=budget.ipc,
        stage_index=stage_index,
    )
    return synthetic, losses


def distill_stage_trajmatch(
    spec: ModelSpec,
    experts: ExpertTrajectoryStore,
    frozen_union: StageUnion | None,
    budget: DistillBudget,
    seed: int,
    stage_index: int = 1,
    data: LabeledDataset | None = None,
    init_mode: str = "real-sample",
) -> tuple[SyntheticSet, list[float]]:
    """One stage of trajectory-matching distillation.

    Each outer iteration samples an expert and an anchor snapshot, unrolls
    inner_steps full-batch student updates on the synthetic union with a
    learnable learning rate, and steps pixels and learning rate down the
    gradient of the normalized endpoint error. Returns the synthesized set
    (carrying the learned lr) and the per-iteration loss.
    """
    if experts.spec != spec:
        raise ValueError("expert store was built for a different model spec")
    if data is None:
        raise ValueError("synthetic initialization needs the real dataset")

    dtype = experts.experts[0].snapshots[0][1].values.dtype
    init = init_synthetic_set(data, budget.ipc, init_mode, mix_seed(seed, "init"), stage_index)
    cur = torch.tensor(init.images, dtype=dtype).requires_grad_(True)
    cur_labels = torch.tensor(init.labels, dtype=torch.long)
    frozen_x, frozen_y = _frozen_tensors(frozen_union, dtype)
    synth = ConditionedSynthetic(cur, cur_labels, frozen_x, frozen_y)

    anchors = _valid_anchors(experts, budget)
    lr_var = torch.tensor(float(budget.student_lr_init), dtype=dtype, requires_grad=True)
    gen = torch.Generator().manual_seed(mix_seed(seed, "outer-loop"))
    losses: list[float] = []

    for it in range(budget.outer_iterations):
        k = int(torch.randint(experts.expert_count, (1,), generator=gen))
        expert = experts.experts[k]
        pair = anchors[k][int(torch.randint(len(anchors[k]), (1,), generator=gen))]
        start = expert.snapshots[pair[0]][1].values
        target = expert.snapshots[pair[1]][1].values
        syn_x, syn_y = synth.union()
        loss = unrolled_trajectory_loss(
            spec, start, target, syn_x, syn_y, lr_var, budget.inner_steps
        )
        pix_grad, lr_grad = torch.autograd.grad(loss, (cur, lr_var), allow_unused=True)
        with torch.no_grad():
            if pix_grad is not None:
                cur.sub_(budget.outer_lr * pix_grad)
            if lr_grad is not None:
                lr_var.sub_(budget.outer_lr * lr_grad)
            lr_var.clamp_(min=_MIN_LEARNED_LR)
        losses.append(float(loss.detach()))

    synthetic = SyntheticSet(
        images=_finalize_pixels(cur),
        labels=init.labels,
        ipc=budget.ipc,
        stage_index=stage_index,
        # the float32 clamp can land a hair under the nominal floor; the
        # recorded value honors it exactly
        learned_lr=max(float(lr_var.detach()), _MIN_LEARNED_LR),
    )
    return synthetic, losses

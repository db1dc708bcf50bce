"""Class-incremental harness over staged distillation.

Classes arrive in phases. Each phase runs a full staged distillation on
its own classes only, appends the result to a growing synthetic memory,
and is scored by training a fresh network (sized to the classes seen so
far) on that whole memory. Raw data from earlier phases is never
revisited; only its synthetic stand-in persists.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .core import ImageCollection, LabeledDataset, mix_seed
from .evaluation import train_on
from .nn import TrainConfig
from .progressive import ProgressiveConfig, ProgressiveResult, run_progressive


def split_class_phases(class_count: int, phases: int) -> list[list[int]]:
    """Contiguous class ranges, one per phase; the remainder joins the last.

    split_class_phases(10, 3) -> [[0, 1, 2], [3, 4, 5], [6, 7, 8, 9]].
    """
    if phases < 1:
        raise ValueError(f"phases must be >= 1, got {phases}")
    if phases > class_count:
        raise ValueError(
            f"cannot split {class_count} classes into {phases} phases"
        )
    base = class_count // phases
    sizes = [base] * phases
    sizes[-1] += class_count % phases
    out = []
    start = 0
    for size in sizes:
        out.append(list(range(start, start + size)))
        start += size
    return out


@dataclass
class ContinualPhase:
    index: int
    classes: list[int]
    seen_classes: list[int]
    memory_size: int
    accuracies: list[float]
    mean_accuracy: float
    result: ProgressiveResult


@dataclass
class ContinualResult:
    accuracies: list[float]
    phases: list[ContinualPhase]

    @property
    def memory_sizes(self) -> list[int]:
        return [p.memory_size for p in self.phases]


def run_continual(
    config: ProgressiveConfig,
    train_data: LabeledDataset,
    test_data: LabeledDataset,
    phases: int,
    eval_cfg: TrainConfig,
    eval_epochs: int,
    n_eval_seeds: int = 1,
) -> ContinualResult:
    """Distill phase by phase and score on the classes seen so far.

    Phase p distills config.stages new sets over its own classes (labels
    remapped locally), contributing stages * ipc synthetic images per
    class to the memory. Evaluation trains a fresh network on the full
    memory and scores it on test examples of the seen classes.
    """
    if train_data.class_count != test_data.class_count:
        raise ValueError(
            f"train covers {train_data.class_count} classes, "
            f"test covers {test_data.class_count}"
        )
    if eval_epochs < 0:
        raise ValueError(f"eval_epochs must be >= 0, got {eval_epochs}")
    if n_eval_seeds < 1:
        raise ValueError(f"n_eval_seeds must be >= 1, got {n_eval_seeds}")
    phase_classes = split_class_phases(train_data.class_count, phases)

    memory_images: list[np.ndarray] = []
    memory_labels: list[np.ndarray] = []
    out_phases: list[ContinualPhase] = []
    per_class_budget = config.stages * config.per_stage_ipc

    for p, classes in enumerate(phase_classes, start=1):
        restricted = train_data.restrict_classes(
            classes, name=f"{train_data.name}:phase{p}"
        )
        phase_spec = replace(config.model, class_count=len(classes))
        phase_config = replace(
            config,
            model=phase_spec,
            seeds=tuple(mix_seed(s, "continual-phase", p) for s in config.seeds),
        )
        result = run_progressive(phase_config, restricted)
        globalize = np.asarray(classes, dtype=np.int64)
        for stage in result.sequence.stages:
            memory_images.append(stage.images)
            memory_labels.append(globalize[stage.labels])

        seen = [c for chunk in phase_classes[:p] for c in chunk]
        memory = ImageCollection(
            images=np.concatenate(memory_images, axis=0),
            labels=np.searchsorted(np.asarray(seen), np.concatenate(memory_labels)),
        )
        expected = len(seen) * per_class_budget
        if memory.count != expected:
            raise RuntimeError(
                f"memory holds {memory.count} images after phase {p}, expected {expected}"
            )
        eval_spec = replace(config.model, class_count=len(seen))
        test_seen = test_data.restrict_classes(seen)
        accs = []
        for j in range(n_eval_seeds):
            seed_cfg = replace(
                eval_cfg, seed=mix_seed(eval_cfg.seed, "continual-eval", p, j)
            )
            params = train_on(memory, eval_spec, seed_cfg, eval_epochs)
            accs.append(nn.evaluate_accuracy(eval_spec, params, test_seen))
        out_phases.append(
            ContinualPhase(
                index=p,
                classes=list(classes),
                seen_classes=seen,
                memory_size=memory.count,
                accuracies=accs,
                mean_accuracy=float(np.mean(accs)),
                result=result,
            )
        )

    return ContinualResult(
        accuracies=[ph.mean_accuracy for ph in out_phases],
        phases=out_phases,
    )

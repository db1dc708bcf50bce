"""Training pipelines for distilled stage sequences and accuracy reporting.

Three consumers of a sequence are supported: progressive (phase i trains on
the union of stages 1..i), sequential (phase i trains on stage i alone),
and union (one pass over everything). All three derive their phase seeds
and initialization the same way, so for a single-stage sequence they are
the same computation and produce bit-identical parameters.

Reports aggregate accuracies over several evaluation seeds (fresh network
per seed) and serialize to JSON lines.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import nn
from .core import LabeledDataset, StageSequence, mix_seed, union_stages
from .nn import ModelSpec, ParameterVector, TrainConfig
from .progressive import schedule_stage_epochs

EVAL_MODES = ("U", "S", "P")


@dataclass
class EvalReport:
    """Accuracies of one (mode, model) evaluation over several seeds.

    phase_schedule rows are (phase, images trained on, epochs); the
    optional phase_accuracies holds one accuracy trace per seed.
    """

    mode: str
    model: str
    seeds: list[int]
    accuracies: list[float]
    mean: float
    std: float
    phase_schedule: list[tuple[int, int, int]]
    phase_accuracies: list[list[float]] | None = None

    def __post_init__(self):
        if self.mode not in EVAL_MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {EVAL_MODES}")
        if len(self.seeds) != len(self.accuracies) or not self.seeds:
            raise ValueError("seeds and accuracies must be equal-length and nonempty")

    def verify_stats(self, tol: float = 1e-9) -> bool:
        return (
            abs(self.mean - float(np.mean(self.accuracies))) <= tol
            and abs(self.std - float(np.std(self.accuracies))) <= tol
        )

    def to_json_dict(self) -> dict:
        return {
            "kind": "eval",
            "mode": self.mode,
            "model": self.model,
            "seeds": self.seeds,
            "accuracies": self.accuracies,
            "mean": self.mean,
            "std": self.std,
            "phase_schedule": [list(row) for row in self.phase_schedule],
            "phase_accuracies": self.phase_accuracies,
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "EvalReport":
        return cls(
            mode=payload["mode"],
            model=payload["model"],
            seeds=[int(s) for s in payload["seeds"]],
            accuracies=[float(a) for a in payload["accuracies"]],
            mean=float(payload["mean"]),
            std=float(payload["std"]),
            phase_schedule=[tuple(row) for row in payload["phase_schedule"]],
            phase_accuracies=payload.get("phase_accuracies"),
        )

    @classmethod
    def build(
        cls,
        mode: str,
        model: str,
        seeds: Sequence[int],
        accuracies: Sequence[float],
        phase_schedule: Sequence[tuple[int, int, int]],
        phase_accuracies=None,
    ) -> "EvalReport":
        accs = [float(a) for a in accuracies]
        return cls(
            mode=mode,
            model=model,
            seeds=[int(s) for s in seeds],
            accuracies=accs,
            mean=float(np.mean(accs)),
            std=float(np.std(accs)),
            phase_schedule=[tuple(row) for row in phase_schedule],
            phase_accuracies=phase_accuracies,
        )


# ---------------------------------------------------------------------------
# phased training
# ---------------------------------------------------------------------------


def train_on(
    collection,
    spec: ModelSpec,
    cfg: TrainConfig,
    epochs: int,
    phase: int = 1,
    params: ParameterVector | None = None,
    observer: Callable | None = None,
) -> ParameterVector:
    """Train for one phase; the shared primitive behind every pipeline.

    A fresh network is initialized from (cfg.seed, "eval-init") when no
    parameters are handed in; the shuffle stream comes from
    (cfg.seed, phase), so pipelines that agree on these inputs agree
    bitwise on the output.
    """
    if params is None:
        params = nn.init_params(spec, mix_seed(cfg.seed, "eval-init"))
    run_cfg = replace(cfg, epochs=epochs, seed=mix_seed(cfg.seed, "phase", phase))
    return nn.train(spec, params, collection, run_cfg, batch_observer=observer).params


def _phase_lr(sequence: StageSequence, stage: int, cfg: TrainConfig) -> float:
    learned = sequence.stages[stage - 1].learned_lr
    return cfg.lr if learned is None else learned


def _run_phases(
    sequence: StageSequence,
    spec: ModelSpec,
    cfg: TrainConfig,
    epoch_schedule: Sequence[int],
    collection_fn: Callable[[int], object],
    observer_factory: Callable[[int, object], Callable | None] | None = None,
    phase_callback: Callable[[int, ParameterVector], None] | None = None,
) -> ParameterVector:
    if len(epoch_schedule) != sequence.stage_count:
        raise ValueError(
            f"epoch schedule has {len(epoch_schedule)} entries for "
            f"{sequence.stage_count} stages"
        )
    params = None
    for i in range(1, sequence.stage_count + 1):
        collection = collection_fn(i)
        phase_cfg = replace(cfg, lr=_phase_lr(sequence, i, cfg))
        observer = observer_factory(i, collection) if observer_factory else None
        params = train_on(
            collection, spec, phase_cfg, int(epoch_schedule[i - 1]),
            phase=i, params=params, observer=observer,
        )
        if phase_callback is not None:
            phase_callback(i, params)
    return params


def train_progressive(
    sequence: StageSequence,
    spec: ModelSpec,
    cfg: TrainConfig,
    epoch_schedule: Sequence[int],
    observer_factory=None,
    phase_callback=None,
) -> ParameterVector:
    """Phase i trains on the union of stages 1..i."""
    return _run_phases(
        sequence, spec, cfg, epoch_schedule,
        collection_fn=lambda i: union_stages(sequence, i),
        observer_factory=observer_factory,
        phase_callback=phase_callback,
    )


def train_sequential(
    sequence: StageSequence,
    spec: ModelSpec,
    cfg: TrainConfig,
    epoch_schedule: Sequence[int],
    observer_factory=None,
    phase_callback=None,
) -> ParameterVector:
    """Phase i trains on stage i alone."""
    return _run_phases(
        sequence, spec, cfg, epoch_schedule,
        collection_fn=lambda i: sequence.stages[i - 1],
        observer_factory=observer_factory,
        phase_callback=phase_callback,
    )


def train_union(
    sequence: StageSequence,
    spec: ModelSpec,
    cfg: TrainConfig,
    total_epochs: int,
    observer_factory=None,
) -> ParameterVector:
    """One training pass over the union of all stages.

    Uses the stage-1 learned lr when present (single-rate pipeline), and
    the same init/shuffle derivations as phase 1 of the other modes.
    """
    collection = union_stages(sequence, sequence.stage_count)
    phase_cfg = replace(cfg, lr=_phase_lr(sequence, 1, cfg))
    observer = observer_factory(1, collection) if observer_factory else None
    return train_on(collection, spec, phase_cfg, total_epochs, phase=1, observer=observer)


# ---------------------------------------------------------------------------
# multi-seed evaluation
# ---------------------------------------------------------------------------


def default_epoch_schedule(stages: int, multiplier: float = 1.0) -> list[int]:
    return [schedule_stage_epochs(stages, multiplier)] * stages


def _phase_schedule_rows(
    sequence: StageSequence, mode: str, epoch_schedule: Sequence[int]
) -> list[tuple[int, int, int]]:
    rows = []
    if mode == "U":
        total = union_stages(sequence, sequence.stage_count).count
        rows.append((1, total, int(sum(epoch_schedule))))
    else:
        for i in range(1, sequence.stage_count + 1):
            if mode == "P":
                seen = union_stages(sequence, i).count
            else:
                seen = sequence.stages[i - 1].count
            rows.append((i, seen, int(epoch_schedule[i - 1])))
    return rows


def evaluate_sequence(
    sequence: StageSequence,
    spec: ModelSpec,
    cfg: TrainConfig,
    test: LabeledDataset,
    modes: Sequence[str] = ("P",),
    epoch_schedule: Sequence[int] | None = None,
    seeds: Sequence[int] | None = None,
    n_seeds: int = 5,
    record_phase_curves: bool = False,
) -> list[EvalReport]:
    """Train and score fresh networks for each requested mode and seed.

    Seeds default to n_seeds values derived from cfg.seed; pass an
    explicit list to pin them. Reports are deterministic functions of
    (sequence, spec, cfg, seeds).
    """
    if sequence.stage_count == 0:
        raise ValueError("cannot evaluate an empty sequence")
    if test.count == 0:
        raise ValueError("cannot evaluate on an empty test set")
    if epoch_schedule is None:
        epoch_schedule = default_epoch_schedule(sequence.stage_count)
    if seeds is None:
        if n_seeds < 1:
            raise ValueError(f"n_seeds must be >= 1, got {n_seeds}")
        seeds = [mix_seed(cfg.seed, "eval-seed", j) for j in range(n_seeds)]
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("seeds list is empty")

    reports = []
    for mode in modes:
        if mode not in EVAL_MODES:
            raise ValueError(f"unknown mode {mode!r}, expected one of {EVAL_MODES}")
        accuracies = []
        curves: list[list[float]] | None = [] if record_phase_curves and mode != "U" else None
        for seed in seeds:
            seed_cfg = replace(cfg, seed=seed)
            if mode == "U":
                params = train_union(sequence, spec, seed_cfg, int(sum(epoch_schedule)))
            else:
                trace: list[float] = []
                callback = None
                if curves is not None:
                    def callback(phase, pv, _trace=trace):
                        _trace.append(nn.evaluate_accuracy(spec, pv, test))
                trainer = train_progressive if mode == "P" else train_sequential
                params = trainer(
                    sequence, spec, seed_cfg, epoch_schedule, phase_callback=callback
                )
                if curves is not None:
                    curves.append(trace)
            accuracies.append(nn.evaluate_accuracy(spec, params, test))
        reports.append(
            EvalReport.build(
                mode=mode,
                model=spec.name,
                seeds=seeds,
                accuracies=accuracies,
                phase_schedule=_phase_schedule_rows(sequence, mode, epoch_schedule),
                phase_accuracies=curves,
            )
        )
    return reports


def cross_arch_eval(
    sequence: StageSequence,
    alt_spec: ModelSpec,
    cfg: TrainConfig,
    test: LabeledDataset,
    epoch_schedule: Sequence[int] | None = None,
    seeds: Sequence[int] | None = None,
    n_seeds: int = 5,
) -> EvalReport:
    """Progressive evaluation under a different architecture.

    With alt_spec equal to the distillation architecture this is exactly
    the ordinary progressive evaluation.
    """
    return evaluate_sequence(
        sequence, alt_spec, cfg, test,
        modes=("P",), epoch_schedule=epoch_schedule, seeds=seeds, n_seeds=n_seeds,
    )[0]


def random_selection_accuracies(
    data: LabeledDataset,
    spec: ModelSpec,
    cfg: TrainConfig,
    images_per_class: int,
    epochs: int,
    test: LabeledDataset,
    seeds: Sequence[int],
) -> list[float]:
    """Baseline: train on randomly chosen real examples per class.

    Each seed draws its own subset and its own fresh network, mirroring
    the evaluation pipelines' seed handling.
    """
    from .core import init_synthetic_set

    out = []
    for seed in seeds:
        seed = int(seed)
        subset = init_synthetic_set(
            data, images_per_class, "real-sample", mix_seed(seed, "random-select")
        )
        params = train_on(subset, spec, replace(cfg, seed=seed), epochs)
        out.append(nn.evaluate_accuracy(spec, params, test))
    return out


# ---------------------------------------------------------------------------
# report IO
# ---------------------------------------------------------------------------


def append_reports(path, reports: Iterable[EvalReport]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        for report in reports:
            fh.write(json.dumps(report.to_json_dict(), sort_keys=True) + "\n")


def read_report_dicts(path) -> list[dict]:
    path = Path(path)
    out = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def write_stage_accuracy_csv(report_dicts: Sequence[dict], csv_path) -> None:
    """Flatten reports into (mode, model, phase, mean accuracy) rows.

    Reports without per-phase traces contribute a single final-phase row.
    """
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "model", "phase", "mean_accuracy", "std_accuracy", "n_seeds"])
        for rep in report_dicts:
            if rep.get("kind") not in (None, "eval"):
                continue
            curves = rep.get("phase_accuracies")
            if curves:
                per_phase = np.asarray(curves, dtype=np.float64)
                for phase in range(per_phase.shape[1]):
                    writer.writerow([
                        rep["mode"], rep["model"], phase + 1,
                        f"{per_phase[:, phase].mean():.6f}",
                        f"{per_phase[:, phase].std():.6f}",
                        len(rep["seeds"]),
                    ])
            else:
                final_phase = rep["phase_schedule"][-1][0]
                writer.writerow([
                    rep["mode"], rep["model"], final_phase,
                    f"{rep['mean']:.6f}", f"{rep['std']:.6f}", len(rep["seeds"]),
                ])

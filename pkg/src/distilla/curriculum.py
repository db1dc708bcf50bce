"""Forgetting-score curriculum: order real data from easy to hard.

An example's forgetting count is the number of times it goes from
correctly classified to misclassified across periodic evaluations of one
training run. Low counts mean easy, stable examples; stage i of a staged
distillation then draws only from the examples whose count falls in
[width * (i-1), width * i), and anything at or above width * P is dropped
as too unstable to distill from.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .core import LabeledDataset, mix_seed
from .nn import ModelSpec, TrainConfig
from .progressive import ProgressiveConfig, ProgressiveResult, run_progressive

FORGETTING_FILE = "forgetting.json"
DEFAULT_BIN_WIDTH = 3


@dataclass
class ForgettingRecord:
    """Per-example forgetting counts from one scoring run.

    ``histories`` (when kept) is a bool matrix [examples, evaluations] of
    correctness; counts are its correct-to-wrong transition counts.
    """

    counts: np.ndarray
    ever_learned: np.ndarray
    eval_every: int
    seed: int
    histories: np.ndarray | None = None

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        ever = np.asarray(self.ever_learned, dtype=bool)
        if counts.ndim != 1 or ever.shape != counts.shape:
            raise ValueError("counts and ever_learned must be matching 1-D arrays")
        if counts.size and counts.min() < 0:
            raise ValueError("forgetting counts cannot be negative")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.histories is not None:
            hist = np.asarray(self.histories, dtype=bool)
            if hist.ndim != 2 or hist.shape[0] != counts.size:
                raise ValueError(
                    f"histories must be [examples, evals], got shape {hist.shape}"
                )
            self.histories = hist
        self.counts = counts
        self.ever_learned = ever

    @property
    def example_count(self) -> int:
        return self.counts.size


def forgetting_counts(histories: np.ndarray) -> np.ndarray:
    """Correct-to-wrong transition counts per row of a correctness matrix.

    Single incremental pass over evaluation columns, the same update the
    scoring run applies online.
    """
    hist = np.asarray(histories, dtype=bool)
    if hist.ndim != 2:
        raise ValueError(f"histories must be 2-D, got shape {hist.shape}")
    counts = np.zeros(hist.shape[0], dtype=np.int64)
    prev = None
    for col in range(hist.shape[1]):
        cur = hist[:, col]
        if prev is not None:
            counts += (prev & ~cur).astype(np.int64)
        prev = cur
    return counts


def _correct_mask(spec: ModelSpec, values, data: LabeledDataset) -> np.ndarray:
    preds = nn.predict_labels(spec, values, data.images)
    return preds == data.labels


def compute_forgetting_scores(
    spec: ModelSpec,
    data: LabeledDataset,
    cfg: TrainConfig,
    eval_every: int = 1,
) -> ForgettingRecord:
    """Train once and track per-example correctness every eval_every epochs.

    Counts are accumulated online as each evaluation lands; the full
    history matrix is kept on the record for auditing.
    """
    if eval_every < 1:
        raise ValueError(f"eval_every must be >= 1, got {eval_every}")
    if data.count == 0:
        raise ValueError("cannot score an empty dataset")
    params = nn.init_params(spec, mix_seed(cfg.seed, "forget-init"))
    counts = np.zeros(data.count, dtype=np.int64)
    rows: list[np.ndarray] = []
    state = {"prev": None}

    def hook(epoch: int, values) -> None:
        if epoch % eval_every != 0:
            return
        correct = _correct_mask(spec, values, data)
        if state["prev"] is not None:
            counts[state["prev"] & ~correct] += 1
        state["prev"] = correct
        rows.append(correct)

    nn.train(spec, params, data, cfg, epoch_hook=hook)
    if rows:
        histories = np.stack(rows, axis=1)
        ever = histories.any(axis=1)
    else:
        histories = np.zeros((data.count, 0), dtype=bool)
        ever = np.zeros(data.count, dtype=bool)
    return ForgettingRecord(
        counts=counts,
        ever_learned=ever,
        eval_every=eval_every,
        seed=cfg.seed,
        histories=histories,
    )


def partition_by_forgetting(
    record: ForgettingRecord,
    stages: int,
    bin_width: int = DEFAULT_BIN_WIDTH,
) -> tuple[list[np.ndarray], float]:
    """Split example indices into per-stage bins by forgetting count.

    Stage i receives counts in [bin_width * (i-1), bin_width * i); counts
    of bin_width * stages or more are excluded. Returns the bins and the
    fraction of the dataset they cover.
    """
    if stages < 1:
        raise ValueError(f"stages must be >= 1, got {stages}")
    if bin_width < 1:
        raise ValueError(f"bin_width must be >= 1, got {bin_width}")
    counts = record.counts
    bins = []
    for i in range(1, stages + 1):
        lo, hi = bin_width * (i - 1), bin_width * i
        bins.append(np.flatnonzero((counts >= lo) & (counts < hi)))
    used = sum(b.size for b in bins)
    fraction = used / counts.size if counts.size else 0.0
    return bins, float(fraction)


def run_progressive_curriculum(
    config: ProgressiveConfig,
    data: LabeledDataset,
    record: ForgettingRecord,
    bin_width: int = DEFAULT_BIN_WIDTH,
    digest: str | None = None,
) -> ProgressiveResult:
    """Staged distillation where stage i only sees its forgetting bin."""
    if record.example_count != data.count:
        raise ValueError(
            f"record scores {record.example_count} examples, dataset has {data.count}"
        )
    bins, _ = partition_by_forgetting(record, config.stages, bin_width)
    for i, bin_idx in enumerate(bins, start=1):
        if bin_idx.size == 0:
            raise ValueError(
                f"forgetting bin for stage {i} is empty "
                f"(counts in [{bin_width * (i - 1)}, {bin_width * i}))"
            )

    def stage_data(i: int) -> LabeledDataset:
        return data.subset(bins[i - 1], name=f"{data.name}:forgetting-bin-{i}")

    return run_progressive(config, data, stage_data_fn=stage_data, digest=digest)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_forgetting_record(record: ForgettingRecord, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": 1,
        "kind": "forgetting-record",
        "counts": record.counts.tolist(),
        "ever_learned": record.ever_learned.tolist(),
        "eval_every": record.eval_every,
        "seed": record.seed,
    }
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_forgetting_record(path) -> ForgettingRecord:
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"missing forgetting record: {path}")
    payload = json.loads(path.read_text(encoding="utf-8"))
    return ForgettingRecord(
        counts=np.asarray(payload["counts"], dtype=np.int64),
        ever_learned=np.asarray(payload["ever_learned"], dtype=bool),
        eval_every=int(payload["eval_every"]),
        seed=int(payload["seed"]),
    )

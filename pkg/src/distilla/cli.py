"""Command line driver.

Every command takes a JSON experiment config; outputs land under the
config's output_dir, resolved against DISTILLA_WORKDIR when that is set
(else the working directory). Exit codes: 0 success, 2 config problems,
3 runtime failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import config as cfgmod
from . import continual as continualmod
from . import curriculum, evaluation, nn, progressive
from .config import ConfigError
from .core import load_stage_sequence
from .distill import generate_expert_trajectories, save_expert_store

REPORTS_FILE = "reports.jsonl"


def _workdir_root() -> Path:
    return Path(os.environ.get("DISTILLA_WORKDIR", "."))


def _output_dir(payload: dict, override: str | None) -> Path:
    if override:
        return Path(override)
    return _workdir_root() / payload["output_dir"]


def _load(args) -> dict:
    return cfgmod.load_config(args.config)


def cmd_distill(args) -> None:
    payload = _load(args)
    train, _ = cfgmod.build_datasets(payload, Path(args.config).parent)
    model = cfgmod.build_model(payload, train)
    pconfig = cfgmod.build_progressive_config(payload, model)
    digest = cfgmod.config_digest(payload)
    out = _output_dir(payload, args.out)

    scores_path = payload["progressive"].get("forgetting_scores")
    if scores_path is not None:
        path = Path(scores_path)
        if not path.is_absolute():
            path = _workdir_root() / path
        record = curriculum.load_forgetting_record(path)
        result = curriculum.run_progressive_curriculum(
            pconfig, train, record, digest=digest
        )
    else:
        result = progressive.run_progressive(pconfig, train, digest=digest)

    progressive.save_progressive_result(result, out)
    for rec in result.stage_records:
        first = rec.losses[0] if rec.losses else float("nan")
        last = rec.losses[-1] if rec.losses else float("nan")
        print(f"stage {rec.index}: match loss {first:.4f} -> {last:.4f}")
    print(f"wrote {pconfig.stages} stages to {out}")


def cmd_experts(args) -> None:
    payload = _load(args)
    train, _ = cfgmod.build_datasets(payload, Path(args.config).parent)
    model = cfgmod.build_model(payload, train)
    pconfig = cfgmod.build_progressive_config(payload, model)
    if pconfig.expert.snapshot_every < 1:
        raise ConfigError("progressive.expert.snapshot_every: must be >= 1 to record experts")
    out = _output_dir(payload, args.out) / "experts"
    starts = [
        nn.init_params(model, progressive.stage_init_seed(pconfig, 1, k))
        for k in range(pconfig.expert_count)
    ]
    store = generate_expert_trajectories(
        model,
        train,
        starts,
        replace(pconfig.expert, seed=progressive.stage_expert_seed(pconfig, 1)),
        pconfig.expert_count,
        pconfig.expert.snapshot_every,
        stage_index=1,
        origin="fresh-init",
    )
    save_expert_store(store, out)
    steps = [s for s, _ in store.experts[0].snapshots]
    print(f"wrote {store.expert_count} expert trajectories ({len(steps)} snapshots each) to {out}")


def cmd_eval(args) -> None:
    payload = _load(args)
    train, test = cfgmod.build_datasets(payload, Path(args.config).parent)
    settings = cfgmod.eval_settings(payload)
    if args.arch:
        model = cfgmod.build_alt_model(payload, args.arch, train)
    else:
        model = cfgmod.build_model(payload, train)
    sequence = load_stage_sequence(args.sequence_dir)
    schedule = evaluation.default_epoch_schedule(
        sequence.stage_count, settings["epoch_multiplier"]
    )
    modes = args.mode if args.mode else settings["modes"]
    n_seeds = args.seeds if args.seeds is not None else settings["n_seeds"]
    reports = evaluation.evaluate_sequence(
        sequence,
        model,
        settings["cfg"],
        test,
        modes=modes,
        epoch_schedule=schedule,
        n_seeds=n_seeds,
        record_phase_curves=settings["record_phase_curves"],
    )
    out = _output_dir(payload, args.out)
    evaluation.append_reports(out / REPORTS_FILE, reports)
    for rep in reports:
        print(f"mode {rep.mode} [{rep.model}]: {rep.mean:.4f} +- {rep.std:.4f} over {len(rep.seeds)} seeds")


def cmd_forgetting(args) -> None:
    payload = _load(args)
    train, _ = cfgmod.build_datasets(payload, Path(args.config).parent)
    model = cfgmod.build_model(payload, train)
    settings = cfgmod.forgetting_settings(payload)
    record = curriculum.compute_forgetting_scores(
        model, train, settings["train"], settings["eval_every"]
    )
    out = _output_dir(payload, args.out)
    curriculum.save_forgetting_record(record, out / curriculum.FORGETTING_FILE)
    stable = float((record.counts == 0).mean()) if record.example_count else 0.0
    print(
        f"scored {record.example_count} examples: "
        f"max count {int(record.counts.max()) if record.example_count else 0}, "
        f"{stable:.1%} never forgotten"
    )
    print(f"wrote {out / curriculum.FORGETTING_FILE}")


def cmd_continual(args) -> None:
    payload = _load(args)
    train, test = cfgmod.build_datasets(payload, Path(args.config).parent)
    model = cfgmod.build_model(payload, train)
    pconfig = cfgmod.build_progressive_config(payload, model)
    settings = cfgmod.continual_settings(payload)
    eval_section = cfgmod.eval_settings(payload)
    result = continualmod.run_continual(
        pconfig,
        train,
        test,
        settings["phases"],
        eval_section["cfg"],
        settings["eval_epochs"],
        n_eval_seeds=settings["n_eval_seeds"],
    )
    out = _output_dir(payload, args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / REPORTS_FILE).open("a", encoding="utf-8") as fh:
        for phase in result.phases:
            row = {
                "kind": "continual",
                "phase": phase.index,
                "classes": phase.classes,
                "seen_classes": len(phase.seen_classes),
                "memory_size": phase.memory_size,
                "accuracies": phase.accuracies,
                "mean": phase.mean_accuracy,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    for phase in result.phases:
        print(
            f"phase {phase.index}: {len(phase.seen_classes)} classes seen, "
            f"memory {phase.memory_size}, accuracy {phase.mean_accuracy:.4f}"
        )


def cmd_plot(args) -> None:
    payload = _load(args)
    out = _output_dir(payload, args.out)
    reports_path = Path(args.reports) if args.reports else out / REPORTS_FILE
    if not reports_path.is_file():
        raise FileNotFoundError(f"no reports file at {reports_path}")
    csv_path = Path(args.csv) if args.csv else out / "accuracy_vs_stage.csv"
    rows = evaluation.read_report_dicts(reports_path)
    evaluation.write_stage_accuracy_csv(rows, csv_path)
    print(f"wrote {csv_path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distilla",
        description="staged dataset distillation: synthesize, evaluate, analyze",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("distill", help="run a staged distillation")
    p.add_argument("config")
    p.add_argument("--out", help="override the output directory")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("experts", help="record expert trajectories on real data")
    p.add_argument("config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_experts)

    p = sub.add_parser("eval", help="train and score fresh networks on a sequence")
    p.add_argument("sequence_dir")
    p.add_argument("config")
    p.add_argument("--mode", action="append", choices=evaluation.EVAL_MODES,
                   help="pipeline to run (repeatable); default from the config")
    p.add_argument("--arch", help="name of an alt_models entry to evaluate with")
    p.add_argument("--seeds", type=int, help="number of evaluation seeds")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("forgetting", help="score per-example forgetting counts")
    p.add_argument("config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_forgetting)

    p = sub.add_parser("continual", help="class-incremental distillation run")
    p.add_argument("config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_continual)

    p = sub.add_parser("plot", help="flatten eval reports into a CSV")
    p.add_argument("config")
    p.add_argument("--reports")
    p.add_argument("--csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - boundary between library and shell
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

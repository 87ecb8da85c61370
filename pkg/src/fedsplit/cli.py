"""Command-line entry point: run one method or sweep one axis.

Config is a single JSON document mirroring ExperimentConfig; every flag maps
1:1 to a config field and overrides the file value.  Outputs per run:
report.json, rounds.csv, affinity_r<r>.csv (merged-phase rounds), summary.txt,
manifest.json (content hashes of every emitted file).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import statistics
import sys
import time
from pathlib import Path

from .affinity import AffinityMatrix, write_affinity_csv
from .config import ConfigError, ExperimentConfig, load_config
from .sim import ExperimentReport, run_experiment

# CLI flag -> config field; sweep axis name -> config field.
FLAG_FIELDS = {
    "method": "method",
    "splits": "splits",
    "rounds": "rounds",
    "r0": "r0",
    "score_round": "score_round",
    "rho": "rho",
    "clients": "clients",
    "select": "select",
    "epochs": "epochs",
    "seed": "seed",
}
SWEEP_AXES = {"R0": "r0", "E": "epochs", "K": "select", "x": "splits"}


def report_json(report: ExperimentReport) -> str:
    """Canonical byte-stable serialization: sorted keys, fixed indent."""
    return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"


def write_rounds_csv(report: ExperimentReport, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["round", "phase", "task", "split_id", "train_loss", "test_loss"]
        )
        writer.writeheader()
        for row in report.rounds:
            writer.writerow(
                {
                    "round": row["round"],
                    "phase": row["phase"],
                    "task": row["task"],
                    "split_id": row["split_id"],
                    "train_loss": repr(row["train_loss"]),
                    "test_loss": repr(row["test_loss"]),
                }
            )


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(
    out_dir: Path, cfg_dict: dict, cfg_hash: str, outputs: list[Path], status: str, error: str = ""
) -> None:
    manifest = {
        "status": status,
        "error": error,
        "config": cfg_dict,
        "config_hash": cfg_hash,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": {
            str(p.relative_to(out_dir)): _sha256(p) for p in sorted(outputs) if p.exists()
        },
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _summary_line(report: ExperimentReport) -> tuple[str, float, float, float]:
    method = report.method
    if report.method == "mas" and report.partition is not None:
        method = f"mas-{len(report.partition['blocks'])}"
    return (
        method,
        report.final_total_test_loss,
        report.cost["time"]["total"],
        report.cost["energy"]["total"],
    )


def write_summary(lines: list[tuple[str, float, float, float]], path: Path, note: str = "") -> None:
    header = f"{'method':<14} {'total_test_loss':>16} {'time_proxy':>16} {'energy_proxy':>16}"
    body = [header, "-" * len(header)]
    for method, loss, time_proxy, energy in lines:
        body.append(f"{method:<14} {loss:>16.6f} {time_proxy:>16.4g} {energy:>16.4g}")
    if note:
        body.append(note)
    path.write_text("\n".join(body) + "\n")


def _emit_run_outputs(report: ExperimentReport, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    report_path = out_dir / "report.json"
    report_path.write_text(report_json(report))
    outputs.append(report_path)

    rounds_path = out_dir / "rounds.csv"
    write_rounds_csv(report, rounds_path)
    outputs.append(rounds_path)

    for tag, payload in report.affinity_rounds.items():
        matrix = AffinityMatrix(
            tuple(payload["tasks"]),
            [[float(v) for v in row] for row in payload["scores"]],
            round_tag=int(tag),
        )
        path = out_dir / f"affinity_r{tag}.csv"
        write_affinity_csv(matrix, path)
        outputs.append(path)

    summary_path = out_dir / "summary.txt"
    write_summary([_summary_line(report)], summary_path)
    outputs.append(summary_path)
    return outputs


def _build_config(args: argparse.Namespace, overrides: dict) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    data = cfg.to_dict()
    data.update(overrides)
    cfg = ExperimentConfig.from_dict(data)
    cfg.validate()
    return cfg


def _flag_overrides(args: argparse.Namespace) -> dict:
    overrides = {}
    for flag, field in FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field] = value
    return overrides


def _parse_seeds(args: argparse.Namespace) -> list[int]:
    if getattr(args, "seeds", None):
        return [int(s) for s in args.seeds.split(",") if s.strip()]
    return []


def cmd_run(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    overrides = _flag_overrides(args)
    seeds = _parse_seeds(args)
    try:
        base_cfg = _build_config(args, overrides)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2

    out_dir.mkdir(parents=True, exist_ok=True)
    all_outputs: list[Path] = []
    lines = []
    totals = []
    try:
        if not seeds:
            report = run_experiment(base_cfg)
            all_outputs.extend(_emit_run_outputs(report, out_dir))
            lines.append(_summary_line(report))
        else:
            for seed in seeds:
                cfg = ExperimentConfig.from_dict({**base_cfg.to_dict(), "seed": seed})
                cfg.validate()
                report = run_experiment(cfg)
                run_outputs = _emit_run_outputs(report, out_dir / f"seed_{seed}")
                all_outputs.extend(run_outputs)
                lines.append((f"{_summary_line(report)[0]} (seed {seed})",) + _summary_line(report)[1:])
                totals.append(report.final_total_test_loss)
            note = ""
            if len(totals) > 1:
                note = (
                    f"\nmean total_test_loss {statistics.mean(totals):.6f} "
                    f"+/- {statistics.stdev(totals):.6f} over {len(totals)} seeds"
                )
            summary_path = out_dir / "summary.txt"
            write_summary(lines, summary_path, note=note)
            all_outputs.append(summary_path)
    except Exception as exc:  # noqa: BLE001 - report failure in the manifest
        _write_manifest(
            out_dir, base_cfg.to_dict(), base_cfg.config_hash(), all_outputs, "partial", str(exc)
        )
        print(f"run failed: {exc}", file=sys.stderr)
        return 1

    _write_manifest(out_dir, base_cfg.to_dict(), base_cfg.config_hash(), all_outputs, "complete")
    print(f"wrote {len(all_outputs) + 1} files to {out_dir}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    if args.axis not in SWEEP_AXES:
        print(f"invalid axis {args.axis!r}: choose from {sorted(SWEEP_AXES)}", file=sys.stderr)
        return 2
    field = SWEEP_AXES[args.axis]
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        print(f"invalid --values {args.values!r}: need comma-separated ints", file=sys.stderr)
        return 2
    if not values:
        print("no sweep values given", file=sys.stderr)
        return 2

    overrides = _flag_overrides(args)
    seeds = _parse_seeds(args) or None
    out_dir = Path(args.out)
    try:
        base_cfg = _build_config(args, overrides)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    if seeds is None:
        seeds = [base_cfg.seed]

    out_dir.mkdir(parents=True, exist_ok=True)
    sweep_rows = []
    all_outputs: list[Path] = []
    try:
        for value in values:
            for seed in seeds:
                cfg = ExperimentConfig.from_dict(
                    {**base_cfg.to_dict(), field: value, "seed": seed}
                )
                cfg.validate()
                report = run_experiment(cfg)
                run_dir = out_dir / f"{args.axis}_{value}" / f"seed_{seed}"
                all_outputs.extend(_emit_run_outputs(report, run_dir))
                sweep_rows.append(
                    {
                        "axis": args.axis,
                        "value": value,
                        "seed": seed,
                        "total_test_loss": report.final_total_test_loss,
                        "time_proxy": report.cost["time"]["total"],
                    }
                )
    except Exception as exc:  # noqa: BLE001
        _write_manifest(
            out_dir, base_cfg.to_dict(), base_cfg.config_hash(), all_outputs, "partial", str(exc)
        )
        print(f"sweep failed: {exc}", file=sys.stderr)
        return 1

    sweep_path = out_dir / "sweep.csv"
    with open(sweep_path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["axis", "value", "seed", "total_test_loss", "time_proxy"]
        )
        writer.writeheader()
        for row in sweep_rows:
            writer.writerow(row)
    all_outputs.append(sweep_path)
    _write_manifest(out_dir, base_cfg.to_dict(), base_cfg.config_hash(), all_outputs, "complete")
    print(f"swept {args.axis} over {values}: {sweep_path}")
    return 0


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (defaults used when omitted)")
    parser.add_argument("--method", choices=["mas", "all_in_one", "one_by_one", "standalone"])
    parser.add_argument("--splits", type=int, help="number of task groups (x)")
    parser.add_argument("--rounds", type=int, help="total training rounds (R)")
    parser.add_argument("--r0", type=int, help="merged rounds before the split (R0)")
    parser.add_argument("--score-round", dest="score_round", type=int,
                        help="round whose affinity matrix drives the split")
    parser.add_argument("--rho", type=int, help="measure affinity every rho batches; 0 disables")
    parser.add_argument("--clients", type=int, help="client pool size (N)")
    parser.add_argument("--select", type=int, help="clients selected per round (K)")
    parser.add_argument("--epochs", type=int, help="local epochs per round (E)")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--seeds", help="comma-separated seeds; fans out one run per seed")
    parser.add_argument("--out", default="runs/out", help="output directory")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="fedsplit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one method and emit reports")
    _add_common_flags(run_p)
    run_p.set_defaults(func=cmd_run)

    sweep_p = sub.add_parser("sweep", help="one run per (axis value, seed); tidy CSV out")
    sweep_p.add_argument("--axis", required=True, help="one of R0, E, K, x")
    sweep_p.add_argument("--values", required=True, help="comma-separated axis values")
    _add_common_flags(sweep_p)
    sweep_p.set_defaults(func=cmd_sweep)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

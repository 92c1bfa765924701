"""Command-line experiment runner.

Three verbs operate on a JSON config file:

* ``uman validate <config>`` checks the file and prints the realized class
  layout and Jaccard table;
* ``uman run <config>`` trains every configured (method, seed) pair and
  writes per-run artifacts plus a summary CSV;
* ``uman sweep <config> --axis <name> --values a,b,c [--jobs N]`` repeats
  the run along one axis and aggregates the results.

The environment variable UMAN_SEED_OFFSET (integer, default 0) is added to
every seed, which relocates an entire experiment to a fresh seed
neighbourhood without touching the config file. Outputs are deterministic:
the same config, seeds, and offset produce byte-identical CSV files.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

from .config import (
    SWEEP_AXES,
    ExperimentConfig,
    config_hash,
    derive_sweep_cell,
    load_config,
    parse_config,
    canonical_dict,
)
from .core import TrainingDiverged
from .evaluate import run_method
from .labelspace import (
    jaccard_source_source,
    jaccard_source_target,
    partition_from_matrix,
)
from .nn import NonFiniteGradientError
from .synth import generate

__all__ = ["main", "execute_run", "execute_sweep", "seed_offset"]


def seed_offset() -> int:
    raw = os.environ.get("UMAN_SEED_OFFSET", "0").strip() or "0"
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"UMAN_SEED_OFFSET must be an integer, got {raw!r}")


def _fmt_set(values) -> str:
    return "{" + ", ".join(str(v) for v in values) + "}"


def cmd_validate(path) -> int:
    config, problems = load_config(path)
    if problems:
        for p in problems:
            print(f"invalid: {p}")
        return 1
    partition = partition_from_matrix(config.matrix)
    print(f"config {config_hash(config)} is valid")
    print(f"{partition.n_sources} sources, {partition.total_classes} classes total")
    for i in range(1, partition.n_sources + 1):
        print(
            f"source {i}: shared {_fmt_set(partition.common_per_source[i - 1])} "
            f"private {_fmt_set(partition.private_per_source[i - 1])}"
        )
    print(
        f"target: shared {_fmt_set(partition.common_union)} "
        f"private {_fmt_set(partition.target_private)}"
    )
    for i in range(1, partition.n_sources + 1):
        a = set(partition.source_labels[i - 1])
        b = set(partition.target_labels)
        print(f"xi_{i} = {len(a & b)}/{len(a | b)} = {jaccard_source_target(partition, i):.4f}")
    for i in range(1, partition.n_sources + 1):
        for j in range(i + 1, partition.n_sources + 1):
            a = set(partition.source_labels[i - 1])
            b = set(partition.source_labels[j - 1])
            print(
                f"xi_{i}{j} = {len(a & b)}/{len(a | b)} = "
                f"{jaccard_source_source(partition, i, j):.4f}"
            )
    return 0


def _summary_header(partition) -> list[str]:
    return (
        ["config_hash", "method", "seed", "status", "mean_per_class_accuracy"]
        + [f"acc_{c}" for c in partition.common_union]
        + ["acc_unknown"]
    )


def _summary_row(partition, chash, method, seed, report=None) -> list:
    if report is None:
        return [chash, method, seed, "failed", ""] + [""] * (len(partition.common_union) + 1)
    cells = [report.per_class_accuracy.get(str(c), "") for c in partition.common_union]
    cells.append(report.per_class_accuracy.get("unknown", ""))
    return [chash, method, seed, "ok", report.mean_per_class_accuracy] + cells


def execute_run(config: ExperimentConfig, offset: int = 0, quiet: bool = False):
    """Run every (method, seed) pair of a config; returns the summary rows.

    Per-run artifacts land in <output_dir>/runs/<method>_<seed>/: the
    training trace, the final margin-register values, and the evaluation
    report. A run that diverges is recorded as a failed row and the
    remaining runs still execute.
    """
    partition = partition_from_matrix(config.matrix)
    chash = config_hash(config)
    base = Path(config.output_dir)
    rows = []
    for method in config.methods:
        for seed in config.seeds:
            spec = replace(config.synthetic, seed=config.synthetic.seed + offset + seed)
            hp = replace(config.hyperparams, seed=config.hyperparams.seed + offset + seed)
            train_sets = generate(spec, partition)
            test_target = generate(spec, partition, draw=1)[-1]
            run_dir = base / "runs" / f"{method}_{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            try:
                result, report = run_method(
                    method, train_sets, test_target, partition, hp,
                    config_hash=chash, seed=seed,
                )
            except (TrainingDiverged, NonFiniteGradientError) as exc:
                rows.append(_summary_row(partition, chash, method, seed))
                if not quiet:
                    print(f"{method} seed {seed}: FAILED ({exc})")
                continue
            _write_trace(run_dir / "trace.csv", result.trace)
            _write_register(run_dir / "tmr.csv", result.register)
            with open(run_dir / "report.json", "w") as fh:
                json.dump(asdict(report), fh, sort_keys=True, indent=2)
                fh.write("\n")
            rows.append(_summary_row(partition, chash, method, seed, report))
            if not quiet:
                print(f"{method} seed {seed}: mean accuracy {report.mean_per_class_accuracy:.4f}")
    return rows


def _write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        n_src = len(trace[0].source_errors) if trace else 0
        writer.writerow(
            ["step", "class_loss", "domain_loss"]
            + [f"err_source_{i + 1}" for i in range(n_src)]
            + ["mean_weight_common", "mean_weight_private", "mean_weight_target"]
        )
        for r in trace:
            writer.writerow(
                [r.step, r.class_loss, r.domain_loss]
                + list(r.source_errors)
                + [r.mean_weight_common, r.mean_weight_private, r.mean_weight_target]
            )


def _write_register(path, register):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_index", "value"])
        writer.writerows(register.as_rows())


def _write_csv(path, header, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_run(path) -> int:
    config, problems = load_config(path)
    if problems:
        for p in problems:
            print(f"invalid: {p}")
        return 2
    partition = partition_from_matrix(config.matrix)
    rows = execute_run(config, seed_offset())
    out = Path(config.output_dir) / "summary.csv"
    _write_csv(out, _summary_header(partition), rows)
    print(f"wrote {out}")
    return 0


def _cell_worker(args):
    """Top-level so process pools can pickle it."""
    cell_json, offset = args
    config, problems = parse_config(json.loads(cell_json))
    assert not problems, problems
    partition = partition_from_matrix(config.matrix)
    rows = execute_run(config, offset, quiet=True)
    _write_csv(
        Path(config.output_dir) / "summary.csv", _summary_header(partition), rows
    )
    return rows


def execute_sweep(config: ExperimentConfig, axis: str, values, jobs: int = 1, offset: int = 0):
    """Run the config once per axis value; returns the aggregated rows.

    Every cell writes its own artifacts under <output_dir>/sweep/<axis>_<value>/
    and the aggregate (with per-seed accuracies, their mean, and the
    transfer gain over source_only where available) is returned for a
    single final write. Infeasible values become marked rows.
    """
    base = Path(config.output_dir)
    cells, agg_rows = [], {}
    for value in values:
        cell, problems = derive_sweep_cell(config, axis, value)
        if cell is None:
            agg_rows[value] = [
                [axis, value, method, "infeasible"] + [""] * (len(config.seeds) + 2)
                for method in config.methods
            ]
            continue
        cell = replace(cell, output_dir=str(base / "sweep" / f"{axis}_{value}"))
        cells.append((value, cell))

    def finish(value, cell, rows):
        by_method = {}
        for row in rows:
            by_method.setdefault(row[1], []).append(row)
        means = {}
        out = []
        for method in cell.methods:
            per_seed = []
            for row in by_method.get(method, []):
                per_seed.append(row[4] if row[3] == "ok" else "")
            ok = [v for v in per_seed if v != ""]
            mean = sum(ok) / len(ok) if ok else ""
            means[method] = mean
            status = "ok" if len(ok) == len(cell.seeds) else "partial"
            out.append([axis, value, method, status] + per_seed + [mean])
        for row in out:
            method, mean = row[2], row[-1]
            gain = ""
            if method != "source_only" and mean != "" and means.get("source_only", "") != "":
                gain = mean - means["source_only"]
            row.append(gain)
        agg_rows[value] = out

    if jobs > 1 and len(cells) > 1:
        payload = [(json.dumps(canonical_dict(cell)), offset) for _, cell in cells]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for (value, cell), rows in zip(cells, pool.map(_cell_worker, payload)):
                finish(value, cell, rows)
    else:
        for value, cell in cells:
            finish(value, cell, _cell_worker((json.dumps(canonical_dict(cell)), offset)))

    ordered = []
    for value in values:
        ordered.extend(agg_rows[value])
    return ordered


def cmd_sweep(path, axis, values, jobs) -> int:
    config, problems = load_config(path)
    if problems:
        for p in problems:
            print(f"invalid: {p}")
        return 2
    rows = execute_sweep(config, axis, values, jobs=jobs, offset=seed_offset())
    header = (
        ["axis", "value", "method", "status"]
        + [f"acc_seed_{s}" for s in config.seeds]
        + ["acc_mean", "transfer_gain"]
    )
    out = Path(config.output_dir) / f"sweep_{axis}.csv"
    _write_csv(out, header, rows)
    print(f"wrote {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="uman",
        description="multi-source adaptation experiments on synthetic domains",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_val = sub.add_parser("validate", help="check a config and print the class layout")
    p_val.add_argument("config")
    p_run = sub.add_parser("run", help="train and evaluate every (method, seed) pair")
    p_run.add_argument("config")
    p_sweep = sub.add_parser("sweep", help="repeat a run along one config axis")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p_sweep.add_argument(
        "--values", required=True,
        help="comma-separated integer axis values, e.g. 0,3,6",
    )
    p_sweep.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    args = parser.parse_args(argv)

    if args.command == "validate":
        return cmd_validate(args.config)
    if args.command == "run":
        return cmd_run(args.config)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip() != ""]
    except ValueError:
        print(f"invalid: --values must be comma-separated integers, got {args.values!r}")
        return 2
    if not values:
        print("invalid: --values is empty")
        return 2
    return cmd_sweep(args.config, args.axis, values, args.jobs)


if __name__ == "__main__":
    sys.exit(main())

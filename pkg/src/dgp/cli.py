"""Command-line entry point: run experiments, probe checkpoints, render reports.

Exit codes are a stable contract: 0 on success, 1 for usage or configuration
errors, 2 for runtime failures.  All emitted files go through temp + rename.
"""

from __future__ import annotations

import argparse
import csv
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .checkpoint import load_network, load_pool
from .config import (
    SCHEMA,
    DataConfig,
    apply_overrides,
    build_experiment_config,
    build_network_spec,
    read_config_file,
    resolve_config_path,
)
from .defense import attack_preset
from .errors import CheckpointError, ConfigError, DgpError
from .harness import (
    acc_bwt,
    atomic_write_text,
    csv_text,
    evaluate,
    load_base_dataset,
    run_experiment,
)
from .datasets import make_task_sequence, materialize_task
from .seeding import rng_for


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def build_parser() -> _Parser:
    parser = _Parser(prog="dgp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    run = sub.add_parser("run", help="train a task sequence and write the result archive")
    run.add_argument("--config", required=True, help="config file path or shipped preset name")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override one schema key (repeatable)")
    run.add_argument("--out", help="override the archive directory")
    run.add_argument("--seeds", help="override the seed list, e.g. '0 1 2'")
    run.add_argument("--synthetic", action="store_true",
                     help="force the synthetic data source")
    run.add_argument("--overwrite", action="store_true",
                     help="replace existing results in the archive directory")
    run.set_defaults(func=cmd_run)

    shared_ckpt = dict(net=("net", "network checkpoint (.dgpw)"))

    ev = sub.add_parser("eval", help="clean accuracy of a checkpoint per task")
    ev.add_argument("net", help=shared_ckpt["net"][1])
    ev.add_argument("--attack", action="append", default=[],
                    help="also evaluate this attack preset (repeatable)")
    ev.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ev.add_argument("--synthetic", action="store_true")
    ev.set_defaults(func=cmd_eval)

    atk = sub.add_parser("attack", help="clean vs. adversarial accuracy of a checkpoint")
    atk.add_argument("net", help=shared_ckpt["net"][1])
    atk.add_argument("--attack", required=True, help="attack preset name")
    atk.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    atk.add_argument("--synthetic", action="store_true")
    atk.set_defaults(func=cmd_attack)

    rep = sub.add_parser("report", help="summary tables and plot-ready series from an archive")
    rep.add_argument("archive", help="result archive directory")
    rep.add_argument("--out", help="directory for report files (default: the archive)")
    rep.set_defaults(func=cmd_report)

    ins = sub.add_parser("inspect-pool", help="per-layer basis statistics of a pool file")
    ins.add_argument("pool", help="basis pool checkpoint (.dgpp)")
    ins.set_defaults(func=cmd_inspect_pool)
    return parser


def _print_progress(event: dict):
    if "seed" in event:
        print(f"seed {event['seed']}", flush=True)
    elif "epoch" in event:
        print(
            f"  task {event['task']} epoch {event['epoch']}: "
            f"loss {event['loss']:.4f} acc {event['accuracy']:.3f}",
            flush=True,
        )
    elif "snapshot" in event:
        parts = ", ".join(f"{k} {v:.3f}" for k, v in event["snapshot"].items())
        sim = event["sim"]
        sim_text = "absent" if sim is None else f"{sim:.4f}"
        print(f"  after task {event['task']}: {parts}, sim {sim_text}", flush=True)


def cmd_run(args) -> int:
    raw = read_config_file(resolve_config_path(args.config))
    overrides = list(args.set)
    if args.out:
        overrides.append(f"experiment.output={args.out}")
    if args.seeds:
        overrides.append(f"experiment.seeds={args.seeds}")
    if args.synthetic:
        overrides.append("data.source=synthetic")
    cfg = build_experiment_config(apply_overrides(raw, overrides))
    out = run_experiment(cfg, overwrite=args.overwrite, progress=_print_progress)
    for failure in out["failures"]:
        print(f"seed {failure['seed']} failed: {failure['error']}", file=sys.stderr)
    if not out["records"]:
        print("error: every seed failed", file=sys.stderr)
        return 2
    print(f"archive written to {out['archive']}")
    for rec in out["records"]:
        for attack, acc in rec.acc.items():
            bwt = rec.bwt[attack]
            bwt_text = "absent" if bwt is None else f"{bwt:+.4f}"
            print(f"seed {rec.seed} {attack}: acc {acc:.4f} bwt {bwt_text}")
    return 0


def _parse_eval_overrides(pairs):
    """Split --set pairs into data.* replacements and the eval cap."""
    raw = apply_overrides({}, pairs)
    data_over = {}
    cap = int(SCHEMA["eval.max_eval_samples"].default)
    for key, text in raw.items():
        if key.startswith("data."):
            data_over[key.split(".", 1)[1]] = SCHEMA[key].parse(text)
        elif key == "eval.max_eval_samples":
            cap = SCHEMA[key].parse(text)
        else:
            raise ConfigError(
                f"override {key!r} does not apply here (only data.* and "
                "eval.max_eval_samples affect checkpoint evaluation)"
            )
    return data_over, cap


def _checkpoint_context(args):
    """Load a network checkpoint and rebuild its evaluation data."""
    net, meta = load_network(args.net)
    data_over, cap = _parse_eval_overrides(args.set)
    data_meta = dict(meta["data"])
    data_meta.update(data_over)
    if args.synthetic:
        data_meta["source"] = "synthetic"
    data_cfg = DataConfig(**data_meta)
    base = load_base_dataset(data_cfg)
    built = build_network_spec(meta["network_preset"], base.image_hw)
    if built.first.weight_shape != net.spec.first.weight_shape:
        h, w = base.image_hw
        raise CheckpointError(
            f"checkpoint does not match preset {meta['network_preset']!r} on "
            f"{h}x{w} images: checkpoint first-layer weights "
            f"{net.spec.first.weight_shape}, preset needs {built.first.weight_shape}"
        )
    seed = meta["seed"]
    specs = make_task_sequence(
        data_cfg.benchmark, data_cfg.num_tasks, seed,
        base, data_cfg.train_per_task, data_cfg.test_per_task,
    )
    tasks = sorted(net.task_order)
    datas = {
        t: materialize_task(specs[t - 1], base, rng_for(seed, "taskdata", t))
        for t in tasks
    }
    return net, datas, seed, cap


def _accuracy_table(rows, suite_names) -> str:
    """Aligned per-task accuracy table from evaluate() rows."""
    by_task = defaultdict(dict)
    for _, _, t, attack, value in rows:
        by_task[t][attack] = value
    headers = ["task", "clean", *suite_names]
    table = [headers]
    for t in sorted(by_task):
        table.append([str(t)] + [f"{by_task[t][a]:.4f}" for a in headers[1:]])
    means = [
        f"{np.mean([by_task[t][a] for t in by_task]):.4f}" for a in headers[1:]
    ]
    table.append(["mean", *means])
    widths = [max(len(r[i]) for r in table) for i in range(len(headers))]
    return "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in table
    )


def cmd_eval(args) -> int:
    net, datas, seed, cap = _checkpoint_context(args)
    suite = tuple((name, _resolve_attack(name)) for name in args.attack)
    rows = evaluate(net, datas, suite, cap, seed, upto=len(datas))
    print(_accuracy_table(rows, [name for name, _ in suite]))
    return 0


def _resolve_attack(name):
    try:
        return attack_preset(name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_attack(args) -> int:
    net, datas, seed, cap = _checkpoint_context(args)
    attack = _resolve_attack(args.attack)
    rows = evaluate(net, datas, ((args.attack, attack),), cap, seed, upto=len(datas))
    print(_accuracy_table(rows, [args.attack]))
    return 0


# ---------------------------------------------------------------------------
# report


def _read_csv_rows(path: Path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[1:] if rows else []


def _load_archive(archive: Path):
    for name in ("metrics.csv", "metrics.partial.csv"):
        if (archive / name).exists():
            rows = _read_csv_rows(archive / name)
            if rows:
                return rows
    raise ConfigError(f"archive {archive} contains no completed metric rows")


def _fmt_stat(mean, std) -> str:
    if mean is None:
        return "absent"
    return f"{mean:.4f} ± {std:.4f}"


def cmd_report(args) -> int:
    archive = Path(args.archive)
    out_dir = Path(args.out) if args.out else archive
    out_dir.mkdir(parents=True, exist_ok=True)
    metric_rows = _load_archive(archive)

    # r[(seed, attack)][(T, t)] = accuracy
    r = defaultdict(dict)
    attacks = []
    seeds = []
    for seed, t_now, t_prev, attack, value in metric_rows:
        r[(int(seed), attack)][(int(t_now), int(t_prev))] = float(value)
        if attack not in attacks:
            attacks.append(attack)
        if int(seed) not in seeds:
            seeds.append(int(seed))
    t_max = max(t for cells in r.values() for t, _ in cells)

    # (a) final ACC/BWT per attack, aggregated across seeds
    summary = []
    for attack in attacks:
        accs, bwts = [], []
        for seed in seeds:
            cells = r[(seed, attack)]
            matrix = np.zeros((t_max, t_max))
            for (t_now, t_prev), value in cells.items():
                matrix[t_now - 1, t_prev - 1] = value
            acc, bwt = acc_bwt(matrix)
            accs.append(acc)
            if bwt is not None:
                bwts.append(bwt)
        summary.append((
            attack,
            float(np.mean(accs)), float(np.std(accs)),
            float(np.mean(bwts)) if bwts else None,
            float(np.std(bwts)) if bwts else None,
        ))

    # (b) average accuracy over learned tasks after each checkpoint
    series = []
    for seed in seeds:
        for attack in attacks:
            cells = r[(seed, attack)]
            for t_now in range(1, t_max + 1):
                have = [cells[(t_now, t)] for t in range(1, t_now + 1) if (t_now, t) in cells]
                if have:
                    series.append((seed, attack, t_now, float(np.mean(have))))

    # (c) similarity series, if the archive carries one
    sim_rows = []
    sim_path = archive / "similarity.csv"
    if sim_path.exists():
        sim_rows = [
            (int(s), int(t), float(v) if v else None)
            for s, t, v in _read_csv_rows(sim_path)
        ]

    atomic_write_text(
        out_dir / "report_summary.csv",
        csv_text(("attack", "acc_mean", "acc_std", "bwt_mean", "bwt_std"), summary),
    )
    atomic_write_text(
        out_dir / "report_acc_series.csv",
        csv_text(("seed", "attack", "T", "acc"), series),
    )
    if sim_rows:
        atomic_write_text(
            out_dir / "report_sim_series.csv",
            csv_text(("seed", "t", "sim"), sim_rows),
        )

    lines = [f"archive: {archive}", f"seeds: {len(seeds)}, tasks: {t_max}", ""]
    lines.append("final accuracy (mean ± stddev across seeds)")
    for attack, am, astd, bm, bstd in summary:
        lines.append(
            f"  {attack:<18} acc {_fmt_stat(am, astd):<18} bwt {_fmt_stat(bm, bstd)}"
        )
    lines.append("")
    lines.append("average accuracy after each task (mean across seeds)")
    for attack in attacks:
        per_t = []
        for t_now in range(1, t_max + 1):
            vals = [v for s, a, t, v in series if a == attack and t == t_now]
            per_t.append(f"{np.mean(vals):.4f}" if vals else "-")
        lines.append(f"  {attack:<18} " + "  ".join(per_t))
    if sim_rows:
        lines.append("")
        lines.append("gradient similarity after each task (mean across seeds)")
        per_t = []
        for t_now in range(1, max(t for _, t, _ in sim_rows) + 1):
            vals = [v for _, t, v in sim_rows if t == t_now and v is not None]
            per_t.append(f"{np.mean(vals):.4f}" if vals else "absent")
        lines.append("  sim                " + "  ".join(per_t))
    text = "\n".join(lines) + "\n"
    atomic_write_text(out_dir / "report.txt", text)
    print(text, end="")
    return 0


def cmd_inspect_pool(args) -> int:
    pool, _ = load_pool(args.pool)
    print(f"pool: {args.pool}")
    for layer_index in sorted(pool.layers):
        p = pool.layers[layer_index]
        tags = ", ".join(
            f"{tag} {p.provenance.count(tag)}"
            for tag in ("activation", "gradient", "compressed")
            if tag in p.provenance
        ) or "empty"
        if p.count:
            gram = p.vectors.T @ p.vectors
            residual = float(np.abs(gram - np.eye(p.count)).max())
        else:
            residual = 0.0
        print(
            f"layer {layer_index}: dim {p.dim}, count {p.count} ({tags}), "
            f"headroom {p.dim - p.count}, orthonormality residual {residual:.3e}"
        )
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DgpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime contract: unexpected failures exit 2
        print(f"unexpected failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Task-sequence training loop, evaluation, metrics, and orchestration.

``run_experiment`` drives the whole pipeline for each seed: fresh network and
empty basis pool, then per task train / pool update / evaluate / gradient
similarity, streaming rows into the result archive as they appear.  Every
random choice flows through ``seeding.rng_for`` keyed on the run seed, so a
repeated run writes byte-identical CSV files.

Forgetting is measured two ways: the accuracy matrix R (R[T][t] = accuracy on
task t after learning task T, per attack) summarized by ACC/BWT, and the
cosine between the current and end-of-task-1 output-gradient vectors on the
stored task-1 samples.
"""

from __future__ import annotations

import csv
import json
import os
import shutil
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_network, save_pool
from .config import DataConfig, ExperimentConfig, build_network_spec
from .datasets import (
    Dataset,
    TaskData,
    downscale_dataset,
    load_mnist_dir,
    make_task_sequence,
    materialize_task,
    synthetic_dataset,
)
from .defense import cross_entropy, igr_objective, run_attack, adversarial_training_batch
from .errors import ConfigError, DatasetError, TrainingDiverged
from .memory import BasisPool, end_of_task_update, project_weight_gradients
from .network import Network
from .seeding import rng_for

# Synthetic corpora hold several times the per-task draw so class-subset
# tasks still find enough rows, mirroring how a fixed IDX corpus is reused.
_SYNTHETIC_OVERDRAW = 5
_SYNTHETIC_CAP = (60000, 10000)


def load_base_dataset(data: DataConfig) -> Dataset:
    """The shared corpus every task transforms and subsamples."""
    if data.source == "idx":
        root = data.root or os.environ.get("DGP_DATA_DIR", "")
        if not root:
            raise DatasetError(
                "no dataset root configured: set data.root or DGP_DATA_DIR"
            )
        ds = load_mnist_dir(root)
    else:
        ds = synthetic_dataset(
            n_train=min(data.train_per_task * _SYNTHETIC_OVERDRAW, _SYNTHETIC_CAP[0]),
            n_test=min(data.test_per_task * _SYNTHETIC_OVERDRAW, _SYNTHETIC_CAP[1]),
            seed=data.seed,
            image_hw=(data.synthetic_size, data.synthetic_size),
            num_classes=data.synthetic_classes,
            contrast=data.synthetic_contrast,
            noise=data.synthetic_noise,
            styles=data.synthetic_styles,
            style_px=data.synthetic_style_px,
            sig_px=data.synthetic_sig_px,
            sig_zone=data.synthetic_sig_zone,
        )
    if data.downscale > 1:
        ds = downscale_dataset(ds, data.downscale)
    return ds


def train_task(
    net: Network,
    pool: BasisPool,
    task_id: int,
    data: TaskData,
    cfg: ExperimentConfig,
    seed: int,
    progress=None,
) -> list:
    """One task of defended, optionally projected gradient descent.

    Returns per-epoch ``{"epoch", "loss", "accuracy"}`` stats; ``progress``
    (if given) receives the same dict after each epoch.
    """
    defense = cfg.defense
    shuffle_rng = rng_for(seed, "shuffle", task_id)
    at_rng = rng_for(seed, "at", task_id)
    x, y = data.x_train, data.y_train
    n = x.shape[0]
    log = []
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        hit_sum = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            if defense.kind == "at":
                xb = adversarial_training_batch(net, task_id, xb, yb, defense, at_rng)
            trace = net.forward(task_id, xb, update_bn=True)
            if defense.kind == "igr":
                loss, grads = igr_objective(
                    net, trace, yb, defense.lam, squared=defense.squared
                )
            else:
                loss, dlogits = cross_entropy(trace.logits, yb)
                grads = net.backward_weights(trace, dlogits)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became non-finite at task {task_id}, epoch {epoch}, "
                    f"batch starting at sample {start}"
                )
            if task_id > 1 and cfg.memory.mode != "none":
                grads = project_weight_gradients(grads, pool)
            net.apply_update(task_id, grads, cfg.lr)
            loss_sum += loss * len(idx)
            hit_sum += int((np.argmax(trace.logits, axis=1) == yb).sum())
        stats = {
            "task": task_id,
            "epoch": epoch,
            "loss": loss_sum / n,
            "accuracy": hit_sum / n,
        }
        log.append(stats)
        if progress is not None:
            progress(stats)
    return log


def accuracy(net: Network, task: int, x: np.ndarray, y: np.ndarray) -> float:
    trace = net.forward(task, x)
    return float((np.argmax(trace.logits, axis=1) == y).mean())


def evaluate(
    net: Network,
    datas: dict,
    suite,
    cap: int,
    seed: int,
    upto: int,
) -> list:
    """Clean and per-attack accuracy rows for every task learned so far.

    Returns ``(seed, T, t, attack, accuracy)`` tuples with ``T = upto``.
    The test split is already a seeded shuffle, so the evaluation cap takes
    its first ``cap`` rows.
    """
    rows = []
    for t in range(1, upto + 1):
        data = datas[t]
        x = data.x_test[:cap]
        y = data.y_test[:cap]
        rows.append((seed, upto, t, "clean", accuracy(net, t, x, y)))
        for name, attack in suite:
            rng = rng_for(seed, "attack", upto, t, name)
            adv = run_attack(net, t, x, y, attack, rng=rng)
            rows.append((seed, upto, t, name, accuracy(net, t, adv, y)))
    return rows


def acc_bwt(r: np.ndarray):
    """Average accuracy and backward transfer of a filled T x T matrix.

    ``r[T-1, t-1]`` is accuracy on task t after learning task T.  BWT is
    ``None`` for a single task.
    """
    r = np.asarray(r, dtype=np.float64)
    t_count = r.shape[0]
    acc = float(np.mean(r[t_count - 1, :t_count]))
    if t_count < 2:
        return acc, None
    drops = [r[t_count - 1, t] - r[t, t] for t in range(t_count - 1)]
    return acc, float(np.mean(drops))


def output_gradient_vector(net: Network, task: int, probe: np.ndarray) -> np.ndarray:
    """Flattened per-sample column-sum gradient rows at the output."""
    trace = net.forward(task, probe)
    return net.weak_vectors(trace)[-1].ravel().copy()


def cosine(a: np.ndarray, b: np.ndarray):
    """Cosine similarity; ``None`` (with a warning) on a zero-norm vector."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        warnings.warn("zero-norm gradient vector: similarity undefined")
        return None
    return float(np.dot(a, b) / (na * nb))


@dataclass
class MetricsRecord:
    """Everything measured for one seed."""

    seed: int
    r: dict = field(default_factory=dict)  # attack -> T x T accuracy matrix
    acc: dict = field(default_factory=dict)
    bwt: dict = field(default_factory=dict)
    sim: list = field(default_factory=list)
    task_seconds: list = field(default_factory=list)

    def finalize(self):
        for attack, matrix in self.r.items():
            self.acc[attack], self.bwt[attack] = acc_bwt(matrix)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def atomic_write_text(path: Path, text: str):
    tmp = path.with_name(path.name + f".tmp.{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def csv_text(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


METRICS_HEADER = ("seed", "T", "t", "attack", "accuracy")
SIMILARITY_HEADER = ("seed", "t", "sim")
SUMMARY_HEADER = ("scope", "seed", "attack", "acc", "bwt", "sim")


class ResultArchive:
    """Directory of incrementally written, deterministic result files.

    Metric rows stream into ``metrics.partial.csv`` during the run and the
    file is renamed to ``metrics.csv`` once all seeds finish, so a crash
    leaves the partial rows visible.  Existing results are never overwritten
    unless explicitly requested.
    """

    def __init__(self, out_dir, overwrite: bool = False):
        self.dir = Path(out_dir)
        existing = [
            p for p in ("metrics.csv", "metrics.partial.csv") if (self.dir / p).exists()
        ]
        if existing and not overwrite:
            raise ConfigError(
                f"output directory {self.dir} already holds results "
                f"({', '.join(existing)}); pass the overwrite flag to replace them"
            )
        self.dir.mkdir(parents=True, exist_ok=True)
        for name in (
            "metrics.csv",
            "metrics.partial.csv",
            "similarity.csv",
            "summary.csv",
            "metadata.json",
        ):
            (self.dir / name).unlink(missing_ok=True)
        shutil.rmtree(self.dir / "checkpoints", ignore_errors=True)
        self._partial = open(self.dir / "metrics.partial.csv", "w", newline="")
        self._writer = csv.writer(self._partial)
        self._writer.writerow(METRICS_HEADER)
        self._partial.flush()

    def append_metrics(self, rows):
        for row in rows:
            self._writer.writerow([_fmt(v) for v in row])
        self._partial.flush()

    def finish_metrics(self):
        self._partial.close()
        os.replace(self.dir / "metrics.partial.csv", self.dir / "metrics.csv")

    def write_similarity(self, rows):
        atomic_write_text(self.dir / "similarity.csv", csv_text(SIMILARITY_HEADER, rows))

    def write_summary(self, rows):
        atomic_write_text(self.dir / "summary.csv", csv_text(SUMMARY_HEADER, rows))

    def write_metadata(self, payload: dict):
        atomic_write_text(
            self.dir / "metadata.json",
            json.dumps(payload, indent=2, sort_keys=True) + "\n",
        )

    def checkpoint_paths(self, seed: int):
        ckpt = self.dir / "checkpoints"
        ckpt.mkdir(exist_ok=True)
        return ckpt / f"net-seed{seed}.dgpw", ckpt / f"pool-seed{seed}.dgpp"


def _checkpoint_metadata(cfg: ExperimentConfig, seed: int) -> dict:
    return {
        "experiment": cfg.name,
        "seed": seed,
        "network_preset": cfg.network_preset,
        "data": asdict(cfg.data),
    }


def run_seed(
    cfg: ExperimentConfig,
    seed: int,
    base: Dataset,
    archive: ResultArchive | None = None,
    progress=None,
) -> MetricsRecord:
    """The full task sequence for one seed; pure function of (cfg, seed)."""
    specs = make_task_sequence(
        cfg.data.benchmark, cfg.data.num_tasks, seed,
        base, cfg.data.train_per_task, cfg.data.test_per_task,
    )
    net = Network(build_network_spec(cfg.network_preset, base.image_hw), rng_for(seed, "init"))
    pool = BasisPool.for_network(net.spec)
    record = MetricsRecord(seed=seed)
    attack_names = ["clean"] + [name for name, _ in cfg.attacks]
    t_total = len(specs)
    record.r = {name: np.zeros((t_total, t_total)) for name in attack_names}
    datas = {}
    probe = None
    g1 = None
    for task_index, spec in enumerate(specs, 1):
        started = time.perf_counter()
        datas[task_index] = materialize_task(spec, base, rng_for(seed, "taskdata", task_index))
        net.register_task(task_index, spec.num_classes, rng_for(seed, "init", task_index))
        train_task(net, pool, task_index, datas[task_index], cfg, seed, progress=progress)
        pool, samples = end_of_task_update(
            pool, net, task_index, datas[task_index].x_train,
            cfg.memory, rng_for(seed, "memory", task_index),
        )
        if task_index == 1:
            probe = samples
            g1 = output_gradient_vector(net, 1, probe)
        sim = cosine(g1, output_gradient_vector(net, 1, probe))
        record.sim.append(sim)
        rows = evaluate(
            net, datas, cfg.attacks, cfg.max_eval_samples, seed, task_index
        )
        for _, t_now, t_prev, attack, value in rows:
            record.r[attack][t_now - 1, t_prev - 1] = value
        if archive is not None:
            archive.append_metrics(rows)
        if progress is not None:
            snapshot = {
                name: float(np.mean([v for _, _, _, a, v in rows if a == name]))
                for name in attack_names
            }
            progress({"task": task_index, "sim": sim, "snapshot": snapshot})
        record.task_seconds.append(time.perf_counter() - started)
    record.finalize()
    if archive is not None:
        net_path, pool_path = archive.checkpoint_paths(seed)
        save_network(net_path, net, _checkpoint_metadata(cfg, seed))
        save_pool(pool_path, pool, _checkpoint_metadata(cfg, seed))
    return record


def _aggregate(records: list, attack_names) -> list:
    """Per-seed summary rows plus mean/stddev rows across completed seeds."""
    rows = []
    for rec in records:
        for name in attack_names:
            rows.append(
                ("seed", rec.seed, name, rec.acc[name], rec.bwt[name], rec.sim[-1])
            )
    if records:
        for name in attack_names:
            accs = np.array([rec.acc[name] for rec in records])
            bwts = [rec.bwt[name] for rec in records]
            sims = [rec.sim[-1] for rec in records]
            have_bwt = [b for b in bwts if b is not None]
            have_sim = [s for s in sims if s is not None]
            for scope, reduce in (("mean", np.mean), ("stddev", np.std)):
                rows.append((
                    scope,
                    None,
                    name,
                    float(reduce(accs)),
                    float(reduce(have_bwt)) if have_bwt else None,
                    float(reduce(have_sim)) if have_sim else None,
                ))
    return rows


def run_experiment(
    cfg: ExperimentConfig,
    overwrite: bool = False,
    progress=None,
) -> dict:
    """All seeds end to end, writing the result archive.

    A seed that raises is recorded under ``failures`` and the remaining
    seeds still run.  Returns ``{"records", "failures", "archive"}``.
    """
    archive = ResultArchive(cfg.output, overwrite=overwrite)
    base = load_base_dataset(cfg.data)
    attack_names = ["clean"] + [name for name, _ in cfg.attacks]
    records = []
    failures = []
    sim_rows = []
    for seed in cfg.seeds:
        if progress is not None:
            progress({"seed": seed})
        try:
            record = run_seed(cfg, seed, base, archive=archive, progress=progress)
        except Exception as exc:  # partial-failure policy: keep going
            failures.append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
            continue
        records.append(record)
        sim_rows += [
            (record.seed, t, s) for t, s in enumerate(record.sim, 1)
        ]
    archive.finish_metrics()
    archive.write_similarity(sim_rows)
    archive.write_summary(_aggregate(records, attack_names))
    archive.write_metadata({
        "experiment": cfg.name,
        "network_preset": cfg.network_preset,
        "benchmark": cfg.data.benchmark,
        "seeds": list(cfg.seeds),
        "eval_sample_cap": cfg.max_eval_samples,
        "similarity_probe_size": cfg.memory.memory_size,
        "attacks": [name for name, _ in cfg.attacks],
        "failures": failures,
        "task_seconds": {str(r.seed): r.task_seconds for r in records},
    })
    return {"records": records, "failures": failures, "archive": archive.dir}

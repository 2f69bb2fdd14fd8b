"""CLI subcommands: exit codes, emitted artifacts, and table output."""

import numpy as np
import pytest

from dgp import defense
from dgp.cli import main
from dgp.defense import AttackConfig

CFG = """
[experiment]
name = cli-tiny
seeds = 7
output = {out}

[data]
num_tasks = 2
train_per_task = 120
test_per_task = 80
downscale = 2

[network]
preset = mlp-100

[train]
lr = 0.05
batch_size = 32
epochs = 2

[memory]
mode = dgp
alpha1 = 0.95
alpha2 = 0.999
alpha3 = 0.996
memory_size = 60

[eval]
attacks = pmnist-fgsm
max_eval_samples = 40
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def config_path(workdir):
    path = workdir / "tiny.cfg"
    path.write_text(CFG.format(out=workdir / "run1"))
    return path


@pytest.fixture(scope="module")
def archive(workdir, config_path):
    assert main(["run", "--config", str(config_path)]) == 0
    return workdir / "run1"


def test_run_writes_archive(archive):
    for name in ("metrics.csv", "similarity.csv", "summary.csv", "metadata.json"):
        assert (archive / name).exists()
    assert (archive / "checkpoints" / "net-seed7.dgpw").exists()
    assert (archive / "checkpoints" / "pool-seed7.dgpp").exists()
    assert not (archive / "metrics.partial.csv").exists()


def test_run_prints_progress_and_summary(workdir, config_path, capsys):
    out = workdir / "progress-run"
    code = main([
        "run", "--config", str(config_path), "--out", str(out),
        "--seeds", "0", "--set", "train.epochs=1", "--set", "eval.attacks=",
        "--set", "memory.mode=none", "--set", "data.num_tasks=1",
    ])
    captured = capsys.readouterr().out
    assert code == 0
    assert "task 1 epoch 1" in captured and "loss" in captured
    assert "after task 1" in captured
    assert f"archive written to {out}" in captured
    assert "seed 0 clean: acc" in captured


def test_run_refuses_to_clobber_results(archive, config_path, capsys):
    assert main(["run", "--config", str(config_path)]) == 1
    err = capsys.readouterr().err
    assert "already holds results" in err and "overwrite" in err


def test_run_unknown_override_key_is_named(config_path, workdir, capsys):
    code = main([
        "run", "--config", str(config_path), "--out", str(workdir / "unused"),
        "--set", "memory.modes=dgp",
    ])
    assert code == 1
    assert "memory.modes" in capsys.readouterr().err


def test_run_bad_override_value(config_path, workdir, capsys):
    code = main([
        "run", "--config", str(config_path), "--out", str(workdir / "unused"),
        "--set", "train.lr=abc",
    ])
    assert code == 1
    assert "train.lr" in capsys.readouterr().err


def test_run_missing_config(capsys):
    assert main(["run", "--config", "no-such-file.cfg"]) == 1
    assert "no-such-file" in capsys.readouterr().err


def test_same_seed_reruns_are_byte_identical(workdir, config_path, archive):
    out = workdir / "run-again"
    assert main(["run", "--config", str(config_path), "--out", str(out)]) == 0
    for name in ("metrics.csv", "similarity.csv", "summary.csv"):
        assert (out / name).read_bytes() == (archive / name).read_bytes()


def test_plain_sgd_override_leaves_pool_empty(workdir, config_path, capsys):
    out = workdir / "run-sgd"
    code = main([
        "run", "--config", str(config_path), "--out", str(out),
        "--seeds", "0", "--set", "memory.mode=none", "--set", "data.num_tasks=1",
        "--set", "train.epochs=1", "--set", "eval.attacks=",
    ])
    assert code == 0
    capsys.readouterr()
    assert main(["inspect-pool", str(out / "checkpoints" / "pool-seed0.dgpp")]) == 0
    text = capsys.readouterr().out
    assert "count 0 (empty)" in text


def test_report_writes_tables_and_series(archive, workdir, capsys):
    out = workdir / "report"
    assert main(["report", str(archive), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "final accuracy" in text and "gradient similarity" in text
    summary = (out / "report_summary.csv").read_text().strip().splitlines()
    assert len(summary) == 1 + 2  # header + clean + pmnist-fgsm
    series = (out / "report_acc_series.csv").read_text().strip().splitlines()
    assert len(series) == 1 + 2 * 2 * 1  # header + T * attacks * seeds
    assert (out / "report_sim_series.csv").exists()
    assert (out / "report.txt").exists()


def test_report_on_empty_archive(workdir, capsys):
    empty = workdir / "empty"
    empty.mkdir()
    assert main(["report", str(empty)]) == 1
    assert "no completed metric rows" in capsys.readouterr().err


def _table_cells(text):
    lines = [ln.split() for ln in text.strip().splitlines()]
    return lines[0], lines[1:]


def test_eval_prints_per_task_table(archive, capsys):
    net = archive / "checkpoints" / "net-seed7.dgpw"
    assert main(["eval", str(net)]) == 0
    header, rows = _table_cells(capsys.readouterr().out)
    assert header == ["task", "clean"]
    assert [r[0] for r in rows] == ["1", "2", "mean"]
    for row in rows:
        assert 0.0 <= float(row[1]) <= 1.0


def test_eval_rejects_unrelated_override(archive, capsys):
    net = archive / "checkpoints" / "net-seed7.dgpw"
    assert main(["eval", str(net), "--set", "train.lr=0.1"]) == 1
    assert "does not apply here" in capsys.readouterr().err


def test_attack_unknown_preset_lists_known(archive, capsys):
    net = archive / "checkpoints" / "net-seed7.dgpw"
    assert main(["attack", str(net), "--attack", "bogus"]) == 1
    err = capsys.readouterr().err
    assert "bogus" in err and "pmnist-fgsm" in err


def test_zero_budget_attack_equals_clean(archive, capsys, monkeypatch):
    monkeypatch.setitem(
        defense.ATTACK_PRESETS, "zero-step", AttackConfig(kind="fgsm", xi=0.0)
    )
    net = archive / "checkpoints" / "net-seed7.dgpw"
    assert main(["attack", str(net), "--attack", "zero-step"]) == 0
    header, rows = _table_cells(capsys.readouterr().out)
    assert header == ["task", "clean", "zero-step"]
    for row in rows:
        assert row[1] == row[2]


def test_fgsm_never_beats_clean_on_trained_net(archive, capsys):
    net = archive / "checkpoints" / "net-seed7.dgpw"
    assert main(["attack", str(net), "--attack", "pmnist-fgsm"]) == 0
    _, rows = _table_cells(capsys.readouterr().out)
    for row in rows:
        assert float(row[2]) <= float(row[1])


def test_checkpoint_geometry_mismatch_names_both_shapes(archive, capsys):
    net = archive / "checkpoints" / "net-seed7.dgpw"
    # downscale 1 leaves 14x14 inputs, but the checkpoint was trained on 7x7
    assert main(["eval", str(net), "--set", "data.downscale=1"]) == 2
    err = capsys.readouterr().err
    assert "49" in err and "196" in err and "mlp-100" in err


def test_inspect_pool_reports_layer_stats(archive, capsys):
    assert main(["inspect-pool", str(archive / "checkpoints" / "pool-seed7.dgpp")]) == 0
    text = capsys.readouterr().out
    assert "dim 100" in text and "count" in text and "headroom" in text
    residuals = [
        float(line.rsplit(" ", 1)[1])
        for line in text.splitlines()
        if "orthonormality residual" in line
    ]
    assert residuals and max(residuals) < 1e-8


def test_no_subcommand_is_a_usage_error(capsys):
    assert main([]) == 1
    assert "usage error" in capsys.readouterr().err

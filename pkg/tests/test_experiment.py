"""End-to-end checks of the experiment grid on a miniature task: every
method trains, artifacts land where documented, aggregation and
significance files are coherent, and reruns reproduce bytes."""

import csv
import os

import numpy as np
import pytest

from gstuda.cli import EXIT_OK, EXIT_RUNTIME, main
from gstuda.config import METHOD_ORDER
from gstuda.data import load_dataset
from gstuda.experiment import (
    HISTORY_COLUMNS,
    cell_train_config,
    run_experiment,
)
from gstuda.metrics import METRIC_NAMES
from gstuda.translator import TranslatorModel

from conftest import tiny_experiment_config, tiny_train_config

_ADAPTED = tuple(m for m in METHOD_ORDER if m not in ("no_uda", "target_supervised"))


@pytest.fixture(scope="module")
def grid_run(tmp_path_factory):
    cfg = tiny_experiment_config(
        methods=METHOD_ORDER, seeds=(0,),
        sweep_betas=(1.0, 1.25), sweep_mc_samples=(3, 4), sweep_seeds=(0,))
    out = str(tmp_path_factory.mktemp("grid"))
    result = run_experiment(cfg, out)
    return cfg, out, result


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_cell_train_config_lattice():
    cfg = tiny_experiment_config(methods=METHOD_ORDER, seeds=(0,))
    assert cell_train_config(cfg, "no_uda", 3).rounds == 0
    assert cell_train_config(cfg, "no_uda", 3).seed == 3
    sup = cell_train_config(cfg, "target_supervised", 1)
    assert sup.rounds == cfg.train.rounds
    expected = {
        "bm_gst": ("binary", "both"),
        "bm_gst_a": ("binary", "epistemic_only"),
        "bm_gst_e": ("binary", "aleatoric_only"),
        "ac_gst": ("attentive", "both"),
        "ac_gst_no_attn": ("continuous", "both"),
        "ac_gst_c": ("attentive_binary", "both"),
    }
    for method, (mask, unc) in expected.items():
        tcfg = cell_train_config(cfg, method, 0)
        assert (tcfg.mask_mode, tcfg.uncertainty_mode) == (mask, unc)


def test_grid_completes_without_failures(grid_run):
    _, _, result = grid_run
    assert result.failures == []
    assert set(result.per_method_seed) == {(m, 0) for m in METHOD_ORDER}


def test_report_csv_layout(grid_run):
    cfg, out, result = grid_run
    rows = read_csv(os.path.join(out, "report.csv"))
    assert rows[0] == ["method", "metric", "mean", "sd"]
    body = rows[1:]
    assert len(body) == len(METHOD_ORDER) * len(METRIC_NAMES)
    assert [r[0] for r in body[::3]] == list(METHOD_ORDER)
    for method, metric, mean, sd in body:
        assert metric in METRIC_NAMES
        assert float(sd) == 0.0  # single seed
        want = result.per_method_seed[(method, 0)][metric]
        # Written with 10 significant digits.
        assert abs(float(mean) - want) <= 1e-9 * max(1.0, abs(want))
    assert os.path.exists(os.path.join(out, "report.md"))
    assert os.path.exists(os.path.join(out, "config.txt"))


def test_significance_csv_layout(grid_run):
    _, out, _ = grid_run
    rows = read_csv(os.path.join(out, "significance.csv"))
    assert rows[0] == ["reference", "method", "metric", "t_stat", "p_value", "degenerate"]
    body = rows[1:]
    assert len(body) == (len(METHOD_ORDER) - 1) * len(METRIC_NAMES)
    for ref, method, metric, t, p, deg in body:
        assert ref == "ac_gst" and method != "ac_gst"
        assert 0.0 <= float(p) <= 1.0
        assert deg in ("0", "1")


def test_cell_artifacts(grid_run):
    cfg, out, _ = grid_run
    for method in METHOD_ORDER:
        cell = os.path.join(out, "cells", f"{method}_seed0")
        assert os.path.exists(os.path.join(cell, "final.ckpt"))
        assert os.path.exists(os.path.join(cell, "metrics.csv"))
        assert os.path.exists(os.path.join(cell, "maps", "manifest.txt"))
        is_attentive = method in ("ac_gst", "ac_gst_c")
        assert os.path.exists(os.path.join(cell, "final_attention.ckpt")) == is_attentive
        assert os.path.exists(os.path.join(cell, "maps", "attention.bin")) == is_attentive
        if method in _ADAPTED:
            assert os.path.exists(os.path.join(cell, "uncertainty_history.csv"))
            assert os.path.exists(os.path.join(cell, "training_log.csv"))
            assert os.path.exists(os.path.join(cell, "maps", "u_total.bin"))
        if method == "target_supervised":
            assert os.path.exists(os.path.join(cell, "training_log.csv"))
            assert not os.path.exists(os.path.join(cell, "uncertainty_history.csv"))


def test_metrics_csv_matches_summary(grid_run):
    cfg, out, result = grid_run
    rows = read_csv(os.path.join(out, "cells", "ac_gst_seed0", "metrics.csv"))
    assert rows[0] == ["slice"] + list(METRIC_NAMES)
    body = rows[1:]
    assert len(body) == cfg.task.n_target_subjects * cfg.task.target_slices
    l1s = np.array([float(r[1]) for r in body])
    assert abs(l1s.mean() - result.per_method_seed[("ac_gst", 0)]["l1"]) < 1e-9


def test_uncertainty_history_layout(grid_run):
    cfg, out, _ = grid_run
    rows = read_csv(os.path.join(out, "cells", "ac_gst_seed0", "uncertainty_history.csv"))
    assert tuple(rows[0]) == HISTORY_COLUMNS
    body = rows[1:]
    assert len(body) == cfg.train.rounds
    probe_col = HISTORY_COLUMNS.index("probe_u")
    rho_col = HISTORY_COLUMNS.index("rho")
    for row in body:
        assert np.isfinite(float(row[probe_col]))
    assert float(body[-1][rho_col]) > float(body[0][rho_col])


def test_no_uda_cell_is_the_pretrained_model(grid_run):
    cfg, out, _ = grid_run
    pre = TranslatorModel.load(os.path.join(out, "pretrained", "seed0.ckpt"))
    cell = TranslatorModel.load(os.path.join(out, "cells", "no_uda_seed0", "final.ckpt"))
    target_ds = load_dataset(os.path.join(out, "datasets", "target"))
    x = target_ds.samples[0].input
    assert np.array_equal(pre.predict(x).mean.values, cell.predict(x).mean.values)


def test_timings_cover_all_stages(grid_run):
    _, out, result = grid_run
    rows = read_csv(os.path.join(out, "timings.csv"))
    assert rows[0] == ["stage", "seed", "seconds"]
    stages = {(r[0], int(r[1])) for r in rows[1:]}
    assert ("pretrain", 0) in stages
    for method in METHOD_ORDER:
        assert (method, 0) in stages
    assert all(float(r[2]) >= 0 for r in rows[1:])
    assert result.timings[("pretrain", 0)] > 0


def test_sweep_outputs(grid_run):
    cfg, out, result = grid_run
    beta_rows = read_csv(os.path.join(out, "sensitivity_beta.csv"))
    assert beta_rows[0] == ["beta", "seed", "l1"]
    betas = {float(r[0]) for r in beta_rows[1:]}
    assert betas == {1.0, 1.25}
    base_row = [r for r in beta_rows[1:] if float(r[0]) == cfg.train.beta][0]
    assert abs(float(base_row[2]) - result.per_method_seed[("ac_gst", 0)]["l1"]) < 1e-9

    mc_rows = read_csv(os.path.join(out, "sensitivity_mc.csv"))
    assert {int(r[0]) for r in mc_rows[1:]} == {3, 4}
    assert os.path.isdir(os.path.join(out, "sweep"))


def test_refuses_to_clobber_finished_run(grid_run):
    cfg, out, _ = grid_run
    with pytest.raises(FileExistsError, match="report"):
        run_experiment(cfg, out)


def test_cmd_eval_rescores_cells(grid_run):
    _, out, result = grid_run
    assert main(["eval", "--run", out]) == EXIT_OK
    rows = read_csv(os.path.join(out, "eval_report.csv"))
    assert rows[0] == ["cell", "metric", "value"]
    got = {(r[0], r[1]): float(r[2]) for r in rows[1:]}
    for method in METHOD_ORDER:
        for metric in METRIC_NAMES:
            want = result.per_method_seed[(method, 0)][metric]
            assert abs(got[(f"{method}_seed0", metric)] - want) <= 1e-9 * max(1.0, abs(want))


def test_cmd_plot_renders_figures(grid_run):
    _, out, _ = grid_run
    assert main(["plot", "--run", out]) == EXIT_OK
    plots = os.listdir(os.path.join(out, "plots"))
    for name in ("translation_panel.png", "uncertainty_panel.png",
                 "uncertainty_curve.png", "sensitivity_beta.png", "sensitivity_mc.png"):
        assert name in plots


def test_failed_cell_is_isolated(tmp_path, monkeypatch, capsys):
    import gstuda.experiment as exp

    cfg = tiny_experiment_config(methods=("no_uda", "bm_gst"), seeds=(0,))
    real_run_cell = exp.run_cell

    def flaky(cfg_, method, seed, *args, **kwargs):
        if method == "bm_gst":
            raise RuntimeError("synthetic cell failure")
        return real_run_cell(cfg_, method, seed, *args, **kwargs)

    monkeypatch.setattr(exp, "run_cell", flaky)
    out = str(tmp_path / "run")
    result = exp.run_experiment(cfg, out)
    assert [(m, s) for m, s, _ in result.failures] == [("bm_gst", 0)]
    assert ("no_uda", 0) in result.per_method_seed
    err_file = os.path.join(out, "cells", "bm_gst_seed0", "error.txt")
    assert os.path.exists(err_file)
    with open(err_file) as fh:
        assert "synthetic cell failure" in fh.read()
    # Report still covers the surviving method.
    rows = read_csv(os.path.join(out, "report.csv"))
    assert {r[0] for r in rows[1:]} == {"no_uda"}


def test_cmd_run_reports_runtime_failures(tmp_path, monkeypatch, capsys):
    import gstuda.experiment as exp
    import gstuda.cli as cli

    def boom(cfg_, method, seed, *args, **kwargs):
        raise RuntimeError("boom")

    monkeypatch.setattr(exp, "run_cell", boom)
    cfg_path = tmp_path / "cfg.txt"
    cfg_path.write_text(
        "task.height = 16\ntask.width = 16\ntask.n_blobs = 2\ntask.blob_scale = 2.5\n"
        "task.n_source_subjects = 1\ntask.source_slices = 2\n"
        "task.n_target_subjects = 1\ntask.target_slices = 2\n"
        "train.batch_size = 2\ntrain.mc_samples = 2\ntrain.rounds = 1\n"
        "train.iters_per_round = 1\ntrain.pretrain_epochs = 1\n"
        "train.depth = 2\ntrain.base_channels = 2\n"
        "run.methods = no_uda\nrun.seeds = 0\n"
    )
    code = cli.main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "r")])
    assert code == EXIT_RUNTIME
    assert "cell failure: no_uda seed 0" in capsys.readouterr().err


def test_report_bytes_reproduce(tmp_path):
    cfg = tiny_experiment_config(
        methods=("no_uda", "ac_gst"), seeds=(0,),
        train=tiny_train_config(rounds=1, iters_per_round=2, pretrain_epochs=1))
    blobs = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        run_experiment(cfg, out)
        with open(os.path.join(out, "report.csv"), "rb") as fh:
            blobs.append(fh.read())
    assert blobs[0] == blobs[1]

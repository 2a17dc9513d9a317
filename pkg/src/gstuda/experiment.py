"""Method-by-seed experiment grid with aggregation and reports.

One experiment directory holds the generated datasets, one pretrained
source checkpoint per seed (shared by every method at that seed), one
cell directory per (method, seed) with training logs and checkpoints,
and the aggregated report files. Sensitivity sweeps rerun the attentive
method with varied beta or ensemble size and collect final L1 values.

Method vocabulary:
  no_uda            source-pretrained model, no adaptation
  bm_gst            binary curriculum mask on total uncertainty
  bm_gst_a          binary mask, epistemic component only
  bm_gst_e          binary mask, aleatoric component only
  ac_gst            attention times exp(-u) soft mask
  ac_gst_no_attn    exp(-u) soft mask alone
  ac_gst_c          attention times binary curriculum mask
  target_supervised finetune on the hidden target labels (upper bound)
"""

from __future__ import annotations

import csv
import math
import os
import time
import traceback
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import AttentionModel
from .config import METHOD_ORDER, ExperimentConfig
from .data import Dataset, PairedSample, load_dataset, save_dataset
from .masks import binary_mask, continuous_mask
from .metrics import METRIC_NAMES, evaluate, hidden_target_for_eval, paired_ttest_one_tailed
from .synth import build_probe_slice, build_task
from .trainer import TrainConfig, adapt, pretrain, rho_at_round, sample_key
from .translator import TranslatorModel
from .uncertainty import aleatoric, ensemble_mean, epistemic, mc_ensemble, total
from .util import derive_seed

HISTORY_COLUMNS = ("round", "rho", "mean_u", "probe_u", "source_mse",
                   "target_data_term", "target_logvar_term", "total")

_METHOD_MASKS = {
    "bm_gst": ("binary", "both"),
    "bm_gst_a": ("binary", "epistemic_only"),
    "bm_gst_e": ("binary", "aleatoric_only"),
    "ac_gst": ("attentive", "both"),
    "ac_gst_no_attn": ("continuous", "both"),
    "ac_gst_c": ("attentive_binary", "both"),
}


def _fmt(x: float) -> str:
    return f"{x:.10g}"


@dataclass
class ExperimentResult:
    out_dir: str
    report_csv: str
    report_md: str
    significance_csv: str
    per_method_seed: dict = field(default_factory=dict)
    per_slice: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def seed_means(self, method: str, metric: str):
        vals = [v[metric] for (m, s), v in sorted(self.per_method_seed.items()) if m == method]
        return np.asarray(vals)


def cell_train_config(cfg: ExperimentConfig, method: str, seed: int) -> TrainConfig:
    """Per-cell training config; the shared base plus the method's mask
    lattice point. no_uda disables adaptation outright."""
    base = replace(cfg.train, seed=seed)
    if method == "no_uda":
        return replace(base, rounds=0)
    if method == "target_supervised":
        return base
    mask_mode, unc_mode = _METHOD_MASKS[method]
    return replace(base, mask_mode=mask_mode, uncertainty_mode=unc_mode)


def _supervised_finetune(model, target_ds: Dataset, cfg: TrainConfig, cell_dir: str):
    """Budget-matched supervised training on revealed target pairs."""
    pairs = tuple(
        PairedSample(s.input, hidden_target_for_eval(s), s.subject_id)
        for s in target_ds.samples
    )
    sup_ds = Dataset("source", pairs, derive_seed(cfg.seed, "supervised"))
    batches_per_epoch = math.ceil(len(sup_ds) / cfg.batch_size)
    epochs = max(1, math.ceil(cfg.rounds * cfg.iters_per_round / batches_per_epoch))
    sup_cfg = replace(cfg, pretrain_epochs=epochs)
    pretrain(model, sup_ds, sup_cfg, log_path=os.path.join(cell_dir, "training_log.csv"))


def _write_history(path: str, history: list):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([_fmt(row["round"])] +
                       [_fmt(row.get(c, float("nan"))) for c in HISTORY_COLUMNS[1:]])


def _write_pgm(path: str, values: np.ndarray):
    lo, hi = float(values.min()), float(values.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = np.clip((values - lo) * scale, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def _dump_debug_maps(cell_dir: str, model, attn_model, cfg: TrainConfig,
                     target_ds: Dataset, adapted: bool):
    """Raw float32 maps plus 8-bit previews for the first target slice."""
    maps_dir = os.path.join(cell_dir, "maps")
    os.makedirs(maps_dir, exist_ok=True)
    sample = target_ds.samples[0]
    truth = hidden_target_for_eval(sample)
    pred = model.predict(sample.input, stochastic=False).mean
    out = {"input": sample.input.values, "pred": pred.values, "truth": truth.values,
           "abs_err": np.abs(pred.values - truth.values)}
    if adapted:
        ens = mc_ensemble(model, sample.input, cfg.mc_samples,
                          derive_seed(cfg.seed, "debug-maps"))
        maps = total(epistemic(ens), aleatoric(ens), ensemble_mean(ens))
        out["u_epistemic"] = maps.epistemic.values
        out["u_aleatoric"] = maps.aleatoric.values
        out["u_total"] = maps.total.values
        rho = rho_at_round(cfg, max(cfg.rounds - 1, 0))
        if cfg.mask_mode in ("binary", "attentive_binary"):
            base = binary_mask(maps.total, rho)
        else:
            base = continuous_mask(maps.total)
        out["mask_base"] = base.weights.values
        if attn_model is not None:
            out["attention"] = attn_model.attend(sample.input).values
    lines = []
    for name, arr in out.items():
        arr.astype("<f4").tofile(os.path.join(maps_dir, f"{name}.bin"))
        _write_pgm(os.path.join(maps_dir, f"{name}.pgm"), arr)
        lines.append(f"{name} = {arr.shape[0]} {arr.shape[1]}")
    with open(os.path.join(maps_dir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def run_cell(cfg: ExperimentConfig, method: str, seed: int, cell_dir: str,
             pretrained_path: str, source_ds: Dataset, target_ds: Dataset,
             probe_input, train_override: TrainConfig | None = None):
    """Train one (method, seed) cell and score it on the target set.

    Returns (per_slice dict of metric arrays, summary dict of means).
    Artifacts land in cell_dir.
    """
    os.makedirs(cell_dir, exist_ok=True)
    tcfg = train_override if train_override is not None else cell_train_config(cfg, method, seed)
    model = TranslatorModel.load(pretrained_path)
    attn_model = None

    if method == "target_supervised":
        _supervised_finetune(model, target_ds, tcfg, cell_dir)
    elif method != "no_uda":
        if tcfg.needs_attention():
            attn_model = AttentionModel(tcfg.depth, tcfg.base_channels, init_seed=seed)
        state = adapt(model, attn_model, source_ds, target_ds, tcfg,
                      out_dir=cell_dir, probe_input=probe_input)
        _write_history(os.path.join(cell_dir, "uncertainty_history.csv"), state.history)

    model.save(os.path.join(cell_dir, "final.ckpt"))
    if attn_model is not None:
        attn_model.save(os.path.join(cell_dir, "final_attention.ckpt"))
    report = evaluate({method: model}, target_ds, cfg.fingerprint())
    per_slice = report.per_sample[method]
    summary = report.per_method[method]
    with open(os.path.join(cell_dir, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("slice",) + METRIC_NAMES)
        for i in range(len(target_ds)):
            w.writerow([i] + [_fmt(per_slice[m][i]) for m in METRIC_NAMES])
    _dump_debug_maps(cell_dir, model, attn_model, tcfg, target_ds,
                     adapted=method not in ("no_uda", "target_supervised"))
    return per_slice, summary


def _ordered(methods):
    return [m for m in METHOD_ORDER if m in methods]


def write_report(result: ExperimentResult, methods, seeds):
    rows = []
    for method in _ordered(methods):
        for metric in METRIC_NAMES:
            means = [result.per_method_seed[(method, s)][metric]
                     for s in seeds if (method, s) in result.per_method_seed]
            if not means:
                continue
            mean = float(np.mean(means))
            sd = float(np.std(means, ddof=1)) if len(means) > 1 else 0.0
            rows.append((method, metric, mean, sd))
    with open(result.report_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("method", "metric", "mean", "sd"))
        for method, metric, mean, sd in rows:
            w.writerow((method, metric, _fmt(mean), _fmt(sd)))

    by_method = {}
    for method, metric, mean, sd in rows:
        by_method.setdefault(method, {})[metric] = (mean, sd)
    lines = ["| method | L1 | SSIM | PSNR (dB) |", "|---|---|---|---|"]
    for method in _ordered(by_method):
        cells = []
        for metric in METRIC_NAMES:
            mean, sd = by_method[method][metric]
            cells.append(f"{mean:.4f} +/- {sd:.4f}")
        lines.append(f"| {method} | {cells[0]} | {cells[1]} | {cells[2]} |")
    with open(result.report_md, "w") as fh:
        fh.write("# Experiment report\n\n" + "\n".join(lines) + "\n")


def write_significance(result: ExperimentResult, methods, seeds, reference="ac_gst"):
    """Paired one-tailed tests of the reference method against the rest,
    oriented so small p supports the reference being better. Slices are
    pooled across seeds; pairing holds because every cell scores the
    same ordered target slices."""
    rows = []
    present = _ordered(methods)
    if reference in present:
        for method in present:
            if method == reference:
                continue
            for metric in METRIC_NAMES:
                ref, other = [], []
                for s in seeds:
                    if (reference, s) in result.per_slice and (method, s) in result.per_slice:
                        ref.append(result.per_slice[(reference, s)][metric])
                        other.append(result.per_slice[(method, s)][metric])
                if not ref:
                    continue
                ref = np.concatenate(ref)
                other = np.concatenate(other)
                if metric == "l1":
                    test = paired_ttest_one_tailed(other, ref)
                else:
                    test = paired_ttest_one_tailed(ref, other)
                rows.append((reference, method, metric, test.t_stat, test.p_value,
                             int(test.degenerate)))
    with open(result.significance_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("reference", "method", "metric", "t_stat", "p_value", "degenerate"))
        for ref_name, method, metric, t, p, deg in rows:
            w.writerow((ref_name, method, metric, _fmt(t), _fmt(p), deg))


def _run_sweeps(cfg: ExperimentConfig, out_dir: str, result: ExperimentResult,
                source_ds, target_ds, probe_input, pretrained, sweep_method="ac_gst"):
    """Sensitivity cells for beta and ensemble size; base-value rows are
    pulled from the main grid when available."""

    def l1_for(value_name, value, seed):
        main = (sweep_method, seed)
        if value == getattr(cfg.train, value_name) and main in result.per_method_seed:
            return result.per_method_seed[main]["l1"]
        tcfg = replace(cell_train_config(cfg, sweep_method, seed), **{value_name: value})
        cell = os.path.join(out_dir, "sweep", f"{value_name}_{value:g}_seed{seed}")
        _, summary = run_cell(cfg, sweep_method, seed, cell, pretrained[seed],
                              source_ds, target_ds, probe_input, train_override=tcfg)
        return summary["l1"]

    if cfg.sweep_betas:
        path = os.path.join(out_dir, "sensitivity_beta.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("beta", "seed", "l1"))
            betas = sorted(set(cfg.sweep_betas) | {cfg.train.beta})
            for beta in betas:
                seeds = cfg.seeds if beta == cfg.train.beta else cfg.sweep_seeds
                for seed in seeds:
                    w.writerow((_fmt(beta), seed, _fmt(l1_for("beta", beta, seed))))
    if cfg.sweep_mc_samples:
        path = os.path.join(out_dir, "sensitivity_mc.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("mc_samples", "seed", "l1"))
            ks = sorted(set(cfg.sweep_mc_samples) | {cfg.train.mc_samples})
            for k in ks:
                seeds = cfg.seeds if k == cfg.train.mc_samples else cfg.sweep_seeds
                for seed in seeds:
                    w.writerow((k, seed, _fmt(l1_for("mc_samples", k, seed))))


def generate_datasets(cfg: ExperimentConfig, data_dir: str):
    """Build and persist both domains; reload gives bit-identical data."""
    source_ds, target_ds = build_task(
        cfg.task.phantom_spec(), cfg.source_shift, cfg.target_shift,
        cfg.task.n_source_subjects, cfg.task.source_slices,
        cfg.task.n_target_subjects, cfg.task.target_slices)
    save_dataset(source_ds, os.path.join(data_dir, "source"))
    save_dataset(target_ds, os.path.join(data_dir, "target"))
    return source_ds, target_ds


def run_experiment(cfg: ExperimentConfig, out_dir: str, force: bool = False) -> ExperimentResult:
    """Execute the full grid described by cfg under out_dir.

    Refuses to reuse a directory that already holds a report unless
    force is set. Cells that raise are recorded as failures (error text
    in the cell directory) without stopping the rest of the grid.
    """
    report_csv = os.path.join(out_dir, "report.csv")
    if os.path.exists(report_csv) and not force:
        raise FileExistsError(f"{out_dir} already holds a report; pass force to redo")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(cfg.canonical_dump())

    data_dir = os.path.join(out_dir, "datasets")
    source_ds, target_ds = generate_datasets(cfg, data_dir)
    probe = build_probe_slice(cfg.task.phantom_spec(), cfg.target_shift,
                              cfg.task.target_slices)

    result = ExperimentResult(
        out_dir=out_dir, report_csv=report_csv,
        report_md=os.path.join(out_dir, "report.md"),
        significance_csv=os.path.join(out_dir, "significance.csv"))

    pre_dir = os.path.join(out_dir, "pretrained")
    os.makedirs(pre_dir, exist_ok=True)
    pretrained = {}
    sweep_seeds = set(cfg.sweep_seeds) if (cfg.sweep_betas or cfg.sweep_mc_samples) else set()
    for seed in sorted(set(cfg.seeds) | sweep_seeds):
        path = os.path.join(pre_dir, f"seed{seed}.ckpt")
        model = TranslatorModel(cfg.train.depth, cfg.train.base_channels,
                                cfg.train.dropout_rate, init_seed=seed)
        t0 = time.perf_counter()
        pretrain(model, source_ds, replace(cfg.train, seed=seed),
                 log_path=os.path.join(pre_dir, f"seed{seed}_pretrain_log.csv"))
        result.timings[("pretrain", seed)] = time.perf_counter() - t0
        model.save(path)
        pretrained[seed] = path

    for method in _ordered(cfg.methods):
        for seed in cfg.seeds:
            cell_dir = os.path.join(out_dir, "cells", f"{method}_seed{seed}")
            t0 = time.perf_counter()
            try:
                per_slice, summary = run_cell(cfg, method, seed, cell_dir,
                                              pretrained[seed], source_ds, target_ds,
                                              probe.input)
                result.per_slice[(method, seed)] = per_slice
                result.per_method_seed[(method, seed)] = summary
            except Exception as exc:
                os.makedirs(cell_dir, exist_ok=True)
                with open(os.path.join(cell_dir, "error.txt"), "w") as fh:
                    fh.write(traceback.format_exc())
                result.failures.append((method, seed, f"{type(exc).__name__}: {exc}"))
            result.timings[(method, seed)] = time.perf_counter() - t0

    write_report(result, cfg.methods, cfg.seeds)
    write_significance(result, cfg.methods, cfg.seeds)
    with open(os.path.join(out_dir, "timings.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("stage", "seed", "seconds"))
        for (stage, seed), secs in result.timings.items():
            w.writerow((stage, seed, _fmt(secs)))
    if cfg.sweep_betas or cfg.sweep_mc_samples:
        _run_sweeps(cfg, out_dir, result, source_ds, target_ds, probe.input, pretrained)
    return result

"""Alternating self-training for domain-adaptive translation.

Training runs in two repeated phases. Step 1 freezes the translator,
runs a Monte Carlo dropout ensemble over every target slice and turns
the ensemble mean into pseudo-labels plus reliability masks. Step 2
retrains the translator (and, in attentive modes, the attention net)
on the joint source plus masked-target objective with dropout off.
Pseudo-labels and the uncertainty-derived mask component are snapshots
taken in step 1 and stay bitwise frozen through step 2; only the
attention factor is recomputed live so its weights receive gradient.

Every run is a pure function of (datasets, config): batch order,
dropout masks and weight init all derive from cfg.seed.
"""

from __future__ import annotations

import copy
import csv
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .attention import AttentionModel
from .data import Dataset, ImageGrid, batch_iter
from .losses import source_mse_t, target_terms_t
from .masks import RhoSchedule, attentive_mask, binary_mask, continuous_mask, rho_at
from .translator import TranslatorModel
from .uncertainty import ensemble_mean, epistemic, aleatoric, mc_ensemble, total
from .util import derive_seed

MASK_MODES = ("binary", "continuous", "attentive", "attentive_binary")
UNCERTAINTY_MODES = ("both", "epistemic_only", "aleatoric_only")
_ATTENTIVE_MODES = ("attentive", "attentive_binary")

TRAIN_LOG_COLUMNS = ("iter", "source_mse", "target_data_term",
                     "target_logvar_term", "total", "rho", "mean_u")


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; the model is restored to the last finite state."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    momentum_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 16
    mc_samples: int = 20
    beta: float = 1.0
    mask_mode: str = "attentive"
    uncertainty_mode: str = "both"
    rounds: int = 20
    iters_per_round: int = 15
    pretrain_epochs: int = 30
    rho_start: float = 0.30
    rho_end: float = 0.80
    rho_per_round: bool = False
    mask_outside_norm: bool = False
    attention_floor_weight: float = 0.0
    depth: int = 3
    base_channels: int = 16
    dropout_rate: float = 0.30
    checkpoint_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if self.uncertainty_mode not in UNCERTAINTY_MODES:
            raise ValueError(f"unknown uncertainty_mode {self.uncertainty_mode!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.mc_samples < 2:
            raise ValueError("batch_size >= 1 and mc_samples >= 2 required")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.rounds < 0 or self.iters_per_round < 1 or self.pretrain_epochs < 0:
            raise ValueError("bad round/iteration counts")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        # Validates the rho bounds as a side effect.
        RhoSchedule(self.rho_start, self.rho_end, max(1, self.total_adapt_iters()))

    def total_adapt_iters(self) -> int:
        return self.rounds if self.rho_per_round else self.rounds * self.iters_per_round

    def needs_attention(self) -> bool:
        return self.mask_mode in _ATTENTIVE_MODES


@dataclass
class Step1Result:
    pseudo_labels: dict
    masks: dict
    mask_bases: dict
    mean_total_u: float
    rho: float


@dataclass
class AdaptationState:
    """Mutable record of the alternation; history has one row per round."""

    round: int = 0
    pseudo_labels: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)
    mask_bases: dict = field(default_factory=dict)
    history: list = field(default_factory=list)


def sample_key(subject_id: str, index: int) -> str:
    return f"{subject_id}:{index}"


def _stack_inputs(samples, dtype) -> torch.Tensor:
    arrs = [s.input.values for s in samples]
    return torch.from_numpy(np.stack(arrs)[:, None, :, :]).to(dtype)


def _stack_grids(grids, dtype) -> torch.Tensor:
    return torch.from_numpy(np.stack([g.values for g in grids])[:, None, :, :]).to(dtype)


class _BatchStream:
    """Endless deterministic batch source; epoch e is shuffled with a
    seed derived from (base_seed, label, e)."""

    def __init__(self, dataset: Dataset, batch_size: int, base_seed: int, label: str):
        self.dataset = dataset
        self.batch_size = batch_size
        self.base_seed = base_seed
        self.label = label
        self.epoch = 0
        self._iter = self._new_epoch()

    def _new_epoch(self):
        seed = derive_seed(self.base_seed, self.label, self.epoch)
        self.epoch += 1
        return batch_iter(self.dataset, self.batch_size, seed)

    def next_batch(self):
        try:
            return next(self._iter)
        except StopIteration:
            self._iter = self._new_epoch()
            return next(self._iter)


def _check_finite(value: float, what: str, model, snapshot, iteration: int):
    if np.isfinite(value):
        return
    if snapshot is not None:
        model.net.load_state_dict(snapshot)
    raise TrainingDiverged(f"{what} became non-finite at iteration {iteration}", iteration)


def pretrain(model: TranslatorModel, source_ds: Dataset, cfg: TrainConfig,
             log_path: str | None = None):
    """Supervised source-only warmup minimizing the MSE of the mean head.

    Dropout stays active (seeded) so the later MC ensembles sample a
    regime the weights were trained under. Returns one (epoch, mse) row
    per epoch; raises TrainingDiverged on a non-finite loss with the
    model rolled back to the last finite state.
    """
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.learning_rate,
                           betas=(cfg.momentum_beta1, cfg.adam_beta2))
    rows = []
    snapshot = None
    it = 0
    for epoch in range(cfg.pretrain_epochs):
        epoch_losses = []
        for batch in batch_iter(source_ds, cfg.batch_size, derive_seed(cfg.seed, "pretrain", epoch)):
            xs = _stack_inputs(batch, model.dtype)
            ys = _stack_grids([s.target for s in batch], model.dtype)
            gen = None
            if model.dropout_rate > 0:
                gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "pretrain-drop", it))
            mean, _ = model.forward_tensor(xs, dropout_generator=gen)
            loss = source_mse_t(mean, ys)
            val = float(loss.detach())
            _check_finite(val, "pretrain source mse", model, snapshot, it)
            snapshot = copy.deepcopy(model.net.state_dict())
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            epoch_losses.append(val)
            it += 1
        rows.append((epoch, float(np.mean(epoch_losses))))
    if log_path:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("epoch", "source_mse"))
            w.writerows(rows)
    return rows


def _selected_uncertainty(maps, mode: str) -> ImageGrid:
    if mode == "both":
        return maps.total
    if mode == "epistemic_only":
        return maps.epistemic
    return maps.aleatoric


def step1_generate(model: TranslatorModel, attn_model, target_ds: Dataset,
                   cfg: TrainConfig, round_index: int, rho: float) -> Step1Result:
    """Freeze the translator and regenerate pseudo-labels and masks.

    Each slice gets a fresh seeded ensemble; the pseudo-label is the
    ensemble mean. The mask base is the uncertainty-only component
    (binary keep-set or exp(-u)); attentive modes multiply the current
    attention map in for the recorded mask while keeping the base
    separate for step 2 to reweight live.
    """
    pseudo, masks, bases = {}, {}, {}
    totals = []
    for idx, sample in enumerate(target_ds.samples):
        key = sample_key(sample.subject_id, idx)
        ens = mc_ensemble(model, sample.input, cfg.mc_samples,
                          derive_seed(cfg.seed, "step1", round_index, idx))
        maps = total(epistemic(ens), aleatoric(ens), ensemble_mean(ens))
        pseudo[key] = maps.mean_prediction
        u_sel = _selected_uncertainty(maps, cfg.uncertainty_mode)
        if cfg.mask_mode in ("binary", "attentive_binary"):
            base = binary_mask(u_sel, rho)
        else:
            base = continuous_mask(u_sel)
        bases[key] = base
        if cfg.needs_attention():
            masks[key] = attentive_mask(attn_model.attend(sample.input), base)
        else:
            masks[key] = base
        totals.append(float(maps.total.values.mean()))
    return Step1Result(pseudo, masks, bases, float(np.mean(totals)), rho)


def step2_retrain(model: TranslatorModel, attn_model, source_ds: Dataset,
                  target_ds: Dataset, state: AdaptationState, cfg: TrainConfig,
                  optimizer, round_index: int, src_stream: _BatchStream,
                  tgt_stream: _BatchStream, mean_u: float, log_writer=None):
    """One round of joint retraining against frozen pseudo-labels.

    Forward passes run without dropout. Returns per-iteration loss
    breakdown tuples matching TRAIN_LOG_COLUMNS.
    """
    dtype = model.dtype
    tgt_index = {id(s): i for i, s in enumerate(target_ds.samples)}
    keys = [sample_key(s.subject_id, i) for i, s in enumerate(target_ds.samples)]
    pseudo_all = _stack_grids([state.pseudo_labels[k] for k in keys], dtype)
    base_all = _stack_grids([state.mask_bases[k].weights for k in keys], dtype)
    attention_live = cfg.needs_attention()

    rho = rho_at_round(cfg, round_index)
    rows = []
    snapshot = None
    for it in range(cfg.iters_per_round):
        global_it = round_index * cfg.iters_per_round + it
        src_batch = src_stream.next_batch()
        tgt_batch = tgt_stream.next_batch()
        xs = _stack_inputs(src_batch, dtype)
        ys = _stack_grids([s.target for s in src_batch], dtype)
        idxs = [tgt_index[id(s)] for s in tgt_batch]
        xt = _stack_inputs(tgt_batch, dtype)
        pseudo_t = pseudo_all[idxs]
        base_t = base_all[idxs]

        mean_s, _ = model.forward_tensor(xs)
        mean_t, logvar_t = model.forward_tensor(xt)
        if attention_live:
            a_t = attn_model.forward_tensor(xt)
            mask_t = a_t * base_t
        else:
            mask_t = base_t
        src_term = source_mse_t(mean_s, ys)
        data_term, lv_term = target_terms_t(mean_t, logvar_t, pseudo_t, mask_t,
                                            cfg.mask_outside_norm)
        loss = src_term + data_term + cfg.beta * lv_term
        if attention_live and cfg.attention_floor_weight > 0:
            loss = loss + cfg.attention_floor_weight * (a_t.mean() - 0.5) ** 2

        val = float(loss.detach())
        _check_finite(val, "joint loss", model, snapshot, global_it)
        snapshot = copy.deepcopy(model.net.state_dict())
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

        row = (global_it, float(src_term.detach()), float(data_term.detach()),
               float(lv_term.detach()), val, rho, mean_u)
        rows.append(row)
        if log_writer is not None:
            log_writer.writerow(row)
    return rows


def rho_at_round(cfg: TrainConfig, round_index: int) -> float:
    """Keep fraction in force for a round's step 1 and logging."""
    if cfg.rounds == 0:
        return cfg.rho_start
    sched = RhoSchedule(cfg.rho_start, cfg.rho_end, cfg.total_adapt_iters())
    pos = round_index if cfg.rho_per_round else round_index * cfg.iters_per_round
    return rho_at(sched, pos)


def probe_uncertainty(model: TranslatorModel, probe_input: ImageGrid,
                      cfg: TrainConfig, tag: int) -> float:
    """Mean total uncertainty of a fresh ensemble on one held-out input."""
    ens = mc_ensemble(model, probe_input, cfg.mc_samples,
                      derive_seed(cfg.seed, "probe", tag))
    maps = total(epistemic(ens), aleatoric(ens), ensemble_mean(ens))
    return float(maps.total.values.mean())


def adapt(model: TranslatorModel, attn_model, source_ds: Dataset, target_ds: Dataset,
          cfg: TrainConfig, out_dir: str | None = None,
          probe_input: ImageGrid | None = None) -> AdaptationState:
    """Run the full alternation for cfg.rounds rounds.

    Mutates the models in place and returns the final state, whose
    history holds one row per round: rho, mean training uncertainty,
    round-mean loss terms, and (when a probe input is given) the mean
    total uncertainty on the probe measured after the round's retrain.
    rounds=0 leaves the models untouched.
    """
    if cfg.needs_attention() and attn_model is None:
        raise ValueError(f"mask_mode {cfg.mask_mode!r} requires an attention model")
    state = AdaptationState()
    if cfg.rounds == 0:
        return state

    params = list(model.net.parameters())
    if cfg.needs_attention():
        params += list(attn_model.net.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate,
                                 betas=(cfg.momentum_beta1, cfg.adam_beta2))
    src_stream = _BatchStream(source_ds, cfg.batch_size, cfg.seed, "src-epoch")
    tgt_stream = _BatchStream(target_ds, cfg.batch_size, cfg.seed, "tgt-epoch")

    log_fh = log_writer = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "training_log.csv"), "w", newline="")
        log_writer = csv.writer(log_fh)
        log_writer.writerow(TRAIN_LOG_COLUMNS)

    try:
        for r in range(cfg.rounds):
            rho = rho_at_round(cfg, r)
            step1 = step1_generate(model, attn_model, target_ds, cfg, r, rho)
            state.pseudo_labels = step1.pseudo_labels
            state.masks = step1.masks
            state.mask_bases = step1.mask_bases
            rows = step2_retrain(model, attn_model, source_ds, target_ds, state,
                                 cfg, optimizer, r, src_stream, tgt_stream,
                                 step1.mean_total_u, log_writer)
            state.round = r + 1
            entry = {
                "round": r,
                "rho": rho,
                "mean_u": step1.mean_total_u,
                "source_mse": float(np.mean([row[1] for row in rows])),
                "target_data_term": float(np.mean([row[2] for row in rows])),
                "target_logvar_term": float(np.mean([row[3] for row in rows])),
                "total": float(np.mean([row[4] for row in rows])),
            }
            if probe_input is not None:
                entry["probe_u"] = probe_uncertainty(model, probe_input, cfg, r)
            state.history.append(entry)
            if out_dir and ((r + 1) % cfg.checkpoint_every == 0 or r == cfg.rounds - 1):
                nets = {"translator": model.net}
                desc = {"kind": "round", "round": r, "translator": model.descriptor()}
                if cfg.needs_attention():
                    nets["attention"] = attn_model.net
                    desc["attention"] = attn_model.descriptor()
                from .networks import save_checkpoint
                save_checkpoint(os.path.join(out_dir, f"round_{r}.ckpt"), nets, desc)
    finally:
        if log_fh:
            log_fh.close()
    return state

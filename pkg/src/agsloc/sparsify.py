"""Training objectives, pretraining, and adaptive graph sparsification (AGS)."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

from . import numkernel as nk
from .data import ForecastData, WindowSet, denormalize
from .graph import EdgeMask, GateParams, apply_mask, deterministic_gate, expected_l0, sample_hard_concrete
from .metrics import MetricReport, compute_metrics
from .numkernel import DTYPE, NonFiniteError, ShapeError
from .temporal import STModel, build_model

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "loss", "sparsity", "val_mae", "val_rmse", "val_mape")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class SparsifyConfig:
    """Budgets and knobs for pretraining, AGS and retraining.

    Iterations are optimiser steps on one mini-batch each.
    """

    sparsity: float = 0.99
    lam: float = 1e-4
    pretrain_iters: int = 300
    sparsify_iters: int = 600
    prune_quantum: float | None = None  # default sparsity / 20
    lr: float = 3e-3
    batch_size: int = 32
    patience: int = 15
    eval_every: int = 10
    seed: int = 0
    beta: float = 2.0 / 3.0
    threshold: float = 0.5
    prune_diagonal: bool = False

    def __post_init__(self):
        if not 0.0 <= self.sparsity <= 1.0:
            raise ValueError("sparsity must lie in [0, 1]")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.pretrain_iters < 0 or self.sparsify_iters < 0:
            raise ValueError("iteration budgets must be >= 0")
        if self.prune_quantum is not None and not 0.0 < self.prune_quantum <= 1.0:
            raise ValueError("prune_quantum must lie in (0, 1]")
        if self.batch_size < 1 or self.eval_every < 1 or self.patience < 1:
            raise ValueError("batch_size, eval_every and patience must be positive")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")

    @property
    def quantum(self) -> float:
        return self.prune_quantum if self.prune_quantum is not None else self.sparsity / 20.0

    @property
    def phases(self) -> int:
        if self.sparsity <= 0:
            return 0
        return max(1, math.ceil(self.sparsity / self.quantum - 1e-9))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SparsifyConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown sparsify config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLog:
    records: list[dict[str, Any]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    stage: str = ""
    best_iteration: int | None = None
    best_val_mae: float | None = None
    stopped_early: bool = False
    target_reached: bool | None = None
    resume_state: Any = None

    def add(self, iteration: int, loss: float, sparsity: float, val: MetricReport | None = None) -> None:
        self.records.append({
            "iteration": iteration, "loss": loss, "sparsity": sparsity,
            "val_mae": None if val is None else val.mae,
            "val_rmse": None if val is None else val.rmse,
            "val_mape": None if val is None else val.mape,
        })

    def column(self, name: str) -> list:
        return [r[name] for r in self.records]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                            for c in LOG_COLUMNS])
        return path

    def summary(self) -> dict[str, Any]:
        losses = self.column("loss")
        return {
            "stage": self.stage,
            "iterations": len(self.records),
            "first_loss": losses[0] if losses else None,
            "last_loss": losses[-1] if losses else None,
            "final_sparsity": self.records[-1]["sparsity"] if self.records else None,
            "best_iteration": self.best_iteration,
            "best_val_mae": self.best_val_mae,
            "stopped_early": self.stopped_early,
            "target_reached": self.target_reached,
            "warnings": list(self.warnings),
        }

    def write_summary(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# --------------------------------------------------------------------------
# objectives


def loss_prediction(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over samples and nodes of the per-node L1 norm of the forecast error.

    Node axis is second-to-last for ``... x N x C`` inputs laid out as
    ``B x H x N x C``; the per-node vector is its H x C entries.
    """
    if pred.shape != target.shape:
        raise ShapeError("loss_prediction", pred.shape, target.shape)
    if pred.dim() < 2:
        raise ShapeError("loss_prediction", pred.shape, detail="need at least N x C")
    err = nk.abs_(nk.sub(pred, target))
    nodes = err.shape[-2]
    # everything except the per-node vector axes (horizon, channel) counts as samples
    per_node = err.shape[-1] * (err.shape[-3] if err.dim() >= 3 else 1)
    denom = (err.numel() // (per_node * nodes)) * nodes
    return nk.sum_(err) / denom


def loss_ags(pred: torch.Tensor, target: torch.Tensor, logits: torch.Tensor, gate: GateParams,
             lam: float, mask: EdgeMask | None = None) -> torch.Tensor:
    """Prediction loss plus ``lam`` times the expected number of open gates."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    base = loss_prediction(pred, target)
    if lam == 0:
        return base
    return base + lam * expected_l0(logits, gate, mask)


# --------------------------------------------------------------------------
# schedule helpers


def rank_edges(adj: torch.Tensor, include_diagonal: bool = False) -> list[tuple[int, int]]:
    """Off-diagonal coordinates sorted by weight ascending, ties by (i, j)."""
    a = adj.detach().cpu().numpy() if isinstance(adj, torch.Tensor) else np.asarray(adj)
    n = a.shape[0]
    coords = [(i, j) for i in range(n) for j in range(n) if include_diagonal or i != j]
    return sorted(coords, key=lambda ij: (float(a[ij]), ij[0], ij[1]))


def target_count(sparsity: float, prunable: int) -> int:
    return min(prunable, math.ceil(sparsity * prunable - 1e-9))


def current_sparsity(mask: EdgeMask, logits: torch.Tensor | None = None, gate: GateParams | None = None,
                     threshold: float = 0.5) -> float:
    """Fraction of prunable (off-diagonal by default) entries that are closed."""
    prunable = mask.prunable
    total = int(prunable.sum())
    if total == 0:
        return 0.0
    if mask.is_binary() or logits is None:
        closed = mask.frozen_prune
    else:
        g = deterministic_gate(logits.detach(), gate or GateParams(), mask)
        closed = g < threshold
    return int((closed & prunable).sum()) / total


# --------------------------------------------------------------------------
# training loop


def batch_indices(seed: int, stage: int, iteration: int, size: int, batch: int) -> np.ndarray:
    """Mini-batch for one iteration, a pure function of (seed, stage, iteration)."""
    rng = np.random.default_rng([seed, stage, iteration])
    return np.sort(rng.choice(size, size=min(batch, size), replace=False))


def gate_noise(seed: int, iteration: int, n: int) -> torch.Tensor:
    rng = np.random.default_rng([seed, 97, iteration])
    u = rng.random((n, n))
    return torch.from_numpy(np.clip(u, 1e-12, 1.0 - 1e-12))


def evaluate(model: STModel, windows: WindowSet, stats, batch_size: int = 512,
             mape_epsilon: float = 1e-3, per_horizon: bool = False) -> MetricReport:
    """Denormalised metrics of ``model`` (binary evaluation mask) on a split."""
    preds = []
    with torch.no_grad():
        adj = model.effective_adjacency()
        for s in range(0, len(windows), batch_size):
            preds.append(model.forward(windows.x[s:s + batch_size], adj))
    pred = denormalize(torch.cat(preds), stats)
    return compute_metrics(pred, windows.y_raw, mape_epsilon, horizon_axis=1 if per_horizon else None)


class _Trainer:
    """Adam loop with periodic validation and best-checkpoint early stopping."""

    def __init__(self, model: STModel, data: ForecastData, cfg: SparsifyConfig, names: list[str], stage: int):
        self.model, self.data, self.cfg, self.stage = model, data, cfg, stage
        self.names = names
        for name, p in model.params.items():
            p.requires_grad_(name in names)
        self.opt = torch.optim.Adam([model.params[k] for k in names], lr=cfg.lr)

    def step(self, iteration: int, loss_fn: Callable[[torch.Tensor, torch.Tensor, int], torch.Tensor]) -> float:
        train = self.data.train
        idx = torch.from_numpy(batch_indices(self.cfg.seed, self.stage, iteration, len(train), self.cfg.batch_size))
        xb, yb = train.x[idx], train.y[idx]
        self.opt.zero_grad(set_to_none=True)
        try:
            loss = loss_fn(xb, yb, iteration)
        except NonFiniteError as exc:
            raise DivergenceError(f"non-finite forward at iteration {iteration}: {exc}") from None
        value = float(loss.detach())
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss at iteration {iteration}")
        nk.backward(loss, self.model.params)
        self.opt.step()
        return value


@dataclass
class FitState:
    """Everything needed to continue an interrupted ``_fit`` bit-for-bit."""

    next_iteration: int
    optimizer: dict[str, Any]
    best_state: dict[str, torch.Tensor]
    best_mae: float
    bad: int
    best_iteration: int | None
    records: list[dict[str, Any]]


def _fit(model: STModel, data: ForecastData, cfg: SparsifyConfig, iterations: int, stage: int,
         label: str, resume: FitState | None = None, stop_at: int | None = None) -> TrainLog:
    """Minimise the prediction loss under the model's fixed binary mask.

    With ``stop_at`` the loop halts before that iteration and leaves a
    :class:`FitState` in ``log.resume_state`` instead of restoring the best
    weights; passing it back as ``resume`` continues the identical run.
    """
    from .checkpoint import load_optimizer_state, optimizer_state

    names = [k for k in model.params.names() if k != "gate_weight"]
    trainer = _Trainer(model, data, cfg, names, stage)
    tlog = TrainLog(stage=label)
    sparsity = current_sparsity(model.mask)
    mask = model.eval_mask()

    def loss_fn(xb, yb, it):
        return loss_prediction(model.forward(xb, model.effective_adjacency(mask)), yb)

    best_state, best_mae, bad, start = model.params.state(), math.inf, 0, 0
    if resume is not None:
        load_optimizer_state(trainer.opt, names, resume.optimizer)
        best_state = {k: v.clone() for k, v in resume.best_state.items()}
        best_mae, bad, start = resume.best_mae, resume.bad, resume.next_iteration
        tlog.best_iteration = resume.best_iteration
        tlog.records = [dict(r) for r in resume.records]
    for it in range(start, iterations):
        if stop_at is not None and it >= stop_at:
            tlog.resume_state = FitState(it, optimizer_state(trainer.opt, names), best_state, best_mae, bad,
                                         tlog.best_iteration, [dict(r) for r in tlog.records])
            return tlog
        value = trainer.step(it, loss_fn)
        val = None
        if (it + 1) % cfg.eval_every == 0 or it + 1 == iterations:
            val = evaluate(model, data.val, data.stats)
            if val.mae < best_mae:
                best_mae, best_state, bad = val.mae, model.params.state(), 0
                tlog.best_iteration = it
            else:
                bad += 1
        tlog.add(it, value, sparsity, val)
        if bad >= cfg.patience:
            tlog.stopped_early = True
            break
    model.params.load_state(best_state)
    tlog.best_val_mae = None if best_mae == math.inf else best_mae
    return tlog


def pretrain(model: STModel, data: ForecastData, cfg: SparsifyConfig, resume: FitState | None = None,
             stop_at: int | None = None) -> TrainLog:
    """Optimise the dense model on the prediction loss; keep the best-validation weights."""
    if cfg.pretrain_iters < 1:
        raise ValueError("pretraining needs at least one iteration")
    return _fit(model, data, cfg, cfg.pretrain_iters, stage=1, label="pretrain", resume=resume, stop_at=stop_at)


def ags_sparsify(model: STModel, data: ForecastData, cfg: SparsifyConfig) -> TrainLog:
    """Localise a pretrained model in place.

    Off-diagonal edges are ranked once by pretrained weight. Each phase turns
    the next ``prune_quantum`` slice of that ranking into live hard-concrete
    gates while every other unpruned edge is pinned open; the model, the
    embedding and the gate weights are trained jointly on the L0-penalised
    loss. After every step, live gates whose deterministic value falls below
    the threshold are frozen shut; a phase's leftovers are frozen shut when
    its iteration budget runs out. The run stops once the target sparsity is
    reached or the budget is spent, and the model leaves with a binary mask.
    """
    n = model.n
    gate = GateParams(beta=cfg.beta, low=model.gate.low, high=model.gate.high)
    model.gate = gate
    mask = EdgeMask(n, prune_diagonal=cfg.prune_diagonal)
    with torch.no_grad():
        ranking = rank_edges(model.adjacency(), include_diagonal=cfg.prune_diagonal)
    prunable = len(ranking)
    goal = target_count(cfg.sparsity, prunable)
    tlog = TrainLog(stage=f"ags@{cfg.sparsity:g}")

    if goal == 0 or cfg.sparsify_iters == 0:
        model.mask = EdgeMask.all_ones(n, cfg.prune_diagonal)
        tlog.target_reached = goal == 0
        if goal > 0:
            tlog.warnings.append(f"target sparsity {cfg.sparsity} unreachable with zero sparsification iterations")
        return tlog

    phases = cfg.phases
    per_phase = max(1, cfg.sparsify_iters // phases)
    quantum_edges = cfg.quantum * prunable
    names = model.params.names()
    trainer = _Trainer(model, data, cfg, names, stage=2)

    def set_candidates(phase: int) -> torch.Tensor:
        upto = min(goal, math.ceil(phase * quantum_edges - 1e-9))
        cand = torch.zeros(n, n, dtype=torch.bool)
        for i, j in ranking[:upto]:
            cand[i, j] = True
        cand &= ~mask.frozen_prune
        mask.frozen_keep = ~(cand | mask.frozen_prune)
        if not cfg.prune_diagonal:
            mask.frozen_keep.fill_diagonal_(True)
        return cand

    def loss_fn(xb, yb, it):
        logits = model.logits()
        gates = sample_hard_concrete(logits, gate, gate_noise(cfg.seed, it, n), mask)
        adj = apply_mask(model.adjacency(), gates)
        return loss_ags(model.forward(xb, adj), yb, logits, gate, cfg.lam, mask)

    phase, phase_start = 1, 0
    set_candidates(phase)
    sparsity = current_sparsity(mask)
    it = 0
    while it < cfg.sparsify_iters and sparsity < cfg.sparsity - 1e-12:
        value = trainer.step(it, loss_fn)
        with torch.no_grad():
            g = deterministic_gate(model.logits(), gate, mask)
            closing = mask.free & (g < cfg.threshold)
            if it + 1 - phase_start >= per_phase:
                closing = mask.free.clone()  # phase deadline
            mask.frozen_prune |= closing
            mask.frozen_keep &= ~closing
        sparsity = current_sparsity(mask)
        if it + 1 - phase_start >= per_phase and sparsity < cfg.sparsity - 1e-12:
            phase += 1
            phase_start = it + 1
            set_candidates(phase)
        val = None
        if (it + 1) % cfg.eval_every == 0:
            model.mask = _binary_view(mask)
            val = evaluate(model, data.val, data.stats)
        tlog.add(it, value, sparsity, val)
        it += 1

    final = _binary_view(mask)
    model.mask = final
    tlog.target_reached = current_sparsity(final) >= cfg.sparsity - 1e-12
    if not tlog.target_reached:
        msg = (f"target sparsity {cfg.sparsity} not reached within {cfg.sparsify_iters} iterations "
               f"(achieved {current_sparsity(final):.4f})")
        tlog.warnings.append(msg)
        log.warning(msg)
    val = evaluate(model, data.val, data.stats)
    tlog.best_val_mae = val.mae
    if tlog.records:
        tlog.records[-1].update(val_mae=val.mae, val_rmse=val.rmse, val_mape=val.mape)
    return tlog


def _binary_view(mask: EdgeMask) -> EdgeMask:
    """Binary mask where only frozen-shut edges are closed."""
    return EdgeMask.from_binary(~mask.frozen_prune, prune_diagonal=mask.prune_diagonal)


def reinit_retrain(model: STModel, data: ForecastData, cfg: SparsifyConfig, seed: int) -> tuple[STModel, TrainLog]:
    """Fresh weights under the localised model's frozen binary mask, trained like pretraining."""
    if not model.mask.is_binary():
        raise ValueError("reinit_retrain needs a binary (frozen) mask")
    fresh = build_model(model.config, seed=seed, gate=model.gate, prune_diagonal=model.mask.prune_diagonal)
    fresh.mask = model.mask.copy()
    tlog = _fit(fresh, data, cfg, cfg.pretrain_iters, stage=3, label="retrain")
    return fresh, tlog

"""Command-line orchestration: data, pretraining, localisation sweeps, retrain controls, reports.

Every command writes under a run directory and refreshes ``manifest.json``
there. Exit codes: 0 success, 2 config/input error, 3 artifact/IO error,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from . import __version__
from . import checkpoint as ck
from . import numkernel as nk
from .data import (DatasetError, ForecastData, SpatioTemporalSeries, SyntheticSpec, generate_synthetic,
                   load_csv_dataset, prepare_forecast_data, save_csv_dataset)
from .graph import export_matrix_csv
from .metrics import CostReport, cost_report, flops_analytic, render_cost_table, speedup
from .numkernel import NonFiniteError
from .sparsify import (DivergenceError, FitState, SparsifyConfig, TrainLog, ags_sparsify, current_sparsity,
                       evaluate, pretrain, reinit_retrain)
from .temporal import STModel, build_model, config_from_dict

log = logging.getLogger("agsloc")

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_DIVERGED = 0, 2, 3, 4
DEFAULT_SWEEP = [0.0, 0.30, 0.50, 0.80, 0.99, 0.995, 1.00]
# epoch-denominated budgets accepted in the ``sparsify`` block, and the step counts they replace
EPOCH_BUDGETS = {"pretrain_epochs": "pretrain_iters", "sparsify_epochs": "sparsify_iters"}
CURVE_COLUMNS = ("sparsity", "seed", "variant", "mae", "rmse", "mape", "flops", "status")


class ConfigError(ValueError):
    """Invalid experiment configuration or command-line input."""


# --------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    """One JSON document describing a full pipeline run.

    ``dataset`` is either ``{"synthetic": {...SyntheticSpec...}}`` or
    ``{"csv": {"data": path, "meta": path}}``. ``model`` holds architecture
    dimensions; ``num_nodes`` and ``input_dim`` come from the dataset.
    With ``data_seed_per_run`` a synthetic dataset is regenerated with each
    run seed, otherwise every seed shares one series.
    """

    dataset: dict[str, Any] = field(default_factory=lambda: {"synthetic": {}})
    arch: str = "agcrn"
    model: dict[str, Any] = field(default_factory=dict)
    sparsify: dict[str, Any] = field(default_factory=dict)
    sweep: list[float] = field(default_factory=lambda: list(DEFAULT_SWEEP))
    seeds: list[int] = field(default_factory=lambda: [0])
    retrain_seed_offset: int = 1000
    history: int = 12
    horizon: int = 12
    ratios: list[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])
    data_seed_per_run: bool = False
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.arch not in ("agcrn", "agformer"):
            raise ConfigError(f"arch must be 'agcrn' or 'agformer', got {self.arch!r}")
        if not isinstance(self.dataset, dict) or len(self.dataset) != 1 or \
                next(iter(self.dataset)) not in ("synthetic", "csv"):
            raise ConfigError("dataset must be {'synthetic': {...}} or {'csv': {'data': ..., 'meta': ...}}")
        sw = [float(s) for s in self.sweep]
        if not sw:
            raise ConfigError("sweep must not be empty")
        if any(not 0.0 <= s <= 1.0 for s in sw):
            raise ConfigError("sweep values must lie in [0, 1]")
        if any(b <= a for a, b in zip(sw, sw[1:])):
            raise ConfigError("sweep must be strictly increasing")
        self.sweep = sw
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a non-empty list of distinct integers")
        self.seeds = [int(s) for s in self.seeds]
        if self.history < 1 or self.horizon < 1:
            raise ConfigError("history and horizon must be positive")
        for key in ("num_nodes", "input_dim", "history", "horizon", "arch"):
            if key in self.model:
                raise ConfigError(f"model.{key} is derived; set it at the top level or via the dataset")
        try:
            self.sparsify_config
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"sparsify: {exc}") from None

    def _budget_split(self) -> tuple[dict[str, Any], dict[str, int]]:
        base = {k: v for k, v in self.sparsify.items() if k not in EPOCH_BUDGETS}
        epochs = {k: int(v) for k, v in self.sparsify.items() if k in EPOCH_BUDGETS}
        for key, iters in EPOCH_BUDGETS.items():
            if key in epochs and iters in base:
                raise ConfigError(f"sparsify: give {key} or {iters}, not both")
            if epochs.get(key, 0) < 0:
                raise ConfigError(f"sparsify: {key} must be >= 0")
        return base, epochs

    @property
    def sparsify_config(self) -> SparsifyConfig:
        """Iteration-denominated budgets only; see :meth:`run_config` for epoch budgets."""
        return SparsifyConfig.from_dict(self._budget_split()[0])

    def run_config(self, data: ForecastData, seed: int, **overrides: Any) -> SparsifyConfig:
        """Sparsify config for one run, with epoch budgets converted to optimiser steps."""
        base, epochs = self._budget_split()
        cfg = SparsifyConfig.from_dict(base)
        steps = math.ceil(len(data.train) / cfg.batch_size)
        budgets = {EPOCH_BUDGETS[k]: e * steps for k, e in epochs.items()}
        return SparsifyConfig.from_dict({**cfg.to_dict(), **budgets, "seed": seed, **overrides})

    def to_dict(self) -> dict[str, Any]:
        """Config with every default filled in, for echoing into outputs."""
        d = asdict(self)
        base, epochs = self._budget_split()
        d["sparsify"] = {**SparsifyConfig.from_dict(base).to_dict(), **epochs}
        for key in epochs:
            d["sparsify"].pop(EPOCH_BUDGETS[key])
        if "synthetic" in d["dataset"]:
            d["dataset"] = {"synthetic": SyntheticSpec.from_dict(d["dataset"]["synthetic"]).to_dict()}
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def read_json_arg(value: str, what: str) -> Any:
    """Parse ``value`` as a JSON file path or, failing that, inline JSON."""
    path = Path(value)
    try:
        text = path.read_text(encoding="utf-8") if path.is_file() else value
    except OSError as exc:
        raise ConfigError(f"cannot read {what}: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        if not path.is_file() and not value.lstrip().startswith(("{", "[")):
            raise ConfigError(f"{what} not found: {value}") from None
        raise ConfigError(f"invalid {what} JSON: {exc}") from None


def load_config(value: str) -> ExperimentConfig:
    return ExperimentConfig.from_dict(read_json_arg(value, "config"))


def load_series(cfg: ExperimentConfig, seed: int | None = None) -> SpatioTemporalSeries:
    kind, body = next(iter(cfg.dataset.items()))
    if kind == "synthetic":
        spec = SyntheticSpec.from_dict(body)
        return generate_synthetic(spec, seed=seed if cfg.data_seed_per_run else None)
    try:
        data_path, meta_path = body["data"], body["meta"]
    except (KeyError, TypeError):
        raise ConfigError("csv dataset needs 'data' and 'meta' paths") from None
    for p in (data_path, meta_path):
        if not Path(p).is_file():
            raise ConfigError(f"dataset file not found: {p}")
    return load_csv_dataset(data_path, meta_path)


def load_data(cfg: ExperimentConfig, seed: int | None = None) -> ForecastData:
    series = load_series(cfg, seed)
    return prepare_forecast_data(series, cfg.history, cfg.horizon, cfg.ratios)


def model_config(cfg: ExperimentConfig, data: ForecastData):
    n, c = data.train.x.shape[2], data.train.x.shape[3]
    d = {"arch": cfg.arch, **cfg.model, "num_nodes": n, "input_dim": c,
         "history": cfg.history, "horizon": cfg.horizon}
    try:
        return config_from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None


# --------------------------------------------------------------------------
# run-directory helpers


def _dump_json(path: Path, obj: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")
    return path


def write_manifest(out: Path, command: str, config: dict[str, Any] | None, extra: dict[str, Any] | None = None) -> Path:
    """Manifest of every file under ``out`` with its SHA-256, plus the echoed config."""
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json" and not p.name.endswith(".tmp"):
            files[p.relative_to(out).as_posix()] = ck.file_hash(p)
    manifest = {"tool": "agsloc", "version": __version__, "command": command,
                "deterministic": nk.is_deterministic(), "config": config, "files": files}
    if extra:
        manifest.update(extra)
    return _dump_json(out / "manifest.json", manifest)


def fit_state_to_meta(state: FitState) -> dict[str, Any]:
    return {
        "next_iteration": state.next_iteration,
        "optimizer": {"names": state.optimizer["names"], "step": state.optimizer["step"],
         "exp_avg": {k: ck.encode_array(v) for k, v in state.optimizer["exp_avg"].items()},
         "exp_avg_sq": {k: ck.encode_array(v) for k, v in state.optimizer["exp_avg_sq"].items()}},
        "best_state": {k: ck.encode_array(v) for k, v in state.best_state.items()},
        "best_mae": state.best_mae if math.isfinite(state.best_mae) else None,
        "bad": state.bad,
        "best_iteration": state.best_iteration,
        "records": state.records,
    }


def fit_state_from_meta(d: dict[str, Any]) -> FitState:
    try:
        o = d["optimizer"]
        opt = {"names": list(o["names"]), "step": int(o["step"]),
               "exp_avg": {k: torch.from_numpy(ck.decode_array(v)) for k, v in o["exp_avg"].items()},
               "exp_avg_sq": {k: torch.from_numpy(ck.decode_array(v)) for k, v in o["exp_avg_sq"].items()}}
        best = {k: torch.from_numpy(ck.decode_array(v)) for k, v in d["best_state"].items()}
        mae = math.inf if d["best_mae"] is None else float(d["best_mae"])
        return FitState(int(d["next_iteration"]), opt, best, mae, int(d["bad"]), d["best_iteration"],
                        [dict(r) for r in d["records"]])
    except (KeyError, TypeError, ValueError) as exc:
        raise ck.CheckpointError(f"checkpoint has no usable resume state: {exc!r}") from None


def _save_model(path: Path, model: STModel, data: ForecastData, meta: dict[str, Any]) -> str:
    return ck.save(ck.Checkpoint(model, data.stats, None, meta), path)


def _dense_reference(model: STModel, data: ForecastData) -> dict[str, Any]:
    rep = cost_report(model, data.test.x[0], mask=torch.ones(model.n, model.n, dtype=nk.DTYPE))
    return rep.to_dict()


def _level_tag(s: float) -> str:
    return f"{s:.4f}".rstrip("0").rstrip(".") if s else "0"


def _write_log(out: Path, stem: str, tlog: TrainLog) -> dict[str, str]:
    out.mkdir(parents=True, exist_ok=True)
    return {"log_file": tlog.to_csv(out / f"{stem}.log.csv").name,
            "summary_file": tlog.write_summary(out / f"{stem}.summary.json").name}


# --------------------------------------------------------------------------
# commands


def cmd_generate(spec: dict[str, Any], out: Path) -> dict[str, Any]:
    try:
        s = SyntheticSpec.from_dict(spec)
    except DatasetError as exc:
        raise ConfigError(f"synthetic spec: {exc}") from None
    series = generate_synthetic(s)
    out.mkdir(parents=True, exist_ok=True)
    data_path, meta_path = out / "data.csv", out / "meta.json"
    save_csv_dataset(series, data_path, meta_path)
    write_manifest(out, "generate", {"synthetic": s.to_dict()})
    return {"data": str(data_path), "meta": str(meta_path), "shape": list(series.values.shape)}


def cmd_train(cfg: ExperimentConfig, out: Path, seed: int | None = None, resume: Path | None = None,
              stop_at: int | None = None) -> dict[str, Any]:
    """Pretrain the dense model; optionally stop early with a resumable checkpoint."""
    seed = cfg.seeds[0] if seed is None else seed
    data = load_data(cfg, seed)
    scfg = cfg.run_config(data, seed)
    state = None
    if resume is not None:
        parent = ck.load(resume)
        model = parent.model
        state = fit_state_from_meta(parent.meta.get("resume") or {})
    else:
        model = build_model(model_config(cfg, data), seed=seed)
    tlog = pretrain(model, data, scfg, resume=state, stop_at=stop_at)
    meta: dict[str, Any] = {"stage": "pretrain", "run_seed": seed, "dataset": cfg.dataset,
                            "history": cfg.history, "horizon": cfg.horizon, "ratios": cfg.ratios,
                            "data_seed_per_run": cfg.data_seed_per_run}
    out.mkdir(parents=True, exist_ok=True)
    if tlog.resume_state is not None:
        meta["resume"] = fit_state_to_meta(tlog.resume_state)
        name = "pretrain.partial.ckpt.json"
    else:
        meta["dense_cost"] = _dense_reference(model, data)
        meta["train"] = tlog.summary()
        name = "pretrained.ckpt.json"
    digest = _save_model(out / name, model, data, meta)
    files = _write_log(out, "pretrain", tlog)
    write_manifest(out, "train", cfg.to_dict())
    return {"checkpoint": str(out / name), "sha256": digest, "partial": tlog.resume_state is not None, **files}


def _sparsify_levels(cfg: ExperimentConfig, parent: ck.Checkpoint, data: ForecastData, out: Path,
                     seed: int) -> dict[float, dict[str, Any]]:
    parent_state = parent.model.params.state()
    results = {}
    for s in cfg.sweep:
        model = build_model(parent.model.config, seed=parent.model.seed, gate=parent.model.gate)
        model.params.load_state(parent_state)
        level_cfg = cfg.run_config(data, seed, sparsity=s)
        tlog = ags_sparsify(model, data, level_cfg)
        tag = _level_tag(s)
        meta = {**parent.meta, "stage": "ags", "target_sparsity": s,
                "achieved_sparsity": current_sparsity(model.mask), "target_reached": tlog.target_reached,
                "warnings": tlog.warnings, "parent_sha256": parent.meta.get("_sha256")}
        meta.pop("resume", None)
        meta.pop("train", None)
        path = out / f"ags_{tag}.ckpt.json"
        digest = _save_model(path, model, data, meta)
        results[s] = {"model": model, "checkpoint": path, "sha256": digest, "log": tlog,
                      **_write_log(out, f"ags_{tag}", tlog)}
    return results


def cmd_sparsify(cfg: ExperimentConfig, checkpoint: Path, out: Path) -> dict[str, Any]:
    parent = ck.load(checkpoint)
    parent.meta["_sha256"] = ck.file_hash(checkpoint)
    seed = int(parent.meta.get("run_seed", cfg.seeds[0]))
    data = load_data(cfg, seed)
    res = _sparsify_levels(cfg, parent, data, out, seed)
    write_manifest(out, "sparsify", cfg.to_dict(), {"parent": str(checkpoint)})
    return {_level_tag(s): {"checkpoint": str(r["checkpoint"]), "sha256": r["sha256"],
                            "sparsity": current_sparsity(r["model"].mask),
                            "target_reached": r["log"].target_reached, "warnings": r["log"].warnings}
            for s, r in res.items()}


def cmd_retrain(cfg: ExperimentConfig, checkpoint: Path, out: Path, seed: int | None = None) -> dict[str, Any]:
    src = ck.load(checkpoint)
    if not src.model.mask.is_binary():
        raise ConfigError("retrain needs a checkpoint with a frozen binary mask")
    run_seed = int(src.meta.get("run_seed", cfg.seeds[0]))
    data = load_data(cfg, run_seed)
    init_seed = run_seed + cfg.retrain_seed_offset if seed is None else seed
    scfg = cfg.run_config(data, run_seed)
    model, tlog = reinit_retrain(src.model, data, scfg, seed=init_seed)
    meta = {**src.meta, "stage": "retrain", "init_seed": init_seed, "source_sha256": ck.file_hash(checkpoint),
            "mask_sha256": ck.mask_hash(model.mask), "train": tlog.summary()}
    name = Path(checkpoint).name.replace(".ckpt.json", "") + ".retrained.ckpt.json"
    digest = _save_model(out / name, model, data, meta)
    files = _write_log(out, name.replace(".ckpt.json", ""), tlog)
    write_manifest(out, "retrain", cfg.to_dict(), {"source": str(checkpoint)})
    return {"checkpoint": str(out / name), "sha256": digest, "init_seed": init_seed,
            "mask_sha256": meta["mask_sha256"], **files}


def _config_from_checkpoint(c: ck.Checkpoint) -> ExperimentConfig:
    m = c.meta
    if "dataset" not in m:
        raise ConfigError("checkpoint does not record its dataset; pass --config")
    arch = c.model.config.arch
    return ExperimentConfig(dataset=m["dataset"], arch=arch, history=m.get("history", 12),
                            horizon=m.get("horizon", 12), ratios=m.get("ratios", [0.6, 0.2, 0.2]),
                            data_seed_per_run=m.get("data_seed_per_run", False),
                            seeds=[int(m.get("run_seed", 0))])


def cmd_eval(checkpoint: Path, splits: Sequence[str], cfg: ExperimentConfig | None = None,
             per_horizon: bool = False) -> dict[str, Any]:
    c = ck.load(checkpoint)
    cfg = cfg or _config_from_checkpoint(c)
    data = load_data(cfg, int(c.meta.get("run_seed", cfg.seeds[0])))
    out = {"checkpoint": str(checkpoint), "sha256": ck.file_hash(checkpoint), "reports": {}}
    for name in splits:
        try:
            ws = data.split_named(name)
        except DatasetError as exc:
            raise ConfigError(str(exc)) from None
        rep = evaluate(c.model, ws, c.norm or data.stats, per_horizon=per_horizon)
        out["reports"][name] = {"split": name, **rep.to_dict()}
    return out


def cmd_flops(checkpoint: Path, cfg: ExperimentConfig | None = None) -> dict[str, Any]:
    c = ck.load(checkpoint)
    model = c.model
    window = torch.zeros(model.config.history, model.n, model.config.input_dim, dtype=nk.DTYPE)
    rep = cost_report(model, window)
    out: dict[str, Any] = {"checkpoint": str(checkpoint), "cost": rep.to_dict()}
    dense = c.meta.get("dense_cost")
    if dense is None:
        out["dense_reference_missing"] = True
        out["speedup"] = None
        out["table"] = render_cost_table([("model", rep)])
    else:
        ref = CostReport.from_dict(dense)
        out["dense_reference_missing"] = False
        out["speedup"] = speedup(ref, rep)
        out["table"] = render_cost_table([("dense", ref), ("model", rep)], dense=ref)
    return out


HIST_BINS = 20


def cmd_inspect(checkpoint: Path, out: Path, bins: int = HIST_BINS) -> dict[str, Any]:
    """Export A_adp, gate logits U and the binary mask, plus a fixed-width histogram of A_adp."""
    if bins < 1:
        raise ConfigError("bins must be positive")
    c = ck.load(checkpoint)
    model = c.model
    with torch.no_grad():
        adj = model.adjacency().numpy()
        logits = model.logits().numpy()
        mask = model.eval_mask().numpy()
    out.mkdir(parents=True, exist_ok=True)
    export_matrix_csv(out / "adjacency.csv", adj)
    export_matrix_csv(out / "gate_logits.csv", logits)
    export_matrix_csv(out / "mask.csv", mask)
    counts, edges = np.histogram(adj, bins=bins, range=(0.0, 1.0))
    with open(out / "histogram.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("bin_lo", "bin_hi", "count"))
        for k in range(bins):
            w.writerow((repr(float(edges[k])), repr(float(edges[k + 1])), int(counts[k])))
    write_manifest(out, "inspect", None, {"checkpoint": str(checkpoint)})
    return {"out": str(out), "bins": counts.tolist(), "total": int(counts.sum()),
            "num_nodes": model.n, "max_weight": float(adj.max()), "min_weight": float(adj.min())}


# --------------------------------------------------------------------------
# experiment


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _row(s: float, seed: int, variant: str, rep, flops: int | None, status: str = "ok") -> dict[str, Any]:
    return {"sparsity": s, "seed": seed, "variant": variant,
            "mae": None if rep is None else rep.mae, "rmse": None if rep is None else rep.rmse,
            "mape": None if rep is None else rep.mape, "flops": flops, "status": status}


def curves_csv(rows: list[dict[str, Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in CURVE_COLUMNS])
    return buf.getvalue()


def summarise(rows: list[dict[str, Any]]) -> list[dict[str, Any]]:
    """Median and population standard deviation per (variant, sparsity) over seeds."""
    groups: dict[tuple[str, float], list[dict[str, Any]]] = {}
    for r in rows:
        if r["status"] == "ok":
            groups.setdefault((r["variant"], r["sparsity"]), []).append(r)
    out = []
    for (variant, s), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        entry: dict[str, Any] = {"variant": variant, "sparsity": s, "n": len(rs)}
        for m in ("mae", "rmse", "mape", "flops"):
            vals = [float(r[m]) for r in rs if r[m] is not None]
            entry[f"{m}_median"] = float(np.median(vals)) if vals else None
            entry[f"{m}_std"] = float(np.std(vals)) if vals else None
        out.append(entry)
    return out


def cmd_experiment(cfg: ExperimentConfig, out: Path | None = None) -> dict[str, Any]:
    """Per seed: pretrain, sweep-sparsify, evaluate, reinit-retrain, evaluate.

    Cells that diverge are recorded with ``status`` and the run continues.
    """
    out = Path(cfg.output_dir) if out is None else out
    out.mkdir(parents=True, exist_ok=True)
    rows: list[dict[str, Any]] = []
    provenance: list[dict[str, Any]] = []

    def flops_of(model: STModel, data: ForecastData) -> int:
        return cost_report(model, data.test.x[0]).flops

    for seed in cfg.seeds:
        sdir = out / f"seed_{seed}"
        data = load_data(cfg, seed)
        model = build_model(model_config(cfg, data), seed=seed)
        seed_cfg = cfg.run_config(data, seed)
        try:
            tlog = pretrain(model, data, seed_cfg)
        except DivergenceError as exc:
            log.error("seed %d pretraining diverged: %s", seed, exc)
            rows.append(_row(0.0, seed, "dense", None, None, "diverged"))
            continue
        meta = {"stage": "pretrain", "run_seed": seed, "dataset": cfg.dataset, "history": cfg.history,
                "horizon": cfg.horizon, "ratios": cfg.ratios, "data_seed_per_run": cfg.data_seed_per_run,
                "dense_cost": _dense_reference(model, data), "train": tlog.summary()}
        ppath = sdir / "pretrained.ckpt.json"
        pdigest = _save_model(ppath, model, data, meta)
        _write_log(sdir, "pretrain", tlog)
        rows.append(_row(0.0, seed, "dense", evaluate(model, data.test, data.stats), flops_of(model, data)))
        provenance.append({"seed": seed, "variant": "dense", "sparsity": 0.0,
                           "checkpoint": ppath.relative_to(out).as_posix(), "sha256": pdigest})
        parent = ck.Checkpoint(model, data.stats, None, {**meta, "_sha256": pdigest})
        for s in cfg.sweep:
            level = ExperimentConfig.from_dict({**asdict(cfg), "sweep": [s]})
            try:
                res = _sparsify_levels(level, parent, data, sdir, seed)[s]
            except DivergenceError as exc:
                log.error("seed %d sparsity %g diverged: %s", seed, s, exc)
                rows.append(_row(s, seed, "ags", None, None, "diverged"))
                rows.append(_row(s, seed, "retrain", None, None, "skipped"))
                continue
            ags = res["model"]
            status = "ok" if res["log"].target_reached else "target_not_reached"
            rows.append(_row(s, seed, "ags", evaluate(ags, data.test, data.stats), flops_of(ags, data), status))
            provenance.append({"seed": seed, "variant": "ags", "sparsity": s,
                               "checkpoint": res["checkpoint"].relative_to(out).as_posix(), "sha256": res["sha256"]})
            try:
                fresh, rlog = reinit_retrain(ags, data, seed_cfg, seed=seed + cfg.retrain_seed_offset)
            except DivergenceError as exc:
                log.error("seed %d sparsity %g retrain diverged: %s", seed, s, exc)
                rows.append(_row(s, seed, "retrain", None, None, "diverged"))
                continue
            tag = _level_tag(s)
            rmeta = {**meta, "stage": "retrain", "target_sparsity": s, "init_seed": seed + cfg.retrain_seed_offset,
                     "source_sha256": res["sha256"], "mask_sha256": ck.mask_hash(fresh.mask), "train": rlog.summary()}
            rpath = sdir / f"ags_{tag}.retrained.ckpt.json"
            rdigest = _save_model(rpath, fresh, data, rmeta)
            _write_log(sdir, f"ags_{tag}.retrained", rlog)
            rows.append(_row(s, seed, "retrain", evaluate(fresh, data.test, data.stats), flops_of(fresh, data)))
            provenance.append({"seed": seed, "variant": "retrain", "sparsity": s,
                               "checkpoint": rpath.relative_to(out).as_posix(), "sha256": rdigest})

    (out / "curves.csv").write_text(curves_csv(rows), encoding="utf-8")
    summary = {"config": cfg.to_dict(), "groups": summarise(rows), "provenance": provenance}
    _dump_json(out / "summary.json", summary)
    write_manifest(out, "experiment", cfg.to_dict())
    return {"out": str(out), "rows": rows, "summary": summary}


# --------------------------------------------------------------------------
# CLI


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agsloc", description="Adaptive graph sparsification experiments.")
    p.add_argument("--version", action="version", version=f"agsloc {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    det = p.add_mutually_exclusive_group()
    det.add_argument("--deterministic", dest="deterministic", action="store_true", default=None,
                     help=f"force deterministic kernels (default from ${nk.DETERMINISTIC_ENV}, else on)")
    det.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset as CSV + meta JSON")
    g.add_argument("--spec", required=True, help="synthetic spec JSON (file path or inline)")
    g.add_argument("--out", required=True, type=Path)

    t = sub.add_parser("train", help="pretrain the dense model")
    t.add_argument("--config", required=True)
    t.add_argument("--out", type=Path)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", type=Path, help="partial checkpoint written with --stop-at")
    t.add_argument("--stop-at", type=int, help="halt before this iteration and write a resumable checkpoint")

    s = sub.add_parser("sparsify", help="localise a pretrained checkpoint at every sweep level")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True, type=Path)
    s.add_argument("--out", type=Path)

    r = sub.add_parser("retrain", help="reinitialise and retrain under a localised mask")
    r.add_argument("--config", required=True)
    r.add_argument("--checkpoint", required=True, type=Path)
    r.add_argument("--out", type=Path)
    r.add_argument("--seed", type=int, help="initialisation seed (default run seed + retrain_seed_offset)")

    e = sub.add_parser("eval", help="denormalised MAE/RMSE/MAPE of a checkpoint")
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--split", action="append", choices=("train", "val", "test"),
                   help="repeatable; default test")
    e.add_argument("--config", help="override the dataset recorded in the checkpoint")
    e.add_argument("--per-horizon", action="store_true")

    f = sub.add_parser("flops", help="analytic and counted inference FLOPs, speedup vs dense")
    f.add_argument("--checkpoint", required=True, type=Path)
    f.add_argument("--table", action="store_true", help="print the text table instead of JSON")

    x = sub.add_parser("experiment", help="full pipeline over seeds and the sparsity sweep")
    x.add_argument("--config", required=True)
    x.add_argument("--out", type=Path)

    i = sub.add_parser("inspect", help="export adjacency, gate logits, mask and a weight histogram")
    i.add_argument("--checkpoint", required=True, type=Path)
    i.add_argument("--out", required=True, type=Path)
    i.add_argument("--bins", type=int, default=HIST_BINS)
    return p


def _emit(obj: Any) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def _run(args: argparse.Namespace) -> int:
    cmd = args.command
    if cmd == "generate":
        _emit(cmd_generate(read_json_arg(args.spec, "spec"), args.out))
    elif cmd == "train":
        cfg = load_config(args.config)
        _emit(cmd_train(cfg, args.out or Path(cfg.output_dir), args.seed, args.resume, args.stop_at))
    elif cmd == "sparsify":
        cfg = load_config(args.config)
        _emit(cmd_sparsify(cfg, args.checkpoint, args.out or Path(cfg.output_dir)))
    elif cmd == "retrain":
        cfg = load_config(args.config)
        _emit(cmd_retrain(cfg, args.checkpoint, args.out or Path(cfg.output_dir), args.seed))
    elif cmd == "eval":
        cfg = load_config(args.config) if args.config else None
        _emit(cmd_eval(args.checkpoint, args.split or ["test"], cfg, args.per_horizon))
    elif cmd == "flops":
        res = cmd_flops(args.checkpoint)
        if args.table:
            sys.stdout.write(res["table"] + "\n")
        else:
            _emit(res)
    elif cmd == "experiment":
        cfg = load_config(args.config)
        res = cmd_experiment(cfg, args.out)
        _emit({"out": res["out"], "groups": res["summary"]["groups"]})
    elif cmd == "inspect":
        _emit(cmd_inspect(args.checkpoint, args.out, args.bins))
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flag = nk.deterministic_from_env() if args.deterministic is None else args.deterministic
    nk.set_deterministic(flag)
    try:
        return _run(args)
    except (ConfigError, DatasetError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG
    except (ck.CheckpointError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_ARTIFACT
    except (DivergenceError, NonFiniteError) as exc:
        sys.stderr.write(f"diverged: {exc}\n")
        return EXIT_DIVERGED


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())

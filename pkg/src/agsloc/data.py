"""Spatial-temporal series: CSV ingestion, synthetic generation, windows, splits, scaling."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

log = logging.getLogger(__name__)

MODES = ("subsumed", "spatial-essential")


class DatasetError(ValueError):
    """Malformed dataset files or parameters."""


@dataclass
class SpatioTemporalSeries:
    values: np.ndarray  # T_total x N x C
    interval: str = "1 step"
    name: str = "series"
    latent_graph: np.ndarray | None = None  # N x N, [i, j] = 1 if j feeds i

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DatasetError(f"series must be T x N x C, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise DatasetError("series contains non-finite values")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def segment(self, start: int, stop: int, name: str | None = None) -> "SpatioTemporalSeries":
        return SpatioTemporalSeries(self.values[start:stop].copy(), self.interval,
                                    name or self.name, self.latent_graph)


# --------------------------------------------------------------------------
# CSV + JSON metadata


def load_csv_dataset(data_path: str | Path, meta_path: str | Path) -> SpatioTemporalSeries:
    """Read T_total rows of N*C floats (column ``n*C + c``) plus JSON metadata."""
    try:
        meta = json.loads(Path(meta_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read metadata {meta_path}: {exc}") from None
    try:
        n, c = int(meta["num_nodes"]), int(meta.get("channels", 1))
    except (KeyError, TypeError, ValueError):
        raise DatasetError("metadata must declare integer num_nodes (and channels)") from None
    if n < 1 or c < 1:
        raise DatasetError("num_nodes and channels must be positive")
    width = n * c
    rows = []
    try:
        fh = open(data_path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read data {data_path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1 and meta.get("header", False):
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != width:
                raise DatasetError(f"row {lineno}: expected {width} columns "
                                   f"(num_nodes={n} x channels={c}), found {len(row)}")
            vals = []
            for col, cell in enumerate(row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DatasetError(f"row {lineno}, column {col + 1}: non-numeric cell {cell!r}") from None
            rows.append(vals)
    if not rows:
        raise DatasetError(f"{data_path}: no data rows")
    values = np.asarray(rows, dtype=np.float64).reshape(len(rows), n, c)
    graph = meta.get("latent_graph")
    return SpatioTemporalSeries(values, str(meta.get("interval", "1 step")), str(meta.get("name", Path(data_path).stem)),
                                None if graph is None else np.asarray(graph, dtype=np.float64))


def save_csv_dataset(series: SpatioTemporalSeries, data_path: str | Path, meta_path: str | Path,
                     extra_meta: dict[str, Any] | None = None) -> None:
    """Write the series losslessly (17 significant digits) with its metadata."""
    flat = series.values.reshape(series.length, -1)
    with open(data_path, "w", encoding="utf-8", newline="\n") as fh:
        for row in flat:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    meta = {"num_nodes": series.num_nodes, "channels": series.channels, "interval": series.interval,
            "name": series.name, "header": False}
    if series.latent_graph is not None:
        meta["latent_graph"] = series.latent_graph.astype(int).tolist()
    if extra_meta:
        meta.update(extra_meta)
    Path(meta_path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    """Declarative recipe for a synthetic graph-coupled series.

    Each node owns a latent process ``p_i = seasonal_i + ar_i``. The observed
    value is ``level + (1 - alpha) * p_i(t) + alpha * mean_{j -> i} q_j(t - 1)
    + noise``, where ``q_j`` is the neighbour's full process in
    ``spatial-essential`` mode (its innovations only reach node ``i`` through
    the graph) and only its deterministic seasonal part in ``subsumed`` mode
    (so node ``i``'s own history already carries everything).
    """

    num_nodes: int = 16
    length: int = 2000
    seed: int = 0
    density: float = 0.15
    period: int = 24
    ar_coefs: list[float] = field(default_factory=lambda: [0.6])
    alpha: float = 0.5
    noise: float = 0.2
    innovation: float = 1.0
    amplitude: float = 1.0
    level: float = 10.0
    mode: str = "subsumed"
    channels: int = 1
    name: str = "synthetic"

    def __post_init__(self):
        if self.num_nodes < 1 or self.length < 2 or self.channels < 1:
            raise DatasetError("num_nodes, channels must be >= 1 and length >= 2")
        if not 0.0 <= self.density <= 1.0:
            raise DatasetError("density must lie in [0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise DatasetError("alpha must lie in [0, 1]")
        if self.period < 1:
            raise DatasetError("period must be >= 1")
        if self.mode not in MODES:
            raise DatasetError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.noise < 0 or self.innovation < 0:
            raise DatasetError("noise and innovation scales must be >= 0")
        self.ar_coefs = [float(a) for a in self.ar_coefs]
        if sum(abs(a) for a in self.ar_coefs) >= 1.0:
            raise DatasetError("AR coefficients must satisfy sum |a| < 1 for stationarity")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DatasetError(f"unknown synthetic spec fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise DatasetError(str(exc)) from None


def latent_digraph(n: int, density: float, rng: np.random.Generator) -> np.ndarray:
    """Random in-neighbour matrix without self loops; every node gets >= 1 parent when n > 1."""
    g = (rng.random((n, n)) < density).astype(np.float64)
    np.fill_diagonal(g, 0.0)
    if n > 1:
        for i in range(n):
            if g[i].sum() == 0:
                j = int(rng.integers(n - 1))
                g[i, j + (j >= i)] = 1.0
    return g


def generate_synthetic(spec: SyntheticSpec, seed: int | None = None) -> SpatioTemporalSeries:
    """Draw a series from ``spec``; output depends only on (spec, seed)."""
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    n, length, ch = spec.num_nodes, spec.length, spec.channels
    graph = latent_digraph(n, spec.density, rng)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(n, ch))
    burn = 10 * max(len(spec.ar_coefs), 1) + spec.period
    total = length + burn
    # separate streams so one node's noise can be perturbed in isolation
    innov = np.stack([np.random.default_rng([seed, 1, i]).standard_normal((total, ch)) for i in range(n)], axis=1)
    obs = np.stack([np.random.default_rng([seed, 2, i]).standard_normal((total, ch)) for i in range(n)], axis=1)

    t = np.arange(total, dtype=np.float64)[:, None, None]
    seasonal = spec.amplitude * np.sin(2.0 * np.pi * t / spec.period + phase[None])
    ar = np.zeros((total, n, ch))
    for s in range(total):
        acc = spec.innovation * innov[s]
        for k, a in enumerate(spec.ar_coefs, start=1):
            if s - k >= 0:
                acc = acc + a * ar[s - k]
        ar[s] = acc
    own = seasonal + ar
    feed = own if spec.mode == "spatial-essential" else seasonal
    indeg = graph.sum(axis=1, keepdims=True)
    weights = np.divide(graph, indeg, out=np.zeros_like(graph), where=indeg > 0)
    neigh = np.zeros_like(own)
    neigh[1:] = np.einsum("ij,tjc->tic", weights, feed[:-1])
    values = spec.level + (1.0 - spec.alpha) * own + spec.alpha * neigh + spec.noise * obs
    return SpatioTemporalSeries(values[burn:], "1 step", spec.name, graph)


def ls_oracle_mae(series: SpatioTemporalSeries, neighbour_aware: bool, lags: int = 4,
                  period: int | None = None, train_frac: float = 0.6) -> float:
    """One-step-ahead least-squares predictor MAE on the held-out tail.

    Regressors: intercept, ``lags`` own lags, optional seasonal sin/cos at
    ``period``, and (if ``neighbour_aware``) ``lags`` lags of every true
    in-neighbour from the latent graph. Fitted per node and channel.
    """
    vals = series.values
    length, n, ch = vals.shape
    graph = series.latent_graph
    if neighbour_aware and graph is None:
        raise DatasetError("neighbour-aware oracle needs the latent graph")
    cut = int(length * train_frac)
    errs = []
    idx = np.arange(lags, length)
    for i in range(n):
        for c in range(ch):
            cols = [np.ones(len(idx))]
            cols += [vals[idx - k, i, c] for k in range(1, lags + 1)]
            if period:
                cols += [np.sin(2 * np.pi * idx / period), np.cos(2 * np.pi * idx / period)]
            if neighbour_aware:
                for j in np.flatnonzero(graph[i]):
                    cols += [vals[idx - k, j, c] for k in range(1, lags + 1)]
            x = np.stack(cols, axis=1)
            y = vals[idx, i, c]
            tr = idx < cut
            coef, *_ = np.linalg.lstsq(x[tr], y[tr], rcond=None)
            errs.append(np.abs(x[~tr] @ coef - y[~tr]))
    return float(np.mean(np.concatenate(errs)))


# --------------------------------------------------------------------------
# windows, splits, normalisation


@dataclass
class WindowSample:
    history: np.ndarray  # T x N x C
    target: np.ndarray  # H x N x C
    origin: int


def window_arrays(values: np.ndarray, history: int, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Stacked stride-1 windows: (W x T x N x C, W x H x N x C)."""
    total = values.shape[0]
    if history < 1 or horizon < 1:
        raise DatasetError("history and horizon must be positive")
    if total < history + horizon:
        raise DatasetError(f"series of length {total} is shorter than history+horizon={history + horizon}")
    count = total - history - horizon + 1
    hist_idx = np.arange(count)[:, None] + np.arange(history)[None, :]
    tgt_idx = np.arange(count)[:, None] + history + np.arange(horizon)[None, :]
    return values[hist_idx], values[tgt_idx]


def make_windows(series: SpatioTemporalSeries | np.ndarray, history: int, horizon: int) -> list[WindowSample]:
    values = series.values if isinstance(series, SpatioTemporalSeries) else np.asarray(series, dtype=np.float64)
    x, y = window_arrays(values, history, horizon)
    return [WindowSample(x[k], y[k], k) for k in range(len(x))]


def split_lengths(total: int, ratios: Sequence[float]) -> list[int]:
    ratios = [float(r) for r in ratios]
    if len(ratios) not in (2, 3) or any(r <= 0 for r in ratios):
        raise DatasetError(f"ratios must be 2 or 3 positive numbers, got {ratios}")
    s = sum(ratios)
    if not math.isclose(s, 1.0, abs_tol=1e-9):
        ratios = [r / s for r in ratios]
    sizes = [int(math.floor(total * r + 1e-9)) for r in ratios[:-1]]
    sizes.append(total - sum(sizes))
    return sizes


def split(series: SpatioTemporalSeries, ratios: Sequence[float] = (0.6, 0.2, 0.2),
          history: int | None = None, horizon: int | None = None) -> list[SpatioTemporalSeries]:
    """Chronological contiguous split; windows are later cut inside each segment."""
    sizes = split_lengths(series.length, ratios)
    names = ["train", "val", "test"] if len(sizes) == 3 else ["train", "test"]
    out, start = [], 0
    for size, label in zip(sizes, names):
        if history is not None and horizon is not None and size < history + horizon:
            raise DatasetError(f"{label} segment has {size} steps, fewer than history+horizon={history + horizon}")
        out.append(series.segment(start, start + size, f"{series.name}:{label}"))
        start += size
    return out


@dataclass
class NormStats:
    mean: np.ndarray  # N x C (per node) or 1 x C (global)
    std: np.ndarray

    def to_dict(self) -> dict[str, Any]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_norm(train: SpatioTemporalSeries | np.ndarray, per_node: bool = True) -> NormStats:
    values = train.values if isinstance(train, SpatioTemporalSeries) else np.asarray(train, dtype=np.float64)
    axes = (0,) if per_node else (0, 1)
    mean = values.mean(axis=axes)
    std = values.std(axis=axes)
    if not per_node:
        mean, std = mean[None, :], std[None, :]
    bad = ~(std > 0)
    if bad.any():
        log.warning("zero standard deviation in %d entries; using 1 instead", int(bad.sum()))
        std = np.where(bad, 1.0, std)
    return NormStats(mean, std)


def normalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return (values - stats.mean) / stats.std


def denormalize(values, stats: NormStats):
    """Inverse z-score; accepts numpy arrays or torch tensors (node axis second-to-last)."""
    if isinstance(values, torch.Tensor):
        mean = torch.as_tensor(stats.mean, dtype=values.dtype)
        std = torch.as_tensor(stats.std, dtype=values.dtype)
        return values * std + mean
    return np.asarray(values) * stats.std + stats.mean


@dataclass
class WindowSet:
    """Normalised model inputs/targets plus raw-unit targets for one split."""

    x: torch.Tensor  # W x T x N x C, normalised
    y: torch.Tensor  # W x H x N x C, normalised
    y_raw: torch.Tensor  # W x H x N x C, raw units
    label: str = ""

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class ForecastData:
    train: WindowSet
    val: WindowSet
    test: WindowSet | None
    stats: NormStats
    history: int
    horizon: int

    def split_named(self, name: str) -> WindowSet:
        ws = {"train": self.train, "val": self.val, "test": self.test}.get(name)
        if ws is None:
            raise DatasetError(f"no {name!r} split available")
        return ws


def prepare_forecast_data(series: SpatioTemporalSeries, history: int, horizon: int,
                          ratios: Sequence[float] = (0.6, 0.2, 0.2), per_node: bool = True) -> ForecastData:
    """Split chronologically, fit scaling on train only, and window each segment.

    With a two-way ratio the held-out segment doubles as validation and test.
    """
    parts = split(series, ratios, history, horizon)
    stats = fit_norm(parts[0], per_node=per_node)

    def windows(seg: SpatioTemporalSeries, label: str) -> WindowSet:
        xr, yr = window_arrays(seg.values, history, horizon)
        return WindowSet(torch.from_numpy(normalize(xr, stats)), torch.from_numpy(normalize(yr, stats)),
                         torch.from_numpy(np.ascontiguousarray(yr)), label)

    train = windows(parts[0], "train")
    if len(parts) == 3:
        return ForecastData(train, windows(parts[1], "val"), windows(parts[2], "test"), stats, history, horizon)
    held = windows(parts[1], "test")
    return ForecastData(train, held, held, stats, history, horizon)

"""Forecast accuracy metrics and inference FLOPs accounting.

FLOPs follow the kernel convention in :mod:`agsloc.numkernel` (MAC = 2).
The analytic model is grouped into the four complexity terms of a NAPL
graph-convolution stack plus the input/output head:

``adjacency``   building ``softmax(relu(E E^T)) * M``           ~ N^2 d
``node_param``  forming node-specific weights ``E W_G``          ~ N d F
``temporal``    per-node transforms, gates, attention            ~ L N T F^2
``aggregation`` neighbour sums over kept edges                    ~ L T |A*M|_0 F
``head``        input embedding and output projection
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
import torch

from . import numkernel as nk
from .temporal import AGCRNConfig, AGFormerConfig, STModel

TERMS = ("adjacency", "node_param", "temporal", "aggregation", "head")


@dataclass
class MetricReport:
    mae: float
    rmse: float
    mape: float | None  # percent; None when every target was excluded
    mape_defined: bool = True
    count: int = 0
    per_horizon: list[dict[str, float | None]] | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy().astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def _scores(pred: np.ndarray, target: np.ndarray, eps: float) -> tuple[float, float, float | None]:
    diff = pred - target
    mae = float(np.mean(np.abs(diff)))
    rmse = float(np.sqrt(np.mean(diff * diff)))
    keep = np.abs(target) >= eps
    mape = float(np.mean(np.abs(diff[keep]) / np.abs(target[keep])) * 100.0) if keep.any() else None
    return mae, rmse, mape


def compute_metrics(pred, target, mape_epsilon: float = 1e-3, horizon_axis: int | None = None) -> MetricReport:
    """MAE, RMSE and MAPE (percent, skipping ``|y| < mape_epsilon``)."""
    p, t = _np(pred), _np(target)
    if p.shape != t.shape:
        raise nk.ShapeError("compute_metrics", p.shape, t.shape)
    if p.size == 0:
        raise ValueError("compute_metrics needs at least one sample")
    mae, rmse, mape = _scores(p, t, mape_epsilon)
    per_h = None
    if horizon_axis is not None:
        per_h = []
        for h in range(p.shape[horizon_axis]):
            a, b, c = _scores(np.take(p, h, axis=horizon_axis), np.take(t, h, axis=horizon_axis), mape_epsilon)
            per_h.append({"horizon": h + 1, "mae": a, "rmse": b, "mape": c})
    return MetricReport(mae, rmse, mape, mape is not None, int(p.size), per_h)


# --------------------------------------------------------------------------
# cost accounting


@dataclass
class CostReport:
    arch: str
    kept_edges: int
    flops_analytic: int
    breakdown: dict[str, int] = field(default_factory=dict)
    flops_counted: int | None = None
    counted_breakdown: dict[str, int] | None = None

    @property
    def flops(self) -> int:
        return self.flops_counted if self.flops_counted is not None else self.flops_analytic

    @property
    def relative_gap(self) -> float | None:
        if self.flops_counted is None:
            return None
        return abs(self.flops_counted - self.flops_analytic) / self.flops_analytic

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["relative_gap"] = self.relative_gap
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CostReport":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**d)


def _agcrn_terms(c: AGCRNConfig, kept: int) -> dict[str, int]:
    n, d, f, T = c.num_nodes, c.embed_dim, c.hidden_dim, c.history
    terms = dict.fromkeys(TERMS, 0)
    terms["adjacency"] = 2 * n * n * d + 5 * n * n  # E E^T, relu, softmax(3), mask
    for layer in range(c.num_layers):
        cin = (c.input_dim if layer == 0 else f) + f
        terms["node_param"] += 3 * 2 * n * d * cin * f + (3 * 2 * n * d * f if c.bias else 0)
        terms["aggregation"] += T * 2 * (2 * kept * cin)
        # 3 transforms; sigmoid x2 + tanh (3 each); r*h; c + u*(h - c)
        per_step = 3 * 2 * n * cin * f + 2 * 3 * n * f + 3 * n * f + n * f + 3 * n * f
        if c.bias:
            per_step += 3 * n * f
        terms["temporal"] += T * per_step
    hc = c.horizon * c.input_dim
    terms["head"] = 2 * n * f * hc + n * hc
    return terms


def _agformer_terms(c: AGFormerConfig, kept: int) -> dict[str, int]:
    n, d, f, T, w, h = c.num_nodes, c.embed_dim, c.hidden_dim, c.history, c.ffn_dim, c.num_heads
    terms = dict.fromkeys(TERMS, 0)
    terms["adjacency"] = 2 * n * n * d + 5 * n * n
    tn = T * n
    for _ in range(c.num_blocks):
        terms["node_param"] += 3 * 2 * n * d * f * f + 2 * n * d * f * w + 2 * n * d * w * f
        if c.bias:
            terms["node_param"] += 3 * 2 * n * d * f + 2 * n * d * w + 2 * n * d * f
        terms["aggregation"] += 3 * 2 * kept * T * f + 2 * kept * T * f + 2 * kept * T * w
        tmp = 2 * 5 * tn * f  # two layer norms
        tmp += 3 * 2 * tn * f * f  # q, k, v transforms
        tmp += 2 * n * T * T * f + n * h * T * T + 3 * n * h * T * T + 2 * n * T * T * f  # scores, scale, softmax, AV
        tmp += tn * f  # attention residual
        tmp += 2 * tn * f * w + tn * w  # ffn1 transform + relu
        tmp += 2 * tn * w * f + tn * f  # ffn2 transform + residual
        if c.bias:
            tmp += 3 * tn * f + tn * w + tn * f
        terms["temporal"] += tmp
    hc = c.horizon * c.input_dim
    terms["head"] = (2 * tn * c.input_dim * f + 2 * tn * f  # input linear, bias, positions
                     + tn * f + n * f  # temporal mean-pool
                     + 2 * n * f * hc + n * hc)
    return terms


def flops_analytic(config: AGCRNConfig | AGFormerConfig, kept_edges: int) -> CostReport:
    """Closed-form inference FLOPs for one window with ``kept_edges`` nonzero adjacency entries."""
    if isinstance(config, AGCRNConfig):
        terms = _agcrn_terms(config, kept_edges)
    elif isinstance(config, AGFormerConfig):
        terms = _agformer_terms(config, kept_edges)
    else:
        raise TypeError(f"unsupported config {type(config).__name__}")
    return CostReport(config.arch, int(kept_edges), int(sum(terms.values())), terms)


def kept_edges(model: STModel, mask: torch.Tensor | None = None) -> int:
    m = model.eval_mask() if mask is None else mask
    with torch.no_grad():
        return int(torch.count_nonzero(model.adjacency() * m))


def flops_counted(model: STModel, window: torch.Tensor, mask: torch.Tensor | None = None) -> tuple[int, dict[str, int]]:
    """Instrumented FLOPs of inference over ``window`` (T x N x C or B x T x N x C).

    Each window runs as its own forward pass so the count is additive in
    the number of windows.
    """
    m = model.eval_mask() if mask is None else mask
    batch = window.unsqueeze(0) if window.dim() == 3 else window
    counter = nk.FlopCounter()
    with torch.no_grad(), counter:
        for k in range(batch.shape[0]):
            adj = model.effective_adjacency(m)
            model.forward(batch[k], adj)
    return counter.total, dict(counter.by_term)


def cost_report(model: STModel, window: torch.Tensor | None = None, mask: torch.Tensor | None = None) -> CostReport:
    """Analytic report for ``model`` plus instrumented counts when a window is given."""
    m = model.eval_mask() if mask is None else mask
    rep = flops_analytic(model.config, kept_edges(model, m))
    if window is not None:
        w = window[0] if window.dim() == 4 else window
        total, by_term = flops_counted(model, w, m)
        rep.flops_counted = total
        rep.counted_breakdown = by_term
    return rep


def speedup(dense: CostReport | float, localised: CostReport | float) -> float:
    """Ratio of dense to localised inference cost."""
    a = dense.flops if isinstance(dense, CostReport) else float(dense)
    b = localised.flops if isinstance(localised, CostReport) else float(localised)
    if b <= 0:
        raise ZeroDivisionError("localised cost must be positive")
    return a / b


def format_speedup(ratio: float) -> str:
    return f"{ratio:.1f}×"


def render_cost_table(rows: list[tuple[str, CostReport]], dense: CostReport | None = None) -> str:
    """Aligned text table: label, kept edges, analytic, counted, gap %, speedup."""
    header = ("model", "kept_edges", "flops_analytic", "flops_counted", "gap_%", "speedup")
    body = []
    for label, rep in rows:
        gap = rep.relative_gap
        body.append((
            label,
            str(rep.kept_edges),
            str(rep.flops_analytic),
            "-" if rep.flops_counted is None else str(rep.flops_counted),
            "-" if gap is None else f"{100 * gap:.2f}",
            "-" if dense is None else format_speedup(speedup(dense, rep)),
        ))
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for r in body:
        lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))))
    return "\n".join(lines)

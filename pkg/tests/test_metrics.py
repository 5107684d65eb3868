import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from agsloc import numkernel as nk
from agsloc.metrics import (TERMS, CostReport, compute_metrics, cost_report, flops_analytic, flops_counted,
                            format_speedup, kept_edges, render_cost_table, speedup)
from agsloc.numkernel import DTYPE, ShapeError
from agsloc.temporal import AGCRNConfig, AGFormerConfig, build_model


def test_metrics_example():
    rep = compute_metrics(np.array([1.0, 2.0, 4.0]), np.array([2.0, 2.0, 2.0]))
    assert rep.mae == pytest.approx(1.0)
    assert rep.rmse == pytest.approx(math.sqrt(5 / 3))
    assert rep.mape == pytest.approx(100.0 * (0.5 + 0 + 1.0) / 3)


def test_perfect_prediction():
    y = np.array([[3.0, -1.0]])
    rep = compute_metrics(y, y)
    assert rep.mae == 0 and rep.rmse == 0 and rep.mape == 0


def test_mape_skips_near_zero_targets():
    rep = compute_metrics(np.array([1.0, 3.0]), np.array([0.0, 2.0]))
    assert rep.mape == pytest.approx(50.0)
    rep = compute_metrics(np.array([1.0]), np.array([0.0]))
    assert rep.mape is None and not rep.mape_defined


def test_metrics_errors_and_per_horizon():
    with pytest.raises(ShapeError):
        compute_metrics(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        compute_metrics(np.zeros(0), np.zeros(0))
    pred = torch.zeros(2, 3, 4, 1, dtype=DTYPE)
    tgt = torch.ones(2, 3, 4, 1, dtype=DTYPE) * torch.arange(1, 4, dtype=DTYPE).view(1, 3, 1, 1)
    rep = compute_metrics(pred, tgt, horizon_axis=1)
    assert [h["mae"] for h in rep.per_horizon] == [1.0, 2.0, 3.0]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=30), st.data())
def test_property_rmse_dominates_mae(ys, data):
    ps = data.draw(st.lists(st.floats(-100, 100, allow_nan=False), min_size=len(ys), max_size=len(ys)))
    rep = compute_metrics(np.array(ps), np.array(ys))
    assert rep.rmse >= rep.mae - 1e-12
    assert rep.mae >= 0


# --------------------------------------------------------------------------
# FLOPs

TABLE_PAIRS = [  # dense, localised, reported factor
    (400.26, 253.33, "1.6×"), (188.59, 80.55, "2.3×"), (1131.41, 237.56, "4.8×"), (153.06, 119.93, "1.3×"),
    (8.58, 2.82, "3.0×"), (161.42, 145.50, "1.1×"), (850.29, 706.21, "1.2×"),
]


@pytest.mark.parametrize("dense,local,factor", TABLE_PAIRS)
def test_reported_speedup_factors(dense, local, factor):
    assert format_speedup(speedup(dense, local)) == factor


def test_speedup_rejects_zero_cost():
    with pytest.raises(ZeroDivisionError):
        speedup(1.0, 0.0)


def _random_config(rng):
    if rng.random() < 0.5:
        return AGCRNConfig(num_nodes=int(rng.integers(2, 7)), input_dim=int(rng.integers(1, 3)),
                           hidden_dim=int(rng.integers(1, 5)), embed_dim=int(rng.integers(1, 4)),
                           num_layers=int(rng.integers(1, 3)), history=int(rng.integers(1, 5)),
                           horizon=int(rng.integers(1, 4)), bias=bool(rng.random() < 0.5))
    heads = int(rng.integers(1, 3))
    return AGFormerConfig(num_nodes=int(rng.integers(2, 7)), input_dim=int(rng.integers(1, 3)),
                          hidden_dim=heads * int(rng.integers(1, 3)), embed_dim=int(rng.integers(1, 4)),
                          num_heads=heads, num_blocks=int(rng.integers(1, 3)), history=int(rng.integers(1, 5)),
                          horizon=int(rng.integers(1, 4)), ffn_dim=int(rng.integers(1, 5)),
                          bias=bool(rng.random() < 0.5))


def test_counted_matches_analytic_over_random_configs():
    rng = np.random.default_rng(0)
    for k in range(20):
        cfg = _random_config(rng)
        m = build_model(cfg, seed=k)
        n = cfg.num_nodes
        mask = torch.from_numpy((rng.random((n, n)) < 0.5).astype(np.float64))
        mask.fill_diagonal_(1.0)
        window = torch.from_numpy(rng.normal(size=(cfg.history, n, cfg.input_dim)))
        rep = cost_report(m, window, mask)
        assert rep.relative_gap <= 0.05, (cfg, rep)
        assert rep.counted_breakdown == {t: v for t, v in rep.breakdown.items() if v}


def test_counted_flops_additive_in_windows():
    cfg = AGCRNConfig(num_nodes=3, hidden_dim=2, history=3, horizon=1)
    m = build_model(cfg)
    x = torch.zeros(4, 3, 3, 1, dtype=DTYPE)
    one, _ = flops_counted(m, x[0])
    four, _ = flops_counted(m, x)
    assert four == 4 * one


def test_aggregation_term_scales_with_kept_edges():
    cfg = AGCRNConfig(num_nodes=5, hidden_dim=3)
    a, b = flops_analytic(cfg, 5), flops_analytic(cfg, 6)
    for t in TERMS:
        if t != "aggregation":
            assert a.breakdown[t] == b.breakdown[t]
    assert b.breakdown["aggregation"] > a.breakdown["aggregation"]


@pytest.mark.parametrize("cfg", [AGCRNConfig(num_nodes=6, hidden_dim=4),
                                 AGFormerConfig(num_nodes=6, hidden_dim=4, num_heads=2)], ids=lambda c: c.arch)
def test_speedup_strictly_monotone_in_kept_edges(cfg):
    dense = flops_analytic(cfg, 36)
    ratios = [speedup(dense, flops_analytic(cfg, k)) for k in range(6, 37)]
    assert all(b < a for a, b in zip(ratios, ratios[1:]))
    assert ratios[-1] == 1.0


def test_kept_edges_and_cost_report_defaults():
    m = build_model(AGCRNConfig(num_nodes=4, hidden_dim=2))
    assert kept_edges(m) == 16
    assert kept_edges(m, torch.eye(4, dtype=DTYPE)) == 4
    rep = cost_report(m)
    assert rep.flops_counted is None and rep.flops == rep.flops_analytic


def test_pems_scale_reduction_is_substantial():
    # AGCRN at a 883-node graph: localising all off-diagonal edges removes most inference cost
    cfg = AGCRNConfig(num_nodes=883, hidden_dim=64, embed_dim=2, num_layers=2)
    dense, local = flops_analytic(cfg, 883 * 883), flops_analytic(cfg, 883)
    assert speedup(dense, local) > 1.0


def test_cost_report_round_trip_and_table():
    rep = flops_analytic(AGCRNConfig(num_nodes=3), 3)
    back = CostReport.from_dict(rep.to_dict())
    assert back == rep
    dense = flops_analytic(AGCRNConfig(num_nodes=3), 9)
    table = render_cost_table([("dense", dense), ("local", rep)], dense=dense)
    lines = table.splitlines()
    assert lines[0].split() == ["model", "kept_edges", "flops_analytic", "flops_counted", "gap_%", "speedup"]
    assert lines[2].split()[-1] == "1.0×"
    assert lines[3].split()[-1] == format_speedup(dense.flops / rep.flops)

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from agsloc import numkernel as nk
from agsloc.data import SyntheticSpec, generate_synthetic, prepare_forecast_data
from agsloc.graph import EdgeMask, GateParams, expected_l0, sample_hard_concrete
from agsloc.numkernel import DTYPE, ShapeError
from agsloc.sparsify import (SparsifyConfig, TrainLog, ags_sparsify, batch_indices, current_sparsity,
                             loss_ags, loss_prediction, pretrain, rank_edges, reinit_retrain, target_count)
from agsloc.temporal import AGCRNConfig, build_model


def test_loss_prediction_example():
    # one sample, two nodes, horizon 2, one channel: per-node L1 norms 3 and 1
    pred = torch.tensor([[[[1.0], [0.0]], [[2.0], [1.0]]]], dtype=DTYPE)
    tgt = torch.tensor([[[[0.0], [0.0]], [[0.0], [0.0]]]], dtype=DTYPE)
    assert float(loss_prediction(pred, tgt)) == pytest.approx(2.0)
    with pytest.raises(ShapeError):
        loss_prediction(pred, tgt[..., :1, :])


def test_loss_ags_adds_weighted_expected_l0():
    logits = torch.zeros(3, 3, dtype=DTYPE)
    gate = GateParams()
    pred = torch.zeros(1, 1, 3, 1, dtype=DTYPE)
    base = float(loss_ags(pred, pred + 1, logits, gate, 0.0))
    full = float(loss_ags(pred, pred + 1, logits, gate, 0.5))
    assert full - base == pytest.approx(0.5 * float(expected_l0(logits, gate)))
    with pytest.raises(ValueError):
        loss_ags(pred, pred, logits, gate, -1.0)


def test_loss_ags_gradient_with_fixed_noise():
    gen = torch.Generator().manual_seed(0)
    n = 3
    logits = (torch.randn(n, n, generator=gen, dtype=DTYPE) * 0.3).requires_grad_(True)
    noise = torch.rand(n, n, generator=gen, dtype=DTYPE) * 0.6 + 0.2
    adj = torch.softmax(torch.randn(n, n, generator=gen, dtype=DTYPE), dim=1)
    x = torch.randn(2, 1, n, 1, generator=gen, dtype=DTYPE)
    y = torch.randn(2, 1, n, 1, generator=gen, dtype=DTYPE)
    gate = GateParams()

    def f(lg):
        g = sample_hard_concrete(lg, gate, noise)
        out = torch.einsum("ij,btjc->btic", adj * g, x)
        return loss_ags(out, y, lg, gate, 0.1)

    loss = f(logits)
    (grad,) = torch.autograd.grad(loss, logits)
    eps = 1e-6
    for i in range(n):
        for j in range(n):
            d = torch.zeros_like(logits)
            d[i, j] = eps
            with torch.no_grad():
                fd = (float(f(logits + d)) - float(f(logits - d))) / (2 * eps)
            assert abs(fd - float(grad[i, j])) <= 1e-4 * max(1.0, abs(fd))


def test_rank_edges_ties_and_diagonal():
    adj = torch.tensor([[9.0, 1.0, 1.0], [0.5, 9.0, 2.0], [1.0, 0.5, 9.0]])
    assert rank_edges(adj) == [(1, 0), (2, 1), (0, 1), (0, 2), (2, 0), (1, 2)]
    assert len(rank_edges(adj, include_diagonal=True)) == 9


def test_target_count():
    assert target_count(0.99, 240) == 238
    assert target_count(0.995, 240) == 239
    assert target_count(1.0, 240) == 240
    assert target_count(0.0, 240) == 0
    assert target_count(0.5, 2) == 1


def test_config_validation_and_phases():
    assert SparsifyConfig(sparsity=0.99).phases == 20
    assert SparsifyConfig(sparsity=0.0).phases == 0
    assert SparsifyConfig(sparsity=0.3, prune_quantum=0.1).phases == 3
    for bad in ({"sparsity": 1.5}, {"lam": -1}, {"prune_quantum": 0.0}, {"batch_size": 0}):
        with pytest.raises(ValueError):
            SparsifyConfig(**bad)
    with pytest.raises(ValueError):
        SparsifyConfig.from_dict({"sparsty": 0.5})


def test_batch_indices_deterministic_and_stage_dependent():
    a = batch_indices(0, 1, 5, 100, 8)
    assert np.array_equal(a, batch_indices(0, 1, 5, 100, 8))
    assert not np.array_equal(a, batch_indices(0, 3, 5, 100, 8))
    assert len(set(a.tolist())) == 8


@pytest.fixture(scope="module")
def toy():
    nk.set_deterministic(True)
    series = generate_synthetic(SyntheticSpec(num_nodes=6, length=300, seed=0))
    data = prepare_forecast_data(series, 6, 3)
    cfg = AGCRNConfig(num_nodes=6, hidden_dim=4, embed_dim=2, history=6, horizon=3)
    model = build_model(cfg, seed=0)
    scfg = SparsifyConfig(pretrain_iters=40, sparsify_iters=200, batch_size=16)
    pretrain(model, data, scfg)
    return data, model, scfg


def _clone(model):
    m = build_model(model.config, seed=0)
    m.params.load_state(model.params.state())
    return m


@pytest.mark.parametrize("level", [0.5, 0.9, 1.0])
def test_ags_reaches_target_with_monotone_log(toy, level):
    data, model, scfg = toy
    m = _clone(model)
    with torch.no_grad():
        ranking = rank_edges(m.adjacency())
    cfg = SparsifyConfig(**{**scfg.to_dict(), "sparsity": level})
    tlog = ags_sparsify(m, data, cfg)
    assert tlog.target_reached
    assert current_sparsity(m.mask) >= level
    sp = tlog.column("sparsity")
    assert all(b >= a for a, b in zip(sp, sp[1:]))
    pruned = {(i, j) for i, j in zip(*torch.nonzero(m.mask.frozen_prune, as_tuple=True)) if i != j}
    pruned = {(int(i), int(j)) for i, j in pruned}
    assert pruned <= set(ranking[:target_count(level, len(ranking))])
    assert bool(m.mask.frozen_keep.diagonal().all())


def test_sparsity_zero_keeps_everything(toy):
    data, model, scfg = toy
    m = _clone(model)
    tlog = ags_sparsify(m, data, SparsifyConfig(**{**scfg.to_dict(), "sparsity": 0.0}))
    assert m.mask == EdgeMask.all_ones(6)
    assert tlog.target_reached


def test_full_localisation_leaves_diagonal(toy):
    data, model, scfg = toy
    m = _clone(model)
    ags_sparsify(m, data, SparsifyConfig(**{**scfg.to_dict(), "sparsity": 1.0}))
    assert torch.equal(m.eval_mask(), torch.eye(6, dtype=m.eval_mask().dtype))


def test_unreachable_target_warns(toy):
    data, model, scfg = toy
    m = _clone(model)
    tlog = ags_sparsify(m, data, SparsifyConfig(**{**scfg.to_dict(), "sparsity": 0.9, "sparsify_iters": 3}))
    assert tlog.target_reached is False
    assert tlog.warnings


def test_reinit_retrain_keeps_mask_and_changes_weights(toy):
    data, model, scfg = toy
    m = _clone(model)
    ags_sparsify(m, data, SparsifyConfig(**{**scfg.to_dict(), "sparsity": 0.9}))
    fresh, tlog = reinit_retrain(m, data, scfg, seed=1000)
    assert fresh.mask == m.mask
    assert not torch.equal(fresh.params["embedding"], m.params["embedding"])
    assert tlog.stage == "retrain" and tlog.best_val_mae is not None


def test_early_stopping_restores_best(toy):
    data, _, _ = toy
    m = build_model(AGCRNConfig(num_nodes=6, hidden_dim=4, embed_dim=2, history=6, horizon=3), seed=3)
    cfg = SparsifyConfig(pretrain_iters=400, patience=1, eval_every=5, lr=0.3, batch_size=8)
    tlog = pretrain(m, data, cfg)
    maes = [v for v in tlog.column("val_mae") if v is not None]
    assert tlog.stopped_early
    assert tlog.best_val_mae == min(maes)


def test_pretrain_resume_matches_uninterrupted(toy):
    data, _, _ = toy
    cfg = SparsifyConfig(pretrain_iters=30, batch_size=8)
    mcfg = AGCRNConfig(num_nodes=6, hidden_dim=3, embed_dim=2, history=6, horizon=3)
    a = build_model(mcfg, seed=2)
    full = pretrain(a, data, cfg)
    b = build_model(mcfg, seed=2)
    part = pretrain(b, data, cfg, stop_at=13)
    rest = pretrain(b, data, cfg, resume=part.resume_state)
    assert rest.records == full.records
    for k in a.params.names():
        assert torch.equal(a.params[k], b.params[k])


def test_train_log_csv(tmp_path):
    tlog = TrainLog(stage="x")
    tlog.add(0, 1.5, 0.0)
    path = tlog.to_csv(tmp_path / "log.csv")
    assert path.read_text().splitlines() == ["iteration,loss,sparsity,val_mae,val_rmse,val_mape", "0,1.5,0.0,,,"]


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(1, 400))
def test_property_target_count_bounds(s, m):
    k = target_count(s, m)
    assert 0 <= k <= m
    assert k / m >= s - 1e-9
    assert k == 0 or (k - 1) / m < s + 1e-9

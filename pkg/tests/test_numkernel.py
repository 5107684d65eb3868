import math

import numpy as np
import pytest
import torch

from agsloc import numkernel as nk
from agsloc.numkernel import DTYPE, NonFiniteError, ParamSet, ShapeError


def test_identity_matmul():
    x = nk.tensor([[1.5, -2.0], [0.25, 4.0]])
    assert torch.equal(nk.matmul(nk.tensor([[1, 0], [0, 1]]), x), x)


def test_softmax_and_sigmoid_fixed_points():
    assert torch.equal(nk.softmax(nk.tensor([[0.0, 0.0]]), dim=1), nk.tensor([[0.5, 0.5]]))
    assert float(nk.sigmoid(nk.tensor(0.0))) == 0.5


def test_shape_error_names_op():
    with pytest.raises(ShapeError) as info:
        nk.matmul(nk.zeros(2, 3), nk.zeros(2, 3))
    assert info.value.op == "matmul"
    assert (2, 3) in info.value.shapes
    with pytest.raises(ShapeError, match="add"):
        nk.add(nk.zeros(2, 3), nk.zeros(4))


def test_tensor_shape_contract():
    t = nk.tensor([1, 2, 3, 4, 5, 6], shape=(2, 3))
    assert t.dtype == DTYPE and tuple(t.shape) == (2, 3)
    with pytest.raises(ShapeError):
        nk.tensor([1, 2, 3], shape=(2, 2))
    with pytest.raises(NonFiniteError):
        nk.tensor([1.0, math.inf])


def test_non_finite_output_raises():
    big = nk.tensor([[1e200]])
    with pytest.raises(NonFiniteError):
        nk.matmul(big, big)


def test_backward_sum_is_ones():
    ps = ParamSet({"W": torch.randn(3, 4, dtype=DTYPE)})
    grads = nk.backward(nk.sum_(ps["W"]), ps)
    assert torch.equal(grads["W"], torch.ones(3, 4, dtype=DTYPE))


def test_backward_l1_mean_subgradient():
    y = nk.tensor([1.0, 2.0, 3.0, 4.0])
    ps = ParamSet({"yhat": nk.tensor([2.0, 1.0, 5.0, 0.0])})
    loss = nk.mean(nk.abs_(nk.sub(ps["yhat"], y)))
    g = nk.backward(loss, ps)["yhat"]
    assert torch.equal(g, nk.tensor([0.25, -0.25, 0.25, -0.25]))


def test_l1_kink_derivative_is_zero():
    ps = ParamSet({"x": nk.tensor([0.0, 1.0])})
    g = nk.backward(nk.sum_(nk.abs_(ps["x"])), ps)["x"]
    assert torch.equal(g, nk.tensor([0.0, 1.0]))


def test_backward_leaves_non_trainable_untouched():
    ps = ParamSet()
    ps.add("a", nk.tensor([1.0, 2.0]))
    ps.add("b", nk.tensor([3.0]), trainable=False)
    grads = nk.backward(nk.sum_(nk.mul(ps["a"], ps["b"])), ps)
    assert set(grads) == {"a"}
    assert ps["b"].grad is None


def test_backward_without_forward_errors():
    ps = ParamSet({"a": nk.tensor([1.0])})
    with pytest.raises(RuntimeError):
        nk.backward(nk.tensor(1.0), ps)


def test_paramset_unique_names():
    ps = ParamSet({"a": nk.zeros(1)})
    with pytest.raises(KeyError):
        ps.add("a", nk.zeros(1))


def test_finite_diff_square():
    ps = ParamSet({"x": nk.tensor([3.0])})
    g = nk.finite_diff_gradient(lambda p: float(p["x"][0]) ** 2, ps, eps=1e-5)["x"]
    assert abs(float(g[0]) - 6.0) < 1e-8


def test_finite_diff_constant():
    ps = ParamSet({"x": torch.randn(2, 3, dtype=DTYPE)})
    g = nk.finite_diff_gradient(lambda p: 7.0, ps, eps=1e-5)["x"]
    assert torch.equal(g, torch.zeros(2, 3, dtype=DTYPE))


def test_finite_diff_rejects_bad_eps():
    with pytest.raises(ValueError):
        nk.finite_diff_gradient(lambda p: 0.0, ParamSet({"x": nk.zeros(1)}), eps=0.0)


def _adjacency_loss(p):
    e = p["E"]
    a = nk.softmax(nk.relu(nk.matmul(e, e.T)), dim=1)
    return nk.sum_(nk.mul(a, p["target"]))


def test_softmax_relu_chain_matches_finite_differences():
    gen = torch.Generator().manual_seed(3)
    ps = ParamSet({"E": torch.randn(3, 2, generator=gen, dtype=DTYPE) + 0.5})
    ps.add("target", torch.randn(3, 3, generator=gen, dtype=DTYPE), trainable=False)
    g = nk.backward(_adjacency_loss(ps), ps)["E"]
    fd = nk.finite_diff_gradient(_adjacency_loss, ps, eps=1e-6)["E"]
    torch.testing.assert_close(g, fd, rtol=1e-6, atol=1e-8)


def _relerr(a, b):
    return float((a - b).abs().max() / max(float(b.abs().max()), 1e-8))


OPS = {
    "matmul": lambda p: nk.sum_(nk.mul(nk.matmul(p["a"], p["b"]), p["w"][:3, :2])),
    "bmm": lambda p: nk.sum_(nk.mul(nk.bmm(p["a"].unsqueeze(0), p["b"].unsqueeze(0)), p["w"][:3, :2])),
    "tanh_sigmoid": lambda p: nk.sum_(nk.mul(nk.tanh(p["a"]), nk.sigmoid(p["a"]))),
    "softmax": lambda p: nk.sum_(nk.mul(nk.softmax(p["a"], dim=1), p["w"][:3, :4])),
    "concat_slice": lambda p: nk.sum_(nk.mul(nk.slice_(nk.concat([p["a"], p["a"]], dim=1), 1, 2, 6), p["w"][:3, :4])),
    "mean_div": lambda p: nk.mean(nk.div(p["a"], nk.add(nk.mul(p["w"][:3, :4], p["w"][:3, :4]), 1.0))),
    "layer_norm": lambda p: nk.sum_(nk.mul(nk.layer_norm(p["a"]), p["w"][:3, :4])),
    "node_transform": lambda p: nk.sum_(nk.mul(nk.node_transform(p["a"], p["t"]), p["w"][:3, :2])),
    "pool_weights": lambda p: nk.sum_(nk.mul(nk.pool_weights(p["a"].T, p["b"][:3]), p["w"][:4, :2])),
    "gather": lambda p: nk.sum_(nk.mul(nk.gather(p["a"], torch.tensor([2, 0]), dim=0), p["w"][:2, :4])),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_over_random_seeds(name):
    fn = OPS[name]
    for seed in range(50):
        gen = torch.Generator().manual_seed(seed)
        ps = ParamSet({
            "a": torch.randn(3, 4, generator=gen, dtype=DTYPE),
            "b": torch.randn(4, 2, generator=gen, dtype=DTYPE),
            "w": torch.randn(4, 4, generator=gen, dtype=DTYPE),
            "t": torch.randn(3, 4, 2, generator=gen, dtype=DTYPE),
        })
        g = nk.backward(fn(ps), ps)
        fd = nk.finite_diff_gradient(fn, ps, eps=1e-5)
        for k in ps.names():
            assert _relerr(g[k], fd[k]) <= 1e-4, (name, seed, k)


def test_relu_gradient_away_from_kink():
    for seed in range(50):
        gen = torch.Generator().manual_seed(seed)
        x = torch.randn(10, generator=gen, dtype=DTYPE)
        x = torch.where(x.abs() < 1e-3, x + 0.01, x)
        ps = ParamSet({"x": x, "w": torch.randn(10, generator=gen, dtype=DTYPE)})
        fn = lambda p: nk.sum_(nk.mul(nk.relu(p["x"]), p["w"]))
        g, fd = nk.backward(fn(ps), ps), nk.finite_diff_gradient(fn, ps, eps=1e-5)
        assert _relerr(g["x"], fd["x"]) <= 1e-4


def test_forward_eval_bitwise_deterministic():
    gen = torch.Generator().manual_seed(0)
    a, b = torch.randn(5, 7, generator=gen, dtype=DTYPE), torch.randn(7, 3, generator=gen, dtype=DTYPE)
    f = lambda a, b: nk.softmax(nk.matmul(a, b), dim=1)
    r1 = nk.forward_eval(f, {"a": a, "b": b})
    r2 = nk.forward_eval(f, {"a": a, "b": b})
    assert torch.equal(r1, r2)


def test_flop_counter_conventions():
    with nk.FlopCounter() as fc:
        nk.matmul(nk.ones(2, 3), nk.ones(3, 4), term="x")
        nk.sigmoid(nk.ones(5), term="y")
        nk.aggregate(torch.eye(4, dtype=DTYPE), nk.ones(4, 3))
    assert fc.by_term == {"x": 48, "y": 15, "aggregation": 2 * 4 * 3}


def test_flop_counter_inactive_outside_context():
    fc = nk.FlopCounter()
    nk.matmul(nk.ones(2, 2), nk.ones(2, 2))
    assert fc.total == 0


def test_deterministic_env(monkeypatch):
    monkeypatch.setenv(nk.DETERMINISTIC_ENV, "0")
    assert nk.deterministic_from_env() is False
    monkeypatch.setenv(nk.DETERMINISTIC_ENV, "1")
    assert nk.deterministic_from_env() is True
    monkeypatch.delenv(nk.DETERMINISTIC_ENV)
    assert nk.deterministic_from_env(default=False) is False

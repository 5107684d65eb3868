"""Dense fp64 tensor kernel with reverse-mode gradients and FLOP instrumentation.

Tensors are plain ``torch.Tensor`` objects in float64. Every op the two
architectures need is wrapped here so that it

* validates shapes and raises :class:`ShapeError` naming the op,
* refuses to emit NaN/Inf (:class:`NonFiniteError`),
* charges its scalar work to the active :class:`FlopCounter`, if any.

Cost convention: one multiply-accumulate is 2 FLOPs, elementwise add/mul/
ReLU/clamp cost 1 per element, exp and div cost 1 each, so sigmoid and tanh
cost 3 per element and softmax costs 3 per element (exp, row-sum add, div).
"""

from __future__ import annotations

import contextvars
import math
import os
from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
import torch

DTYPE = torch.float64
DETERMINISTIC_ENV = "AGSLOC_DETERMINISTIC"

SIGMOID_COST = 3
TANH_COST = 3
SOFTMAX_COST = 3


class ShapeError(ValueError):
    """Incompatible operand shapes for a kernel op."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""

    def __init__(self, op: str, where: str = ""):
        self.op = op
        self.where = where
        super().__init__(f"{op}: non-finite value produced{' at ' + where if where else ''}")


# --------------------------------------------------------------------------
# deterministic mode


_deterministic = False


def set_deterministic(flag: bool = True) -> None:
    """Serialise torch to one thread and force deterministic kernels."""
    global _deterministic
    _deterministic = bool(flag)
    torch.use_deterministic_algorithms(_deterministic)
    if _deterministic:
        torch.set_num_threads(1)


def is_deterministic() -> bool:
    return _deterministic


def deterministic_from_env(default: bool = True) -> bool:
    raw = os.environ.get(DETERMINISTIC_ENV)
    if raw is None or raw.strip() == "":
        return default
    return raw.strip().lower() not in ("0", "false", "no", "off")


# --------------------------------------------------------------------------
# FLOP accounting


class FlopCounter:
    """Accumulates FLOPs charged by kernel ops while active.

    >>> with FlopCounter() as fc:
    ...     _ = matmul(torch.ones(2, 3, dtype=DTYPE), torch.ones(3, 4, dtype=DTYPE))
    >>> fc.total
    48
    """

    def __init__(self):
        self.by_term: dict[str, int] = {}
        self._token = None

    def add(self, term: str, flops: int) -> None:
        self.by_term[term] = self.by_term.get(term, 0) + int(flops)

    @property
    def total(self) -> int:
        return sum(self.by_term.values())

    def __enter__(self) -> "FlopCounter":
        self._token = _active_counter.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_counter.reset(self._token)
        self._token = None


_active_counter: contextvars.ContextVar[FlopCounter | None] = contextvars.ContextVar(
    "agsloc_flop_counter", default=None
)


def _charge(term: str, flops: int) -> None:
    counter = _active_counter.get()
    if counter is not None:
        counter.add(term, flops)


def _finite(op: str, out: torch.Tensor) -> torch.Tensor:
    # NaN/Inf anywhere propagates into the sum
    if not math.isfinite(float(out.detach().sum())):
        if not bool(torch.isfinite(out).all()):
            raise NonFiniteError(op)
    return out


# --------------------------------------------------------------------------
# construction


def tensor(data, shape: Sequence[int] | None = None, requires_grad: bool = False) -> torch.Tensor:
    """Build an fp64 tensor from nested lists, numpy arrays or flat data + shape."""
    t = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE).clone()
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if math.prod(shape) != t.numel():
            raise ShapeError("tensor", t.shape, shape, detail="product(shape) != len(data)")
        t = t.reshape(shape)
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError("tensor")
    return t.requires_grad_(requires_grad)


def zeros(*shape: int) -> torch.Tensor:
    return torch.zeros(shape, dtype=DTYPE)


def ones(*shape: int) -> torch.Tensor:
    return torch.ones(shape, dtype=DTYPE)


# --------------------------------------------------------------------------
# ops


def matmul(a: torch.Tensor, b: torch.Tensor, term: str = "other") -> torch.Tensor:
    """Matrix product of 2-D operands, or batched over leading dims."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = torch.matmul(a, b)
    except RuntimeError as exc:
        raise ShapeError("matmul", a.shape, b.shape, detail=str(exc)) from None
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    batch = out.numel() // max(m * n, 1)
    _charge(term, 2 * batch * m * k * n)
    return _finite("matmul", out)


def bmm(a: torch.Tensor, b: torch.Tensor, term: str = "other") -> torch.Tensor:
    if a.dim() != 3 or b.dim() != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError("bmm", a.shape, b.shape)
    out = torch.bmm(a, b)
    _charge(term, 2 * a.shape[0] * a.shape[1] * a.shape[2] * b.shape[2])
    return _finite("bmm", out)


def add(a, b, term: str = "other") -> torch.Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a + b
    except RuntimeError:
        raise ShapeError("add", a.shape, b.shape) from None
    _charge(term, out.numel())
    return _finite("add", out)


def sub(a, b, term: str = "other") -> torch.Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a - b
    except RuntimeError:
        raise ShapeError("sub", a.shape, b.shape) from None
    _charge(term, out.numel())
    return _finite("sub", out)


def mul(a, b, term: str = "other") -> torch.Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a * b
    except RuntimeError:
        raise ShapeError("mul", a.shape, b.shape) from None
    _charge(term, out.numel())
    return _finite("mul", out)


def div(a, b, term: str = "other") -> torch.Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a / b
    except RuntimeError:
        raise ShapeError("div", a.shape, b.shape) from None
    _charge(term, out.numel())
    return _finite("div", out)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=DTYPE)


def sigmoid(x: torch.Tensor, term: str = "other") -> torch.Tensor:
    _charge(term, SIGMOID_COST * x.numel())
    return torch.sigmoid(x)


def tanh(x: torch.Tensor, term: str = "other") -> torch.Tensor:
    _charge(term, TANH_COST * x.numel())
    return torch.tanh(x)


def relu(x: torch.Tensor, term: str = "other") -> torch.Tensor:
    _charge(term, x.numel())
    return torch.relu(x)


def identity(x: torch.Tensor, term: str = "other") -> torch.Tensor:
    return x


ACTIVATIONS: dict[str, Callable[..., torch.Tensor]] = {
    "identity": identity,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
}


def softmax(x: torch.Tensor, dim: int = -1, term: str = "other") -> torch.Tensor:
    _charge(term, SOFTMAX_COST * x.numel())
    return _finite("softmax", torch.softmax(x, dim=dim))


def clamp(x: torch.Tensor, lo: float, hi: float, term: str = "other") -> torch.Tensor:
    _charge(term, x.numel())
    return torch.clamp(x, lo, hi)


def concat(parts: Sequence[torch.Tensor], dim: int = -1) -> torch.Tensor:
    ref = parts[0].shape
    d = dim % len(ref)
    for p in parts[1:]:
        if p.dim() != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != d):
            raise ShapeError("concat", *(q.shape for q in parts), detail=f"dim={dim}")
    return torch.cat(list(parts), dim=dim)


def slice_(x: torch.Tensor, dim: int, start: int, stop: int) -> torch.Tensor:
    if not (0 <= start <= stop <= x.shape[dim]):
        raise ShapeError("slice", x.shape, detail=f"dim={dim} [{start}:{stop}]")
    return x.narrow(dim, start, stop - start)


def gather(x: torch.Tensor, index: torch.Tensor, dim: int = 0) -> torch.Tensor:
    if index.numel() and int(index.max()) >= x.shape[dim]:
        raise ShapeError("gather", x.shape, index.shape, detail="index out of range")
    return torch.index_select(x, dim, index.long())


def sum_(x: torch.Tensor, dim=None, term: str = "other") -> torch.Tensor:
    _charge(term, x.numel())
    return x.sum() if dim is None else x.sum(dim=dim)


def mean(x: torch.Tensor, dim=None, term: str = "other") -> torch.Tensor:
    out = x.mean() if dim is None else x.mean(dim=dim)
    _charge(term, x.numel() + out.numel())
    return out


def abs_(x: torch.Tensor, term: str = "other") -> torch.Tensor:
    _charge(term, x.numel())
    return L1Abs.apply(x)


class L1Abs(torch.autograd.Function):
    """|x| with derivative 0 at the kink, deterministically."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x.abs()

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * torch.sign(x)


def aggregate(adj: torch.Tensor, x: torch.Tensor, term: str = "aggregation") -> torch.Tensor:
    """Neighbour aggregation ``adj @ x`` over the node axis (second-to-last).

    Charged as 2 FLOPs per *nonzero* adjacency entry per trailing feature, so
    exactly-zero (pruned) edges cost nothing.
    """
    n = adj.shape[0]
    if adj.dim() != 2 or adj.shape[1] != n or x.dim() < 2 or x.shape[-2] != n:
        raise ShapeError("aggregate", adj.shape, x.shape)
    out = torch.matmul(adj, x)
    nnz = int(torch.count_nonzero(adj.detach()))
    per_node_cols = x.numel() // n
    _charge(term, 2 * nnz * per_node_cols)
    return _finite("aggregate", out)


def node_transform(x: torch.Tensor, theta: torch.Tensor, term: str = "temporal") -> torch.Tensor:
    """Apply per-node weight matrices: ``out[..., n, f] = sum_c x[..., n, c] theta[n, c, f]``."""
    if theta.dim() != 3 or x.dim() < 2 or x.shape[-2] != theta.shape[0] or x.shape[-1] != theta.shape[1]:
        raise ShapeError("node_transform", x.shape, theta.shape)
    out = torch.einsum("...nc,ncf->...nf", x, theta)
    n, c, f = theta.shape
    rows = x.numel() // (n * c)
    _charge(term, 2 * rows * n * c * f)
    return _finite("node_transform", out)


def pool_weights(emb: torch.Tensor, pool: torch.Tensor, term: str = "node_param") -> torch.Tensor:
    """Node-specific weights ``E @ W`` with ``W`` of shape d x ... (contracted on d)."""
    if emb.dim() != 2 or pool.dim() < 1 or emb.shape[1] != pool.shape[0]:
        raise ShapeError("pool_weights", emb.shape, pool.shape)
    flat = pool.reshape(pool.shape[0], -1)
    out = torch.matmul(emb, flat).reshape((emb.shape[0],) + tuple(pool.shape[1:]))
    _charge(term, 2 * emb.shape[0] * emb.shape[1] * flat.shape[1])
    return _finite("pool_weights", out)


def layer_norm(x: torch.Tensor, eps: float = 1e-5, term: str = "other") -> torch.Tensor:
    """Parameter-free layer normalisation over the last axis."""
    # mean (1), centre (1), square (1), var-sum (1), divide (1) per element
    _charge(term, 5 * x.numel())
    mu = x.mean(dim=-1, keepdim=True)
    xc = x - mu
    var = (xc * xc).mean(dim=-1, keepdim=True)
    return _finite("layer_norm", xc / torch.sqrt(var + eps))


def forward_eval(fn: Callable[..., torch.Tensor], inputs: Mapping[str, torch.Tensor] | None = None, **kw) -> torch.Tensor:
    """Evaluate ``fn(**inputs)`` and insist the result is finite."""
    args = dict(inputs or {})
    args.update(kw)
    out = fn(**args)
    return _finite(getattr(fn, "__name__", "forward_eval"), out)


# --------------------------------------------------------------------------
# parameters and gradients


class ParamSet:
    """Ordered, uniquely named collection of fp64 parameter tensors."""

    def __init__(self, items: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]] = ()):
        self._params: OrderedDict[str, torch.Tensor] = OrderedDict()
        pairs = items.items() if isinstance(items, Mapping) else items
        for name, value in pairs:
            self.add(name, value)

    def add(self, name: str, value: torch.Tensor, trainable: bool = True) -> torch.Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value.detach().to(DTYPE).clone().requires_grad_(trainable)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def trainable(self) -> list[tuple[str, torch.Tensor]]:
        return [(k, v) for k, v in self._params.items() if v.requires_grad]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._params[name].requires_grad_(flag)

    def zero_grad(self) -> None:
        for v in self._params.values():
            v.grad = None

    def grads(self) -> dict[str, torch.Tensor | None]:
        return {k: v.grad for k, v in self._params.items()}

    def state(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self._params.items()}

    def load_state(self, state: Mapping[str, torch.Tensor]) -> None:
        missing = set(self._params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        with torch.no_grad():
            for k, v in state.items():
                if tuple(v.shape) != tuple(self._params[k].shape):
                    raise ShapeError("load_state", self._params[k].shape, v.shape, detail=k)
                self._params[k].copy_(v)


def backward(loss: torch.Tensor, params: ParamSet) -> dict[str, torch.Tensor]:
    """Populate ``.grad`` of every trainable parameter from a scalar loss.

    Parameters that the loss does not depend on get zero gradients;
    non-trainable parameters are left untouched.
    """
    if loss.numel() != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be scalar")
    if loss.grad_fn is None:
        raise RuntimeError("backward called without a recorded forward pass")
    named = params.trainable()
    grads = torch.autograd.grad(loss, [v for _, v in named], allow_unused=True)
    out = {}
    for (name, value), g in zip(named, grads):
        g = torch.zeros_like(value) if g is None else g.detach()
        value.grad = g
        out[name] = g
    return out


def finite_diff_gradient(
    f: Callable[[ParamSet], torch.Tensor | float],
    params: ParamSet,
    eps: float = 1e-6,
    names: Sequence[str] | None = None,
) -> dict[str, torch.Tensor]:
    """Central-difference gradient estimate, one entry at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    chosen = names if names is not None else [k for k, _ in params.trainable()]
    out = {}
    with torch.no_grad():
        for name in chosen:
            p = params[name]
            flat = p.view(-1)
            g = torch.zeros(flat.numel(), dtype=DTYPE)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                hi = float(f(params))
                flat[i] = orig - eps
                lo = float(f(params))
                flat[i] = orig
                g[i] = (hi - lo) / (2.0 * eps)
            out[name] = g.reshape(p.shape)
    return out


def uniform_(shape: Sequence[int], bound: float, gen: torch.Generator) -> torch.Tensor:
    return (torch.rand(tuple(shape), generator=gen, dtype=DTYPE) * 2.0 - 1.0) * bound

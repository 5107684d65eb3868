"""Adaptive adjacency, NAPL graph convolution and hard-concrete edge gates."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import numkernel as nk
from .numkernel import DTYPE, ShapeError


@dataclass(frozen=True)
class GateParams:
    """Hard-concrete temperature and stretch interval ``(low, high)``.

    Gates are ``clamp(sigmoid(.) * (high - low) + low, 0, 1)`` so a larger
    logit always means a more open gate.
    """

    beta: float = 2.0 / 3.0
    low: float = -0.1
    high: float = 1.1

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not (self.low < 0.0 and self.high > 1.0):
            raise ValueError(f"stretch interval ({self.low}, {self.high}) must strictly contain [0, 1]")

    @property
    def l0_shift(self) -> float:
        # P(gate != 0) = sigmoid(U - beta * log(-low / high))
        return self.beta * math.log(-self.low / self.high)


class EdgeMask:
    """Keep/prune schedule state over an N x N adjacency.

    ``frozen_keep`` entries are pinned to 1, ``frozen_prune`` entries to 0;
    everything else is a live gate driven by the logits. The diagonal starts
    in ``frozen_keep`` unless ``prune_diagonal`` is set.
    """

    def __init__(self, n: int, prune_diagonal: bool = False):
        if n < 1:
            raise ValueError("mask needs at least one node")
        self.n = n
        self.prune_diagonal = prune_diagonal
        self.frozen_keep = torch.zeros(n, n, dtype=torch.bool)
        self.frozen_prune = torch.zeros(n, n, dtype=torch.bool)
        if not prune_diagonal:
            self.frozen_keep.fill_diagonal_(True)

    @classmethod
    def all_ones(cls, n: int, prune_diagonal: bool = False) -> "EdgeMask":
        m = cls(n, prune_diagonal)
        m.frozen_keep.fill_(True)
        return m

    @classmethod
    def from_binary(cls, keep: torch.Tensor, prune_diagonal: bool = False) -> "EdgeMask":
        keep = keep.bool()
        m = cls(keep.shape[0], prune_diagonal)
        m.frozen_keep = keep.clone()
        m.frozen_prune = ~keep
        m.validate()
        return m

    def copy(self) -> "EdgeMask":
        m = EdgeMask(self.n, self.prune_diagonal)
        m.frozen_keep = self.frozen_keep.clone()
        m.frozen_prune = self.frozen_prune.clone()
        return m

    @property
    def free(self) -> torch.Tensor:
        return ~(self.frozen_keep | self.frozen_prune)

    @property
    def prunable(self) -> torch.Tensor:
        """Entries that count toward the sparsity ratio."""
        m = torch.ones(self.n, self.n, dtype=torch.bool)
        if not self.prune_diagonal:
            m.fill_diagonal_(False)
        return m

    def is_binary(self) -> bool:
        return not bool(self.free.any())

    def validate(self) -> None:
        if bool((self.frozen_keep & self.frozen_prune).any()):
            raise ValueError("frozen_keep and frozen_prune overlap")
        if not self.prune_diagonal and bool(self.frozen_prune.diagonal().any()):
            raise ValueError("diagonal pruned while prune_diagonal is off")

    def override(self, gates: torch.Tensor) -> torch.Tensor:
        """Replace frozen entries of a gate matrix by exactly 1 / 0."""
        if tuple(gates.shape) != (self.n, self.n):
            raise ShapeError("EdgeMask.override", gates.shape, (self.n, self.n))
        out = torch.where(self.frozen_keep, torch.ones_like(gates), gates)
        return torch.where(self.frozen_prune, torch.zeros_like(gates), out)

    def binary(self, logits: torch.Tensor | None = None, gate: GateParams | None = None,
               threshold: float = 0.5) -> torch.Tensor:
        """0/1 mask for evaluation; live gates open iff deterministic gate >= threshold."""
        if self.is_binary() or logits is None:
            return (~self.frozen_prune).to(DTYPE)
        g = deterministic_gate(logits.detach(), gate or GateParams(), self)
        return (g >= threshold).to(DTYPE)

    def __eq__(self, other) -> bool:
        return (isinstance(other, EdgeMask) and self.n == other.n
                and self.prune_diagonal == other.prune_diagonal
                and torch.equal(self.frozen_keep, other.frozen_keep)
                and torch.equal(self.frozen_prune, other.frozen_prune))


def compute_adaptive_adjacency(emb: torch.Tensor) -> torch.Tensor:
    """Row-stochastic ``softmax(relu(E E^T))``."""
    if emb.dim() != 2:
        raise ShapeError("compute_adaptive_adjacency", emb.shape)
    logits = nk.matmul(emb, emb.transpose(0, 1), term="adjacency")
    return nk.softmax(nk.relu(logits, term="adjacency"), dim=1, term="adjacency")


def node_weights(emb: torch.Tensor, weight_pool: torch.Tensor) -> torch.Tensor:
    """Per-node C x F weights ``Theta_i = sum_k E[i, k] W_G[k]``."""
    if weight_pool.dim() != 3:
        raise ShapeError("node_weights", emb.shape, weight_pool.shape)
    return nk.pool_weights(emb, weight_pool)


def napl_agcn_forward(
    adj: torch.Tensor,
    x: torch.Tensor,
    emb: torch.Tensor,
    weight_pool: torch.Tensor,
    activation: str = "identity",
    bias_pool: torch.Tensor | None = None,
    theta: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Node-adaptive graph convolution ``act(A X Theta_i + b_i)``.

    ``x`` is ``N x C`` or has extra leading batch axes. ``theta`` / ``bias``
    may be passed precomputed so a recurrent unroll forms them only once.
    """
    n = adj.shape[0]
    if adj.dim() != 2 or adj.shape[1] != n:
        raise ShapeError("napl_agcn_forward", adj.shape, detail="adjacency must be square")
    if emb.dim() != 2 or emb.shape[0] != n:
        raise ShapeError("napl_agcn_forward", adj.shape, emb.shape)
    if weight_pool.dim() != 3 or weight_pool.shape[0] != emb.shape[1]:
        raise ShapeError("napl_agcn_forward", emb.shape, weight_pool.shape)
    if x.dim() < 2 or x.shape[-2] != n or x.shape[-1] != weight_pool.shape[1]:
        raise ShapeError("napl_agcn_forward", x.shape, weight_pool.shape)
    if theta is None:
        theta = node_weights(emb, weight_pool)
    if bias is None and bias_pool is not None:
        bias = nk.pool_weights(emb, bias_pool)
    z = nk.node_transform(nk.aggregate(adj, x), theta)
    if bias is not None:
        z = nk.add(z, bias, term="temporal")
    try:
        act = nk.ACTIVATIONS[activation]
    except KeyError:
        raise ValueError(f"unknown activation {activation!r}") from None
    return act(z, term="temporal")


def gate_logits(emb: torch.Tensor, gate_weight: torch.Tensor) -> torch.Tensor:
    """Edge-gate logits ``U = E W_E`` (N x N)."""
    if emb.dim() != 2 or gate_weight.dim() != 2 or emb.shape[1] != gate_weight.shape[0] \
            or gate_weight.shape[1] != emb.shape[0]:
        raise ShapeError("gate_logits", emb.shape, gate_weight.shape)
    return nk.matmul(emb, gate_weight, term="gate")


def _stretch(s: torch.Tensor, gate: GateParams) -> torch.Tensor:
    return torch.clamp(s * (gate.high - gate.low) + gate.low, 0.0, 1.0)


def sample_hard_concrete(logits: torch.Tensor, gate: GateParams, noise: torch.Tensor,
                         mask: EdgeMask | None = None) -> torch.Tensor:
    """Stretched, clamped hard-concrete sample for every edge.

    ``noise`` is caller-supplied uniform(0, 1) with the logits' shape.
    """
    if tuple(noise.shape) != tuple(logits.shape):
        raise ShapeError("sample_hard_concrete", logits.shape, noise.shape)
    if bool(((noise <= 0.0) | (noise >= 1.0)).any()):
        raise ValueError("hard-concrete noise must lie strictly inside (0, 1)")
    s = torch.sigmoid((torch.log(noise) - torch.log1p(-noise) + logits) / gate.beta)
    m = _stretch(s, gate)
    return mask.override(m) if mask is not None else m


def deterministic_gate(logits: torch.Tensor, gate: GateParams, mask: EdgeMask | None = None) -> torch.Tensor:
    """Noise-free gate used at evaluation time."""
    m = _stretch(torch.sigmoid(logits / gate.beta), gate)
    return mask.override(m) if mask is not None else m


def expected_l0(logits: torch.Tensor, gate: GateParams, mask: EdgeMask | None = None) -> torch.Tensor:
    """Differentiable expected number of open gates."""
    p_open = torch.sigmoid(logits - gate.l0_shift)
    if mask is None:
        return p_open.sum()
    free = mask.free.to(DTYPE)
    return (p_open * free).sum() + mask.frozen_keep.sum().to(DTYPE)


def apply_mask(adj: torch.Tensor, gates: torch.Tensor) -> torch.Tensor:
    """Elementwise ``A * M`` with no renormalisation."""
    if tuple(adj.shape) != tuple(gates.shape):
        raise ShapeError("apply_mask", adj.shape, gates.shape)
    return nk.mul(adj, gates, term="adjacency")


def reachable(mask: torch.Tensor | np.ndarray, hops: int) -> np.ndarray:
    """``R[i, j]`` is True when node ``i`` can read node ``j`` through at most ``hops`` kept edges.

    An entry ``mask[i, j] != 0`` means ``i`` aggregates from ``j``; every node reaches itself.
    """
    m = mask.detach().cpu().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    step = (m != 0).astype(np.int64)
    reach = np.eye(m.shape[0], dtype=np.int64)
    for _ in range(hops):
        reach = np.minimum(1, reach + reach @ step)
    return reach.astype(bool)


def export_matrix_csv(path: str | Path, matrix: torch.Tensor | np.ndarray) -> Path:
    """Write a 2-D matrix row-major with 17 significant digits."""
    arr = matrix.detach().cpu().numpy() if isinstance(matrix, torch.Tensor) else np.asarray(matrix)
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in np.atleast_2d(arr):
            fh.write(",".join(f"{float(v):.17g}" for v in row) + "\n")
    return path


def load_matrix_csv(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)

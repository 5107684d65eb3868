"""AGCRN and AGFormer built on the NAPL graph convolution."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any

import torch

from . import numkernel as nk
from .graph import (
    EdgeMask,
    GateParams,
    apply_mask,
    compute_adaptive_adjacency,
    gate_logits,
    napl_agcn_forward,
    node_weights,
)
from .numkernel import DTYPE, NonFiniteError, ParamSet, ShapeError

EMBED_INIT_SCALE = 0.1


@dataclass
class AGCRNConfig:
    num_nodes: int
    input_dim: int = 1
    hidden_dim: int = 8
    embed_dim: int = 2
    num_layers: int = 1
    history: int = 12
    horizon: int = 12
    bias: bool = True

    arch = "agcrn"

    def __post_init__(self):
        for name in ("num_nodes", "input_dim", "hidden_dim", "embed_dim", "num_layers", "history", "horizon"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {"arch": self.arch, **asdict(self)}


@dataclass
class AGFormerConfig:
    num_nodes: int
    input_dim: int = 1
    hidden_dim: int = 8
    embed_dim: int = 2
    num_heads: int = 2
    num_blocks: int = 1
    history: int = 12
    horizon: int = 12
    ffn_dim: int = 16
    bias: bool = True

    arch = "agformer"

    def __post_init__(self):
        for name in ("num_nodes", "input_dim", "hidden_dim", "embed_dim", "num_heads", "num_blocks",
                     "history", "horizon", "ffn_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")

    def to_dict(self) -> dict[str, Any]:
        return {"arch": self.arch, **asdict(self)}


def config_from_dict(d: dict[str, Any]) -> AGCRNConfig | AGFormerConfig:
    d = dict(d)
    arch = d.pop("arch", "agcrn")
    if arch == "agcrn":
        return AGCRNConfig(**d)
    if arch == "agformer":
        return AGFormerConfig(**d)
    raise ValueError(f"unknown architecture {arch!r}")


# --------------------------------------------------------------------------
# AGCRN


def agcrn_cell_weights(emb: torch.Tensor, cell_params: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Form node-specific weights/biases of one GRU cell once per forward pass."""
    out = {}
    for gate in ("update", "reset", "cand"):
        out[gate] = node_weights(emb, cell_params[f"{gate}_pool"])
        bias_pool = cell_params.get(f"{gate}_bias")
        out[f"{gate}_b"] = nk.pool_weights(emb, bias_pool) if bias_pool is not None else None
    return out


def agcrn_cell_step(h_prev, x_t, adj, emb, cell_params, weights=None) -> torch.Tensor:
    """One GRU step whose three affine maps are NAPL graph convolutions.

    Update and reset gates share the aggregation of ``[x || h]``; the
    candidate aggregates ``[x || r * h]``.
    """
    if h_prev.shape[:-1] != x_t.shape[:-1]:
        raise ShapeError("agcrn_cell_step", h_prev.shape, x_t.shape)
    w = weights if weights is not None else agcrn_cell_weights(emb, cell_params)
    xh = nk.concat([x_t, h_prev], dim=-1)
    agg = nk.aggregate(adj, xh)
    u = _transform(agg, w["update"], w["update_b"], "sigmoid")
    r = _transform(agg, w["reset"], w["reset_b"], "sigmoid")
    xrh = nk.concat([x_t, nk.mul(r, h_prev, term="temporal")], dim=-1)
    c = _transform(nk.aggregate(adj, xrh), w["cand"], w["cand_b"], "tanh")
    # h = u*h + (1-u)*c, written as c + u*(h - c)
    return nk.add(c, nk.mul(u, nk.sub(h_prev, c, term="temporal"), term="temporal"), term="temporal")


def _transform(agg, theta, bias, activation):
    z = nk.node_transform(agg, theta)
    if bias is not None:
        z = nk.add(z, bias, term="temporal")
    return nk.ACTIVATIONS[activation](z, term="temporal")


class STModel:
    """Shared machinery: parameters, edge mask, gate logits, prediction."""

    config: Any

    def __init__(self, config, seed: int = 0, gate: GateParams | None = None, prune_diagonal: bool = False):
        self.config = config
        self.gate = gate or GateParams()
        self.seed = int(seed)
        self.mask = EdgeMask.all_ones(config.num_nodes, prune_diagonal)
        self.params = ParamSet()
        self.reinitialise(seed)

    # parameters -----------------------------------------------------------

    def reinitialise(self, seed: int) -> None:
        """Draw every parameter afresh from the fixed init scheme."""
        self.seed = int(seed)
        gen = torch.Generator().manual_seed(self.seed)
        specs = self.param_specs()
        fresh = ParamSet()
        for name, shape, kind, fan_in in specs:
            if kind == "embedding":
                value = nk.uniform_(shape, 1.0, gen) * EMBED_INIT_SCALE
            elif kind == "zero":
                value = torch.zeros(shape, dtype=DTYPE)
            else:
                value = nk.uniform_(shape, 1.0 / math.sqrt(fan_in), gen)
            fresh.add(name, value)
        self.params = fresh

    def param_specs(self) -> list[tuple[str, tuple[int, ...], str, int]]:
        c = self.config
        # gate logits start at exactly 0 (neutral gate 0.5); only AGS trains them
        specs = [("embedding", (c.num_nodes, c.embed_dim), "embedding", c.embed_dim),
                 ("gate_weight", (c.embed_dim, c.num_nodes), "zero", c.embed_dim)]
        return specs + self._body_specs()

    def _body_specs(self):
        raise NotImplementedError

    @property
    def n(self) -> int:
        return self.config.num_nodes

    # graph ----------------------------------------------------------------

    def adjacency(self) -> torch.Tensor:
        return compute_adaptive_adjacency(self.params["embedding"])

    def logits(self) -> torch.Tensor:
        return gate_logits(self.params["embedding"], self.params["gate_weight"])

    def eval_mask(self) -> torch.Tensor:
        """Binary 0/1 mask used for evaluation and FLOPs accounting."""
        if self.mask.is_binary():
            return self.mask.binary()
        with torch.no_grad():
            return self.mask.binary(self.logits(), self.gate)

    def effective_adjacency(self, gates: torch.Tensor | None = None) -> torch.Tensor:
        m = self.eval_mask() if gates is None else gates
        return apply_mask(self.adjacency(), m)

    # forward --------------------------------------------------------------

    def forward(self, window: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def predict(self, window: torch.Tensor) -> torch.Tensor:
        """Evaluation forward with the deterministic binary mask, no autograd."""
        with torch.no_grad():
            return self.forward(window, self.effective_adjacency())

    def __call__(self, window: torch.Tensor, adj: torch.Tensor | None = None) -> torch.Tensor:
        return self.forward(window, self.effective_adjacency() if adj is None else adj)

    def _check_window(self, window: torch.Tensor) -> tuple[torch.Tensor, bool]:
        c = self.config
        squeeze = window.dim() == 3
        if squeeze:
            window = window.unsqueeze(0)
        if window.dim() != 4 or tuple(window.shape[1:]) != (c.history, c.num_nodes, c.input_dim):
            raise ShapeError(f"{c.arch}_forward", window.shape,
                             ("B", c.history, c.num_nodes, c.input_dim))
        return window, squeeze

    def _head(self, hidden: torch.Tensor) -> torch.Tensor:
        """Shared per-node linear map from F features to H x C outputs."""
        c = self.config
        out = nk.matmul(hidden, self.params["head.weight"], term="head")
        out = nk.add(out, self.params["head.bias"], term="head")
        b = out.shape[0]
        return out.reshape(b, c.num_nodes, c.horizon, c.input_dim).permute(0, 2, 1, 3)

    def _head_specs(self, in_dim: int):
        c = self.config
        return [("head.weight", (in_dim, c.horizon * c.input_dim), "weight", in_dim),
                ("head.bias", (c.horizon * c.input_dim,), "zero", in_dim)]


class AGCRN(STModel):
    """Stacked graph-convolutional GRU with a per-node linear decoder."""

    def _body_specs(self):
        c = self.config
        specs = []
        for layer in range(c.num_layers):
            cin = (c.input_dim if layer == 0 else c.hidden_dim) + c.hidden_dim
            for gate in ("update", "reset", "cand"):
                specs.append((f"l{layer}.{gate}_pool", (c.embed_dim, cin, c.hidden_dim), "weight", cin))
                if c.bias:
                    specs.append((f"l{layer}.{gate}_bias", (c.embed_dim, c.hidden_dim), "zero", cin))
        return specs + self._head_specs(c.hidden_dim)

    def cell_params(self, layer: int) -> dict[str, torch.Tensor]:
        prefix = f"l{layer}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def forward(self, window: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        c = self.config
        window, squeeze = self._check_window(window)
        emb = self.params["embedding"]
        seq = [window[:, t] for t in range(c.history)]
        for layer in range(c.num_layers):
            weights = agcrn_cell_weights(emb, self.cell_params(layer))
            h = torch.zeros(window.shape[0], c.num_nodes, c.hidden_dim, dtype=DTYPE)
            outs = []
            for t, x_t in enumerate(seq):
                try:
                    h = agcrn_cell_step(h, x_t, adj, emb, None, weights=weights)
                except NonFiniteError as exc:
                    raise NonFiniteError(exc.op, f"layer {layer} timestep {t}") from None
                outs.append(h)
            seq = outs
        pred = self._head(seq[-1])
        return pred[0] if squeeze else pred


# --------------------------------------------------------------------------
# AGFormer


def sinusoidal_encoding(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=DTYPE).unsqueeze(1)
    i = torch.arange(dim, dtype=DTYPE).unsqueeze(0)
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=DTYPE), (2 * torch.div(i, 2, rounding_mode="floor")) / dim)
    return torch.where(i.long() % 2 == 0, torch.sin(angle), torch.cos(angle))


def agformer_block(xseq: torch.Tensor, params: dict[str, torch.Tensor], adj: torch.Tensor,
                   emb: torch.Tensor, num_heads: int) -> torch.Tensor:
    """Pre-norm transformer block over the time axis with NAPL projections.

    ``xseq`` is ``B x T x N x F``; attention runs per node across T.
    """
    if xseq.dim() == 3:
        return agformer_block(xseq.unsqueeze(0), params, adj, emb, num_heads)[0]
    b, t, n, f = xseq.shape
    if f % num_heads:
        raise ShapeError("agformer_block", xseq.shape, detail=f"F not divisible by {num_heads} heads")
    dh = f // num_heads

    def proj(x, name, act="identity"):
        return napl_agcn_forward(adj, x, emb, params[f"{name}_pool"], act,
                                 bias_pool=params.get(f"{name}_bias"))

    y = nk.layer_norm(xseq, term="temporal")
    q, k, v = proj(y, "q"), proj(y, "k"), proj(y, "v")

    def heads(z):  # B,T,N,F -> B*N*heads, T, dh
        return z.reshape(b, t, n, num_heads, dh).permute(0, 2, 3, 1, 4).reshape(b * n * num_heads, t, dh)

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = nk.mul(nk.bmm(qh, kh.transpose(1, 2), term="temporal"), 1.0 / math.sqrt(dh), term="temporal")
    attn = nk.bmm(nk.softmax(scores, dim=-1, term="temporal"), vh, term="temporal")
    attn = attn.reshape(b, n, num_heads, t, dh).permute(0, 3, 1, 2, 4).reshape(b, t, n, f)
    x = nk.add(xseq, attn, term="temporal")

    z = nk.layer_norm(x, term="temporal")
    ff = proj(proj(z, "ffn1", "relu"), "ffn2")
    return nk.add(x, ff, term="temporal")


class AGFormer(STModel):
    """Transformer encoder over time with NAPL-AGCN projections, mean-pooled readout."""

    def _body_specs(self):
        c = self.config
        specs = [("input.weight", (c.input_dim, c.hidden_dim), "weight", c.input_dim),
                 ("input.bias", (c.hidden_dim,), "zero", c.input_dim)]
        for blk in range(c.num_blocks):
            for name, cin, cout in (("q", c.hidden_dim, c.hidden_dim), ("k", c.hidden_dim, c.hidden_dim),
                                    ("v", c.hidden_dim, c.hidden_dim), ("ffn1", c.hidden_dim, c.ffn_dim),
                                    ("ffn2", c.ffn_dim, c.hidden_dim)):
                specs.append((f"b{blk}.{name}_pool", (c.embed_dim, cin, cout), "weight", cin))
                if c.bias:
                    specs.append((f"b{blk}.{name}_bias", (c.embed_dim, cout), "zero", cin))
        return specs + self._head_specs(c.hidden_dim)

    def block_params(self, blk: int) -> dict[str, torch.Tensor]:
        prefix = f"b{blk}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def embed_input(self, window: torch.Tensor) -> torch.Tensor:
        c = self.config
        x = nk.matmul(window, self.params["input.weight"], term="head")
        x = nk.add(x, self.params["input.bias"], term="head")
        pe = sinusoidal_encoding(c.history, c.hidden_dim).unsqueeze(1)  # T,1,F
        return nk.add(x, pe, term="head")

    def forward(self, window: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        c = self.config
        window, squeeze = self._check_window(window)
        emb = self.params["embedding"]
        x = self.embed_input(window)
        for blk in range(c.num_blocks):
            try:
                x = agformer_block(x, self.block_params(blk), adj, emb, c.num_heads)
            except NonFiniteError as exc:
                raise NonFiniteError(exc.op, f"block {blk}") from None
        pooled = nk.mean(x, dim=1, term="head")
        pred = self._head(pooled)
        return pred[0] if squeeze else pred


def aggregation_depth(config: AGCRNConfig | AGFormerConfig) -> int:
    """Longest chain of masked aggregations between an input and a prediction.

    A GRU step aggregates twice in sequence (reset gate, then the candidate
    over ``r * h``), so a recurrent layer spans ``2 T`` hops; a transformer
    block spans three (Q/K/V, then the two feed-forward layers).
    """
    if isinstance(config, AGCRNConfig):
        return 2 * config.history * config.num_layers
    return 3 * config.num_blocks


def build_model(config: AGCRNConfig | AGFormerConfig | dict, seed: int = 0,
                gate: GateParams | None = None, prune_diagonal: bool = False) -> STModel:
    if isinstance(config, dict):
        config = config_from_dict(config)
    cls = AGCRN if isinstance(config, AGCRNConfig) else AGFormer
    return cls(config, seed=seed, gate=gate, prune_diagonal=prune_diagonal)

"""Self-describing model checkpoints.

Layout (format ``agsloc-checkpoint``, version 1) is a UTF-8 JSON document::

    {
      "format": "agsloc-checkpoint", "version": 1,
      "config": {...model config, including "arch"...},
      "seed": int,
      "gate": {"beta": float, "low": float, "high": float},
      "mask": {"prune_diagonal": bool, "keep": <array>, "prune": <array>},
      "params": {name: <array>, ...},
      "norm": {"mean": <array>, "std": <array>} | null,
      "optimizer": {"names": [...], "step": int, "exp_avg": {...}, "exp_avg_sq": {...}} | null,
      "meta": {...free-form JSON...}
    }

Every ``<array>`` is ``{"dtype": "<f8" | "|u1", "shape": [...], "data": base64}``
holding the raw little-endian bytes in C order, so floats round-trip bit-exactly.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .data import NormStats
from .graph import EdgeMask, GateParams
from .numkernel import DTYPE
from .temporal import STModel, build_model, config_from_dict

FORMAT = "agsloc-checkpoint"
VERSION = 1


class CheckpointError(IOError):
    """Unreadable, corrupted or incompatible checkpoint."""


def encode_array(a: np.ndarray | torch.Tensor) -> dict[str, Any]:
    if isinstance(a, torch.Tensor):
        a = a.detach().cpu().numpy()
    a = np.asarray(a)
    if a.dtype == np.bool_:
        arr, dtype = a.astype("|u1"), "|u1"
    else:
        arr, dtype = a.astype("<f8"), "<f8"
    return {"dtype": dtype, "shape": list(arr.shape),
            "data": base64.b64encode(np.ascontiguousarray(arr).tobytes()).decode("ascii")}


def decode_array(d: dict[str, Any]) -> np.ndarray:
    try:
        dtype = np.dtype(d["dtype"])
        if d["dtype"] not in ("<f8", "|u1"):
            raise CheckpointError(f"unsupported array dtype {d['dtype']!r}")
        raw = base64.b64decode(d["data"], validate=True)
        shape = tuple(int(s) for s in d["shape"])
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad array record: {exc}") from None
    return arr.astype(bool) if d["dtype"] == "|u1" else arr


@dataclass
class Checkpoint:
    model: STModel
    norm: NormStats | None = None
    optimizer: dict[str, Any] | None = None
    meta: dict[str, Any] = field(default_factory=dict)


def optimizer_state(opt: torch.optim.Adam, names: list[str]) -> dict[str, Any]:
    """Adam moments keyed by parameter name (single param group)."""
    params = opt.param_groups[0]["params"]
    out: dict[str, Any] = {"names": list(names), "step": 0, "exp_avg": {}, "exp_avg_sq": {}}
    for name, p in zip(names, params):
        st = opt.state.get(p)
        if not st:
            continue
        out["step"] = int(st["step"])
        out["exp_avg"][name] = st["exp_avg"].detach().clone()
        out["exp_avg_sq"][name] = st["exp_avg_sq"].detach().clone()
    return out


def load_optimizer_state(opt: torch.optim.Adam, names: list[str], state: dict[str, Any]) -> None:
    params = opt.param_groups[0]["params"]
    for name, p in zip(names, params):
        if name not in state["exp_avg"]:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(state["step"])),
            "exp_avg": torch.as_tensor(state["exp_avg"][name], dtype=DTYPE).clone(),
            "exp_avg_sq": torch.as_tensor(state["exp_avg_sq"][name], dtype=DTYPE).clone(),
        }


def to_document(ckpt: Checkpoint) -> dict[str, Any]:
    m = ckpt.model
    doc: dict[str, Any] = {
        "format": FORMAT,
        "version": VERSION,
        "config": m.config.to_dict(),
        "seed": m.seed,
        "gate": {"beta": m.gate.beta, "low": m.gate.low, "high": m.gate.high},
        "mask": {"prune_diagonal": m.mask.prune_diagonal,
                 "keep": encode_array(m.mask.frozen_keep), "prune": encode_array(m.mask.frozen_prune)},
        "params": {k: encode_array(v) for k, v in m.params.items()},
        "norm": None if ckpt.norm is None else {"mean": encode_array(ckpt.norm.mean),
                                                "std": encode_array(ckpt.norm.std)},
        "optimizer": None,
        "meta": ckpt.meta,
    }
    if ckpt.optimizer is not None:
        o = ckpt.optimizer
        doc["optimizer"] = {"names": o["names"], "step": o["step"],
                            "exp_avg": {k: encode_array(v) for k, v in o["exp_avg"].items()},
                            "exp_avg_sq": {k: encode_array(v) for k, v in o["exp_avg_sq"].items()}}
    return doc


def dumps(ckpt: Checkpoint) -> bytes:
    return (json.dumps(to_document(ckpt), sort_keys=True, indent=1) + "\n").encode("utf-8")


def save(ckpt: Checkpoint, path: str | Path) -> str:
    """Write ``ckpt`` and return the SHA-256 of the file contents."""
    payload = dumps(ckpt)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)
    return hashlib.sha256(payload).hexdigest()


def from_document(doc: dict[str, Any]) -> Checkpoint:
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointError("not an agsloc checkpoint")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        config = config_from_dict(doc["config"])
        g = doc["gate"]
        model = build_model(config, seed=int(doc["seed"]),
                            gate=GateParams(beta=g["beta"], low=g["low"], high=g["high"]),
                            prune_diagonal=bool(doc["mask"]["prune_diagonal"]))
        expected = set(model.params.names())
        stored = doc["params"]
        if set(stored) != expected:
            raise CheckpointError(f"parameter names differ from config: {sorted(set(stored) ^ expected)}")
        state = {}
        for name in expected:
            arr = decode_array(stored[name])
            if tuple(arr.shape) != tuple(model.params[name].shape):
                raise CheckpointError(f"parameter {name!r} has shape {arr.shape}, "
                                      f"expected {tuple(model.params[name].shape)}")
            state[name] = torch.from_numpy(arr)
        model.params.load_state(state)
        mask = EdgeMask(config.num_nodes, model.mask.prune_diagonal)
        mask.frozen_keep = torch.from_numpy(decode_array(doc["mask"]["keep"]))
        mask.frozen_prune = torch.from_numpy(decode_array(doc["mask"]["prune"]))
        if tuple(mask.frozen_keep.shape) != (config.num_nodes,) * 2:
            raise CheckpointError("mask shape does not match num_nodes")
        mask.validate()
        model.mask = mask
        norm = None
        if doc.get("norm") is not None:
            norm = NormStats(decode_array(doc["norm"]["mean"]), decode_array(doc["norm"]["std"]))
        opt = None
        if doc.get("optimizer") is not None:
            o = doc["optimizer"]
            opt = {"names": list(o["names"]), "step": int(o["step"]),
                   "exp_avg": {k: torch.from_numpy(decode_array(v)) for k, v in o["exp_avg"].items()},
                   "exp_avg_sq": {k: torch.from_numpy(decode_array(v)) for k, v in o["exp_avg_sq"].items()}}
        return Checkpoint(model, norm, opt, dict(doc.get("meta") or {}))
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc!r}") from None


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        doc = json.loads(path.read_bytes().decode("utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return from_document(doc)


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def mask_hash(mask: EdgeMask) -> str:
    h = hashlib.sha256()
    h.update(mask.frozen_keep.numpy().astype("|u1").tobytes())
    h.update(mask.frozen_prune.numpy().astype("|u1").tobytes())
    return h.hexdigest()

import json

import numpy as np
import pytest
import torch

from agsloc import checkpoint as ck
from agsloc.data import NormStats
from agsloc.graph import EdgeMask
from agsloc.temporal import AGCRNConfig, AGFormerConfig, build_model


def _model(cfg):
    m = build_model(cfg, seed=5)
    keep = torch.rand(cfg.num_nodes, cfg.num_nodes, generator=torch.Generator().manual_seed(1)) < 0.5
    m.mask = EdgeMask.from_binary(keep | torch.eye(cfg.num_nodes, dtype=torch.bool))
    return m


@pytest.mark.parametrize("cfg", [AGCRNConfig(num_nodes=5, hidden_dim=3, num_layers=2),
                                 AGFormerConfig(num_nodes=4, hidden_dim=4, num_heads=2)], ids=lambda c: c.arch)
def test_round_trip_is_bit_exact(tmp_path, cfg):
    m = _model(cfg)
    norm = NormStats(np.array([[0.1], [0.2], [0.3], [0.4], [0.5]])[:cfg.num_nodes], np.full((cfg.num_nodes, 1), 1.7))
    digest = ck.save(ck.Checkpoint(m, norm, None, {"note": "x", "value": 0.1}), tmp_path / "m.json")
    back = ck.load(tmp_path / "m.json")
    assert digest == ck.file_hash(tmp_path / "m.json")
    for k in m.params.names():
        assert back.model.params[k].dtype == m.params[k].dtype
        assert torch.equal(back.model.params[k], m.params[k])
    assert back.model.mask == m.mask
    assert np.array_equal(back.norm.mean, norm.mean) and np.array_equal(back.norm.std, norm.std)
    assert back.meta == {"note": "x", "value": 0.1}
    assert ck.dumps(back) == (tmp_path / "m.json").read_bytes()
    window = torch.randn(cfg.history, cfg.num_nodes, cfg.input_dim, dtype=torch.float64)
    assert torch.equal(back.model.predict(window), m.predict(window))


def test_optimizer_state_round_trip(tmp_path):
    m = _model(AGCRNConfig(num_nodes=3, hidden_dim=2))
    names = m.params.names()
    opt = torch.optim.Adam([m.params[k] for k in names], lr=0.1)
    for p in opt.param_groups[0]["params"]:
        p.grad = torch.ones_like(p)
    opt.step()
    state = ck.optimizer_state(opt, names)
    ck.save(ck.Checkpoint(m, None, state), tmp_path / "o.json")
    back = ck.load(tmp_path / "o.json").optimizer
    assert back["step"] == 1
    for k in names:
        assert torch.equal(back["exp_avg"][k], state["exp_avg"][k])


def test_corrupted_file_raises(tmp_path):
    path = tmp_path / "m.json"
    ck.save(ck.Checkpoint(_model(AGCRNConfig(num_nodes=3))), path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ck.CheckpointError):
        ck.load(path)
    with pytest.raises(ck.CheckpointError):
        ck.load(tmp_path / "absent.json")


@pytest.mark.parametrize("edit", ["version", "format", "shape", "base64", "missing_param", "mask_conflict"])
def test_invalid_documents_raise(tmp_path, edit):
    doc = ck.to_document(ck.Checkpoint(_model(AGCRNConfig(num_nodes=3))))
    if edit == "version":
        doc["version"] = 99
    elif edit == "format":
        doc["format"] = "other"
    elif edit == "shape":
        doc["params"]["embedding"] = ck.encode_array(np.zeros((2, 2)))
    elif edit == "base64":
        doc["params"]["embedding"]["data"] = "!!!"
    elif edit == "missing_param":
        del doc["params"]["head.bias"]
    elif edit == "mask_conflict":
        doc["mask"]["prune"] = ck.encode_array(np.ones((3, 3), dtype=bool))
    (tmp_path / "d.json").write_text(json.dumps(doc))
    with pytest.raises(ck.CheckpointError):
        ck.load(tmp_path / "d.json")


def test_mask_hash_tracks_mask():
    a = EdgeMask.all_ones(4)
    b = EdgeMask.from_binary(torch.eye(4, dtype=torch.bool))
    assert ck.mask_hash(a) == ck.mask_hash(a.copy())
    assert ck.mask_hash(a) != ck.mask_hash(b)

import json
import struct

import pytest
import torch

from cblm.checkpoint import MAGIC, load_checkpoint, read_header, save_checkpoint
from cblm.concepts import ConceptRegistry, concept_matrix, fit_normalization
from cblm.errors import CorruptCheckpoint
from cblm.model import CbModel, ModelConfig
from cblm.seqio import generate_synthetic_corpus


@pytest.fixture
def saved(tmp_path):
    m = CbModel(ModelConfig(layers=1, hidden_dim=32, heads=2, seed=4))
    m.norm_stats = fit_normalization(concept_matrix(generate_synthetic_corpus(20, seed=0)))
    m.registry = ConceptRegistry.default()
    m.extra = {"concept_max": [1.0] * 14}
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    return m, path


def test_roundtrip_bitwise(saved, tmp_path):
    m, path = saved
    back = load_checkpoint(path)
    for (n, p), (_, q) in zip(m.state_dict().items(), back.state_dict().items()):
        assert torch.equal(p, q), n
    assert back.cfg == m.cfg and back.registry == m.registry and back.extra == m.extra
    assert back.norm_stats.to_dict() == m.norm_stats.to_dict()
    again = tmp_path / "again.ckpt"
    save_checkpoint(back, again)
    assert again.read_bytes() == path.read_bytes()


@pytest.mark.parametrize("variant", ["C", "CC", "AR"])
def test_roundtrip_variants(variant, tmp_path):
    m = CbModel(ModelConfig(layers=1, hidden_dim=32, heads=2, variant=variant))
    save_checkpoint(m, tmp_path / "v.ckpt")
    back = load_checkpoint(tmp_path / "v.ckpt")
    assert back.variant == variant
    for (n, p), (_, q) in zip(m.state_dict().items(), back.state_dict().items()):
        assert torch.equal(p, q), n


def test_truncated(saved):
    _, path = saved
    data = path.read_bytes()
    path.write_bytes(data[:-7])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)
    path.write_bytes(data[:12])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CorruptCheckpoint, match="magic"):
        load_checkpoint(p)


def _rewrite_header(path, edit):
    header, payload = read_header(path)
    edit(header)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.write_bytes(MAGIC + struct.pack("<Q", len(head)) + head + payload)


def test_version_mismatch(saved):
    _, path = saved
    _rewrite_header(path, lambda h: h.update(format_version=99))
    with pytest.raises(CorruptCheckpoint, match="version 99"):
        load_checkpoint(path)


def test_payload_checksum(saved):
    _, path = saved
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptCheckpoint, match="checksum"):
        load_checkpoint(path)


def test_directory_mismatch(saved):
    _, path = saved
    _rewrite_header(path, lambda h: h["tensors"][0].update(name="renamed"))
    with pytest.raises(CorruptCheckpoint, match="directory"):
        load_checkpoint(path)

import json

import numpy as np
import pytest
import torch

from cblm.interpret import (EffectiveWeightMatrix, concept_contribution, counterfactual_rank, debug_report,
                            export_decoder_weights)
from cblm.seqio import AMINO_ACIDS, default_vocab, tokenize
from conftest import stats_model

V = default_vocab()
SEQ = "MKTAYIAKQRQISFVKSHFSRQ"


@pytest.fixture
def cb():
    return stats_model()


def test_export_shape_and_labels(cb):
    W = export_decoder_weights(cb)
    assert W.M.shape == (14, 33)
    assert W.concepts == cb.registry.names and W.tokens == list(V.tokens)
    with torch.no_grad():
        cb.concept_emb[3].zero_()
    assert np.all(export_decoder_weights(cb).M[3] == 0.0)


def test_exports(cb, tmp_path):
    W = export_decoder_weights(cb)
    W.to_csv(tmp_path / "w.csv")
    rows = (tmp_path / "w.csv").read_text().splitlines()
    assert len(rows) == 15 and len(rows[0].split(",")) == 34
    W.to_json(tmp_path / "w.json")
    back = json.loads((tmp_path / "w.json").read_text())
    np.testing.assert_array_equal(np.array(back["M"]), W.M)


@pytest.mark.parametrize("mode", ["inference", "intervened"])
def test_contribution_reconstructs_logits(cb, mode):
    ids = torch.tensor([tokenize(SEQ, max_len=None).ids])
    with torch.no_grad():
        c_star = cb(ids).c_hat * 3.0 - 0.5
        trace = cb(ids, mode=mode, c_star=c_star if mode == "intervened" else None)
    for t in (0, 5, len(SEQ)):
        contrib, unknown = concept_contribution(cb, trace, t)
        np.testing.assert_allclose(contrib.sum(0) + unknown, trace.logits[0, t].numpy(), atol=1e-10)
    again, _ = concept_contribution(cb, trace, 5)
    np.testing.assert_array_equal(again, concept_contribution(cb, trace, 5)[0])


def test_zero_concept_value_contributes_nothing(cb):
    ids = torch.tensor([tokenize(SEQ, max_len=None).ids])
    with torch.no_grad():
        c = cb(ids).c_hat.clone()
        c[0, 2] = 0.0
        trace = cb(ids, mode="intervened", c_star=c)
    contrib, _ = concept_contribution(cb, trace, 3)
    assert np.all(contrib[2] == 0.0)


def synthetic_weights(rows):
    tokens = list(V.tokens)
    M = np.zeros((len(rows), len(tokens)))
    for i, row in enumerate(rows):
        for aa, v in row.items():
            M[i, tokens.index(aa)] = v
    return EffectiveWeightMatrix(M, [f"c{i}" for i in range(len(rows))], tokens)


def test_counterfactual_rank():
    W = synthetic_weights([{"K": 2.0, "D": -2.0, "E": -1.0, "[MASK]": -9.0}])
    down = counterfactual_rank(W, 0, -1)
    up = counterfactual_rank(W, "c0", +1)
    assert down[:2] == ["D", "E"] and up[0] == "K"
    assert up == down[::-1]
    assert sorted(down) == sorted(AMINO_ACIDS)


def test_debug_report_flags_zero_row():
    healthy = synthetic_weights([{"A": 1.0, "F": -0.8}, {"K": 0.9}, {"W": 1.2}, {"D": -1.1}])
    assert debug_report(healthy)["flagged"] == []
    broken = synthetic_weights([{"A": 1.0, "F": -0.8}, {}, {"W": 1.2}, {"D": -1.1}])
    rep = debug_report(broken)
    assert rep["flagged"] == ["c1"]
    assert rep["tau"] == pytest.approx(0.05 * np.median([1.0, 0.0, 1.2, 1.1]))
    tiny = synthetic_weights([{"A": 1.0}, {"K": 0.04}, {"W": 1.2}, {"D": -1.1}])
    assert debug_report(tiny, reference=healthy)["flagged"] == ["c1"]


def test_debug_report_is_scale_free():
    W = synthetic_weights([{"A": 1.0}, {"K": 0.01}, {"W": 1.2}])
    scaled = EffectiveWeightMatrix(W.M * 1e4, W.concepts, W.tokens)
    assert debug_report(W)["flagged"] == debug_report(scaled)["flagged"] == ["c1"]


def test_debug_report_surfaces_val_mse(cb):
    cb.extra["concept_val_mse"] = {"gravy": 0.25}
    rep = debug_report(cb)
    entry = next(c for c in rep["concepts"] if c["name"] == "gravy")
    assert entry["val_mse"] == 0.25
    json.dumps(rep)

import math

import numpy as np
import pytest
import torch

from cblm.errors import LengthError, MissingConcepts, VariantError
from cblm.model import CbModel, ModelConfig, batch_ids, build_model
from cblm.seqio import default_vocab, tokenize
from conftest import tiny_model

V = default_vocab()


def ids_for(*seqs, max_len=None):
    return batch_ids([tokenize(s, max_len=max_len) for s in seqs])


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden_dim=63, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(concept_emb_dim=0)
    with pytest.raises(ValueError):
        ModelConfig(variant="XL")
    with pytest.raises(ValueError):
        ModelConfig(hidden_dim=16, heads=2, k=14)
    assert build_model({"variant": "C", "hidden_dim": 16, "heads": 2}).variant == "C"


def test_default_config():
    cfg = ModelConfig()
    assert (cfg.layers, cfg.hidden_dim, cfg.heads, cfg.max_len, cfg.concept_emb_dim, cfg.vocab_size) == (2, 64, 4, 128, 2, 33)


def test_parameter_shapes():
    m = CbModel(ModelConfig())
    assert m.tok_emb.weight.shape == (33, 64)
    assert m.concept_head.weight.shape == (14, 64)
    assert m.concept_emb.shape == (14, 2)
    assert m.decoder.weight.shape == (33, 14 * 2 + 64)
    assert m.decoder.bias is None
    for name, p in m.encoder.named_parameters():
        assert "bias" not in name or "norm" in name, name


def test_same_seed_same_init():
    a, b = tiny_model(seed=3), tiny_model(seed=3)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    assert not torch.equal(tiny_model(seed=4).tok_emb.weight, a.tok_emb.weight)


def test_encode_shape_and_determinism():
    m = tiny_model()
    ids = ids_for("ACDEFG", "KLM")
    H = m.encode(ids)
    assert H.shape == (2, 8, 8)
    assert torch.equal(H, m.encode(ids))


def test_padding_does_not_leak():
    m = tiny_model()
    ids = ids_for("ACDEF", "ACDEFGHIKL")
    H = m.encode(ids)
    # changing the embeddings at PAD positions leaves real positions untouched
    emb = m.embed(ids)
    emb2 = emb.clone()
    emb2[0, 7:] += 5.0
    H2 = m.encode(ids, inputs_embeds=emb2)
    assert torch.allclose(H[0, :7], H2[0, :7], atol=1e-12)


def test_length_error():
    m = tiny_model(max_len=8)
    with pytest.raises(LengthError):
        m(ids_for("A" * 10))
    with pytest.raises(LengthError):
        m.encode(ids_for("A" * 10))


def test_predict_concepts_zero_head():
    m = tiny_model()
    with torch.no_grad():
        m.concept_head.weight.zero_()
        m.concept_head.bias.copy_(torch.tensor([0.1, 0.2, 0.3, 0.4]))
    c = m(ids_for("ACDE", "WWWWWW")).c_hat
    assert c.shape == (2, 4)
    assert torch.allclose(c, torch.tensor([0.1, 0.2, 0.3, 0.4], dtype=c.dtype).expand(2, 4))


def test_known_embedding():
    m = tiny_model()
    c = torch.tensor([[0.0, 1.0, 0.5, 2.0]], dtype=torch.float64)
    z = m.known_embedding(c).view(1, 4, 2)
    assert torch.equal(z[0, 0], torch.zeros(2, dtype=torch.float64))
    assert torch.allclose(z[0, 1], m.concept_emb[1])
    assert torch.allclose(m.known_embedding(2 * c), 2 * m.known_embedding(c))


def test_unknown_embedding_positionwise():
    m = tiny_model()
    H = torch.randn(1, 5, 8, dtype=torch.float64)
    full = m.unknown_embedding(H)
    assert full.shape == H.shape
    H2 = H.clone()
    H2[0, 3] += 1.0
    changed = m.unknown_embedding(H2)
    keep = [0, 1, 2, 4]
    assert torch.equal(full[0, keep], changed[0, keep])


def test_decode_zero_weights_uniform():
    m = tiny_model()
    with torch.no_grad():
        m.decoder.weight.zero_()
    p = m(ids_for("ACDEF")).probs
    assert torch.allclose(p, torch.full_like(p, 1 / 33), atol=1e-15)


def test_decode_additivity_and_shift_invariance():
    m = tiny_model()
    z = torch.randn(2, 8, dtype=torch.float64)
    h = torch.randn(2, 3, 8, dtype=torch.float64)
    zero_z, zero_h = torch.zeros_like(z), torch.zeros_like(h)
    lhs = m.decode(z, h)
    rhs = m.decode(z, zero_h) + m.decode(zero_z, h) - m.decode(zero_z, zero_h)
    assert torch.allclose(lhs, rhs, atol=1e-12)
    assert torch.allclose(torch.softmax(lhs, -1), torch.softmax(lhs + 3.7, -1), atol=1e-12)


def test_forward_modes():
    m = tiny_model()
    ids = ids_for("ACDEFGH", "MKV")
    inf = m(ids)
    same = m(ids, mode="intervened", c_star=inf.c_hat)
    assert torch.equal(inf.logits, same.logits)
    c = torch.rand(2, 4, dtype=torch.float64)
    tr = m(ids, concepts=c, mode="train_independent")
    assert torch.equal(inf.h_tilde, same.h_tilde) and torch.equal(inf.h_tilde, tr.h_tilde)
    assert torch.equal(tr.c_used, c)
    probs = inf.probs.sum(-1)
    assert torch.allclose(probs, torch.ones_like(probs), atol=1e-6)


def test_train_independent_bypasses_concept_head():
    m = tiny_model()
    ids = ids_for("ACDEFGH")
    c = torch.rand(1, 4, dtype=torch.float64)
    before = m(ids, concepts=c, mode="train_independent").logits
    with torch.no_grad():
        m.concept_head.weight.add_(1.0)
    after = m(ids, concepts=c, mode="train_independent").logits
    assert torch.equal(before, after)
    # partially observed concepts fall back to c_hat
    obs = torch.tensor([[True, False, True, True]])
    tr = m(ids, concepts=c, observed=obs, mode="train_independent")
    assert tr.c_used[0, 1] == tr.c_hat[0, 1] and tr.c_used[0, 0] == c[0, 0]


def test_missing_concepts():
    with pytest.raises(MissingConcepts):
        tiny_model()(ids_for("ACD"), mode="train_independent")
    with pytest.raises(ValueError):
        tiny_model()(ids_for("ACD"), mode="bogus")


def test_intervention_changes_only_concept_slice():
    m = tiny_model()
    ids = ids_for("ACDEFGH")
    tr = m(ids)
    c_star = tr.c_hat.clone()
    c_star[0, 2] += 1.0
    new = m(ids, mode="intervened", c_star=c_star)
    M = m.effective_concept_weights()
    assert torch.allclose(new.logits - tr.logits, M[2].expand_as(tr.logits[0])[None], atol=1e-12)


def test_conditional_variants():
    for variant in ("C", "CC"):
        m = tiny_model(variant)
        ids = ids_for("ACDEFGH")
        seen = {}
        handle = m.encoder.register_forward_hook(lambda mod, args, out: seen.update(n=args[0].shape[1]))
        c = torch.rand(1, 4, dtype=torch.float64)
        a = m(ids, concepts=c)
        handle.remove()
        assert seen["n"] == ids.shape[1] + 4
        assert a.logits.shape == (1, ids.shape[1], 33)
        c2 = c.clone()
        c2[0, 1] += 0.5
        assert not torch.equal(a.logits, m(ids, concepts=c2).logits)
        if variant == "CC":
            assert a.c_hat.shape == (1, 4)
        else:
            assert a.c_hat is None
    with pytest.raises(VariantError):
        tiny_model("C").known_embedding(torch.zeros(1, 4))


def test_missing_tags_use_missing_embedding():
    m = tiny_model("C")
    ids = ids_for("ACDEFGH")
    none = m(ids).logits
    unobserved = m(ids, concepts=torch.rand(1, 4, dtype=torch.float64), observed=torch.zeros(1, 4, dtype=torch.bool)).logits
    assert torch.equal(none, unobserved)


def test_autoregressive_causal():
    m = tiny_model("AR")
    ids = ids_for("ACDEFGHIK")
    lp = m.forward_autoregressive(ids)
    assert torch.allclose(lp.exp().sum(-1), torch.ones(1, ids.shape[1], dtype=lp.dtype), atol=1e-12)
    ids2 = ids.clone()
    ids2[0, 5] = V.index["W"]
    lp2 = m.forward_autoregressive(ids2)
    assert torch.equal(lp[0, :5], lp2[0, :5])
    assert not torch.equal(lp[0, 5:], lp2[0, 5:])
    assert torch.equal(lp, m.forward_autoregressive(ids))
    with pytest.raises(VariantError):
        m(ids)


def test_embedding_noise():
    m = tiny_model()
    emb = torch.zeros(1, 100_000, 1, dtype=torch.float64)
    assert torch.equal(m.add_embedding_noise(emb, 0.0, None), emb)
    g = torch.Generator().manual_seed(0)
    noisy = m.add_embedding_noise(emb, 0.1, g)
    n = noisy.numel()
    assert abs(float(noisy.mean())) < 3 * 0.1 / math.sqrt(n)
    assert float(noisy.std()) == pytest.approx(0.1, rel=0.02)
    # inference never adds noise
    ids = ids_for("ACDEFG")
    m.train()
    assert torch.equal(m(ids).logits, m(ids).logits)


def test_effective_weights():
    m = tiny_model()
    M = m.effective_concept_weights()
    assert M.shape == (4, 33)
    with torch.no_grad():
        m.concept_emb[1].zero_()
    assert torch.equal(m.effective_concept_weights()[1], torch.zeros(33, dtype=M.dtype))
    with torch.no_grad():
        m.concept_emb[2].mul_(2.0)
    assert torch.allclose(m.effective_concept_weights()[2], 2 * M[2])
    w = m.decoder.weight[:, :8].reshape(33, 4, 2)
    expected = np.einsum("tkc,kc->kt", w.detach().numpy(), m.concept_emb.detach().numpy())
    np.testing.assert_allclose(m.effective_concept_weights().detach().numpy(), expected, atol=1e-14)

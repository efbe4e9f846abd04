import io
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cblm.errors import FormatError, InvalidProfile, InvalidSequence, NothingToMask
from cblm.seqio import (AMINO_ACIDS, MaskPlan, TokenSequence, Vocabulary, apply_mask, default_vocab, detokenize,
                        generate_synthetic_corpus, parse_fasta, tokenize, write_fasta)

V = default_vocab()
canonical = st.text(alphabet=AMINO_ACIDS, min_size=1, max_size=60)


def test_vocabulary_layout():
    assert V.size == 33
    assert (V.cls, V.pad, V.eos, V.unk, V.mask) == (0, 1, 2, 3, 32)
    assert [V.tokens[i] for i in range(4, 24)] == list(AMINO_ACIDS)
    assert V.tokens[24:31] == ["X", "B", "U", "Z", "O", ".", "-"]
    assert len(set(V.tokens)) == V.size
    assert len(V.special_ids) == 5


def test_vocabulary_file_roundtrip(tmp_path):
    V.to_file(tmp_path / "vocab.txt")
    again = Vocabulary.from_file(tmp_path / "vocab.txt")
    assert again.tokens == V.tokens


def test_vocabulary_requires_amino_acids():
    with pytest.raises(ValueError):
        Vocabulary(["[CLS]", "[PAD]", "[EOS]", "[UNK]", "[MASK]", "A"])


def test_tokenize_framing():
    ts = tokenize("ACD", max_len=8)
    a, c, d = (V.index[x] for x in "ACD")
    assert ts.ids == (V.cls, a, c, d, V.eos, V.pad, V.pad, V.pad)
    assert ts.pad_start == 5
    assert ts.residue_positions == [1, 2, 3]


def test_tokenize_unknown_letter():
    ts = tokenize("ACJ", max_len=None)
    assert ts.ids[3] == V.unk


def test_tokenize_truncates():
    ts = tokenize("A" * 20, max_len=10)
    assert len(ts) == 10
    assert detokenize(ts) == "A" * 8


def test_tokenize_empty():
    with pytest.raises(InvalidSequence):
        tokenize("")
    with pytest.raises(InvalidSequence):
        tokenize("   ")


@given(canonical)
def test_roundtrip(seq):
    assert detokenize(tokenize(seq, max_len=64)) == seq


def test_detokenize_examples():
    g = V.index["G"]
    assert detokenize(TokenSequence((V.cls, g, g, V.eos))) == "GG"
    assert detokenize(TokenSequence((V.cls, V.mask, V.eos))) == "?"


@pytest.mark.parametrize("ids", [(4, 5, 2), (0, 4, 5), (0, 4, 2, 4), (0, 1, 4, 2)])
def test_detokenize_bad_framing(ids):
    with pytest.raises(InvalidSequence):
        detokenize(TokenSequence(ids))


def test_token_sequence_invariants():
    with pytest.raises(ValueError):
        TokenSequence((V.eos, 4))


def test_parse_fasta_multiline():
    assert parse_fasta(io.StringIO(">a\nAC\nDE\n")) == [("a", "ACDE")]


def test_parse_fasta_empty_record_warns(caplog):
    with caplog.at_level(logging.WARNING):
        recs = parse_fasta(io.StringIO(">a\n\n>b\nG\n"))
    assert recs == [("a", ""), ("b", "G")]
    assert "empty" in caplog.text


def test_parse_fasta_crlf_and_terminator():
    lf = parse_fasta(io.StringIO(">x desc\nMK T\nAY*\n>y\nGG\n"))
    crlf = parse_fasta(io.StringIO(">x desc\r\nMK T\r\nAY*\r\n>y\r\nGG\r\n"))
    assert lf == crlf == [("x desc", "MKTAY"), ("y", "GG")]


def test_parse_fasta_data_before_header():
    with pytest.raises(FormatError):
        parse_fasta(io.StringIO("ACD\n>a\nG\n"))


@given(st.lists(canonical, min_size=1, max_size=8))
def test_fasta_write_parse(seqs):
    buf = io.StringIO()
    write_fasta([(f"s{i}", s) for i, s in enumerate(seqs)], buf, width=7)
    recs = parse_fasta(io.StringIO(buf.getvalue()))
    assert len(recs) == len(seqs)
    assert [s for _, s in recs] == seqs


def test_mask_full_rate():
    ts = tokenize("ACDEF", max_len=10)
    masked, plan = apply_mask(ts, 1.0, rng_seed=3)
    assert detokenize(masked) == "?????"
    assert plan.positions == frozenset(range(1, 6))


def test_mask_explicit_plan():
    masked, _ = apply_mask(tokenize("ACDE", max_len=None), {1, 3})
    assert detokenize(masked) == "?C?E"


def test_mask_deterministic():
    ts = tokenize("ACDEFGHIKLMNPQ", max_len=None)
    assert apply_mask(ts, 0.25, 11) == apply_mask(ts, 0.25, 11)


@given(canonical, st.floats(0.01, 1.0), st.integers(0, 2**31))
@settings(max_examples=60)
def test_mask_count_and_framing(seq, rate, seed):
    ts = tokenize(seq, max_len=80)
    masked, plan = apply_mask(ts, rate, seed)
    n = len(seq)
    assert len(plan.positions) == max(1, round(rate * n))
    assert all(1 <= p <= n for p in plan.positions)
    assert masked.ids[0] == V.cls and masked.ids[n + 1] == V.eos
    assert sum(t == V.mask for t in masked.ids) == len(plan.positions)


def test_mask_rejects_framing_positions():
    with pytest.raises(ValueError):
        apply_mask(tokenize("ACD", max_len=None), {0})


def test_mask_nothing_to_mask():
    with pytest.raises(NothingToMask):
        apply_mask(TokenSequence((V.cls, V.eos)), 0.5)


def test_mask_plan_rate_bounds():
    with pytest.raises(ValueError):
        MaskPlan(frozenset({1}), 0.0)


def test_synthetic_all_mass_on_a():
    seqs = generate_synthetic_corpus(20, (2, 9), bias={"A": 1.0}, seed=1)
    assert all(set(s) == {"A"} for s in seqs)
    assert all(2 <= len(s) <= 9 for s in seqs)


def test_synthetic_uniform_frequencies():
    seqs = generate_synthetic_corpus(1000, (30, 60), bias=[0.05] * 20, seed=5)
    joined = "".join(seqs)
    freqs = np.array([joined.count(a) for a in AMINO_ACIDS]) / len(joined)
    assert np.all(np.abs(freqs - 0.05) <= 0.02)


def test_synthetic_deterministic():
    assert generate_synthetic_corpus(30, seed=9) == generate_synthetic_corpus(30, seed=9)
    assert generate_synthetic_corpus(30, seed=9) != generate_synthetic_corpus(30, seed=10)
    a = generate_synthetic_corpus(30, seed=9, concentration=20.0)
    assert a == generate_synthetic_corpus(30, seed=9, concentration=20.0)


def test_synthetic_bad_profile():
    with pytest.raises(InvalidProfile):
        generate_synthetic_corpus(5, bias=[0.06] * 20)
    with pytest.raises(InvalidProfile):
        generate_synthetic_corpus(5, bias={"A": 0.5, "J": 0.5})
    with pytest.raises(ValueError):
        generate_synthetic_corpus(5, len_range=(1, 4))

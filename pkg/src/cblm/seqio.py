"""Vocabulary, tokenization, FASTA ingestion, masking and synthetic corpora."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import FormatError, InvalidProfile, InvalidSequence, NothingToMask

logger = logging.getLogger(__name__)

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
DEFAULT_MAX_LEN = 512

# UniProtKB/Swiss-Prot background composition (percent), renormalized on use.
BACKGROUND_FREQUENCIES = {
    "A": 8.25, "R": 5.53, "N": 4.06, "D": 5.45, "C": 1.37, "Q": 3.93, "E": 6.75,
    "G": 7.07, "H": 2.27, "I": 5.96, "L": 9.66, "K": 5.84, "M": 2.42, "F": 3.86,
    "P": 4.70, "S": 6.56, "T": 5.34, "W": 1.08, "Y": 2.92, "V": 6.87,
}


class Vocabulary:
    """Token <-> id bijection loaded from a one-token-per-line file."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        missing = [a for a in AMINO_ACIDS if a not in self.index]
        if missing:
            raise ValueError(f"vocabulary lacks amino acids {missing}")
        self.cls = self.index["[CLS]"]
        self.pad = self.index["[PAD]"]
        self.eos = self.index["[EOS]"]
        self.unk = self.index["[UNK]"]
        self.mask = self.index["[MASK]"]
        self.special_ids = frozenset({self.cls, self.pad, self.eos, self.unk, self.mask})
        self.amino_acid_ids = np.array([self.index[a] for a in AMINO_ACIDS])

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_file(cls, path) -> "Vocabulary":
        with open(path) as fh:
            return cls([line.rstrip("\n") for line in fh if line.strip()])

    def to_file(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.tokens) + "\n")


@lru_cache(maxsize=None)
def default_vocab() -> Vocabulary:
    text = resources.files("cblm").joinpath("data/vocab.txt").read_text()
    return Vocabulary([line for line in text.splitlines() if line.strip()])


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    def __post_init__(self):
        vocab = default_vocab()
        ids = self.ids
        if not ids or ids[0] != vocab.cls:
            raise InvalidSequence("token sequence must start with CLS")
        if ids.count(vocab.eos) != 1 or vocab.cls in ids[1:]:
            raise InvalidSequence("token sequence needs exactly one EOS and no inner CLS")
        end = ids.index(vocab.eos)
        if vocab.pad in ids[:end] or any(t != vocab.pad for t in ids[end + 1:]):
            raise InvalidSequence("PAD may only follow EOS")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def pad_start(self) -> int:
        pad = default_vocab().pad
        for i, t in enumerate(self.ids):
            if t == pad:
                return i
        return len(self.ids)

    @property
    def residue_positions(self) -> list[int]:
        """Indices strictly between CLS and EOS."""
        vocab = default_vocab()
        return [i for i, t in enumerate(self.ids) if t not in (vocab.cls, vocab.eos, vocab.pad)]

    def replace(self, positions: Iterable[int], token_ids) -> "TokenSequence":
        positions = list(positions)
        if np.isscalar(token_ids):
            token_ids = [token_ids] * len(positions)
        ids = list(self.ids)
        for p, t in zip(positions, token_ids, strict=True):
            ids[p] = int(t)
        return TokenSequence(tuple(ids))


@dataclass(frozen=True)
class MaskPlan:
    positions: frozenset[int]
    rate: float

    def __post_init__(self):
        if not 0.0 < self.rate <= 1.0:
            raise ValueError(f"mask rate must be in (0, 1], got {self.rate}")


def tokenize(sequence: str, max_len: int | None = DEFAULT_MAX_LEN, vocab: Vocabulary | None = None) -> TokenSequence:
    """Frame ``sequence`` as CLS + residues + EOS, padded to ``max_len``.

    Residues beyond ``max_len - 2`` are truncated; unknown letters map to UNK.
    ``max_len=None`` returns the framed sequence without padding.
    """
    vocab = vocab or default_vocab()
    sequence = sequence.strip().upper()
    if not sequence:
        raise InvalidSequence("empty sequence")
    if max_len is not None:
        if max_len < 3:
            raise ValueError("max_len must leave room for CLS, one residue and EOS")
        sequence = sequence[: max_len - 2]
    ids = [vocab.cls] + [vocab.index.get(ch, vocab.unk) for ch in sequence] + [vocab.eos]
    if max_len is not None:
        ids += [vocab.pad] * (max_len - len(ids))
    return TokenSequence(tuple(ids))


def detokenize(ts: TokenSequence, vocab: Vocabulary | None = None) -> str:
    vocab = vocab or default_vocab()
    ids = list(ts.ids)
    if not ids or ids[0] != vocab.cls:
        raise InvalidSequence("sequence does not start with CLS")
    try:
        end = ids.index(vocab.eos)
    except ValueError:
        raise InvalidSequence("sequence has no EOS") from None
    if any(t != vocab.pad for t in ids[end + 1:]):
        raise InvalidSequence("non-PAD token after EOS")
    body = ids[1:end]
    if vocab.cls in body or vocab.pad in body:
        raise InvalidSequence("CLS or PAD inside sequence body")
    out = []
    for t in body:
        if t == vocab.mask:
            out.append("?")
        elif t == vocab.unk:
            out.append("X")
        else:
            out.append(vocab.tokens[t])
    return "".join(out)


def parse_fasta(stream: TextIO) -> list[tuple[str, str]]:
    records: list[tuple[str, str]] = []
    header = None
    chunks: list[str] = []

    def flush():
        seq = "".join(chunks).replace("*", "")
        if not seq:
            logger.warning("FASTA record %r has an empty sequence", header)
        records.append((header, seq))

    for lineno, raw in enumerate(stream, 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(">"):
            if header is not None:
                flush()
            header = line[1:].strip()
            chunks = []
        else:
            if header is None:
                raise FormatError(f"line {lineno}: sequence data before any '>' header")
            chunks.append("".join(line.split()).upper())
    if header is not None:
        flush()
    return records


def write_fasta(records: Iterable[tuple[str, str]], stream: TextIO, width: int = 60) -> None:
    for header, seq in records:
        stream.write(f">{header}\n")
        for i in range(0, len(seq), width):
            stream.write(seq[i:i + width] + "\n")


def apply_mask(ts: TokenSequence, plan_or_rate, rng_seed: int = 0) -> tuple[TokenSequence, MaskPlan]:
    """Replace a set of residue positions with MASK.

    ``plan_or_rate`` is either a ``MaskPlan``/iterable of positions or a rate in
    (0, 1]; with a rate the count is ``max(1, round(rate * n_maskable))``.
    """
    vocab = default_vocab()
    maskable = ts.residue_positions
    if not maskable:
        raise NothingToMask("sequence has no maskable positions")
    if isinstance(plan_or_rate, (int, float)) and not isinstance(plan_or_rate, bool):
        rate = float(plan_or_rate)
        if not 0.0 < rate <= 1.0:
            raise ValueError(f"mask rate must be in (0, 1], got {rate}")
        count = max(1, int(round(rate * len(maskable))))
        rng = np.random.default_rng(rng_seed)
        chosen = rng.choice(len(maskable), size=count, replace=False)
        plan = MaskPlan(frozenset(maskable[i] for i in chosen), rate)
    else:
        if isinstance(plan_or_rate, MaskPlan):
            plan = plan_or_rate
        else:
            positions = frozenset(int(p) for p in plan_or_rate)
            plan = MaskPlan(positions, max(len(positions), 1) / len(maskable) if positions else 1.0)
        bad = plan.positions - set(maskable)
        if bad:
            raise ValueError(f"positions {sorted(bad)} are not residue positions")
    positions = sorted(plan.positions)
    return ts.replace(positions, [vocab.mask] * len(positions)), plan


def _check_profile(bias) -> np.ndarray:
    if bias is None:
        bias = BACKGROUND_FREQUENCIES
        probs = np.array([bias[a] for a in AMINO_ACIDS], dtype=float)
        return probs / probs.sum()
    if isinstance(bias, dict):
        unknown = set(bias) - set(AMINO_ACIDS)
        if unknown:
            raise InvalidProfile(f"profile has non-canonical residues {sorted(unknown)}")
        probs = np.array([float(bias.get(a, 0.0)) for a in AMINO_ACIDS])
    else:
        probs = np.asarray(bias, dtype=float)
        if probs.shape != (20,):
            raise InvalidProfile("profile must have 20 entries")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-6:
        raise InvalidProfile(f"profile must be non-negative and sum to 1 (sum={probs.sum():.8f})")
    return probs


def generate_synthetic_corpus(
    n: int,
    len_range: tuple[int, int] = (30, 60),
    bias=None,
    seed: int = 0,
    concentration: float | None = None,
) -> list[str]:
    """Draw ``n`` random protein-like sequences.

    Lengths are uniform over the inclusive ``len_range``. Residues are drawn from
    ``bias`` (a residue->probability dict or 20-vector; ``None`` is the background
    composition). With ``concentration`` set, each sequence first draws its own
    composition from a Dirichlet centred on ``bias``, which spreads concept values.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = len_range
    if lo < 2 or hi < lo:
        raise ValueError(f"invalid length range {len_range}")
    probs = _check_profile(bias)
    support = np.flatnonzero(probs > 0)
    letters = np.array(list(AMINO_ACIDS))
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        length = int(rng.integers(lo, hi + 1))
        p = probs[support]
        if concentration is not None and len(support) > 1:
            p = rng.dirichlet(concentration * p)
        out.append("".join(letters[support[rng.choice(len(support), size=length, p=p)]]))
    return out

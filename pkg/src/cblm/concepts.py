"""Sequence-level biophysical concepts, their registry and [0, 1] normalization.

All calculators drop non-canonical residues (X, B, Z, U, O, ...) before
computing, and read their constants from the TSV tables under ``data/``.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateConcept, EmptyAfterFilter
from .seqio import AMINO_ACIDS

logger = logging.getLogger(__name__)

WATER_MASS = 18.0153
EXT_TRP = 5500.0
EXT_TYR = 1490.0
EXT_CYSTINE = 125.0

HELIX = frozenset("VIYFWL")
TURN = frozenset("NPGS")
SHEET = frozenset("EMAL")
AROMATIC = frozenset("FWY")


def _read_tsv(name: str) -> list[dict]:
    text = resources.files("cblm").joinpath(f"data/{name}").read_text()
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    return list(csv.DictReader(lines, delimiter="\t"))


@lru_cache(maxsize=None)
def residue_table(name: str) -> dict[str, float]:
    """A residue -> value table, e.g. ``kyte_doolittle`` or ``residue_masses``."""
    return {row["residue"]: float(row["value"]) for row in _read_tsv(f"{name}.tsv")}


@lru_cache(maxsize=None)
def diwv_table() -> dict[tuple[str, str], float]:
    return {(r["first"], r["second"]): float(r["value"]) for r in _read_tsv("diwv.tsv")}


@lru_cache(maxsize=None)
def pka_table() -> list[tuple[str, int, float]]:
    return [(r["group"], int(r["sign"]), float(r["pka"])) for r in _read_tsv("pka.tsv")]


def canonical(seq: str) -> str:
    clean = "".join(ch for ch in seq.upper() if ch in AMINO_ACIDS)
    if not clean:
        raise EmptyAfterFilter(f"no canonical residues in {seq!r}")
    return clean


def gravy(seq: str) -> float:
    s = canonical(seq)
    kd = residue_table("kyte_doolittle")
    return sum(kd[a] for a in s) / len(s)


def aromaticity(seq: str) -> float:
    s = canonical(seq)
    return sum(a in AROMATIC for a in s) / len(s)


def _charge_from_counts(counts: Counter, ph: float) -> float:
    total = 0.0
    for group, sign, pka in pka_table():
        n = 1 if group in ("Nterm", "Cterm") else counts.get(group, 0)
        if not n:
            continue
        if sign > 0:
            total += n / (1.0 + 10.0 ** (ph - pka))
        else:
            total -= n / (1.0 + 10.0 ** (pka - ph))
    return total


def charge_at_ph(seq: str, ph: float) -> float:
    """Net Henderson-Hasselbalch charge including both termini."""
    return _charge_from_counts(Counter(canonical(seq)), ph)


def _pi_from_counts(counts: Counter, tol: float = 1e-3, max_iter: int = 100) -> float:
    lo, hi = 0.0, 14.0
    mid = 7.0
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        q = _charge_from_counts(counts, mid)
        if abs(q) < tol:
            break
        if q > 0:
            lo = mid
        else:
            hi = mid
    return mid


def isoelectric_point(seq: str) -> float:
    return _pi_from_counts(Counter(canonical(seq)))


def molecular_weight(seq: str) -> float:
    s = canonical(seq)
    masses = residue_table("residue_masses")
    return sum(masses[a] for a in s) + WATER_MASS


def instability_index(seq: str) -> float:
    s = canonical(seq)
    diwv = diwv_table()
    score = sum(diwv[s[i], s[i + 1]] for i in range(len(s) - 1))
    return 10.0 / len(s) * score


def secondary_structure_fractions(seq: str) -> tuple[float, float, float]:
    """(helix, turn, sheet) residue-set frequencies. L belongs to helix and sheet."""
    s = canonical(seq)
    n = len(s)
    return (
        sum(a in HELIX for a in s) / n,
        sum(a in TURN for a in s) / n,
        sum(a in SHEET for a in s) / n,
    )


def molar_extinction(seq: str) -> tuple[float, float]:
    s = canonical(seq)
    reduced = EXT_TRP * s.count("W") + EXT_TYR * s.count("Y")
    return reduced, reduced + EXT_CYSTINE * (s.count("C") // 2)


def scale_average(seq: str, scale: str | dict[str, float]) -> float:
    """Unwindowed mean of a residue scale (table name or mapping)."""
    s = canonical(seq)
    table = residue_table(scale) if isinstance(scale, str) else scale
    return sum(table[a] for a in s) / len(s)


def _hydrophilicity(seq):
    return scale_average(seq, "hopp_woods")


def _surface_accessibility(seq):
    return scale_average(seq, "emini")


BUILTIN_CALCULATORS: dict[str, Callable[[str], float]] = {
    "molecular_weight": molecular_weight,
    "charge_ph6": lambda s: charge_at_ph(s, 6.0),
    "charge_ph7": lambda s: charge_at_ph(s, 7.0),
    "isoelectric_point": isoelectric_point,
    "aromaticity": aromaticity,
    "instability_index": instability_index,
    "helix_fraction": lambda s: secondary_structure_fractions(s)[0],
    "turn_fraction": lambda s: secondary_structure_fractions(s)[1],
    "sheet_fraction": lambda s: secondary_structure_fractions(s)[2],
    "extinction_reduced": lambda s: molar_extinction(s)[0],
    "extinction_oxidized": lambda s: molar_extinction(s)[1],
    "gravy": gravy,
    "hydrophilicity": _hydrophilicity,
    "surface_accessibility": _surface_accessibility,
}
BUILTIN_CONCEPTS = tuple(BUILTIN_CALCULATORS)


@dataclass(frozen=True)
class ConceptEntry:
    name: str
    kind: str = "real"  # real | categorical
    source: str = ""  # calculator id, or external annotation tag


@dataclass
class ConceptRegistry:
    entries: list[ConceptEntry] = field(default_factory=list)

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("concept names must be unique")
        head = tuple(names[: len(BUILTIN_CONCEPTS)])
        if head != BUILTIN_CONCEPTS:
            raise ValueError("the built-in concepts must come first, in canonical order")
        for e in self.entries:
            if e.kind not in ("real", "categorical"):
                raise ValueError(f"unknown concept kind {e.kind!r}")

    @classmethod
    def default(cls, extra: Iterable[ConceptEntry] = ()) -> "ConceptRegistry":
        builtins = [ConceptEntry(n, "real", n) for n in BUILTIN_CONCEPTS]
        return cls(builtins + list(extra))

    @property
    def k(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def resolve(self, concept: int | str) -> int:
        if isinstance(concept, str):
            return self.index(concept) if concept in self.names else int(concept)
        return int(concept)

    def to_dict(self) -> list[dict]:
        return [{"name": e.name, "kind": e.kind, "source": e.source} for e in self.entries]

    @classmethod
    def from_dict(cls, data: list[dict]) -> "ConceptRegistry":
        return cls([ConceptEntry(**d) for d in data])


@dataclass
class ConceptVector:
    values: np.ndarray
    observed: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.values.shape != self.observed.shape:
            raise ValueError("values and observed must have the same shape")
        self.values = np.where(self.observed, self.values, 0.0)
        if self.normalized and np.any((self.values[self.observed] < 0) | (self.values[self.observed] > 1)):
            raise ValueError("normalized concept values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.values)


def compute_all(seq: str, registry: ConceptRegistry | None = None, annotations: dict[str, float] | None = None) -> ConceptVector:
    """Unnormalized concept vector in registry order.

    Categorical entries are observed only when ``annotations`` supplies them.
    """
    registry = registry or ConceptRegistry.default()
    annotations = annotations or {}
    values = np.zeros(registry.k)
    observed = np.zeros(registry.k, dtype=bool)
    for i, entry in enumerate(registry.entries):
        if entry.source in BUILTIN_CALCULATORS:
            values[i] = BUILTIN_CALCULATORS[entry.source](seq)
            observed[i] = True
        elif entry.name in annotations:
            values[i] = annotations[entry.name]
            observed[i] = True
    return ConceptVector(values, observed)


def concept_matrix(seqs: Sequence[str]) -> np.ndarray:
    """Raw values of the 14 built-in concepts for each sequence, shape (n, 14).

    Same numbers as the individual calculators, but counts each sequence once.
    """
    kd = residue_table("kyte_doolittle")
    hw = residue_table("hopp_woods")
    em = residue_table("emini")
    masses = residue_table("residue_masses")
    diwv = diwv_table()
    out = np.empty((len(seqs), len(BUILTIN_CONCEPTS)))
    for row, raw in enumerate(seqs):
        s = canonical(raw)
        n = len(s)
        counts = Counter(s)
        reduced = EXT_TRP * counts["W"] + EXT_TYR * counts["Y"]
        out[row] = (
            sum(masses[a] * c for a, c in counts.items()) + WATER_MASS,
            _charge_from_counts(counts, 6.0),
            _charge_from_counts(counts, 7.0),
            _pi_from_counts(counts),
            sum(counts[a] for a in AROMATIC) / n,
            10.0 / n * sum(diwv[s[i], s[i + 1]] for i in range(n - 1)),
            sum(counts[a] for a in HELIX) / n,
            sum(counts[a] for a in TURN) / n,
            sum(counts[a] for a in SHEET) / n,
            reduced,
            reduced + EXT_CYSTINE * (counts["C"] // 2),
            sum(kd[a] * c for a, c in counts.items()) / n,
            sum(hw[a] * c for a, c in counts.items()) / n,
            sum(em[a] * c for a, c in counts.items()) / n,
        )
    return out


@dataclass
class NormalizationStats:
    names: list[str]
    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        self.mins = np.asarray(self.mins, dtype=np.float64)
        self.maxs = np.asarray(self.maxs, dtype=np.float64)

    @property
    def degenerate(self) -> np.ndarray:
        return ~(self.maxs > self.mins)

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "min": [float(v) for v in self.mins],
            "max": [float(v) for v in self.maxs],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NormalizationStats":
        return cls(list(data["names"]), np.array(data["min"], dtype=np.float64), np.array(data["max"], dtype=np.float64))

    def normalize_matrix(self, raw: np.ndarray, clip: bool = True) -> np.ndarray:
        span = np.where(self.degenerate, 1.0, self.maxs - self.mins)
        out = (np.asarray(raw, dtype=np.float64) - self.mins) / span
        out = np.where(self.degenerate, 0.0, out)
        return np.clip(out, 0.0, 1.0) if clip else out

    def denormalize_matrix(self, norm: np.ndarray) -> np.ndarray:
        return self.mins + np.asarray(norm, dtype=np.float64) * (self.maxs - self.mins)


def fit_normalization(matrix: np.ndarray, names: Sequence[str] | None = None) -> NormalizationStats:
    matrix = np.asarray(matrix, dtype=np.float64)
    names = list(names) if names is not None else list(BUILTIN_CONCEPTS[: matrix.shape[1]])
    stats = NormalizationStats(names, matrix.min(axis=0), matrix.max(axis=0))
    for name, bad in zip(names, stats.degenerate):
        if bad:
            logger.warning("concept %s is degenerate on the reference corpus (max == min)", name)
    return stats


def normalize(cv: ConceptVector, stats: NormalizationStats, clip_degenerate: bool = False) -> ConceptVector:
    """Affine map to [0, 1]; out-of-range values are clipped with a warning."""
    obs = cv.observed.copy()
    n = min(len(stats.mins), len(cv))
    degenerate = stats.degenerate[:n] & obs[:n]
    if degenerate.any() and not clip_degenerate:
        bad = [stats.names[i] for i in np.flatnonzero(degenerate)]
        raise DegenerateConcept(f"cannot normalize degenerate concepts {bad}")
    values = cv.values.copy()
    raw = stats.normalize_matrix(values[:n], clip=False)
    outside = obs[:n] & ((raw < 0) | (raw > 1))
    if outside.any():
        logger.warning("clipping %d concept values outside the fitted range", int(outside.sum()))
    values[:n] = np.clip(raw, 0.0, 1.0)
    return ConceptVector(values, obs, normalized=True)


def denormalize(cv: ConceptVector, stats: NormalizationStats) -> ConceptVector:
    values = cv.values.copy()
    n = min(len(stats.mins), len(cv))
    values[:n] = stats.denormalize_matrix(values[:n])
    return ConceptVector(values, cv.observed.copy(), normalized=False)


def corrupt_scale(stats: NormalizationStats, name: str, factor: float) -> NormalizationStats:
    """Stats whose normalized output for ``name`` is divided by ``factor``.

    Reproduces a badly scaled concept: min/max fitting is affine-invariant, so
    the corruption is applied to the fitted span rather than the raw values.
    """
    i = stats.names.index(name)
    maxs = stats.maxs.copy()
    maxs[i] = stats.mins[i] + (stats.maxs[i] - stats.mins[i]) * factor
    return NormalizationStats(list(stats.names), stats.mins.copy(), maxs)

"""Sequences paired with their concept table, persisted as TSV."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .concepts import BUILTIN_CONCEPTS, NormalizationStats, concept_matrix, fit_normalization


@dataclass
class Corpus:
    sequences: list[str]
    raw: np.ndarray  # (n, k) unnormalized concept values
    names: list[str] = field(default_factory=lambda: list(BUILTIN_CONCEPTS))
    headers: list[str] | None = None
    observed: np.ndarray | None = None

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.raw.shape != (len(self.sequences), len(self.names)):
            raise ValueError(f"concept table shape {self.raw.shape} does not match corpus")
        if self.headers is None:
            self.headers = [f"seq{i}" for i in range(len(self.sequences))]
        if self.observed is None:
            self.observed = np.ones(self.raw.shape, dtype=bool)

    def __len__(self) -> int:
        return len(self.sequences)

    @classmethod
    def from_sequences(cls, sequences: Sequence[str], headers: Sequence[str] | None = None) -> "Corpus":
        sequences = list(sequences)
        return cls(sequences, concept_matrix(sequences), headers=list(headers) if headers else None)

    def subset(self, idx) -> "Corpus":
        idx = np.asarray(idx, dtype=int)
        return Corpus([self.sequences[i] for i in idx], self.raw[idx], list(self.names),
                      [self.headers[i] for i in idx], self.observed[idx])

    def split(self, val_fraction: float = 0.1) -> tuple["Corpus", "Corpus"]:
        """Deterministic (train, validation) split; validation is the index tail."""
        n_val = max(1, int(round(val_fraction * len(self)))) if len(self) > 1 else 0
        cut = len(self) - n_val
        return self.subset(range(cut)), self.subset(range(cut, len(self)))

    def fit_stats(self) -> NormalizationStats:
        return fit_normalization(self.raw, self.names)

    def normalized(self, stats: NormalizationStats) -> np.ndarray:
        return stats.normalize_matrix(self.raw, clip=True)

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(["header", "sequence", *self.names])
            for h, s, row in zip(self.headers, self.sequences, self.raw):
                writer.writerow([h, s, *(repr(float(v)) for v in row)])

    @classmethod
    def load(cls, path) -> "Corpus":
        with open(path, newline="") as fh:
            reader = csv.reader(fh, delimiter="\t")
            head = next(reader)
            rows = list(reader)
        names = head[2:]
        raw = np.array([[float(v) for v in r[2:]] for r in rows]) if rows else np.zeros((0, len(names)))
        return cls([r[1] for r in rows], raw, names, [r[0] for r in rows])


def save_stats(stats: NormalizationStats, path) -> None:
    Path(path).write_text(json.dumps(stats.to_dict(), indent=2) + "\n")


def load_stats(path) -> NormalizationStats:
    return NormalizationStats.from_dict(json.loads(Path(path).read_text()))

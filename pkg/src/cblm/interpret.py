"""Decoder-weight inspection: effective concept weights, contributions, debugging."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
import torch

from .concepts import ConceptRegistry
from .model import CbModel, ForwardTrace
from .seqio import AMINO_ACIDS, default_vocab


@dataclass
class EffectiveWeightMatrix:
    """``M[i, t] = W_dec[t, slice_i] . e_i`` with concept rows and token columns."""

    M: np.ndarray
    concepts: list[str]
    tokens: list[str]

    def row(self, concept: int | str) -> np.ndarray:
        i = self.concepts.index(concept) if isinstance(concept, str) else concept
        return self.M[i]

    def value(self, concept: int | str, token: str) -> float:
        return float(self.row(concept)[self.tokens.index(token)])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["concept", *self.tokens])
            for name, row in zip(self.concepts, self.M):
                w.writerow([name, *(f"{v:.8g}" for v in row)])

    def to_dict(self) -> dict:
        return {"concepts": self.concepts, "tokens": self.tokens, "M": self.M.tolist()}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def export_decoder_weights(model: CbModel) -> EffectiveWeightMatrix:
    registry = model.registry or ConceptRegistry.default()
    with torch.no_grad():
        M = model.effective_concept_weights().double().numpy()
    return EffectiveWeightMatrix(M, registry.names[: model.cfg.k], list(default_vocab().tokens))


def concept_contribution(model: CbModel, trace: ForwardTrace, position: int, row: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-concept additive logit contributions at one position.

    Returns ``(contrib, unknown)`` where ``contrib[i, t] = c_i * M[i, t]`` and
    ``unknown[t]`` is the unknown-slice term; ``contrib.sum(0) + unknown``
    equals the logits at ``position``.
    """
    with torch.no_grad():
        M = model.effective_concept_weights().double()
        c = trace.c_used[row].double()
        w_unknown = model.decoder.weight[:, model.concept_dim:].double()
        unknown = w_unknown @ trace.h_tilde[row, position].double()
    return (c[:, None] * M).numpy(), unknown.numpy()


def counterfactual_rank(model_or_weights, concept: int | str, direction: int) -> list[str]:
    """Amino acids ordered by how strongly they move ``concept`` in ``direction``.

    Decrease (-1) sorts ascending by effective weight, increase (+1) descending.
    """
    W = model_or_weights if isinstance(model_or_weights, EffectiveWeightMatrix) else export_decoder_weights(model_or_weights)
    row = W.row(concept)
    values = [(row[W.tokens.index(a)], a) for a in AMINO_ACIDS]
    ranked = sorted(values, key=lambda t: (t[0], t[1]))
    names = [a for _, a in ranked]
    return names if direction < 0 else names[::-1]


def debug_report(model_or_weights, concept_val_mse: dict[str, float] | None = None,
                 tau_fraction: float = 0.05, reference: EffectiveWeightMatrix | None = None) -> dict:
    """Flag concepts whose outgoing decoder weights are all near zero.

    The threshold is ``tau_fraction`` times the median, over concepts, of each
    row's largest absolute effective weight (from ``reference`` if given).
    """
    W = model_or_weights if isinstance(model_or_weights, EffectiveWeightMatrix) else export_decoder_weights(model_or_weights)
    if concept_val_mse is None and isinstance(model_or_weights, CbModel):
        concept_val_mse = (model_or_weights.extra or {}).get("concept_val_mse")
    strength = np.abs(W.M).max(axis=1)
    ref = np.abs(reference.M).max(axis=1) if reference is not None else strength
    tau = tau_fraction * float(np.median(ref))
    flagged = [name for name, s in zip(W.concepts, strength) if s < tau]
    return {
        "tau": tau,
        "tau_fraction": tau_fraction,
        "flagged": flagged,
        "concepts": [
            {"name": name, "max_abs_weight": float(s), "flagged": bool(s < tau),
             "val_mse": None if not concept_val_mse else concept_val_mse.get(name)}
            for name, s in zip(W.concepts, strength)
        ],
    }

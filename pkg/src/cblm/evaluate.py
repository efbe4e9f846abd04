"""Perplexity, intervention statistics, correlation matrices and naturalness."""
from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .concepts import BUILTIN_CONCEPTS
from .corpus import Corpus
from .errors import VariantError
from .intervene import InterventionRequest, InterventionResult, intervene_batch
from .model import CbModel
from .seqio import default_vocab, tokenize


@dataclass
class EvalReport:
    perplexity: float | None = None
    accuracy: dict[str, dict[str, float]] = field(default_factory=dict)
    mean_shift: dict[str, float] = field(default_factory=dict)
    ground_truth_correlation: list[list[float]] | None = None
    intervention_correlation: list[list[float]] | None = None
    concepts: list[str] = field(default_factory=lambda: list(BUILTIN_CONCEPTS))
    settings: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(_finite(asdict(self)), indent=2, sort_keys=True) + "\n"


def _finite(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def _sequence_seed(seed: int, seq: str) -> list[int]:
    return [seed, zlib.crc32(seq.encode())]


@torch.no_grad()
def masked_nll(model: CbModel, sequences: Sequence[str], mask_rate: float = 0.25, seed: int = 0,
               conditions: np.ndarray | None = None, batch_size: int = 128) -> tuple[float, int]:
    """Summed masked-token NLL and masked-token count.

    Each sequence's mask depends only on (seed, sequence), and sequences are
    processed in a canonical order, so the result does not depend on corpus order.
    """
    from .train import _trim, encode_corpus, random_mask

    vocab = default_vocab()
    order = sorted(range(len(sequences)), key=lambda i: (len(sequences[i]), sequences[i]))
    per_seq = []
    count = 0
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        seqs = [sequences[i] for i in idx]
        ids = _trim(encode_corpus(seqs, model.cfg.max_len))
        mask = np.zeros(ids.shape, dtype=bool)
        for r, s in enumerate(seqs):
            mask[r] = random_mask(ids[r:r + 1], mask_rate, np.random.default_rng(_sequence_seed(seed, s)))[0]
        t_ids = torch.as_tensor(ids)
        masked = t_ids.masked_fill(torch.as_tensor(mask), vocab.mask)
        if model.variant in ("C", "CC"):
            cond = None if conditions is None else torch.as_tensor(conditions[idx])
            logits = model(masked, concepts=cond).logits
        elif model.variant == "AR":
            raise VariantError("masked perplexity needs a masked LM")
        else:
            logits = model(masked).logits
        logp = torch.log_softmax(logits.double(), dim=-1)
        nll = -logp.gather(-1, t_ids[..., None])[..., 0]
        nll = torch.where(torch.as_tensor(mask), nll, torch.zeros_like(nll))
        per_seq.extend(nll.sum(-1).tolist())
        count += int(mask.sum())
    return math.fsum(per_seq), count


def perplexity(model: CbModel, corpus: Corpus | Sequence[str], mask_rate: float = 0.25, seed: int = 0,
               stats=None) -> float:
    """exp(mean masked-token NLL); C/CC models are given the true concept tags."""
    stats = stats if stats is not None else model.norm_stats
    if isinstance(corpus, Corpus):
        sequences = corpus.sequences
        conditions = None
        if model.variant in ("C", "CC") and stats is not None:
            conditions = corpus.normalized(stats)
    else:
        sequences, conditions = list(corpus), None
    if model.variant == "AR":
        total, count = autoregressive_nll(model, sequences)
    else:
        total, count = masked_nll(model, sequences, mask_rate, seed, conditions)
    return math.exp(total / count)


@torch.no_grad()
def autoregressive_nll(model: CbModel, sequences: Sequence[str]) -> tuple[float, int]:
    totals = naturalness_batch(model, sequences, reduce=False)
    return math.fsum(-t for t, _ in totals), sum(n for _, n in totals)


@torch.no_grad()
def naturalness_batch(ar_model: CbModel, sequences: Sequence, reduce: bool = True, batch_size: int = 128):
    """Mean next-token log-likelihood of residues and EOS for each sequence."""
    if ar_model.variant != "AR":
        raise VariantError("naturalness needs an AR model")
    vocab = default_vocab()
    framed = []
    for s in sequences:
        ids = tokenize(s, max_len=None).ids if isinstance(s, str) else tuple(s.ids)
        framed.append([t for t in ids if t != vocab.pad])
    out = [None] * len(framed)
    order = sorted(range(len(framed)), key=lambda i: (len(framed[i]), framed[i]))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        width = max(len(framed[i]) for i in idx)
        ids = torch.full((len(idx), width), vocab.pad, dtype=torch.long)
        for r, i in enumerate(idx):
            ids[r, : len(framed[i])] = torch.as_tensor(framed[i])
        logp = ar_model.forward_autoregressive(ids).double()
        target = ids[:, 1:]
        ll = logp[:, :-1].gather(-1, target[..., None])[..., 0]
        keep = target != vocab.pad
        for r, i in enumerate(idx):
            n = int(keep[r].sum())
            total = float(ll[r][keep[r]].sum())
            out[i] = total / n if reduce else (total, n)
    return out


def naturalness(ar_model: CbModel, sequence) -> float:
    return naturalness_batch(ar_model, [sequence])[0]


def intervention_accuracy(results: Sequence[InterventionResult]) -> tuple[float, float, float]:
    """(positive, negative, mean) fraction moved strictly in the requested direction.

    A direction with no samples scores NaN and the mean uses the other one.
    """
    acc = {}
    for d in (1, -1):
        rs = [r for r in results if r.direction == d]
        acc[d] = float(np.mean([np.sign(r.delta()) == d for r in rs])) if rs else float("nan")
    present = [v for v in acc.values() if not math.isnan(v)]
    return acc[1], acc[-1], float(np.mean(present)) if present else float("nan")


def mean_concept_shift(results: Sequence[InterventionResult], iteration: int = -1) -> float:
    """Mean of direction * change of the intervened concept (normalized units)."""
    if not results:
        return 0.0
    return float(np.mean([r.direction * r.delta(iteration=iteration) for r in results]))


def correlation_from_results(results_by_concept: dict[int, Sequence[InterventionResult]], k: int) -> np.ndarray:
    """Row i: fraction of concept j moving with the intervention on i minus fraction moving against."""
    mat = np.zeros((k, k))
    for i, results in results_by_concept.items():
        if not results:
            continue
        signs = np.array([[np.sign(r.delta(j)) * r.direction for j in range(k)] for r in results])
        mat[i] = (signs > 0).mean(0) - (signs < 0).mean(0)
    return mat


def extreme_subsets(corpus: Corpus, stats, concept: int, fraction: float = 0.2, limit: int | None = None):
    """(lowest, highest) sequences for a concept: + interventions use the low tail, - the high tail."""
    values = corpus.normalized(stats)[:, concept]
    order = np.lexsort((np.arange(len(values)), values))
    n = max(1, int(round(fraction * len(values))))
    if limit is not None:
        n = min(n, limit)
    low = [corpus.sequences[i] for i in order[:n]]
    high = [corpus.sequences[i] for i in order[::-1][:n]]
    return low, high


def run_single_concept(model: CbModel, corpus: Corpus, concept: int, n: int = 200, fraction: float = 0.2,
                       mask_fraction: float = 0.05, iterations: int = 1, method: str | None = None,
                       ar_model: CbModel | None = None, seed: int = 0) -> list[InterventionResult]:
    """+ interventions on the lowest-concept sequences and - on the highest."""
    low, high = extreme_subsets(corpus, model.norm_stats, concept, fraction, limit=n)
    results = []
    for direction, seqs in ((1, low), (-1, high)):
        req = InterventionRequest(concept=concept, direction=direction, mask_fraction=mask_fraction,
                                  iterations=iterations, method=method, seed=seed)
        results += intervene_batch(model, seqs, req, ar_model)
    return results


def intervention_correlation(model: CbModel, sequences: Sequence[str], concepts: Sequence[int] | None = None,
                             mask_fraction: float = 0.05, method: str | None = None, seed: int = 0) -> np.ndarray:
    """Binary intervention-correlation matrix over a sample of sequences.

    Every sequence gets one + and one - intervention per concept.
    """
    k = model.cfg.k
    concepts = range(min(k, len(BUILTIN_CONCEPTS))) if concepts is None else concepts
    by_concept = {}
    for i in concepts:
        res = []
        for d in (1, -1):
            req = InterventionRequest(concept=i, direction=d, mask_fraction=mask_fraction, method=method, seed=seed)
            res += intervene_batch(model, list(sequences), req)
        by_concept[i] = res
    return correlation_from_results(by_concept, k)


def ground_truth_concept_correlation(corpus: Corpus | np.ndarray) -> np.ndarray:
    raw = corpus.raw if isinstance(corpus, Corpus) else np.asarray(corpus)
    return np.corrcoef(raw, rowvar=False)


def write_shift_csv(results: Sequence[InterventionResult], path, concept_names: Sequence[str]) -> None:
    """One row per result and iteration: concept delta and naturalness delta."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["concept", "direction", "iteration", "concept_before", "concept_after", "delta",
                    "naturalness_before", "naturalness_after", "naturalness_delta"])
        for r in results:
            for it, after in enumerate(r.concept_after):
                nb = r.naturalness_before
                na = r.naturalness_after[it] if r.naturalness_after else None
                w.writerow([concept_names[r.concept], r.direction, it + 1,
                            f"{r.concept_before[r.concept]:.6f}", f"{after[r.concept]:.6f}",
                            f"{after[r.concept] - r.concept_before[r.concept]:.6f}",
                            "" if nb is None else f"{nb:.6f}", "" if na is None else f"{na:.6f}",
                            "" if nb is None or na is None else f"{na - nb:.6f}"])

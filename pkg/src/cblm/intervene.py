"""Token attribution, coordinate selection and concept interventions."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .concepts import ConceptRegistry, concept_matrix
from .errors import NothingToMask, UnsupportedConcept, VariantError
from .model import CbModel
from .seqio import TokenSequence, default_vocab, detokenize, tokenize

METHODS = ("occlusion", "gradient", "grad_x_input", "grad_x_input_minus_mask", "random")


@dataclass
class AttributionMatrix:
    """Scores per (position, concept); non-residue positions hold 0 and are never selected."""

    scores: np.ndarray
    method: str
    residue_mask: np.ndarray

    def column(self, concept: int) -> np.ndarray:
        return self.scores[:, concept]


@dataclass
class InterventionRequest:
    concept: int | str
    direction: int = 1
    target: float | None = None
    mask_fraction: float = 0.05
    iterations: int = 1
    decode: str = "greedy"
    temperature: float = 1.0
    seed: int = 0
    method: str | None = None
    positions: list[int] | None = None

    def __post_init__(self):
        if self.direction in ("+", "-"):
            self.direction = 1 if self.direction == "+" else -1
        if self.direction not in (1, -1):
            raise ValueError("direction must be +1/-1 or '+'/'-'")
        if not 0.0 < self.mask_fraction <= 1.0:
            raise ValueError("mask_fraction must be in (0, 1]")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.decode not in ("greedy", "sample"):
            raise ValueError("decode must be 'greedy' or 'sample'")
        if self.method is not None and self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")

    @property
    def target_value(self) -> float:
        if self.target is not None:
            return float(self.target)
        return 1.0 if self.direction > 0 else 0.0


@dataclass
class InterventionResult:
    input_sequence: str
    outputs: list[str]
    masked_positions: list[list[int]]
    concept_before: list[float]
    concept_after: list[list[float]]
    concept: int
    direction: int
    naturalness_before: float | None = None
    naturalness_after: list[float] | None = None
    steps: list[dict] = field(default_factory=list)

    @property
    def output(self) -> str:
        return self.outputs[-1]

    def delta(self, concept: int | None = None, iteration: int = -1) -> float:
        i = self.concept if concept is None else concept
        return self.concept_after[iteration][i] - self.concept_before[i]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _framed(x) -> TokenSequence:
    if isinstance(x, TokenSequence):
        return x
    if isinstance(x, str):
        return tokenize(x, max_len=None)
    return TokenSequence(tuple(int(t) for t in x))


def _batch(xs: Sequence) -> tuple[torch.Tensor, np.ndarray]:
    vocab = default_vocab()
    seqs = [_framed(x) for x in xs]
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), vocab.pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s.ids
    residues = (ids != vocab.cls) & (ids != vocab.eos) & (ids != vocab.pad)
    return torch.as_tensor(ids), residues


def _resolve_concept(model: CbModel, concept) -> int:
    registry = model.registry or ConceptRegistry.default()
    idx = registry.resolve(concept)
    if not 0 <= idx < model.cfg.k:
        raise ValueError(f"concept index {idx} out of range")
    if registry.entries[idx].kind != "real":
        raise UnsupportedConcept(f"concept {registry.entries[idx].name!r} is categorical")
    return idx


def _predict(model: CbModel, ids: torch.Tensor, inputs_embeds=None, condition=None) -> torch.Tensor:
    if model.variant not in ("CB", "CC"):
        raise VariantError(f"{model.variant} models do not predict concepts; use random attribution")
    if model.variant == "CC" and condition is not None:
        condition = torch.as_tensor(np.asarray(condition), dtype=model.tok_emb.weight.dtype)
        return model(ids, concepts=condition, inputs_embeds=inputs_embeds).c_hat
    return model(ids, inputs_embeds=inputs_embeds).c_hat


@torch.no_grad()
def occlusion_scores(model: CbModel, xs: Sequence, condition=None) -> np.ndarray:
    """(B, L, k) occlusion scores: c(x) - c(x with position t set to MASK).

    ``condition`` holds the concept tags given to CC models alongside the sequence.
    """
    ids, residues = _batch(xs)
    mask_id = default_vocab().mask
    base = _predict(model, ids, condition=condition).double().numpy()
    b, n = ids.shape
    out = np.zeros((b, n, model.cfg.k))
    for row in range(b):
        positions = [t for t in np.flatnonzero(residues[row]) if ids[row, t] != mask_id]
        if not positions:
            continue
        occluded = ids[row].repeat(len(positions), 1)
        occluded[torch.arange(len(positions)), torch.as_tensor(positions)] = mask_id
        cond = None if condition is None else np.repeat(np.asarray(condition)[row:row + 1], len(positions), 0)
        out[row, positions] = base[row] - _predict(model, occluded, condition=cond).double().numpy()
    return out


def gradient_scores(model: CbModel, xs: Sequence, method: str = "grad_x_input_minus_mask",
                    concepts: Sequence[int] | None = None, condition=None) -> np.ndarray:
    """(B, L, k) gradient-based scores from one forward pass and one backward per concept."""
    if method not in ("gradient", "grad_x_input", "grad_x_input_minus_mask"):
        raise ValueError(f"not a gradient method: {method}")
    ids, residues = _batch(xs)
    emb = model.embed(ids).detach().requires_grad_(True)
    c_hat = _predict(model, ids, inputs_embeds=emb, condition=condition)
    concepts = range(model.cfg.k) if concepts is None else concepts
    out = np.zeros(ids.shape + (model.cfg.k,))
    mask_vec = model.tok_emb.weight[default_vocab().mask].detach()
    for j, i in enumerate(concepts):
        (grad,) = torch.autograd.grad(c_hat[:, i].sum(), emb, retain_graph=True)
        if method == "gradient":
            s = grad.abs().sum(-1)
        elif method == "grad_x_input":
            s = (grad * emb.detach()).sum(-1)
        else:
            s = (grad * (emb.detach() - mask_vec)).sum(-1)
        out[..., i] = s.double().numpy()
    out[~residues] = 0.0
    return out


def random_scores(xs: Sequence, seed: int, k: int = 1) -> np.ndarray:
    ids, residues = _batch(xs)
    rng = np.random.default_rng(seed)
    out = rng.random(ids.shape + (k,))
    out[~residues] = 0.0
    return out


def attribute(model: CbModel, x, method: str = "grad_x_input_minus_mask", seed: int = 0) -> AttributionMatrix:
    """Full (positions x concepts) attribution for one sequence."""
    _, residues = _batch([x])
    if method == "occlusion":
        scores = occlusion_scores(model, [x])[0]
    elif method == "random":
        scores = random_scores([x], seed, model.cfg.k)[0]
    else:
        scores = gradient_scores(model, [x], method)[0]
    return AttributionMatrix(scores, method, residues[0])


def occlusion_attribution(model: CbModel, x, concept) -> np.ndarray:
    return occlusion_scores(model, [x])[0][:, _resolve_concept(model, concept)]


def gradient_attribution(model: CbModel, x, concept, method: str = "grad_x_input_minus_mask") -> np.ndarray:
    i = _resolve_concept(model, concept)
    return gradient_scores(model, [x], method, concepts=[i])[0][:, i]


def random_attribution(x, seed: int) -> np.ndarray:
    return random_scores([x], seed)[0][:, 0]


def select_coordinates(scores, direction: int, fraction: float, allowed=None) -> list[int]:
    """Positions to regenerate, most concept-opposing first.

    ``direction`` +1 picks the smallest scores (tokens suppressing the concept),
    -1 the largest; ties go to the lower index. The count is
    ``max(1, round(fraction * len(allowed)))``.
    """
    scores = np.asarray(scores, dtype=float)
    allowed = list(range(len(scores))) if allowed is None else [int(p) for p in allowed]
    if not allowed:
        raise NothingToMask("no residue positions to select from")
    count = min(len(allowed), max(1, int(round(fraction * len(allowed)))))
    sign = 1.0 if direction > 0 else -1.0
    order = sorted(allowed, key=lambda p: (sign * scores[p], p))
    return order[:count]


def _decode_positions(logits: torch.Tensor, how: str, temperature: float, rng: np.random.Generator) -> np.ndarray:
    aa = torch.as_tensor(default_vocab().amino_acid_ids)
    sub = logits[..., aa].double()
    if how == "greedy":
        return aa[sub.argmax(-1)].numpy()
    probs = torch.softmax(sub / temperature, dim=-1).numpy()
    picks = [rng.choice(len(aa), p=p / p.sum()) for p in probs.reshape(-1, len(aa))]
    return aa.numpy()[np.array(picks, dtype=int)].reshape(sub.shape[:-1])


@torch.no_grad()
def regenerate(model: CbModel, xs: Sequence, positions: Sequence[Sequence[int]], concept: int,
               target: float, decode: str = "greedy", temperature: float = 1.0, seed: int = 0,
               condition: np.ndarray | None = None) -> list[TokenSequence]:
    """Mask ``positions`` in each sequence and refill them with concept ``concept`` set to ``target``.

    CB models use their own prediction for the other concepts; C/CC models are
    conditioned on ``condition`` (normalized concept values) with the target entry replaced.
    """
    vocab = default_vocab()
    seqs = [_framed(x) for x in xs]
    if not any(positions):
        return seqs
    ids, _ = _batch(seqs)
    masked = ids.clone()
    for row, pos in enumerate(positions):
        if len(pos):
            masked[row, torch.as_tensor(list(pos))] = vocab.mask
    if model.variant == "CB":
        c_star = model(masked).c_hat.clone()
        c_star[:, concept] = target
        logits = model(masked, mode="intervened", c_star=c_star).logits
    elif model.variant in ("C", "CC"):
        if condition is None:
            raise ValueError("conditional models need concept values to condition on")
        tags = torch.as_tensor(np.asarray(condition), dtype=model.tok_emb.weight.dtype).clone()
        tags[:, concept] = target
        logits = model(masked, concepts=tags).logits
    else:
        raise VariantError("autoregressive models cannot be intervened on")
    rng = np.random.default_rng(seed)
    out = []
    for row, (s, pos) in enumerate(zip(seqs, positions)):
        if not len(pos):
            out.append(s)
            continue
        fill = _decode_positions(logits[row, list(pos)], decode, temperature, rng)
        out.append(s.replace(list(pos), fill))
    return out


def _normalized_concepts(model: CbModel, seqs: Sequence[str]) -> np.ndarray:
    raw = concept_matrix(list(seqs))
    if model.norm_stats is None:
        raise ValueError("model has no normalization stats; train it or load a checkpoint")
    return model.norm_stats.normalize_matrix(raw, clip=True)


def _attribution_for(model: CbModel, xs, method: str, concept: int, seed: int, condition=None) -> np.ndarray:
    if method == "random":
        return random_scores(xs, seed)[..., 0]
    if model.variant != "CC":
        condition = None
    if method == "occlusion":
        return occlusion_scores(model, xs, condition)[..., concept]
    return gradient_scores(model, xs, method, concepts=[concept], condition=condition)[..., concept]


def default_method(model: CbModel) -> str:
    return "random" if model.variant == "C" else "grad_x_input_minus_mask"


def intervene_batch(model: CbModel, sequences: Sequence[str], req: InterventionRequest,
                    ar_model: CbModel | None = None) -> list[InterventionResult]:
    """Run the iterative single-concept procedure on many sequences at once."""
    from .evaluate import naturalness_batch

    concept = _resolve_concept(model, req.concept)
    method = req.method or default_method(model)
    if method != "random" and model.variant == "C":
        raise VariantError("C models have no concept prediction; only random attribution applies")
    current = [detokenize(tokenize(s, max_len=model.cfg.max_len)) for s in sequences]
    before = _normalized_concepts(model, current)
    nat_before = naturalness_batch(ar_model, current) if ar_model is not None else None
    outputs: list[list[str]] = [[] for _ in current]
    masked: list[list[list[int]]] = [[] for _ in current]
    after: list[list[list[float]]] = [[] for _ in current]
    nat_after: list[list[float]] = [[] for _ in current]
    vals = before
    for it in range(req.iterations):
        framed = [tokenize(s, max_len=None) for s in current]
        if req.positions is not None:
            chosen = [list(req.positions) for _ in framed]
        else:
            scores = _attribution_for(model, framed, method, concept, req.seed + it, condition=vals)
            chosen = [select_coordinates(scores[r], req.direction, req.mask_fraction, f.residue_positions)
                      for r, f in enumerate(framed)]
        new = regenerate(model, framed, chosen, concept, req.target_value, req.decode,
                         req.temperature, req.seed + it, condition=vals)
        current = [detokenize(s) for s in new]
        vals = _normalized_concepts(model, current)
        nat = naturalness_batch(ar_model, current) if ar_model is not None else None
        for r in range(len(current)):
            outputs[r].append(current[r])
            masked[r].append([int(p) for p in chosen[r]])
            after[r].append([float(v) for v in vals[r]])
            if nat is not None:
                nat_after[r].append(float(nat[r]))
    return [
        InterventionResult(
            input_sequence=sequences[r] if isinstance(sequences[r], str) else detokenize(_framed(sequences[r])),
            outputs=outputs[r], masked_positions=masked[r],
            concept_before=[float(v) for v in before[r]], concept_after=after[r],
            concept=concept, direction=req.direction,
            naturalness_before=None if nat_before is None else float(nat_before[r]),
            naturalness_after=nat_after[r] if ar_model is not None else None,
        )
        for r in range(len(current))
    ]


def intervene_single(model: CbModel, x, req: InterventionRequest, ar_model: CbModel | None = None) -> InterventionResult:
    seq = x if isinstance(x, str) else detokenize(_framed(x))
    return intervene_batch(model, [seq], req, ar_model)[0]


def intervene_multi(model: CbModel, x, requests: Sequence[InterventionRequest],
                    ar_model: CbModel | None = None) -> InterventionResult:
    """Apply single-concept interventions one after another, chaining outputs."""
    seq = x if isinstance(x, str) else detokenize(_framed(x))
    if not requests:
        vals = _normalized_concepts(model, [seq])[0]
        return InterventionResult(seq, [seq], [[]], [float(v) for v in vals], [[float(v) for v in vals]],
                                  concept=-1, direction=0)
    results = []
    for req in requests:
        results.append(intervene_single(model, seq, req, ar_model))
        seq = results[-1].output
    first = results[0]
    if len(results) == 1:
        return first
    return InterventionResult(
        input_sequence=first.input_sequence,
        outputs=[r.output for r in results],
        masked_positions=[p for r in results for p in r.masked_positions],
        concept_before=first.concept_before,
        concept_after=[r.concept_after[-1] for r in results],
        concept=first.concept, direction=first.direction,
        naturalness_before=first.naturalness_before,
        naturalness_after=[r.naturalness_after[-1] for r in results] if ar_model is not None else None,
        steps=[{"concept": r.concept, "direction": r.direction} for r in results],
    )


def clamp_target(model: CbModel, concept, factor: float) -> float:
    i = _resolve_concept(model, concept)
    maxima = (model.extra or {}).get("concept_max")
    if maxima is None:
        raise ValueError("model carries no training activation maxima")
    return factor * maxima[i]


def clamp_concept(model: CbModel, x, concept, factor: float = 10.0, mask_fraction: float = 0.25,
                  ar_model: CbModel | None = None) -> InterventionResult:
    """Regenerate a quarter of the residues with the concept set to ``factor`` x its training maximum."""
    req = InterventionRequest(concept=concept, direction=1, target=clamp_target(model, concept, factor),
                              mask_fraction=mask_fraction)
    return intervene_single(model, x, req, ar_model)

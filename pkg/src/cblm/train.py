"""Training loop: independent CB training, AdamW with warmup, clipping, reports."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from .concepts import ConceptRegistry, NormalizationStats
from .corpus import Corpus
from .errors import DivergenceError
from .losses import LossWeights, concept_loss, mlm_loss, orthogonality_loss, total_loss
from .model import CbModel
from .seqio import default_vocab, tokenize

logger = logging.getLogger(__name__)

# RNG lanes keyed with (seed, step, lane)
LANE_BATCH, LANE_MASK, LANE_NOISE, LANE_TAGS = range(4)


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    mask_rate: float = 0.25
    learning_rate: float = 1e-3
    clip_norm: float = 0.5
    warmup_steps: int = 200
    weights: LossWeights = field(default_factory=LossWeights)
    noise_sigma: float = 0.1
    seed: int = 0
    eval_every: int = 0
    log_every: int = 10
    min_lr_ratio: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    val_fraction: float = 0.1

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError("mask_rate must be in (0, 1)")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainReport:
    records: list[dict] = field(default_factory=list)
    val_records: list[dict] = field(default_factory=list)
    concept_val_mse: dict[str, float] = field(default_factory=dict)
    perplexity: float | None = None

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def summary(self) -> dict:
        return {"concept_val_mse": self.concept_val_mse, "perplexity": self.perplexity,
                "validation": self.val_records, "final": self.records[-1] if self.records else None}


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate for optimizer step ``step`` (1-based).

    Linear warmup to ``learning_rate`` then cosine decay to ``min_lr_ratio``.
    """
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return step / cfg.warmup_steps * cfg.learning_rate
    span = max(1, cfg.steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    scale = cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * progress))
    return cfg.learning_rate * scale


def step_rng(seed: int, step: int, lane: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, lane])


def encode_corpus(sequences, max_len: int) -> np.ndarray:
    """Token ids for every sequence, right-padded to the longest framed length."""
    rows = [tokenize(s, max_len=None).ids[:max_len] for s in sequences]
    vocab = default_vocab()
    rows = [r if r[-1] == vocab.eos else r[:-1] + (vocab.eos,) for r in rows]
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), vocab.pad, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def random_mask(ids: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of exactly ``max(1, round(rate * n_residues))`` residues per row."""
    vocab = default_vocab()
    maskable = (ids != vocab.cls) & (ids != vocab.eos) & (ids != vocab.pad)
    keys = rng.random(ids.shape)
    keys[~maskable] = np.inf
    order = np.argsort(keys, axis=1, kind="stable")
    counts = np.maximum(1, np.rint(rate * maskable.sum(1))).astype(int)
    counts = np.minimum(counts, maskable.sum(1))
    mask = np.zeros(ids.shape, dtype=bool)
    for row, (perm, c) in enumerate(zip(order, counts)):
        mask[row, perm[:c]] = True
    return mask


def _trim(ids: np.ndarray) -> np.ndarray:
    pad = default_vocab().pad
    width = int((ids != pad).sum(1).max())
    return ids[:, :width]


def compute_losses(model: CbModel, ids, mask, concepts, observed, weights: LossWeights,
                   noise_sigma: float = 0.0, generator: torch.Generator | None = None,
                   tags_visible=None) -> dict:
    """Per-component losses for one batch in the variant's training mode.

    ``tags_visible`` (C/CC only) hides tags from the input without removing
    those concepts from the CC regression loss.
    """
    ids = torch.as_tensor(ids)
    vocab = default_vocab()
    zero = torch.zeros((), dtype=model.tok_emb.weight.dtype)
    if model.variant == "AR":
        emb = model.add_embedding_noise(model.embed(ids), noise_sigma, generator)
        H = model.encoder(emb, ids != vocab.pad, causal=True)
        logits = model.lm_head(H)[:, :-1]
        targets = ids[:, 1:]
        mlm = mlm_loss(logits, targets, targets != vocab.pad)
        return {"mlm": mlm, "concept": zero, "orth": zero, "total": mlm}
    mask = torch.as_tensor(mask)
    masked = ids.masked_fill(mask, vocab.mask)
    concepts = torch.as_tensor(concepts, dtype=zero.dtype)
    observed = torch.as_tensor(observed, dtype=torch.bool)
    if model.variant == "CB":
        tr = model(masked, concepts=concepts, observed=observed, mode="train_independent",
                   noise_sigma=noise_sigma, generator=generator)
        orth = orthogonality_loss(tr.z, tr.h_tilde, tr.valid)
    else:
        visible = observed if tags_visible is None else torch.as_tensor(tags_visible, dtype=torch.bool) & observed
        tr = model(masked, concepts=concepts, observed=visible, noise_sigma=noise_sigma, generator=generator)
        orth = zero
    mlm = mlm_loss(tr.logits, ids, mask)
    concept = concept_loss(tr.c_hat, concepts, observed) if tr.c_hat is not None else zero
    if model.variant == "C":
        concept = zero
    w = weights if model.variant == "CB" else LossWeights(weights.alpha, 0.0)
    return {"mlm": mlm, "concept": concept, "orth": orth, "total": total_loss(mlm, concept, orth, w)}


def global_grad_norm(params) -> float:
    norms = [p.grad.detach().norm() for p in params if p.grad is not None]
    return float(torch.linalg.vector_norm(torch.stack(norms))) if norms else 0.0


def train(model: CbModel, corpus: Corpus, cfg: TrainConfig, stats: NormalizationStats | None = None,
          registry: ConceptRegistry | None = None,
          callback: Callable[[dict], None] | None = None) -> tuple[CbModel, TrainReport]:
    """Train ``model`` in place on the head of ``corpus``; the tail is validation.

    ``stats`` defaults to min/max fitted on the training split. The fitted
    stats, registry and per-concept max predicted activation are attached to
    the returned model for checkpointing.
    """
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    registry = registry or ConceptRegistry.default()
    if model.variant != "AR" and registry.k != model.cfg.k:
        raise ValueError(f"registry has {registry.k} concepts, model expects {model.cfg.k}")
    train_set, val_set = corpus.split(cfg.val_fraction) if len(corpus) >= 10 else (corpus, corpus)
    stats = stats or train_set.fit_stats()
    ids_all = encode_corpus(train_set.sequences, model.cfg.max_len)
    concepts_all = train_set.normalized(stats)
    observed_all = train_set.observed

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=lr_at(1, cfg), betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    report = TrainReport()
    model.train()
    n = len(train_set)
    for step in range(1, cfg.steps + 1):
        batch = step_rng(cfg.seed, step, LANE_BATCH).choice(n, size=min(cfg.batch_size, n), replace=False)
        ids = _trim(ids_all[batch])
        mask = random_mask(ids, cfg.mask_rate, step_rng(cfg.seed, step, LANE_MASK))
        observed = observed_all[batch]
        visible = None
        if model.variant in ("C", "CC") and model.cfg.tag_dropout > 0:
            keep = step_rng(cfg.seed, step, LANE_TAGS).random(len(batch)) >= model.cfg.tag_dropout
            visible = np.repeat(keep[:, None], observed.shape[1], axis=1)
        gen = torch.Generator().manual_seed(int(step_rng(cfg.seed, step, LANE_NOISE).integers(2**62)))
        losses = compute_losses(model, ids, mask, concepts_all[batch], observed, cfg.weights,
                                noise_sigma=cfg.noise_sigma, generator=gen, tags_visible=visible)
        if not torch.isfinite(losses["total"]):
            raise DivergenceError(step)
        lr = lr_at(step, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad(set_to_none=True)
        losses["total"].backward()
        pre = float(torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm))
        if step % cfg.log_every == 0 or step == 1 or step == cfg.steps:
            rec = {k: float(v.detach()) for k, v in losses.items()}
            rec.update(step=step, lr=lr, grad_norm=pre, grad_norm_clipped=global_grad_norm(params))
            report.records.append(rec)
            if callback:
                callback(rec)
        opt.step()
        if cfg.eval_every and step % cfg.eval_every == 0 and step != cfg.steps:
            report.val_records.append({"step": step, **validate(model, val_set, stats, cfg)})
            model.train()
    model.eval()
    final = validate(model, val_set, stats, cfg)
    report.val_records.append({"step": cfg.steps, **final})
    report.perplexity = final["perplexity"]
    report.concept_val_mse = final.get("concept_mse", {})
    model.registry = registry
    model.norm_stats = stats
    model.extra = dict(model.extra)
    if model.variant in ("CB", "CC"):
        act = predicted_concepts(model, train_set.sequences)
        model.extra["concept_max"] = [float(v) for v in act.max(0)]
        model.extra["concept_min"] = [float(v) for v in act.min(0)]
    model.extra["concept_val_mse"] = report.concept_val_mse
    return model, report


@torch.no_grad()
def predicted_concepts(model: CbModel, sequences, batch_size: int = 256) -> np.ndarray:
    """Model concept predictions (inference mode, no tags for CC) for raw sequences."""
    out = []
    for i in range(0, len(sequences), batch_size):
        ids = torch.as_tensor(_trim(encode_corpus(sequences[i:i + batch_size], model.cfg.max_len)))
        out.append(model(ids).c_hat.double().numpy())
    return np.concatenate(out)


@torch.no_grad()
def validate(model: CbModel, val_set: Corpus, stats: NormalizationStats, cfg: TrainConfig) -> dict:
    from .evaluate import perplexity

    model.eval()
    result = {"perplexity": perplexity(model, val_set, mask_rate=cfg.mask_rate, seed=cfg.seed, stats=stats)}
    if model.variant in ("CB", "CC"):
        pred = predicted_concepts(model, val_set.sequences)
        target = val_set.normalized(stats)
        obs = val_set.observed
        mse = ((pred - target) ** 2 * obs).sum(0) / np.maximum(obs.sum(0), 1)
        result["concept_mse"] = {name: float(v) for name, v in zip(val_set.names, mse)}
    return result

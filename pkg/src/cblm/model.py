"""Concept bottleneck masked LM and the conditional / autoregressive variants.

All variants share one pre-norm transformer encoder with rotary position
embeddings and bias-free attention and feed-forward projections.

* ``CB``: CLS state -> linear concept head -> ``z_i = c_i * e_i``; per-token
  states -> position-wise orthogonality MLP -> ``h~``; logits are a single
  bias-free linear map of ``[z, h~]``.
* ``C``: concept values enter as ``k`` tag tokens inserted after CLS.
* ``CC``: ``C`` plus a linear regression head on the CLS state.
* ``AR``: causal encoder with a next-token head, used to score naturalness.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import LengthError, MissingConcepts, VariantError
from .seqio import TokenSequence, default_vocab

VARIANTS = ("CB", "C", "CC", "AR")
MODES = ("train_independent", "inference", "intervened")


@dataclass
class ModelConfig:
    layers: int = 2
    hidden_dim: int = 64
    heads: int = 4
    max_len: int = 128
    vocab_size: int = 33
    k: int = 14
    concept_emb_dim: int = 2
    variant: str = "CB"
    embedding_noise_sigma: float = 0.1
    seed: int = 0
    ffn_mult: int = 4
    layer_norm: bool = True
    tag_dropout: float = 0.0
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads")
        if (self.hidden_dim // self.heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")
        if self.concept_emb_dim < 1:
            raise ValueError("concept_emb_dim must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.variant == "CB" and self.k * self.concept_emb_dim > self.hidden_dim:
            raise ValueError("k * concept_emb_dim must not exceed hidden_dim (cosine reconciliation pads z to d)")

    def to_dict(self) -> dict:
        return asdict(self)


class _Norm(nn.Module):
    def __init__(self, dim: int, enabled: bool):
        super().__init__()
        self.norm = nn.LayerNorm(dim) if enabled else nn.Identity()

    def forward(self, x):
        return self.norm(x)


def rotary_tables(length: int, head_dim: int, base: float, dtype, device=None):
    inv_freq = 1.0 / (base ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim))
    angles = torch.arange(length, dtype=torch.float64)[:, None] * inv_freq[None, :]
    angles = torch.cat([angles, angles], dim=-1)
    return angles.cos().to(dtype=dtype, device=device), angles.sin().to(dtype=dtype, device=device)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    rotated = torch.cat([-x[..., half:], x[..., :half]], dim=-1)
    return x * cos + rotated * sin


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, rope_base: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.rope_base = rope_base
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.out = nn.Linear(dim, dim, bias=False)

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        cos, sin = rotary_tables(n, self.head_dim, self.rope_base, x.dtype, x.device)
        q, k = apply_rotary(q, cos, sin), apply_rotary(k, cos, sin)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~attn_mask, float("-inf"))
        y = torch.softmax(scores, dim=-1) @ v
        return self.out(y.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.norm1 = _Norm(d, cfg.layer_norm)
        self.attn = SelfAttention(d, cfg.heads, cfg.rope_base)
        self.norm2 = _Norm(d, cfg.layer_norm)
        self.ff_in = nn.Linear(d, cfg.ffn_mult * d, bias=False)
        self.ff_out = nn.Linear(cfg.ffn_mult * d, d, bias=False)

    def forward(self, x, attn_mask):
        x = x + self.attn(self.norm1(x), attn_mask)
        return x + self.ff_out(F.gelu(self.ff_in(self.norm2(x))))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.final_norm = _Norm(cfg.hidden_dim, cfg.layer_norm)

    def forward(self, x: torch.Tensor, valid: torch.Tensor, causal: bool = False) -> torch.Tensor:
        n = x.shape[1]
        attn_mask = valid[:, None, None, :]
        if causal:
            attn_mask = attn_mask & torch.ones(n, n, dtype=torch.bool, device=x.device).tril()[None, None]
        # PAD query rows would otherwise see only -inf when causal.
        attn_mask = attn_mask | torch.eye(n, dtype=torch.bool, device=x.device)[None, None]
        for block in self.blocks:
            x = block(x, attn_mask)
        return self.final_norm(x)


@dataclass
class ForwardTrace:
    """Batched intermediate values of one forward pass.

    ``logits`` has one row per input position (tag positions of the C/CC
    variants are dropped), so masked positions index it directly.
    """

    H: torch.Tensor
    h0: torch.Tensor
    logits: torch.Tensor
    valid: torch.Tensor
    c_hat: torch.Tensor | None = None
    c_used: torch.Tensor | None = None
    z: torch.Tensor | None = None
    h_tilde: torch.Tensor | None = None
    embeddings: torch.Tensor | None = None

    @property
    def probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)


def batch_ids(seqs: Sequence[TokenSequence | Sequence[int]]) -> torch.Tensor:
    """Stack token sequences into a (B, L) tensor, right-padding with PAD."""
    pad = default_vocab().pad
    rows = [list(s.ids) if isinstance(s, TokenSequence) else list(s) for s in seqs]
    width = max(len(r) for r in rows)
    return torch.tensor([r + [pad] * (width - len(r)) for r in rows], dtype=torch.long)


class CbModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, k, v = cfg.hidden_dim, cfg.k, cfg.vocab_size
        vocab = default_vocab()
        if v != vocab.size:
            raise ValueError(f"vocab_size {v} does not match vocabulary ({vocab.size})")
        self.mask_id, self.pad_id, self.cls_id = vocab.mask, vocab.pad, vocab.cls
        # metadata carried through checkpoints
        self.registry = None
        self.norm_stats = None
        self.extra: dict = {}
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.tok_emb = nn.Embedding(v, d)
            self.encoder = Encoder(cfg)
            if cfg.variant == "CB":
                self.concept_head = nn.Linear(d, k)
                self.concept_emb = nn.Parameter(torch.randn(k, cfg.concept_emb_dim))
                self.orth_net = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
                self.decoder = nn.Linear(k * cfg.concept_emb_dim + d, v, bias=False)
            else:
                self.lm_head = nn.Linear(d, v, bias=False)
            if cfg.variant in ("C", "CC"):
                self.tag_value = nn.Parameter(torch.randn(k, d) * 0.5)
                self.tag_base = nn.Parameter(torch.randn(k, d) * 0.5)
                self.tag_missing = nn.Parameter(torch.randn(k, d) * 0.5)
            if cfg.variant == "CC":
                self.concept_head = nn.Linear(d, k)
            for name, p in self.named_parameters():
                if name.startswith(("decoder", "lm_head")):
                    nn.init.normal_(p, std=0.02)

    @property
    def variant(self) -> str:
        return self.cfg.variant

    @property
    def concept_dim(self) -> int:
        return self.cfg.k * self.cfg.concept_emb_dim

    def _check_variant(self, *allowed: str):
        if self.variant not in allowed:
            raise VariantError(f"operation requires variant {allowed}, model is {self.variant}")

    # -- building blocks -------------------------------------------------
    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        return self.tok_emb(ids)

    def add_embedding_noise(self, emb: torch.Tensor, sigma: float, generator: torch.Generator | None) -> torch.Tensor:
        if sigma == 0:
            return emb
        noise = torch.randn(emb.shape, generator=generator, dtype=emb.dtype)
        return emb + sigma * noise

    def encode(self, ids: torch.Tensor, inputs_embeds: torch.Tensor | None = None, causal: bool = False) -> torch.Tensor:
        ids = torch.as_tensor(ids)
        if ids.dim() == 1:
            ids = ids[None]
        if ids.shape[1] > self.cfg.max_len:
            raise LengthError(f"sequence length {ids.shape[1]} exceeds max_len {self.cfg.max_len}")
        x = self.embed(ids) if inputs_embeds is None else inputs_embeds
        return self.encoder(x, ids != self.pad_id, causal=causal)

    def predict_concepts(self, h0: torch.Tensor) -> torch.Tensor:
        self._check_variant("CB", "CC")
        return self.concept_head(h0)

    def known_embedding(self, c: torch.Tensor) -> torch.Tensor:
        """``z_i = c_i * e_i`` flattened to (..., k * concept_emb_dim)."""
        self._check_variant("CB")
        z = c[..., :, None] * self.concept_emb
        return z.flatten(-2)

    def unknown_embedding(self, H: torch.Tensor) -> torch.Tensor:
        self._check_variant("CB")
        return self.orth_net(H)

    def decode(self, z: torch.Tensor, h_tilde: torch.Tensor) -> torch.Tensor:
        """Pre-softmax logits; ``z`` is (B, kc) and broadcast over positions."""
        self._check_variant("CB")
        w = self.decoder.weight
        known = z @ w[:, : self.concept_dim].T
        return known[..., None, :] + h_tilde @ w[:, self.concept_dim:].T

    # -- forward passes ---------------------------------------------------
    def forward(
        self,
        ids: torch.Tensor,
        concepts: torch.Tensor | None = None,
        observed: torch.Tensor | None = None,
        mode: str = "inference",
        c_star: torch.Tensor | None = None,
        inputs_embeds: torch.Tensor | None = None,
        noise_sigma: float = 0.0,
        generator: torch.Generator | None = None,
    ) -> ForwardTrace:
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        ids = torch.as_tensor(ids)
        if ids.dim() == 1:
            ids = ids[None]
        if self.variant in ("C", "CC"):
            return self.forward_conditional(ids, concepts, observed, inputs_embeds, noise_sigma, generator)
        if self.variant == "AR":
            raise VariantError("use forward_autoregressive for the AR variant")
        if ids.shape[1] > self.cfg.max_len:
            raise LengthError(f"sequence length {ids.shape[1]} exceeds max_len {self.cfg.max_len}")
        emb = self.embed(ids) if inputs_embeds is None else inputs_embeds
        emb = self.add_embedding_noise(emb, noise_sigma, generator)
        valid = ids != self.pad_id
        H = self.encoder(emb, valid)
        h0 = H[:, 0]
        c_hat = self.predict_concepts(h0)
        if mode == "train_independent":
            if concepts is None:
                raise MissingConcepts("train_independent mode needs ground-truth concepts")
            concepts = torch.as_tensor(concepts, dtype=c_hat.dtype)
            obs = torch.ones_like(concepts, dtype=torch.bool) if observed is None else torch.as_tensor(observed, dtype=torch.bool)
            c_used = torch.where(obs, concepts, c_hat)
        elif mode == "intervened":
            if c_star is None:
                raise ValueError("intervened mode needs c_star")
            c_used = torch.as_tensor(c_star, dtype=c_hat.dtype).expand_as(c_hat)
        else:
            c_used = c_hat
        z = self.known_embedding(c_used)
        h_tilde = self.unknown_embedding(H)
        logits = self.decode(z, h_tilde)
        return ForwardTrace(H=H, h0=h0, logits=logits, valid=valid, c_hat=c_hat, c_used=c_used,
                            z=z, h_tilde=h_tilde, embeddings=emb)

    def tag_embeddings(self, concepts: torch.Tensor | None, observed: torch.Tensor | None, batch: int, dtype) -> torch.Tensor:
        k = self.cfg.k
        if concepts is None:
            concepts = torch.zeros(batch, k, dtype=dtype)
            observed = torch.zeros(batch, k, dtype=torch.bool)
        concepts = torch.as_tensor(concepts, dtype=dtype).reshape(batch, k)
        obs = torch.ones(batch, k, dtype=torch.bool) if observed is None else torch.as_tensor(observed, dtype=torch.bool).reshape(batch, k)
        tags = concepts[..., None] * self.tag_value + self.tag_base
        return torch.where(obs[..., None], tags, self.tag_missing.expand_as(tags))

    def forward_conditional(self, ids, concepts=None, observed=None, inputs_embeds=None, noise_sigma=0.0, generator=None) -> ForwardTrace:
        """C / CC forward: ``k`` concept tags are inserted right after CLS."""
        self._check_variant("C", "CC")
        ids = torch.as_tensor(ids)
        if ids.dim() == 1:
            ids = ids[None]
        b, n = ids.shape
        if n > self.cfg.max_len:
            raise LengthError(f"sequence length {n} exceeds max_len {self.cfg.max_len}")
        emb = self.embed(ids) if inputs_embeds is None else inputs_embeds
        emb = self.add_embedding_noise(emb, noise_sigma, generator)
        tags = self.tag_embeddings(concepts, observed, b, emb.dtype)
        x = torch.cat([emb[:, :1], tags, emb[:, 1:]], dim=1)
        valid_seq = ids != self.pad_id
        valid = torch.cat([valid_seq[:, :1], torch.ones(b, self.cfg.k, dtype=torch.bool), valid_seq[:, 1:]], dim=1)
        H_full = self.encoder(x, valid)
        H = torch.cat([H_full[:, :1], H_full[:, 1 + self.cfg.k:]], dim=1)
        logits = self.lm_head(H)
        c_hat = self.concept_head(H[:, 0]) if self.variant == "CC" else None
        return ForwardTrace(H=H, h0=H[:, 0], logits=logits, valid=valid_seq, c_hat=c_hat,
                            c_used=None if concepts is None else torch.as_tensor(concepts), embeddings=emb)

    def forward_autoregressive(self, ids) -> torch.Tensor:
        """Log-probabilities; row ``t`` is the distribution of token ``t + 1``."""
        self._check_variant("AR")
        H = self.encode(ids, causal=True)
        return torch.log_softmax(self.lm_head(H), dim=-1)

    def effective_concept_weights(self) -> torch.Tensor:
        """(k, vocab) matrix ``M[i, t] = W_dec[t, slice_i] . e_i``."""
        self._check_variant("CB")
        c = self.cfg.concept_emb_dim
        w = self.decoder.weight[:, : self.concept_dim].reshape(-1, self.cfg.k, c)
        return torch.einsum("tkc,kc->kt", w, self.concept_emb)


def build_model(cfg: ModelConfig | dict) -> CbModel:
    if isinstance(cfg, dict):
        cfg = ModelConfig(**cfg)
    return CbModel(cfg)

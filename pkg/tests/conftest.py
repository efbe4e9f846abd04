import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from cblm.model import CbModel, ModelConfig  # noqa: E402


def tiny_model(variant="CB", dtype=torch.float64, **kw) -> CbModel:
    cfg = dict(layers=1, hidden_dim=8, heads=2, max_len=32, k=4, variant=variant, seed=0)
    cfg.update(kw)
    return CbModel(ModelConfig(**cfg)).to(dtype)


@pytest.fixture
def tiny():
    return tiny_model


def linearize(model: CbModel) -> CbModel:
    """Make c_hat exactly linear in the token embeddings.

    LayerNorm off, q/k projections zeroed (uniform attention over valid
    positions) and the feed-forward input zeroed (GELU(0) = 0).
    """
    cfg = model.cfg.to_dict()
    cfg["layer_norm"] = False
    lin = CbModel(ModelConfig(**cfg)).to(model.tok_emb.weight.dtype)
    lin.load_state_dict(model.state_dict(), strict=False)
    d = cfg["hidden_dim"]
    with torch.no_grad():
        for block in lin.encoder.blocks:
            block.attn.qkv.weight[: 2 * d].zero_()
            block.ff_in.weight.zero_()
    lin.registry, lin.norm_stats, lin.extra = model.registry, model.norm_stats, model.extra
    return lin


def stats_model(variant="CB", seed=0, **kw) -> CbModel:
    """Untrained k=14 model carrying normalization stats fitted on a small synthetic corpus."""
    from cblm.concepts import ConceptRegistry, concept_matrix, fit_normalization
    from cblm.seqio import generate_synthetic_corpus

    cfg = dict(layers=1, hidden_dim=32, heads=2, max_len=64, variant=variant, seed=seed)
    cfg.update(kw)
    m = CbModel(ModelConfig(**cfg)).double()
    m.norm_stats = fit_normalization(concept_matrix(generate_synthetic_corpus(100, seed=11)))
    m.registry = ConceptRegistry.default()
    m.extra = {"concept_max": [1.5] * 14}
    m.eval()
    return m


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk():
    from desk import Desk

    return Desk()

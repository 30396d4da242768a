import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from acsa import synth  # noqa: E402
from acsa.data import build_vocab, encode, tokenize  # noqa: E402
from acsa.model import JointModel, ModelConfig  # noqa: E402


def tiny_model(variant="full", seed=7, n_aspects=2, n_polarities=3, vocab_size=8, embed_scale=None, **kw):
    """A small JointModel; ``embed_scale`` swaps in uniform embeddings of that range."""
    dims = dict(d_w=4, d_s=3, hidden=5, dropout=0.0)
    dims.update(kw)
    cfg = ModelConfig(vocab_size, n_aspects, n_polarities, variant=variant, **dims)
    emb = None
    if embed_scale is not None:
        emb = np.random.default_rng(seed).uniform(-embed_scale, embed_scale, (vocab_size, cfg.d_w))
        emb[0] = 0.0
    return JointModel(cfg, seed=seed, embeddings=emb)


@pytest.fixture(scope="session")
def synthetic():
    raws = synth.generate(50, seed=0)
    labels = synth.synthetic_label_space()
    vocab = build_vocab([tokenize(r.text) for r in raws])
    examples = [encode(r, vocab, labels) for r in raws]
    return raws, labels, vocab, examples


# ---------------------------------------------------------------------------
# acceptance results, printed as one line per criterion after the run

ACCEPTANCE: dict[str, tuple[str, str]] = {}


def record_criterion(key: str, ok, detail: str) -> None:
    """Record a criterion outcome; ``ok=None`` marks it as skipped."""
    ACCEPTANCE[key] = ("SKIP" if ok is None else "PASS" if ok else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        status, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {status} - {detail}")

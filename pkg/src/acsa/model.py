"""Joint aspect-category detection and sentiment model.

Per aspect, two additive-attention poolers (one over word embeddings, one
over Bi-LSTM states) produce contextualized aspect embeddings.  These feed an
aspect-specific detection head and serve as dot-attention queries whose
pooled features go through one sentiment head shared by every aspect.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParamGroup
from .layers import (
    AdditiveAttentionParams,
    DenseParams,
    Dropout,
    EmbeddingTable,
    LSTMCellParams,
    additive_attention,
    bilstm_forward,
    dense,
    dot_attention,
    embedding_lookup,
)

VARIANTS = ("full", "without_share", "without_cae")
CHECKPOINT_FORMAT = "acsa-checkpoint/1"


@dataclass
class ModelConfig:
    vocab_size: int
    n_aspects: int
    n_polarities: int
    d_w: int = 300
    d_s: int = 100
    hidden: int = 100
    attn_dim: int | None = None
    variant: str = "full"
    dropout: float = 0.5
    freeze_embeddings: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("vocab_size", "n_aspects", "n_polarities", "d_w", "d_s", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def feature_dim(self):
        return self.d_w + 2 * self.d_s


@dataclass
class AspectParams:
    attn_x: AdditiveAttentionParams
    attn_h: AdditiveAttentionParams
    acd_hidden: DenseParams
    acd_out: DenseParams


@dataclass
class SentimentHead:
    hidden: DenseParams
    out: DenseParams

    def nodes(self):
        return self.hidden.nodes() + self.out.nodes()


@dataclass
class ForwardOutput:
    """Model outputs for a batch.

    ``aspect_probs`` is ``(batch, N)``, ``sentiment_probs`` is
    ``(batch, N, M)``.  ``attention`` maps each of ``alpha_x``, ``alpha_h``,
    ``beta_x``, ``beta_h`` to an array of shape ``(batch, N, length)``.
    """

    aspect_probs: Node
    sentiment_probs: Node
    attention: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def y_hat_A(self) -> np.ndarray:
        return self.aspect_probs.value

    @property
    def y_hat_S(self) -> np.ndarray:
        return self.sentiment_probs.value


class JointModel:
    def __init__(self, config: ModelConfig, seed: int = 0, embeddings: np.ndarray | None = None):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        if embeddings is not None and embeddings.shape != (c.vocab_size, c.d_w):
            raise ValueError(f"embedding matrix shape {embeddings.shape} != ({c.vocab_size}, {c.d_w})")
        self.embedding = EmbeddingTable.init(rng, c.vocab_size, c.d_w, trainable=not c.freeze_embeddings, matrix=embeddings)
        self.lstm_fwd = LSTMCellParams.init(rng, c.d_w, c.d_s, prefix="bilstm.fwd")
        self.lstm_bwd = LSTMCellParams.init(rng, c.d_w, c.d_s, prefix="bilstm.bwd")
        self.aspects = []
        for j in range(c.n_aspects):
            self.aspects.append(
                AspectParams(
                    AdditiveAttentionParams.init(rng, c.d_w, c.attn_dim, prefix=f"attn_x[{j}]"),
                    AdditiveAttentionParams.init(rng, 2 * c.d_s, c.attn_dim, prefix=f"attn_h[{j}]"),
                    DenseParams.init(rng, c.feature_dim, c.hidden, "relu", prefix=f"acd[{j}].hidden"),
                    DenseParams.init(rng, c.hidden, 1, "sigmoid", prefix=f"acd[{j}].out"),
                )
            )
        n_heads = c.n_aspects if c.variant == "without_share" else 1
        self.sc_heads = [
            SentimentHead(
                DenseParams.init(rng, c.feature_dim, c.hidden, "relu", prefix=f"sc[{k}].hidden"),
                DenseParams.init(rng, c.hidden, c.n_polarities, "identity", prefix=f"sc[{k}].out"),
            )
            for k in range(n_heads)
        ]
        self.ciae = None
        if c.variant == "without_cae":
            self.ciae = [
                (
                    ad.parameter(rng.uniform(-0.05, 0.05, c.d_w), f"ciae_x[{j}]"),
                    ad.parameter(rng.uniform(-0.05, 0.05, 2 * c.d_s), f"ciae_h[{j}]"),
                )
                for j in range(c.n_aspects)
            ]
        self.dropout = Dropout(c.dropout)
        self.groups = self._build_groups()

    # -- parameter bookkeeping -------------------------------------------

    def _build_groups(self) -> list[ParamGroup]:
        groups = [
            ParamGroup("embedding", self.embedding.nodes(), "embedding"),
            ParamGroup("bilstm", self.lstm_fwd.nodes() + self.lstm_bwd.nodes(), "bilstm"),
        ]
        for j, a in enumerate(self.aspects):
            groups.append(ParamGroup(f"cae[{j}]", a.attn_x.nodes() + a.attn_h.nodes(), "per_aspect", j))
            groups.append(ParamGroup(f"acd_head[{j}]", a.acd_hidden.nodes() + a.acd_out.nodes(), "per_aspect", j))
        if len(self.sc_heads) == 1:
            groups.append(ParamGroup("sc_head", self.sc_heads[0].nodes(), "shared"))
        else:
            for j, head in enumerate(self.sc_heads):
                groups.append(ParamGroup(f"sc_head[{j}]", head.nodes(), "per_aspect", j))
        if self.ciae is not None:
            for j, (qx, qh) in enumerate(self.ciae):
                groups.append(ParamGroup(f"ciae[{j}]", [qx, qh], "per_aspect", j))
        return groups

    def parameters(self) -> list[Node]:
        return [n for g in self.groups for n in g.nodes]

    def trainable(self) -> list[Node]:
        return [n for n in self.parameters() if n.requires_grad]

    def zero_grad(self):
        ad.zero_grads(self.groups)

    def state(self) -> dict[str, np.ndarray]:
        return {n.name: n.value.copy() for n in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]):
        for n in self.parameters():
            if n.name not in state:
                raise KeyError(f"missing parameter {n.name!r} in state")
            if state[n.name].shape != n.value.shape:
                raise ValueError(f"parameter {n.name!r}: shape {state[n.name].shape} != {n.value.shape}")
            n.value = np.array(state[n.name], dtype=ad.DTYPE)

    # -- forward pieces ----------------------------------------------------

    def _check_aspect(self, j):
        if not 0 <= j < self.config.n_aspects:
            raise IndexError(f"aspect index {j} outside [0, {self.config.n_aspects})")

    def compute_cae(self, X, H, mask, j):
        """Contextualized aspect embeddings of aspect ``j`` at both levels."""
        self._check_aspect(j)
        a = self.aspects[j]
        v_x, alpha_x = additive_attention(a.attn_x, X, mask)
        v_h, alpha_h = additive_attention(a.attn_h, H, mask)
        return (v_x, v_h), (alpha_x, alpha_h)

    def predict_aspect_probability(self, v_x, v_h, j) -> Node:
        self._check_aspect(j)
        a = self.aspects[j]
        v = ad.concat([v_x, v_h], axis=-1)
        return dense(a.acd_out, dense(a.acd_hidden, v))

    def _queries(self, X, H, mask, j, cae=None):
        if self.config.variant == "without_cae":
            if self.ciae is None:
                raise ValueError("without_cae variant requested but the model has no aspect embedding matrix")
            return self.ciae[j]
        if cae is None:
            cae, _ = self.compute_cae(X, H, mask, j)
        return cae

    def sentiment_features(self, X, H, mask, j, cae=None):
        """Dot-attention features for aspect ``j`` (CAE or CIAE queries)."""
        self._check_aspect(j)
        q_x, q_h = self._queries(X, H, mask, j, cae)
        v_x, beta_x = dot_attention(X, q_x, mask)
        v_h, beta_h = dot_attention(H, q_h, mask)
        return ad.concat([v_x, v_h], axis=-1), (beta_x, beta_h)

    def predict_sentiment_distribution(self, v_s, j) -> Node:
        self._check_aspect(j)
        head = self.sc_heads[j] if len(self.sc_heads) > 1 else self.sc_heads[0]
        return ad.softmax(dense(head.out, dense(head.hidden, v_s)), axis=-1)

    def encode_text(self, token_ids, mask, train=False, rng=None):
        X = embedding_lookup(self.embedding, token_ids)
        X = self.dropout(X, rng, train)
        H = bilstm_forward(self.lstm_fwd, self.lstm_bwd, X, mask)
        H = self.dropout(H, rng, train)
        return X, H

    def forward(self, token_ids, mask=None, train: bool = False, rng=None) -> ForwardOutput:
        """Run the full model on a padded batch ``(batch, length)`` of ids.

        A single 1-D id sequence is treated as a batch of one.
        """
        ids = np.asarray(token_ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.shape[-1] == 0:
            raise ValueError("forward: empty token sequence")
        mask = np.ones(ids.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(ids.shape)
        X, H = self.encode_text(ids, mask, train, rng)

        aspect_probs, features, maps = [], [], {k: [] for k in ("alpha_x", "alpha_h", "beta_x", "beta_h")}
        for j in range(self.config.n_aspects):
            cae, (alpha_x, alpha_h) = self.compute_cae(X, H, mask, j)
            aspect_probs.append(self.predict_aspect_probability(*cae, j))
            v_s, (beta_x, beta_h) = self.sentiment_features(X, H, mask, j, cae)
            features.append(v_s)
            for k, a in zip(maps, (alpha_x, alpha_h, beta_x, beta_h)):
                maps[k].append(a.value)

        y_a = ad.concat(aspect_probs, axis=-1)  # (batch, N)
        if len(self.sc_heads) == 1:
            y_s = self.predict_sentiment_distribution(ad.stack(features, axis=1), 0)
        else:
            y_s = ad.stack([self.predict_sentiment_distribution(v, j) for j, v in enumerate(features)], axis=1)
        attention = {k: np.stack(v, axis=1) for k, v in maps.items()}
        return ForwardOutput(y_a, y_s, attention)

    __call__ = forward


def parameter_census(model: JointModel, by: str = "category") -> dict[str, int]:
    """Trainable scalar counts keyed by group category or by group name.

    With ``by="role"`` counts are pooled by what the parameters do:
    ``embedding``, ``bilstm``, ``cae``, ``acd_head``, ``sc_head``, ``ciae``.
    """
    counts: dict[str, int] = {}
    for g in model.groups:
        if by == "category":
            key = g.category
        elif by == "group":
            key = g.name
        elif by == "role":
            key = g.name.split("[")[0]
        else:
            raise ValueError(f"unknown census key {by!r}")
        counts[key] = counts.get(key, 0) + g.size()
    return counts


# ---------------------------------------------------------------------------
# checkpoints


def vocab_hash(tokens) -> str:
    return hashlib.sha256("\n".join(tokens).encode("utf-8")).hexdigest()


_FIXED_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, model: JointModel, meta: dict | None = None) -> None:
    """Write parameters and metadata to a zip of ``.npy`` members.

    Member timestamps are fixed so identical models give identical bytes.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "model": asdict(model.config),
        "groups": [
            {"name": g.name, "category": g.category, "aspect": g.aspect, "params": [n.name for n in g.nodes]}
            for g in model.groups
        ],
        "meta": meta or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("header.json", date_time=_FIXED_ZIP_TIME)
        zf.writestr(info, json.dumps(header, indent=1, sort_keys=True))
        for n in model.parameters():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, n.value, allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"params/{n.name}.npy", date_time=_FIXED_ZIP_TIME), buf.getvalue())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[JointModel, dict]:
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
            state = {}
            for g in header["groups"]:
                for name in g["params"]:
                    with zf.open(f"params/{name}.npy") as fh:
                        state[name] = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, ValueError, OSError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    model = JointModel(ModelConfig(**header["model"]))
    model.load_state(state)
    return model, header["meta"]

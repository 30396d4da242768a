"""Losses, Adam, and the joint training loop."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Node, clip_gradient_norm
from .data import make_batches
from .evaluation import DEFAULT_TAU, EvalReport, average_runs, evaluate

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class TrainConfig:
    lambda_l2: float = 0.01
    alpha_sc: float = 1.0
    learning_rate: float = 0.001
    clip_norm: float = 5.0
    global_clip: bool = False
    dropout_p: float = 0.5
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    tau: float = DEFAULT_TAU
    runs: int = 3

    def __post_init__(self):
        if self.learning_rate < 0 or self.clip_norm <= 0 or self.lambda_l2 < 0 or self.alpha_sc < 0:
            raise ValueError("learning_rate, lambda_l2 and alpha_sc must be non-negative and clip_norm positive")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.runs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs, patience and runs must be at least 1")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# losses


def _clamped_log(p: Node) -> Node:
    return ad.log(ad.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR))


def acd_loss(y_A, y_hat_A) -> Node:
    """Binary cross-entropy summed over aspects.

    Returns a scalar for 1-D input and one value per row for ``(B, N)``.
    """
    y = np.asarray(y_A, dtype=ad.DTYPE)
    y_hat = ad.as_node(y_hat_A)
    if y.shape != y_hat.shape:
        raise ad.ShapeError(f"acd_loss: target shape {y.shape} != prediction shape {y_hat.shape}")
    pos = ad.mul(y, _clamped_log(y_hat))
    neg = ad.mul(1.0 - y, _clamped_log(ad.add(1.0, ad.neg(y_hat))))
    return ad.neg(ad.sum(ad.add(pos, neg), axis=-1))


def sc_loss(y_S, y_hat_S) -> Node:
    """Cross-entropy over mentioned aspects; all-zero target rows add nothing."""
    y = np.asarray(y_S, dtype=ad.DTYPE)
    y_hat = ad.as_node(y_hat_S)
    if y.shape != y_hat.shape:
        raise ad.ShapeError(f"sc_loss: target shape {y.shape} != prediction shape {y_hat.shape}")
    if np.any(y.sum(axis=-1) > 1.0):
        raise ValueError("sc_loss: a sentiment target row sums to more than 1")
    per_cell = ad.mul(y, _clamped_log(y_hat))
    return ad.neg(ad.sum(ad.sum(per_cell, axis=-1), axis=-1))


def l2_penalty(groups, lambda_l2: float) -> Node:
    """``lambda * sum(theta^2)`` over trainable parameters outside the Bi-LSTM."""
    terms = [
        ad.sum(ad.mul(n, n))
        for g in groups
        if g.category != "bilstm"
        for n in g.nodes
        if n.requires_grad
    ]
    if lambda_l2 == 0 or not terms:
        return ad.constant(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, lambda_l2)


def total_loss(L_A, L_s, penalty, alpha_sc: float = 1.0) -> Node:
    """Batch mean of ``L_A + alpha * L_s`` plus the penalty, added once."""
    L_A, L_s, penalty = ad.as_node(L_A), ad.as_node(L_s), ad.as_node(penalty)
    per_example = ad.add(L_A, ad.scale(L_s, alpha_sc))
    n = per_example.value.size
    mean = ad.scale(ad.sum(per_example), 1.0 / n) if per_example.ndim else per_example
    return ad.add(mean, penalty)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        return cls([np.zeros_like(p.value) for p in params], [np.zeros_like(p.value) for p in params])


def adam_step(state: AdamState, params, lr: float, grads=None) -> None:
    """One bias-corrected Adam update in place.

    ``grads`` defaults to each parameter's ``.grad``; a missing gradient is
    treated as zero.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params) or len(params) != len(state.m):
        raise ValueError("adam_step: parameter, gradient and state counts differ")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.value)
        if g.shape != p.value.shape or state.m[i].shape != p.value.shape:
            raise ad.ShapeError(f"adam_step: shape mismatch for {p.name}: param {p.value.shape}, grad {g.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    l_a: float
    l_s: float
    penalty: float
    val: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class Checkpoint:
    state: dict[str, np.ndarray]
    epoch: int
    val_f1: float
    config_hash: str


@dataclass
class TrainResult:
    best: Checkpoint
    history: list[EpochRecord] = field(default_factory=list)


def batch_loss(model, batch, config: TrainConfig, rng=None, train=True):
    out = model.forward(batch.token_ids, batch.mask, train=train, rng=rng)
    L_A = acd_loss(batch.y_A, out.aspect_probs)
    L_s = sc_loss(batch.y_S, out.sentiment_probs)
    penalty = l2_penalty(model.groups, config.lambda_l2)
    return total_loss(L_A, L_s, penalty, config.alpha_sc), L_A, L_s, penalty


def train(
    model,
    train_examples,
    val_examples,
    config: TrainConfig,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    stop_f1: float | None = None,
) -> TrainResult:
    """Train ``model`` in place and return the best validation checkpoint.

    The model is left holding the best checkpoint's parameters.  With
    ``stop_f1`` set, training ends as soon as validation ACSA F1 reaches it.
    """
    if not train_examples:
        raise ValueError("train: empty training set")
    if not val_examples:
        raise ValueError("train: empty validation set")
    params = model.trainable()
    state = AdamState.for_params(params)
    rng = np.random.default_rng(config.seed)
    best = Checkpoint(model.state(), 0, -1.0, config.digest())
    history = []
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        batch_seed = int(rng.integers(2**31))
        sums = np.zeros(4)
        for batch in make_batches(train_examples, config.batch_size, seed=batch_seed, shuffle=True):
            model.zero_grad()
            loss, L_A, L_s, penalty = batch_loss(model, batch, config, rng)
            ad.backward(loss)
            clip_gradient_norm(params, config.clip_norm, global_norm=config.global_clip)
            adam_step(state, params, config.learning_rate)
            n = len(batch)
            sums += [loss.value * n, L_A.value.sum(), L_s.value.sum(), float(penalty.value) * n]
        n_train = len(train_examples)
        report = evaluate(model, val_examples, config.tau, config.batch_size)
        record = EpochRecord(
            epoch,
            float(sums[0] / n_train),
            float(sums[1] / n_train),
            float(sums[2] / n_train),
            float(sums[3] / n_train),
            _val_summary(report),
        )
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        log.debug("epoch %d loss %.4f val acsa f1 %.4f", epoch, record.train_loss, report.acsa.f1)
        if report.acsa.f1 > best.val_f1:
            best = Checkpoint(model.state(), epoch, report.acsa.f1, config.digest())
            stale = 0
        else:
            stale += 1
        if stop_f1 is not None and report.acsa.f1 >= stop_f1:
            break
        if stale >= config.patience:
            break
    model.load_state(best.state)
    model.zero_grad()
    return TrainResult(best, history)


def _val_summary(report: EvalReport) -> dict:
    return {
        "acsa_p": report.acsa.precision,
        "acsa_r": report.acsa.recall,
        "acsa_f1": report.acsa.f1,
        "acd_p": report.acd.precision,
        "acd_r": report.acd.recall,
        "acd_f1": report.acd.f1,
        "sc_acc": report.sc_accuracy,
    }


@dataclass
class RunOutcome:
    seed: int
    model: object
    result: TrainResult
    report: EvalReport


@dataclass
class RepeatedResult:
    runs: list[RunOutcome]
    report: EvalReport


def run_repeated(
    model_factory: Callable[[int], object],
    train_examples,
    val_examples,
    config: TrainConfig,
    eval_examples=None,
    seeds=None,
    on_epoch: Callable[[int, EpochRecord], None] | None = None,
) -> RepeatedResult:
    """Train ``config.runs`` models with seeds ``seed, seed+1, ...`` and average.

    Each run is scored on ``eval_examples`` (the validation set when not
    given) with its best checkpoint loaded.
    """
    seeds = list(seeds) if seeds is not None else [config.seed + r for r in range(config.runs)]
    eval_examples = val_examples if eval_examples is None else eval_examples
    outcomes = []
    for r, seed in enumerate(seeds):
        run_config = TrainConfig(**{**asdict(config), "seed": seed})
        model = model_factory(seed)
        hook = (lambda rec, r=r: on_epoch(r, rec)) if on_epoch else None
        result = train(model, train_examples, val_examples, run_config, on_epoch=hook)
        report = evaluate(model, eval_examples, config.tau, config.batch_size)
        outcomes.append(RunOutcome(seed, model, result, report))
    return RepeatedResult(outcomes, average_runs([o.report for o in outcomes]))

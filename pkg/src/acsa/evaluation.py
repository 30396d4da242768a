"""Decoding and the ACSA / ACD / SC metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

DEFAULT_TAU = 0.25


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    n_pred: int = 0
    n_gold: int = 0
    n_correct: int = 0


@dataclass
class EvalReport:
    acsa: PRF
    acd: PRF
    sc_accuracy: float
    n_texts: int = 0
    sc_counts: tuple[int, int] = (0, 0)  # (correct, gold mentions)
    runs: list["EvalReport"] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["runs"] = [r.to_dict() for r in self.runs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            PRF(**d["acsa"]),
            PRF(**d["acd"]),
            d["sc_accuracy"],
            d.get("n_texts", 0),
            tuple(d.get("sc_counts", (0, 0))),
            [cls.from_dict(r) for r in d.get("runs", [])],
        )

    def to_text(self) -> str:
        lines = []
        for task in ("acsa", "acd"):
            m = getattr(self, task)
            lines += [
                f"{task}.precision = {m.precision:.6f}",
                f"{task}.recall = {m.recall:.6f}",
                f"{task}.f1 = {m.f1:.6f}",
                f"{task}.counts = pred {m.n_pred} gold {m.n_gold} correct {m.n_correct}",
            ]
        lines.append(f"sc.accuracy = {self.sc_accuracy:.6f}")
        lines.append(f"texts = {self.n_texts}")
        if self.runs:
            lines.append(f"runs = {len(self.runs)}")
        return "\n".join(lines) + "\n"


def decode(y_hat_A, y_hat_S, tau: float = DEFAULT_TAU):
    """Aspects with probability >= tau, each paired with its argmax polarity.

    Returns ``(aspects, pairs)`` as sets of ``j`` and ``(j, k)``.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    y_hat_A = np.asarray(y_hat_A)
    y_hat_S = np.asarray(y_hat_S)
    aspects = {int(j) for j in np.flatnonzero(y_hat_A >= tau)}
    # np.argmax returns the first maximal index
    pairs = {(j, int(np.argmax(y_hat_S[j]))) for j in aspects}
    return aspects, pairs


def micro_f1(predicted, gold) -> PRF:
    predicted, gold = set(predicted), set(gold)
    correct = len(predicted & gold)
    p = correct / len(predicted) if predicted else 0.0
    r = correct / len(gold) if gold else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return PRF(p, r, f1, len(predicted), len(gold), correct)


def gold_sets(examples):
    aspects, pairs = set(), set()
    for i, ex in enumerate(examples):
        for j in np.flatnonzero(ex.y_A):
            aspects.add((i, int(j)))
            pairs.add((i, int(j), int(np.argmax(ex.y_S[j]))))
    return aspects, pairs


def sc_accuracy(y_hat_S_per_text, examples) -> float:
    """Accuracy of the argmax polarity over gold-mentioned aspects only."""
    correct, total = sc_counts(y_hat_S_per_text, examples)
    if total == 0:
        raise ValueError("sc_accuracy: no gold aspect mentions in the data")
    return correct / total


def sc_counts(y_hat_S_per_text, examples) -> tuple[int, int]:
    correct = total = 0
    for probs, ex in zip(y_hat_S_per_text, examples):
        probs = np.asarray(probs)
        for j in np.flatnonzero(ex.y_A):
            total += 1
            correct += int(np.argmax(probs[j]) == np.argmax(ex.y_S[j]))
    return correct, total


def predict_outputs(model, examples, batch_size: int = 32):
    """Eval-mode ``(y_hat_A, y_hat_S)`` per example, in input order."""
    from .data import make_batches

    out = []
    for batch in make_batches(examples, batch_size, shuffle=False):
        res = model.forward(batch.token_ids, batch.mask, train=False)
        for b in range(len(batch)):
            out.append((res.y_hat_A[b].copy(), res.y_hat_S[b].copy()))
    return out


def report_from_outputs(outputs, examples, tau: float = DEFAULT_TAU) -> EvalReport:
    if not examples:
        raise ValueError("evaluate: empty dataset")
    pred_aspects, pred_pairs = set(), set()
    for i, (y_a, y_s) in enumerate(outputs):
        aspects, pairs = decode(y_a, y_s, tau)
        pred_aspects |= {(i, j) for j in aspects}
        pred_pairs |= {(i, j, k) for j, k in pairs}
    gold_aspects, gold_pairs = gold_sets(examples)
    correct, total = sc_counts([y_s for _, y_s in outputs], examples)
    return EvalReport(
        acsa=micro_f1(pred_pairs, gold_pairs),
        acd=micro_f1(pred_aspects, gold_aspects),
        sc_accuracy=correct / total if total else 0.0,
        n_texts=len(examples),
        sc_counts=(correct, total),
    )


def evaluate(model, examples, tau: float = DEFAULT_TAU, batch_size: int = 32) -> EvalReport:
    if not examples:
        raise ValueError("evaluate: empty dataset")
    return report_from_outputs(predict_outputs(model, examples, batch_size), examples, tau)


def _mean(values) -> float:
    values = [float(v) for v in values]
    if all(v == values[0] for v in values):
        return values[0]  # exact, where summing then dividing may drift by an ulp
    return math.fsum(values) / len(values)


def average_runs(reports) -> EvalReport:
    """Arithmetic mean of every metric; counts are summed."""
    reports = list(reports)
    if not reports:
        raise ValueError("average_runs: no reports")

    def mean_prf(task):
        ms = [getattr(r, task) for r in reports]
        return PRF(
            _mean([m.precision for m in ms]),
            _mean([m.recall for m in ms]),
            _mean([m.f1 for m in ms]),
            sum(m.n_pred for m in ms),
            sum(m.n_gold for m in ms),
            sum(m.n_correct for m in ms),
        )

    if len(reports) == 1:
        only = reports[0]
        return EvalReport(only.acsa, only.acd, only.sc_accuracy, only.n_texts, only.sc_counts, [only])
    return EvalReport(
        acsa=mean_prf("acsa"),
        acd=mean_prf("acd"),
        sc_accuracy=_mean([r.sc_accuracy for r in reports]),
        n_texts=sum(r.n_texts for r in reports),
        sc_counts=(sum(r.sc_counts[0] for r in reports), sum(r.sc_counts[1] for r in reports)),
        runs=reports,
    )

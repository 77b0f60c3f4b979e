"""Sentiment and emotion evaluation metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateError
from .model import EMOTIONS


def _pair(preds, golds) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    g = np.asarray(golds, dtype=np.float64).reshape(-1)
    if p.size == 0 or g.size == 0:
        raise ContractError("metric called on an empty sample")
    if p.size != g.size:
        raise ContractError(f"length mismatch: {p.size} predictions vs {g.size} golds")
    return p, g


def binarize(x) -> np.ndarray:
    """>= 0 is positive, < 0 negative."""
    return np.asarray(x, dtype=np.float64) >= 0


def a2_accuracy(preds, golds) -> float:
    p, g = _pair(preds, golds)
    return float(np.mean(binarize(p) == binarize(g)))


def _prf(p: np.ndarray, g: np.ndarray, positive: bool) -> float:
    tp = np.sum((p == positive) & (g == positive))
    fp = np.sum((p == positive) & (g != positive))
    fn = np.sum((p != positive) & (g == positive))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return float(2 * precision * recall / (precision + recall)) if precision + recall else 0.0


def f1(preds_bin, golds_bin, averaging: str = "weighted") -> float:
    """Binary F1 of the positive class, or per-class F1 averaged by gold support."""
    p, g = _pair(preds_bin, golds_bin)
    p, g = p.astype(bool), g.astype(bool)
    if averaging == "binary_positive":
        return _prf(p, g, True)
    if averaging == "weighted":
        n_pos = np.sum(g)
        return float((n_pos * _prf(p, g, True) + (g.size - n_pos) * _prf(p, g, False)) / g.size)
    raise ValueError(f"unknown averaging {averaging!r}")


def mae(preds, golds, denormalizer: Callable | float | None = None) -> float:
    """Mean absolute error in dataset label units."""
    p, g = _pair(preds, golds)
    if denormalizer is not None:
        if callable(denormalizer):
            p, g = np.asarray(denormalizer(p)), np.asarray(denormalizer(g))
        else:
            p, g = p * float(denormalizer), g * float(denormalizer)
    return float(np.mean(np.abs(p - g)))


def pearson(preds, golds) -> float:
    p, g = _pair(preds, golds)
    if p.size < 2:
        raise DegenerateError("pearson needs at least 2 samples")
    pc, gc = p - p.mean(), g - g.mean()
    sp, sg = np.sqrt(np.sum(pc * pc)), np.sqrt(np.sum(gc * gc))
    if sp == 0 or sg == 0:
        raise DegenerateError("pearson is undefined for a constant input")
    return float(np.sum(pc * gc) / (sp * sg))


def weighted_accuracy(preds_bin, golds_bin) -> float:
    """Balanced accuracy (TPR + TNR) / 2."""
    p, g = _pair(preds_bin, golds_bin)
    p, g = p.astype(bool), g.astype(bool)
    n_pos, n_neg = np.sum(g), np.sum(~g)
    if n_pos == 0 or n_neg == 0:
        raise DegenerateError("weighted accuracy needs both positive and negative golds")
    tpr = np.sum(p & g) / n_pos
    tnr = np.sum(~p & ~g) / n_neg
    return float((tpr + tnr) / 2)


# ---------------------------------------------------------------------------
# aggregate reports


@dataclass
class SentimentEval:
    a2: float
    f1_binary: float
    f1_weighted: float
    mae: float
    pearson_r: float | None
    n: int

    task = "sentiment"

    def to_dict(self) -> dict:
        return {"task": self.task, **asdict(self)}


@dataclass
class EmotionEval:
    wa: dict[str, float | None]
    f1: dict[str, float]
    confusion: list[list[int]]
    accuracy: float
    n: int

    task = "emotion"

    def to_dict(self) -> dict:
        return {"task": self.task, **asdict(self)}


def evaluate_sentiment(preds, golds, denormalizer=None) -> SentimentEval:
    p, g = _pair(preds, golds)
    pb, gb = binarize(p), binarize(g)
    try:
        r = pearson(p, g)
    except DegenerateError:
        r = None
    return SentimentEval(a2_accuracy(p, g), f1(pb, gb, "binary_positive"), f1(pb, gb, "weighted"),
                         mae(p, g, denormalizer), r, int(p.size))


def evaluate_emotion(pred_labels, gold_labels, n_classes: int = len(EMOTIONS)) -> EmotionEval:
    p = np.asarray(pred_labels, dtype=np.int64).reshape(-1)
    g = np.asarray(gold_labels, dtype=np.int64).reshape(-1)
    _pair(p, g)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (g, p), 1)
    wa, f1s = {}, {}
    for k in range(n_classes):
        name = EMOTIONS[k] if n_classes == len(EMOTIONS) else str(k)
        try:
            wa[name] = weighted_accuracy(p == k, g == k)
        except DegenerateError:
            wa[name] = None
        f1s[name] = f1(p == k, g == k, "binary_positive")
    return EmotionEval(wa, f1s, confusion.tolist(), float(np.mean(p == g)), int(p.size))


def evaluate(predictions: Sequence, dataset, task: str, denormalizer=None):
    """Score one Prediction per utterance of ``dataset`` (in dataset order).

    Utterances without a label for ``task`` are skipped.
    """
    utts = list(dataset.utterances())
    if len(predictions) != len(utts):
        raise ContractError(f"{len(predictions)} predictions for {len(utts)} utterances")
    if task == "sentiment":
        pairs = [(pr.sentiment, u.sentiment) for pr, u in zip(predictions, utts) if u.sentiment is not None]
        if any(p is None for p, _ in pairs):
            raise ContractError("predictions carry no sentiment scores")
        if not pairs:
            raise ContractError("dataset has no sentiment labels")
        p, g = zip(*pairs)
        return evaluate_sentiment(p, g, denormalizer)
    if task == "emotion":
        pairs = [(pr.emotion, u.emotion) for pr, u in zip(predictions, utts) if u.emotion is not None]
        if any(p is None for p, _ in pairs):
            raise ContractError("predictions carry no emotion labels")
        if not pairs:
            raise ContractError("dataset has no emotion labels")
        p, g = zip(*pairs)
        return evaluate_emotion(p, g)
    raise ValueError(f"unknown task {task!r}")


def _fmt(x) -> str:
    return "-" if x is None else f"{100 * x:.2f}"


def format_table(ev, title: str = "") -> str:
    """Plain-text table with one row per split or emotion class."""
    lines = [title] if title else []
    if isinstance(ev, SentimentEval):
        header = ["A2", "F1(w)", "F1(bin)", "MAE", "r", "n"]
        row = [_fmt(ev.a2), _fmt(ev.f1_weighted), _fmt(ev.f1_binary), f"{ev.mae:.4f}",
               "-" if ev.pearson_r is None else f"{ev.pearson_r:.4f}", str(ev.n)]
        widths = [max(len(h), len(v)) for h, v in zip(header, row)]
        lines.append("  ".join(h.rjust(w) for h, w in zip(header, widths)))
        lines.append("  ".join(v.rjust(w) for v, w in zip(row, widths)))
    else:
        names = list(ev.wa)
        w = max(8, *(len(n) for n in names))
        lines.append("Emotion".ljust(w) + "      WA      F1")
        for n in names:
            lines.append(n.ljust(w) + f"  {_fmt(ev.wa[n]):>6}  {_fmt(ev.f1[n]):>6}")
        lines.append(f"accuracy {_fmt(ev.accuracy)}  n={ev.n}")
    return "\n".join(lines)


def report_json(ev, **extra) -> str:
    return json.dumps({**ev.to_dict(), **extra}, sort_keys=True)

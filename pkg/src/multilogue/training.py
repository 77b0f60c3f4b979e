"""Losses, Adam, initialisation and the conversation-level training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint, OptimizerState, load_checkpoint, save_checkpoint  # noqa: F401
from .errors import ConfigError, ContractError, InputError
from .metrics import evaluate
from .model import (ModelConfig, ModelParams, forward_conversation, is_weight, parameter_shapes,
                    predictions_from, run_conversation)
from .numerics import Tensor

log = logging.getLogger(__name__)

TASKS = ("sentiment", "emotion")
PROB_FLOOR = 1e-12


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2_lambda: float = 1e-4
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    init_scale: float = 0.05
    grad_clip_norm: float | None = 5.0
    eval_train: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.eps <= 0 or self.l2_lambda < 0 or self.init_scale < 0:
            raise ConfigError("eps must be positive; l2_lambda and init_scale nonnegative")
        if self.batch_size < 1 or self.epochs < 0 or self.seed < 0:
            raise ConfigError("batch_size >= 1, epochs >= 0 and seed >= 0 required")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive or null")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


def init_params(config: ModelConfig, seed: int = 0, init_scale: float = 0.05) -> ModelParams:
    """Weights ~ U(-init_scale, init_scale) in canonical parameter order; biases zero."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if is_weight(name):
            data = rng.uniform(-init_scale, init_scale, size=shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# losses


def l2_penalty(params: ModelParams | None) -> Tensor:
    if params is None:
        return Tensor(0.0)
    terms = [nx.sum(nx.square(t)) for t in params.weights().values()]
    total = terms[0]
    for t in terms[1:]:
        total = nx.add(total, t)
    return total


def _with_l2(data_loss: Tensor, params, lam: float) -> Tensor:
    if lam == 0 or params is None:
        return data_loss
    return nx.add(data_loss, nx.scale(l2_penalty(params), lam))


def sentiment_loss(preds: Tensor, targets, params: ModelParams | None = None, lam: float = 0.0) -> Tensor:
    """Mean squared error plus lam * (sum of squared weight entries)."""
    preds = nx.as_tensor(preds)
    tgt = np.asarray(targets, dtype=np.float64).reshape(-1)
    if tgt.size == 0 or preds.data.size == 0:
        raise ContractError("sentiment_loss on an empty batch")
    if preds.shape != tgt.shape:
        raise ContractError(f"sentiment_loss: {preds.shape} predictions vs {tgt.shape} targets")
    return _with_l2(nx.mean(nx.square(preds - Tensor(tgt))), params, lam)


def emotion_loss(probs: Tensor, labels, params: ModelParams | None = None, lam: float = 0.0) -> Tensor:
    """Mean negative log-likelihood of the gold class, probabilities floored at 1e-12."""
    probs = nx.as_tensor(probs)
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if lab.size == 0:
        raise ContractError("emotion_loss on an empty batch")
    if probs.ndim != 2 or probs.shape[0] != lab.size:
        raise ContractError(f"emotion_loss: probs {probs.shape} vs {lab.size} labels")
    if lab.min() < 0 or lab.max() >= probs.shape[1]:
        raise InputError(f"emotion label outside [0, {probs.shape[1]})")
    picked = nx.take(probs, (np.arange(lab.size), lab))
    nll = nx.neg(nx.log(nx.clamp_min(picked, PROB_FLOOR)))
    return _with_l2(nx.mean(nll), params, lam)


# ---------------------------------------------------------------------------
# optimiser


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float | None) -> tuple[dict, float]:
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm:
        return dict(grads), norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


def adam_step(params: ModelParams, grads: Mapping[str, np.ndarray] | None,
              state: OptimizerState, config: TrainConfig) -> OptimizerState:
    """Bias-corrected Adam update, in place on ``params``; returns the advanced state."""
    if grads is None:
        grads = {n: t.grad for n, t in params.tensors.items()}
    for name in params.tensors:
        if grads.get(name) is None:
            raise ContractError(f"adam_step: no gradient for parameter {name!r}")
    grads, _ = clip_gradients(grads, config.grad_clip_norm)
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    m, v = {}, {}
    for name, p in params.tensors.items():
        g = grads[name]
        m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p.data = p.data - config.lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + config.eps)
    return OptimizerState(m, v, t)


# ---------------------------------------------------------------------------
# training loop


def _labelled(conv, task: str) -> np.ndarray:
    attr = "sentiment" if task == "sentiment" else "emotion"
    return np.array([i for i, u in enumerate(conv.utterances) if getattr(u, attr) is not None], dtype=np.int64)


def batch_loss(params: ModelParams, conversations, task: str, lam: float) -> tuple[Tensor, int]:
    """Loss averaged over every labelled utterance of the batch, plus the L2 term."""
    outs, targets = [], []
    for conv in conversations:
        idx = _labelled(conv, task)
        if idx.size == 0:
            continue
        out = run_conversation(params, conv)
        if task == "sentiment":
            outs.append(nx.take(out.sentiment, idx))
            targets.extend(conv.utterances[i].sentiment for i in idx)
        else:
            outs.append(nx.take(out.emotion_probs, idx))
            targets.extend(conv.utterances[i].emotion for i in idx)
    if not outs:
        raise ContractError(f"batch has no {task} labels")
    joined = nx.concat(outs, axis=0)
    if task == "sentiment":
        return sentiment_loss(joined, targets, params, lam), len(targets)
    return emotion_loss(joined, targets, params, lam), len(targets)


def predict_dataset(params: ModelParams, dataset) -> list:
    preds = []
    for conv in dataset.conversations:
        preds.extend(forward_conversation(params, conv))
    return preds


def split_metrics(params: ModelParams, dataset, task: str, denormalizer=None) -> dict:
    """Metrics plus the unregularised mean loss over all labelled utterances."""
    preds, total, n = [], 0.0, 0
    with nx.no_grad():
        for conv in dataset.conversations:
            out = run_conversation(params, conv)
            preds.extend(predictions_from(out))
            idx = _labelled(conv, task)
            if idx.size == 0:
                continue
            if task == "sentiment":
                loss = sentiment_loss(nx.take(out.sentiment, idx), [conv.utterances[i].sentiment for i in idx])
            else:
                loss = emotion_loss(nx.take(out.emotion_probs, idx), [conv.utterances[i].emotion for i in idx])
            total += loss.item() * idx.size
            n += idx.size
    d = evaluate(preds, dataset, task, denormalizer).to_dict()
    d.pop("task")
    d["loss"] = total / n
    return d


def check_compatible(dataset, config: ModelConfig, task: str | None = None) -> None:
    """Raise ConfigError unless ``dataset`` can be fed to a model built from ``config``."""
    for m in config.modalities:
        if m not in dataset.feature_dims:
            raise ConfigError(f"{dataset.split} data lacks modality {m!r} required by the model")
        if dataset.feature_dims[m] != config.feature_dims[m]:
            raise ConfigError(f"{m} dim mismatch: {dataset.split} data has {dataset.feature_dims[m]}, "
                              f"model expects {config.feature_dims[m]}")
    if dataset.max_parties > config.n_party_slots:
        raise ConfigError(f"{dataset.split} data has {dataset.max_parties} parties; model has "
                          f"{config.n_party_slots} party slots")
    if task is not None:
        if task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if task == "sentiment" and not config.has_sentiment_head:
            raise ConfigError("task 'sentiment' needs the sentiment head")
        if task == "emotion" and not config.has_emotion_head:
            raise ConfigError("task 'emotion' needs the emotion head")
        if not any(_labelled(c, task).size for c in dataset.conversations):
            raise ConfigError(f"{dataset.split} data has no {task} labels")


def _better(task: str, new: dict, best: dict | None) -> bool:
    if best is None:
        return True
    if task == "sentiment":
        return new["mae"] < best["mae"]
    return new["accuracy"] > best["accuracy"]


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    log: list[dict] = field(default_factory=list)


def train(dataset, model_config: ModelConfig, train_config: TrainConfig, task: str,
          validation=None, *, denormalizer=None,
          callback: Callable[[dict], bool | None] | None = None) -> TrainResult:
    """Mini-batch Adam over whole conversations.

    Deterministic for a fixed seed: parameter init and shuffling draw from
    generators seeded by ``train_config.seed`` and gradients are reduced in a
    fixed order. ``callback`` receives each epoch record; returning True stops
    training early. The best checkpoint is chosen on validation MAE
    (sentiment) or accuracy (emotion), falling back to the training split.
    """
    check_compatible(dataset, model_config, task)
    if validation is not None:
        check_compatible(validation, model_config, task)
    tc = train_config
    params = init_params(model_config, tc.seed, tc.init_scale)
    opt = OptimizerState.for_params(params)
    shuffle_rng = np.random.default_rng((tc.seed, 1))
    convs = [c for c in dataset.conversations if _labelled(c, task).size]

    def snapshot(epoch, metrics):
        return Checkpoint(model_config, params.copy(), opt.copy(), tc.to_dict(), epoch, metrics, task)

    records: list[dict] = []
    best_ckpt = snapshot(0, {})
    best_metrics = None
    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(convs))
        total, count = 0.0, 0
        for start in range(0, len(order), tc.batch_size):
            batch = [convs[i] for i in order[start:start + tc.batch_size]]
            params.zero_grad()
            loss, n = batch_loss(params, batch, task, tc.l2_lambda)
            nx.backward(loss)
            opt = adam_step(params, None, opt, tc)
            total += loss.item() * n
            count += n
        rec = {"epoch": epoch, "train_objective": total / count}
        if tc.eval_train:
            rec["train"] = split_metrics(params, dataset, task, denormalizer)
        if validation is not None:
            rec["validation"] = split_metrics(params, validation, task, denormalizer)
        rec["seconds"] = round(time.perf_counter() - t0, 3)
        records.append(rec)
        log.info("epoch %d %s", epoch, rec)
        monitor = rec.get("validation", rec.get("train"))
        if monitor is not None and _better(task, monitor, best_metrics):
            best_metrics = monitor
            best_ckpt = snapshot(epoch, _stable(rec))
        if callback is not None and callback(rec):
            break
    last = records[-1] if records else {}
    final = snapshot(last.get("epoch", 0), _stable(last))
    if best_metrics is None:
        best_ckpt = final
    return TrainResult(final, best_ckpt, records)


def _stable(rec: dict) -> dict:
    """Epoch record without wall-clock fields, so checkpoints are reproducible byte for byte."""
    return {k: v for k, v in rec.items() if k != "seconds"}

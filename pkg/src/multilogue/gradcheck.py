"""Finite-difference suites for every differentiable op and for the whole model."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import numerics as nx
from .model import ModelConfig, fuse, pairwise_attention, run_conversation
from .numerics import GradReport, GruCellParams, Tensor, grad_check

OP_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4


def _leaf(rng, *shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _away_from_zero(rng, *shape) -> Tensor:
    x = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x, requires_grad=True)


def _reduce(out: Tensor, rng_weights: np.ndarray) -> Tensor:
    """Contract with fixed random weights so every output entry matters."""
    return nx.sum(nx.mul(out, Tensor(rng_weights.reshape(out.shape))))


def op_cases() -> dict[str, Callable]:
    """name -> builder(rng) returning (op, inputs); the op maps current inputs to a tensor."""

    def binary(fn, *shapes):
        def build(rng):
            ins = {f"x{i}": _leaf(rng, *s) for i, s in enumerate(shapes)}
            return (lambda: fn(*ins.values())), ins
        return build

    def unary(fn, shape, leaf=_leaf):
        def build(rng):
            ins = {"x": leaf(rng, *shape)}
            return (lambda: fn(ins["x"])), ins
        return build

    def gru(rng):
        p = GruCellParams(2, 3, **{n: _leaf(rng, *s) for n, s in
                                   {"W_z": (3, 2), "W_r": (3, 2), "W_h": (3, 2), "U_z": (3, 3),
                                    "U_r": (3, 3), "U_h": (3, 3), "b_z": (3,), "b_r": (3,),
                                    "b_h": (3,)}.items()})
        h, x = _leaf(rng, 3), _leaf(rng, 2)
        ins = {**p.blocks(), "h_prev": h, "x": x}
        return (lambda: nx.gru_cell(p, h, x)), ins

    def pairwise(rng):
        ins = {"E_a": _leaf(rng, 3, 2), "E_b": _leaf(rng, 3, 2)}
        return (lambda: pairwise_attention(ins["E_a"], ins["E_b"])), ins

    def pairwise_causal(rng):
        ins = {"E_a": _leaf(rng, 3, 2), "E_b": _leaf(rng, 3, 2)}
        return (lambda: pairwise_attention(ins["E_a"], ins["E_b"], causal=True)), ins

    def take(rng):
        ins = {"x": _leaf(rng, 4, 3)}
        return (lambda: nx.take(ins["x"], (np.array([0, 2, 2]), np.array([1, 0, 0])))), ins

    return {
        "matmul": binary(nx.matmul, (3, 4), (4, 2)),
        "matvec": binary(nx.matmul, (3, 4), (4,)),
        "vecmat": binary(nx.matmul, (4,), (4, 2)),
        "dot": binary(nx.dot, (4,), (4,)),
        "add": binary(nx.add, (3, 2), (3, 2)),
        "sub": binary(nx.sub, (3, 2), (3, 2)),
        "mul": binary(nx.mul, (3, 2), (3, 2)),
        "add_bias": binary(nx.add_bias, (3, 2), (2,)),
        "concat0": binary(lambda a, b: nx.concat([a, b], axis=0), (2, 3), (1, 3)),
        "concat1": binary(lambda a, b: nx.concat([a, b], axis=1), (2, 3), (2, 2)),
        "stack": binary(lambda a, b: nx.stack([a, b]), (3,), (3,)),
        "transpose": unary(nx.transpose, (2, 3)),
        "reshape": unary(lambda x: nx.reshape(x, (3, 2)), (2, 3)),
        "sum_axis": unary(lambda x: nx.sum(x, axis=1), (2, 3)),
        "mean": unary(nx.mean, (2, 3)),
        "square": unary(nx.square, (4,)),
        "scale": unary(lambda x: nx.scale(x, -1.7), (4,)),
        "tanh": unary(nx.tanh, (5,)),
        "sigmoid": unary(nx.sigmoid, (5,)),
        "relu": unary(nx.relu, (5,), _away_from_zero),
        "log": unary(nx.log, (4,), lambda rng, *s: _leaf(rng, *s, low=0.2, high=2.0)),
        "softmax": unary(nx.softmax, (5,)),
        "softmax_rows": unary(lambda x: nx.softmax(x, axis=1), (3, 4)),
        "softmax_cols": unary(lambda x: nx.softmax(x, axis=0), (3, 4)),
        "take": take,
        "gru_cell": gru,
        "pairwise_attention": pairwise,
        "pairwise_attention_causal": pairwise_causal,
    }


def check_op(name: str, build: Callable, seed: int = 0, epsilon: float = 1e-5) -> GradReport:
    rng = np.random.default_rng(seed)
    op, ins = build(rng)
    weights = rng.normal(size=op().shape)

    def f():
        return _reduce(op(), weights)

    return grad_check(f, ins, epsilon, name=name)


def op_suite(points: int = 3, seed: int = 0) -> list[GradReport]:
    reports = []
    for name, build in op_cases().items():
        worst = None
        for k in range(points):
            rep = check_op(name, build, seed=seed * 1000 + k)
            if worst is None or rep.max_rel_err > worst.max_rel_err:
                worst = rep
        reports.append(worst)
    return reports


# ---------------------------------------------------------------------------
# whole model


def toy_config(heads: str = "both", **overrides) -> ModelConfig:
    base = dict(feature_dims={"text": 3, "audio": 2, "video": 2}, d_context=4, d_state=4,
                d_emotion=4, d_hidden=5, n_party_slots=2, heads=heads)
    base.update(overrides)
    return ModelConfig(**base)


def toy_conversation(config: ModelConfig, length: int = 3, seed: int = 0, speakers=None):
    from .data import Conversation, Utterance

    rng = np.random.default_rng(seed)
    speakers = speakers if speakers is not None else [i % config.n_party_slots for i in range(length)]
    utts = tuple(
        Utterance(int(s), {m: rng.normal(size=d) for m, d in config.feature_dims.items()},
                  float(np.tanh(rng.normal())), int(rng.integers(0, 6)))
        for s in speakers)
    return Conversation(f"toy{seed}", utts, config.n_party_slots)


def model_loss_fn(params, conversation, task: str, lam: float = 0.0) -> Callable[[], Tensor]:
    from .training import batch_loss

    def f():
        return batch_loss(params, [conversation], task, lam)[0]

    f.__name__ = f"model[{task}]"
    return f


def random_params(config: ModelConfig, seed: int = 0, scale: float = 1.0):
    """Every parameter, biases included, drawn U(-scale, scale).

    A generic point: at a zero-bias, small-weight init many gradients sit
    near 1e-9, where central differences carry as much round-off as signal.
    """
    from .model import ModelParams

    rng = np.random.default_rng(seed)
    return ModelParams(config, {n: Tensor(rng.uniform(-scale, scale, size=t.shape), requires_grad=True)
                                for n, t in ModelParams.zeros(config).tensors.items()})


def model_check(task: str, seed: int = 0, epsilon: float = 1e-5, scale: float = 1.0,
                lam: float = 0.0, config: ModelConfig | None = None,
                mode: str = "tensor") -> GradReport:
    """Finite-difference check of every parameter for one loss head on the toy model."""
    config = config or toy_config()
    params = random_params(config, seed, scale)
    conv = toy_conversation(config, 3, seed)
    return grad_check(model_loss_fn(params, conv, task, lam), params.tensors, epsilon,
                      name=f"model[{task}]", mode=mode)


def fusion_check(seed: int = 0) -> GradReport:
    rng = np.random.default_rng(seed)
    cfg = toy_config()
    ins = {m: _leaf(rng, 3, cfg.d_emotion) for m in cfg.modalities}
    weights = rng.normal(size=(3, cfg.fusion_width))
    return grad_check(lambda: _reduce(fuse(ins, cfg), weights), ins, name="fuse")


def run_all(seed: int = 0, points: int = 3) -> tuple[list[GradReport], bool]:
    reports = op_suite(points, seed)
    reports.append(fusion_check(seed))
    ok = all(r.max_rel_err < OP_TOLERANCE for r in reports)
    for task in ("sentiment", "emotion"):
        rep = model_check(task, seed)
        reports.append(rep)
        ok = ok and rep.max_rel_err < MODEL_TOLERANCE
    return reports, ok

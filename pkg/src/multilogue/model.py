"""Forward graph of the multimodal conversation model.

Per modality there is one context GRU shared by all parties, and per
(party slot, modality) a state GRU and an emotion GRU. At each utterance the
speaker's context, state and emotion vectors are updated in that order;
listeners carry theirs unchanged. The per-timestamp speaker emotion vectors
of all modalities are fused with pairwise attention and fed to a tanh
sentiment head and/or a softmax emotion head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from math import comb
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DimensionError, InputError
from .numerics import GruCellParams, Tensor

MODALITIES = ("text", "audio", "video")
SHORT_NAMES = {"t": "text", "a": "audio", "v": "video"}
EMOTIONS = ("happy", "sad", "angry", "surprise", "disgust", "fear")
HEADS = ("sentiment", "emotion", "both")

# Fusion pair order for the full tri-modal case: (v,t), (a,t), (v,a).
PAIR_ORDER = (("video", "text"), ("audio", "text"), ("video", "audio"))


def canonical_modalities(names: Sequence[str]) -> tuple[str, ...]:
    resolved = []
    for n in names:
        n = SHORT_NAMES.get(n, n)
        if n not in MODALITIES:
            raise ConfigError(f"unknown modality {n!r}")
        resolved.append(n)
    if len(set(resolved)) != len(resolved):
        raise ConfigError(f"duplicate modality in {list(names)}")
    return tuple(m for m in MODALITIES if m in resolved)


def fusion_pairs(modalities: Sequence[str]) -> list[tuple[str, str]]:
    present = set(modalities)
    pairs = [p for p in PAIR_ORDER if p[0] in present and p[1] in present]
    assert len(pairs) == comb(len(present), 2)
    return pairs


@dataclass
class ModelConfig:
    feature_dims: dict[str, int]
    modalities: tuple[str, ...] | None = None
    d_context: int = 8
    d_state: int = 8
    d_emotion: int = 8
    d_hidden: int = 8
    n_classes: int = 6
    n_party_slots: int = 2
    heads: str = "both"
    fusion_enabled: bool = True
    sentiment_head_bias: bool = False
    causal_fusion: bool = False
    share_party_weights: bool = False

    def __post_init__(self):
        if self.modalities is None:
            self.modalities = tuple(self.feature_dims)
        self.modalities = canonical_modalities(self.modalities)
        if not self.modalities:
            raise ConfigError("modalities must be non-empty")
        dims = {}
        for m in self.modalities:
            if m not in self.feature_dims:
                raise ConfigError(f"feature_dims missing modality {m!r}")
            dims[m] = int(self.feature_dims[m])
        self.feature_dims = dims
        for name in ("d_context", "d_state", "d_emotion", "d_hidden", "n_classes", "n_party_slots"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if any(d < 1 for d in dims.values()):
            raise ConfigError(f"feature dims must be >= 1, got {dims}")
        if self.heads not in HEADS:
            raise ConfigError(f"heads must be one of {HEADS}, got {self.heads!r}")
        if self.has_emotion_head and self.n_classes != 6:
            raise ConfigError("n_classes must be 6 when the emotion head is enabled")
        if self.fusion_enabled and len(self.modalities) < 2:
            raise ConfigError("fusion needs at least 2 modalities; disable it for uni-modal runs")

    @property
    def m(self) -> int:
        return len(self.modalities)

    @property
    def has_sentiment_head(self) -> bool:
        return self.heads in ("sentiment", "both")

    @property
    def has_emotion_head(self) -> bool:
        return self.heads in ("emotion", "both")

    @property
    def weight_slots(self) -> int:
        return 1 if self.share_party_weights else self.n_party_slots

    @property
    def fusion_width(self) -> int:
        m = self.m
        blocks = 2 * comb(m, 2) + m if self.fusion_enabled else m
        return blocks * self.d_emotion

    def slot_key(self, slot: int) -> int:
        return 0 if self.share_party_weights else slot

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        d = dict(d)
        if d.get("modalities") is not None:
            d["modalities"] = tuple(d["modalities"])
        return cls(**d)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable tensor of the model, in canonical order."""
    shapes: dict[str, tuple[int, ...]] = {}

    def gru(prefix, i, h):
        for b in ("W_z", "W_r", "W_h"):
            shapes[f"{prefix}.{b}"] = (h, i)
        for b in ("U_z", "U_r", "U_h"):
            shapes[f"{prefix}.{b}"] = (h, h)
        for b in ("b_z", "b_r", "b_h"):
            shapes[f"{prefix}.{b}"] = (h,)

    c = config
    for m in c.modalities:
        gru(f"cgru.{m}", c.feature_dims[m] + c.d_state, c.d_context)
    for slot in range(c.weight_slots):
        for m in c.modalities:
            gru(f"sgru.{slot}.{m}", c.feature_dims[m] + c.d_context, c.d_state)
    for slot in range(c.weight_slots):
        for m in c.modalities:
            gru(f"egru.{slot}.{m}", c.d_state, c.d_emotion)
    for m in c.modalities:
        shapes[f"w_alpha.{m}"] = (c.feature_dims[m], c.d_context)
    if c.has_sentiment_head:
        shapes["head.W_L"] = (1, c.fusion_width)
        if c.sentiment_head_bias:
            shapes["head.b_L"] = (1,)
    if c.has_emotion_head:
        shapes["head.W_l"] = (c.d_hidden, c.fusion_width)
        shapes["head.b_l"] = (c.d_hidden,)
        shapes["head.W_smax"] = (c.n_classes, c.d_hidden)
        shapes["head.b_smax"] = (c.n_classes,)
    return shapes


def is_weight(name: str) -> bool:
    """Weight matrices take part in L2 regularisation; biases do not."""
    return not name.rsplit(".", 1)[-1].startswith("b_")


class ModelParams:
    """All learnable tensors plus typed views onto the GRU banks."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, Tensor]):
        shapes = parameter_shapes(config)
        if list(tensors) != list(shapes):
            missing = set(shapes) - set(tensors)
            extra = set(tensors) - set(shapes)
            raise ConfigError(f"parameter set mismatch; missing={sorted(missing)} extra={sorted(extra)}")
        for name, shape in shapes.items():
            if tensors[name].shape != shape:
                raise DimensionError(f"parameter {name}: expected {shape}, got {tensors[name].shape}")
        self.config = config
        self.tensors: dict[str, Tensor] = dict(tensors)
        for name, t in self.tensors.items():
            t.name = name

        def cell(prefix):
            blocks = {b: self.tensors[f"{prefix}.{b}"] for b in nx._GRU_BLOCKS}
            h, i = blocks["W_z"].shape
            return GruCellParams(i, h, **blocks)

        c = config
        self.cgru = {m: cell(f"cgru.{m}") for m in c.modalities}
        self.sgru = {(s, m): cell(f"sgru.{s}.{m}") for s in range(c.weight_slots) for m in c.modalities}
        self.egru = {(s, m): cell(f"egru.{s}.{m}") for s in range(c.weight_slots) for m in c.modalities}
        self.w_alpha = {m: self.tensors[f"w_alpha.{m}"] for m in c.modalities}
        expected = 2 * c.m * c.weight_slots + c.m
        assert self.gru_count() == expected, (self.gru_count(), expected)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        return cls(config, {n: Tensor(np.zeros(s), requires_grad=True)
                            for n, s in parameter_shapes(config).items()})

    def gru_count(self) -> int:
        return len(self.cgru) + len(self.sgru) + len(self.egru)

    def state_gru(self, slot: int, modality: str) -> GruCellParams:
        return self.sgru[(self.config.slot_key(slot), modality)]

    def emotion_gru(self, slot: int, modality: str) -> GruCellParams:
        return self.egru[(self.config.slot_key(slot), modality)]

    def get(self, name: str) -> Tensor | None:
        return self.tensors.get(name)

    def weights(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if is_weight(n)}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = np.zeros_like(t.data)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: Tensor(t.data, requires_grad=True)
                                         for n, t in self.tensors.items()})

    def n_scalars(self) -> int:
        return int(np.sum([t.data.size for t in self.tensors.values()]))


# ---------------------------------------------------------------------------
# dialogue state


@dataclass
class DialogueState:
    contexts: dict[str, tuple[Tensor, ...]]
    states: dict[tuple[int, str], Tensor]
    emotions: dict[tuple[int, str], Tensor]
    t: int = 0


@dataclass
class StepTrace:
    att: dict[str, Tensor]
    alpha: dict[str, Tensor]
    speaker_emotions: dict[str, Tensor]
    speaker: int = 0


@dataclass
class Prediction:
    sentiment: float | None = None
    emotion_probs: np.ndarray | None = None
    emotion: int | None = None


def init_state(config: ModelConfig) -> DialogueState:
    """Zero states and emotions for every party slot, empty context history."""
    states = {(s, m): Tensor(np.zeros(config.d_state))
              for s in range(config.n_party_slots) for m in config.modalities}
    emotions = {(s, m): Tensor(np.zeros(config.d_emotion))
                for s in range(config.n_party_slots) for m in config.modalities}
    return DialogueState({m: () for m in config.modalities}, states, emotions, 0)


def _check_speaker(config: ModelConfig, speaker: int) -> None:
    if not 0 <= speaker < config.n_party_slots:
        raise InputError(f"speaker slot {speaker} out of range [0, {config.n_party_slots})")


def _features(config: ModelConfig, feats: Mapping[str, object]) -> dict[str, Tensor]:
    out = {}
    for m in config.modalities:
        if m not in feats:
            raise InputError(f"missing features for modality {m!r}")
        t = nx.as_tensor(feats[m])
        if t.shape != (config.feature_dims[m],):
            raise InputError(f"{m} features: expected ({config.feature_dims[m]},), got {t.shape}")
        out[m] = t
    return out


def context_update(params: ModelParams, state: DialogueState, speaker: int,
                   feats: Mapping[str, object]) -> dict[str, tuple[Tensor, ...]]:
    """c_{t+1} = cGRU(c_t, feat + s_t^speaker), appended to each modality's history."""
    c = params.config
    _check_speaker(c, speaker)
    feats = _features(c, feats)
    new = {}
    for m in c.modalities:
        history = state.contexts[m]
        c_prev = history[-1] if history else Tensor(np.zeros(c.d_context))
        x = nx.concat([feats[m], state.states[(speaker, m)]])
        new[m] = history + (nx.gru_cell(params.cgru[m], c_prev, x),)
    return new


def context_attention(params: ModelParams, modality: str, feat: Tensor,
                      history: Sequence[Tensor]) -> tuple[Tensor, Tensor]:
    """Score each context vector against the utterance features, softmax, pool."""
    if not history:
        raise ContractError("context_attention called with empty history; run context_update first")
    C = nx.stack(list(history))
    query = nx.matmul(nx.as_tensor(feat), params.w_alpha[modality])
    alpha = nx.softmax(nx.matmul(C, query))
    return nx.matmul(alpha, C), alpha


def state_update(params: ModelParams, state: DialogueState, speaker: int,
                 feats: Mapping[str, object], att: Mapping[str, Tensor]) -> dict[tuple[int, str], Tensor]:
    c = params.config
    _check_speaker(c, speaker)
    feats = _features(c, feats)
    new = dict(state.states)
    for m in c.modalities:
        x = nx.concat([feats[m], att[m]])
        new[(speaker, m)] = nx.gru_cell(params.state_gru(speaker, m), state.states[(speaker, m)], x)
    return new


def emotion_update(params: ModelParams, state: DialogueState, speaker: int) -> dict[tuple[int, str], Tensor]:
    """e_{t+1} = eGRU(e_t, s_{t+1}); ``state.states`` must already hold s_{t+1}."""
    c = params.config
    _check_speaker(c, speaker)
    new = dict(state.emotions)
    for m in c.modalities:
        key = (speaker, m)
        new[key] = nx.gru_cell(params.emotion_gru(speaker, m), state.emotions[key], state.states[key])
    return new


def step(params: ModelParams, state: DialogueState, speaker: int,
         feats: Mapping[str, object]) -> tuple[DialogueState, StepTrace]:
    c = params.config
    _check_speaker(c, speaker)
    feats = _features(c, feats)
    contexts = context_update(params, state, speaker, feats)
    att, alpha = {}, {}
    for m in c.modalities:
        att[m], alpha[m] = context_attention(params, m, feats[m], contexts[m])
    mid = replace(state, contexts=contexts)
    mid = replace(mid, states=state_update(params, mid, speaker, feats, att))
    emotions = emotion_update(params, mid, speaker)
    new = DialogueState(contexts, mid.states, emotions, state.t + 1)
    trace = StepTrace(att, alpha, {m: emotions[(speaker, m)] for m in c.modalities}, speaker)
    return new, trace


def step_utterance(params: ModelParams, state: DialogueState, utterance) -> tuple[DialogueState, StepTrace]:
    return step(params, state, utterance.speaker, utterance.features)


# ---------------------------------------------------------------------------
# fusion and heads


def pairwise_attention(E_a: Tensor, E_b: Tensor, causal: bool = False) -> Tensor:
    """Cross-modal attention over timestamps for one modality pair; returns T x 2*D_e."""
    if E_a.ndim != 2 or E_a.shape != E_b.shape:
        raise DimensionError(f"pairwise_attention: shapes {E_a.shape} and {E_b.shape}")
    mask = np.tril(np.ones((E_a.shape[0],) * 2, dtype=bool)) if causal else None
    B1 = nx.matmul(E_a, nx.transpose(E_b))
    B2 = nx.matmul(E_b, nx.transpose(E_a))
    N1 = nx.softmax(B1, axis=1, mask=mask)
    N2 = nx.softmax(B2, axis=1, mask=mask)
    A1 = nx.mul(nx.matmul(N1, E_b), E_a)
    A2 = nx.mul(nx.matmul(N2, E_a), E_b)
    return nx.concat([A1, A2], axis=1)


def fuse(emotions: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """Per-timestamp fusion of the T x D_e speaker-emotion matrices of each modality."""
    missing = [m for m in config.modalities if m not in emotions]
    if missing:
        raise InputError(f"fuse: missing emotion matrices for {missing}")
    raw = [emotions[m] for m in config.modalities]
    if not config.fusion_enabled:
        return nx.concat(raw, axis=1)
    if config.m < 2:
        raise ConfigError("fusion needs at least 2 modalities")
    pw = [pairwise_attention(emotions[a], emotions[b], config.causal_fusion)
          for a, b in fusion_pairs(config.modalities)]
    return nx.concat(pw + raw, axis=1)


def _rows(L: Tensor, W: Tensor) -> Tensor:
    """W applied to a vector, or to every row of a matrix."""
    if L.shape[-1] != W.shape[1]:
        raise DimensionError(f"head input width {L.shape[-1]} != expected {W.shape[1]}")
    if L.ndim == 1:
        return nx.matmul(W, L)
    return nx.matmul(L, nx.transpose(W))


def predict_sentiment(params: ModelParams, L: Tensor) -> Tensor:
    """tanh(W_L L); a vector ``L`` gives a scalar, a T-row matrix gives T scores."""
    W = params.get("head.W_L")
    if W is None:
        raise ConfigError("sentiment head is not enabled")
    z = _rows(L, W)
    b = params.get("head.b_L")
    if b is not None:
        z = nx.add_bias(z, b)
    out = nx.tanh(z)
    return nx.reshape(out, () if L.ndim == 1 else (L.shape[0],))


def predict_emotion(params: ModelParams, L: Tensor) -> tuple[Tensor, np.ndarray]:
    W_l = params.get("head.W_l")
    if W_l is None:
        raise ConfigError("emotion head is not enabled")
    hidden = nx.relu(nx.add_bias(_rows(L, W_l), params.tensors["head.b_l"]))
    logits = nx.add_bias(_rows(hidden, params.tensors["head.W_smax"]), params.tensors["head.b_smax"])
    probs = nx.softmax(logits, axis=-1)
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return probs, np.argmax(probs.data, axis=-1)


# ---------------------------------------------------------------------------
# whole conversations


@dataclass
class ConversationOutput:
    fused: Tensor
    sentiment: Tensor | None
    emotion_probs: Tensor | None
    emotion_labels: np.ndarray | None
    states: list[DialogueState] = field(default_factory=list)
    traces: list[StepTrace] = field(default_factory=list)


def _validated_inputs(config: ModelConfig, conversation) -> list[tuple[int, dict[str, Tensor]]]:
    utts = list(conversation.utterances)
    if not utts:
        raise InputError("conversation has no utterances")
    n_parties = getattr(conversation, "n_parties", None)
    if n_parties is not None and n_parties > config.n_party_slots:
        raise InputError(f"conversation has {n_parties} parties but the model has "
                         f"{config.n_party_slots} party slots")
    out = []
    for i, u in enumerate(utts):
        try:
            _check_speaker(config, u.speaker)
            out.append((u.speaker, _features(config, u.features)))
        except InputError as exc:
            raise InputError(f"utterance {i}: {exc}") from exc
    return out


def run_conversation(params: ModelParams, conversation) -> ConversationOutput:
    """Unroll the recurrent graph over all utterances, then fuse and apply the heads."""
    c = params.config
    inputs = _validated_inputs(c, conversation)
    state = init_state(c)
    states, traces = [], []
    for speaker, feats in inputs:
        state, trace = step(params, state, speaker, feats)
        states.append(state)
        traces.append(trace)
    E = {m: nx.stack([tr.speaker_emotions[m] for tr in traces]) for m in c.modalities}
    L = fuse(E, c)
    sent = predict_sentiment(params, L) if c.has_sentiment_head else None
    probs, labels = predict_emotion(params, L) if c.has_emotion_head else (None, None)
    return ConversationOutput(L, sent, probs, labels, states, traces)


def forward_conversation(params: ModelParams, conversation) -> list[Prediction]:
    with nx.no_grad():
        out = run_conversation(params, conversation)
    return predictions_from(out)


def predictions_from(out: ConversationOutput) -> list[Prediction]:
    T = out.fused.shape[0]
    preds = []
    for i in range(T):
        p = Prediction()
        if out.sentiment is not None:
            p.sentiment = float(out.sentiment.data[i])
        if out.emotion_probs is not None:
            p.emotion_probs = out.emotion_probs.data[i].copy()
            p.emotion = int(out.emotion_labels[i])
        preds.append(p)
    return preds


def probe_representations(params_a: ModelParams, params_b: ModelParams, conversation,
                          t: int, modality: str) -> dict[str, float]:
    """Euclidean distances between the speaker's s_t, c_t and e_t under two parameter sets.

    ``t`` is 1-based: the representations right after the t-th utterance.
    """
    if params_a.config.to_dict() != params_b.config.to_dict():
        raise InputError("probe: parameter sets were built for different model configs")
    modality = SHORT_NAMES.get(modality, modality)
    if modality not in params_a.config.modalities:
        raise InputError(f"probe: modality {modality!r} not in model")
    n = len(conversation.utterances)
    if not 1 <= t <= n:
        raise InputError(f"probe: t={t} outside conversation of length {n}")
    speaker = conversation.utterances[t - 1].speaker
    reps = []
    with nx.no_grad():
        for params in (params_a, params_b):
            st = run_conversation(params, conversation).states[t - 1]
            reps.append((st.states[(speaker, modality)].data,
                         st.contexts[modality][t - 1].data,
                         st.emotions[(speaker, modality)].data))
    (sa, ca, ea), (sb, cb, eb) = reps
    return {"dist_s": float(np.linalg.norm(sa - sb)),
            "dist_c": float(np.linalg.norm(ca - cb)),
            "dist_e": float(np.linalg.norm(ea - eb))}

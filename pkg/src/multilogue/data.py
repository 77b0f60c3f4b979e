"""Conversation datasets: schema, JSONL loading, masking, label scaling, synthetic data.

File format is one JSON object per line. An optional first line
``{"header": {...}}`` may declare ``split``, ``label_range`` (``unit`` or
``mosei3``), ``feature_dims`` and ``speakerless``. Every other line is a
conversation::

    {"id": "c1", "n_parties": 2,
     "utterances": [{"speaker": 0, "text": [...], "audio": [...], "video": [...],
                     "sentiment": 0.4, "emotion": 2}]}
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError, ParseError, SchemaError
from .model import EMOTIONS, MODALITIES, SHORT_NAMES, canonical_modalities

LABEL_RANGES = {"unit": 1.0, "mosei3": 3.0}
SPLITS = ("train", "validation", "test")
UTTERANCE_KEYS = {"speaker", "sentiment", "emotion", *MODALITIES}
DATA_ROOT_ENV = "MULTILOGUE_DATA_ROOT"

# Utterance-level feature sizes of the public CMU feature releases.
MOSEI_DIMS = {"text": 300, "video": 35, "audio": 384}
MOSI_DIMS = {"text": 100, "video": 100, "audio": 73}


@dataclass(eq=False)
class Utterance:
    speaker: int
    features: dict[str, np.ndarray]
    sentiment: float | None = None
    emotion: int | None = None

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (self.speaker == other.speaker and self.sentiment == other.sentiment
                and self.emotion == other.emotion
                and self.features.keys() == other.features.keys()
                and all(np.array_equal(v, other.features[k]) for k, v in self.features.items()))

    def to_record(self) -> dict:
        rec: dict = {"speaker": self.speaker}
        for m in MODALITIES:
            if m in self.features:
                rec[m] = self.features[m].tolist()
        if self.sentiment is not None:
            rec["sentiment"] = self.sentiment
        if self.emotion is not None:
            rec["emotion"] = self.emotion
        return rec


@dataclass
class Conversation:
    id: str
    utterances: tuple[Utterance, ...]
    n_parties: int = 1

    def __len__(self):
        return len(self.utterances)


@dataclass
class Dataset:
    split: str
    conversations: tuple[Conversation, ...]
    feature_dims: dict[str, int]
    label_range: str = "unit"
    speakerless: bool = False

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(self.feature_dims)

    @property
    def n_utterances(self) -> int:
        return sum(len(c.utterances) for c in self.conversations)

    @property
    def max_parties(self) -> int:
        return max(c.n_parties for c in self.conversations)

    def utterances(self) -> Iterable[Utterance]:
        for conv in self.conversations:
            yield from conv.utterances

    def header(self) -> dict:
        return {"split": self.split, "label_range": self.label_range,
                "feature_dims": dict(self.feature_dims), "speakerless": self.speakerless}


@dataclass(frozen=True)
class LabelScale:
    """Maps dataset-range sentiment to [-1, 1] and back."""

    factor: float = 1.0

    def forward(self, x):
        return np.asarray(x, dtype=np.float64) / self.factor

    def inverse(self, x):
        return np.asarray(x, dtype=np.float64) * self.factor

    def __call__(self, x):
        return self.inverse(x)


def resolve_path(path: str | os.PathLike) -> Path:
    """Relative paths are looked up under $MULTILOGUE_DATA_ROOT when it is set."""
    p = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if not p.is_absolute() and root and not p.exists():
        return Path(root) / p
    return p


# ---------------------------------------------------------------------------
# validation


def validate_dataset(ds: Dataset) -> Dataset:
    if ds.split not in SPLITS:
        raise SchemaError(f"unknown split {ds.split!r}")
    if ds.label_range not in LABEL_RANGES:
        raise SchemaError(f"unknown label_range {ds.label_range!r}")
    if not ds.feature_dims:
        raise SchemaError("dataset declares no modalities")
    bound = LABEL_RANGES[ds.label_range]
    if not ds.conversations or ds.n_utterances == 0:
        raise SchemaError(f"{ds.split} split has no utterances")
    seen = set()
    for conv in ds.conversations:
        if conv.id in seen:
            raise SchemaError(f"duplicate conversation id {conv.id!r}")
        seen.add(conv.id)
        if not conv.utterances:
            raise SchemaError(f"conversation {conv.id!r} has no utterances")
        if conv.n_parties < 1:
            raise SchemaError(f"conversation {conv.id!r}: n_parties must be >= 1")
        for i, u in enumerate(conv.utterances):
            where = f"conversation {conv.id!r} utterance {i}"
            if not 0 <= u.speaker < conv.n_parties:
                raise SchemaError(f"{where}: speaker {u.speaker} outside [0, {conv.n_parties})")
            if set(u.features) != set(ds.feature_dims):
                raise SchemaError(f"{where}: modalities {sorted(u.features)} != "
                                  f"dataset modalities {sorted(ds.feature_dims)}")
            for m, d in ds.feature_dims.items():
                v = u.features[m]
                if v.shape != (d,):
                    raise SchemaError(f"{where}: {m} has dim {v.shape[0] if v.ndim else 0}, expected {d}")
                if not np.all(np.isfinite(v)):
                    raise SchemaError(f"{where}: {m} features are not finite")
            if u.sentiment is None and u.emotion is None:
                raise SchemaError(f"{where}: no sentiment or emotion label")
            if u.sentiment is not None and not (math.isfinite(u.sentiment) and abs(u.sentiment) <= bound):
                raise SchemaError(f"{where}: sentiment {u.sentiment} outside [-{bound}, {bound}]")
            if u.emotion is not None and not 0 <= u.emotion < len(EMOTIONS):
                raise SchemaError(f"{where}: emotion {u.emotion} outside [0, {len(EMOTIONS)})")
    return ds


def check_disjoint(*datasets: Dataset) -> None:
    owner: dict[str, str] = {}
    for ds in datasets:
        for conv in ds.conversations:
            if conv.id in owner and owner[conv.id] != ds.split:
                raise SchemaError(f"conversation {conv.id!r} appears in both "
                                  f"{owner[conv.id]} and {ds.split}")
            owner[conv.id] = ds.split


# ---------------------------------------------------------------------------
# loading and saving


def _parse_utterance(rec, lineno: int, conv_id: str, i: int, speakerless: bool) -> Utterance:
    if not isinstance(rec, dict):
        raise ParseError(f"line {lineno}: utterance {i} is not an object")
    unknown = set(rec) - UTTERANCE_KEYS
    if unknown:
        raise SchemaError(f"line {lineno}: conversation {conv_id!r} utterance {i}: "
                          f"unknown keys {sorted(unknown)}")
    feats = {}
    for m in MODALITIES:
        if m in rec:
            try:
                feats[m] = np.asarray(rec[m], dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise ParseError(f"line {lineno}: utterance {i}: bad {m} vector") from exc
            if feats[m].ndim != 1:
                raise ParseError(f"line {lineno}: utterance {i}: {m} must be a flat list")
    speaker = rec.get("speaker")
    if speaker is None:
        if not speakerless:
            raise SchemaError(f"line {lineno}: conversation {conv_id!r} utterance {i}: missing speaker")
        speaker = 0
    sentiment = rec.get("sentiment")
    emotion = rec.get("emotion")
    try:
        return Utterance(int(speaker), feats,
                         None if sentiment is None else float(sentiment),
                         None if emotion is None else int(emotion))
    except (TypeError, ValueError) as exc:
        raise ParseError(f"line {lineno}: utterance {i}: bad speaker or label") from exc


def load_dataset(path, expected_dims: Mapping[str, int] | None = None, *,
                 split: str | None = None, label_range: str | None = None) -> Dataset:
    """Read and fully validate a JSONL conversation file."""
    path = resolve_path(path)
    header: dict = {}
    convs: list[Conversation] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc.msg}") from exc
            if not isinstance(rec, dict):
                raise ParseError(f"{path}:{lineno}: record is not an object")
            if "header" in rec:
                if convs or header:
                    raise ParseError(f"{path}:{lineno}: header must be the first record")
                header = dict(rec["header"])
                continue
            try:
                conv_id = str(rec["id"])
                utts_raw = rec["utterances"]
            except KeyError as exc:
                raise ParseError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from exc
            if not isinstance(utts_raw, list):
                raise ParseError(f"{path}:{lineno}: utterances must be a list")
            speakerless = bool(header.get("speakerless", False))
            utts = tuple(_parse_utterance(u, lineno, conv_id, i, speakerless)
                         for i, u in enumerate(utts_raw))
            n_parties = rec.get("n_parties")
            if n_parties is None:
                n_parties = max((u.speaker for u in utts), default=0) + 1
            convs.append(Conversation(conv_id, utts, int(n_parties)))

    if "feature_dims" in header:
        dims = {m: int(d) for m, d in header["feature_dims"].items()}
    elif convs:
        dims = {m: int(v.shape[0]) for m, v in convs[0].utterances[0].features.items()}
    else:
        dims = {}
    unknown = set(dims) - set(MODALITIES)
    if unknown:
        raise SchemaError(f"{path}: unknown modalities {sorted(unknown)}")
    dims = {m: dims[m] for m in MODALITIES if m in dims}
    if expected_dims is not None:
        want = {SHORT_NAMES.get(k, k): int(v) for k, v in expected_dims.items()}
        if want != dims:
            raise SchemaError(f"{path}: feature dims {dims} do not match expected {want}")
    ds = Dataset(split or header.get("split", "train"), tuple(convs), dims,
                 label_range or header.get("label_range", "unit"),
                 bool(header.get("speakerless", False)))
    return validate_dataset(ds)


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"header": ds.header()}, sort_keys=True) + "\n")
        for conv in ds.conversations:
            rec = {"id": conv.id, "n_parties": conv.n_parties,
                   "utterances": [u.to_record() for u in conv.utterances]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def convert_cmu_record(video_id: str, segments: Sequence[Mapping], *, speaker_key: str | None = None) -> dict:
    """Map one video of CMU-style utterance features onto a conversation record.

    Each segment is expected to carry ``text``/``audio``/``video`` feature lists
    (already averaged to utterance level), a ``sentiment`` score in [-3, 3] and
    optionally an ``emotion`` index. Without speaker information every
    utterance goes to slot 0.
    """
    speakers: dict = {}
    utts = []
    for seg in segments:
        key = seg.get(speaker_key) if speaker_key else None
        slot = speakers.setdefault(key, len(speakers))
        rec = {"speaker": slot}
        for m in MODALITIES:
            rec[m] = [float(x) for x in seg[m]]
        if seg.get("sentiment") is not None:
            rec["sentiment"] = float(seg["sentiment"])
        if seg.get("emotion") is not None:
            rec["emotion"] = int(seg["emotion"])
        utts.append(rec)
    return {"id": video_id, "n_parties": max(1, len(speakers)), "utterances": utts}


# ---------------------------------------------------------------------------
# transforms


def parse_subset(subset) -> tuple[str, ...]:
    if isinstance(subset, str):
        subset = [s.strip() for s in subset.split(",") if s.strip()]
    return canonical_modalities(list(subset))


def mask_modalities(ds: Dataset, subset) -> Dataset:
    keep = parse_subset(subset)
    if not keep:
        raise InputError("modality subset must be non-empty")
    missing = set(keep) - set(ds.feature_dims)
    if missing:
        raise InputError(f"subset modalities {sorted(missing)} not in dataset {list(ds.feature_dims)}")
    if keep == ds.modalities:
        return ds
    convs = tuple(
        Conversation(c.id, tuple(Utterance(u.speaker, {m: u.features[m] for m in keep},
                                           u.sentiment, u.emotion) for u in c.utterances),
                     c.n_parties)
        for c in ds.conversations)
    return Dataset(ds.split, convs, {m: ds.feature_dims[m] for m in keep},
                   ds.label_range, ds.speakerless)


def normalize_labels(ds: Dataset) -> tuple[Dataset, LabelScale]:
    """Rescale sentiment to [-1, 1]; returns the dataset and the inverse transform."""
    if ds.label_range == "unit":
        warnings.warn(f"{ds.split} dataset already has unit-range labels", stacklevel=2)
        return ds, LabelScale(1.0)
    scale = LabelScale(LABEL_RANGES[ds.label_range])
    convs = tuple(
        Conversation(c.id, tuple(Utterance(u.speaker, u.features,
                                           None if u.sentiment is None else u.sentiment / scale.factor,
                                           u.emotion) for u in c.utterances),
                     c.n_parties)
        for c in ds.conversations)
    return Dataset(ds.split, convs, dict(ds.feature_dims), "unit", ds.speakerless), scale


# ---------------------------------------------------------------------------
# synthetic data with a planted signal


@dataclass
class SyntheticSpec:
    n_conversations: dict[str, int] = field(default_factory=lambda: {"train": 200, "validation": 50})
    n_parties: int = 2
    min_len: int = 4
    max_len: int = 10
    dims: dict[str, int] = field(default_factory=lambda: {"text": 8, "audio": 6, "video": 6})
    seed: int = 0
    noise_sigma: float = 0.05
    drift_scale: float = 0.5
    signal_gain: float = 1.0

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticSpec":
        d = dict(d)
        if "lengths" in d:
            lengths = d.pop("lengths")
            if not isinstance(lengths, (list, tuple)) or len(lengths) != 2:
                raise InputError("synthetic spec: lengths must be [min, max]")
            d["min_len"], d["max_len"] = int(lengths[0]), int(lengths[1])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown synthetic spec fields: {sorted(unknown)}")
        if isinstance(d.get("n_conversations"), int):
            d["n_conversations"] = {"train": d["n_conversations"]}
        return cls(**d)


@dataclass
class PlantedOracle:
    """The generating parameters; scores utterances the way the labels were made."""

    modalities: tuple[str, ...]
    w_sentiment: np.ndarray
    w_emotion: np.ndarray
    b_emotion: np.ndarray
    noise_sigma: float

    def _x(self, u: Utterance) -> np.ndarray:
        return np.concatenate([u.features[m] for m in self.modalities])

    def sentiment(self, u: Utterance) -> float:
        return float(np.tanh(self.w_sentiment @ self._x(u)))

    def emotion(self, u: Utterance) -> int:
        return int(np.argmax(self.w_emotion @ self._x(u) + self.b_emotion))

    def to_dict(self) -> dict:
        return {"modalities": list(self.modalities), "w_sentiment": self.w_sentiment.tolist(),
                "w_emotion": self.w_emotion.tolist(), "b_emotion": self.b_emotion.tolist(),
                "noise_sigma": self.noise_sigma}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PlantedOracle":
        return cls(tuple(d["modalities"]), np.asarray(d["w_sentiment"], dtype=np.float64),
                   np.asarray(d["w_emotion"], dtype=np.float64),
                   np.asarray(d["b_emotion"], dtype=np.float64), float(d["noise_sigma"]))


@dataclass
class SyntheticBundle:
    datasets: dict[str, Dataset]
    oracle: PlantedOracle


def generate_synthetic(spec: SyntheticSpec) -> SyntheticBundle:
    """Conversations whose features are a per-conversation drift plus per-utterance signal.

    Sentiment is tanh of a planted linear score plus Gaussian noise (clipped to
    [-1, 1]); emotion is the argmax of a planted 6-way linear score.
    """
    if any(d < 1 for d in spec.dims.values()) or not spec.dims:
        raise InputError("synthetic dims must be >= 1")
    if spec.min_len < 1 or spec.max_len < spec.min_len:
        raise InputError("synthetic lengths must satisfy 1 <= min_len <= max_len")
    mods = canonical_modalities(list(spec.dims))
    dims = {m: int(spec.dims[m]) for m in mods}
    width = sum(dims.values())
    rng = np.random.default_rng(spec.seed)
    feat_var = 1.0 + spec.drift_scale ** 2
    w_sent = rng.normal(0.0, spec.signal_gain / math.sqrt(width * feat_var), size=width)
    w_emo = rng.normal(0.0, 1.0, size=(len(EMOTIONS), width))
    b_emo = np.zeros(len(EMOTIONS))
    oracle = PlantedOracle(mods, w_sent, w_emo, b_emo, float(spec.noise_sigma))

    datasets = {}
    counter = 0
    for split in SPLITS:
        n = spec.n_conversations.get(split, 0)
        if not n:
            continue
        convs = []
        for _ in range(n):
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            drift = {m: rng.normal(0.0, spec.drift_scale, size=d) for m, d in dims.items()}
            utts = []
            for _ in range(length):
                speaker = int(rng.integers(0, spec.n_parties))
                feats = {m: drift[m] + rng.normal(0.0, 1.0, size=d) for m, d in dims.items()}
                u = Utterance(speaker, feats)
                noise = rng.normal(0.0, spec.noise_sigma) if spec.noise_sigma > 0 else 0.0
                u.sentiment = float(np.clip(oracle.sentiment(u) + noise, -1.0, 1.0))
                u.emotion = oracle.emotion(u)
                utts.append(u)
            convs.append(Conversation(f"syn{counter:05d}", tuple(utts), spec.n_parties))
            counter += 1
        datasets[split] = validate_dataset(Dataset(split, tuple(convs), dict(dims), "unit"))
    if not datasets:
        raise InputError("synthetic spec requests no conversations")
    return SyntheticBundle(datasets, oracle)

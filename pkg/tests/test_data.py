import json

import numpy as np
import pytest

from multilogue.data import (DATA_ROOT_ENV, MOSEI_DIMS, MOSI_DIMS, Conversation, Dataset, LabelScale,
                             PlantedOracle, SyntheticSpec, Utterance, check_disjoint, convert_cmu_record,
                             generate_synthetic, load_dataset, mask_modalities, normalize_labels,
                             save_dataset)
from multilogue.errors import InputError, ParseError, SchemaError


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def conv_record(cid, dims, n=2, rng=None, sentiment=0.5, **extra):
    rng = rng or np.random.default_rng(0)
    utts = [{"speaker": i % 2, **{m: rng.normal(size=d).tolist() for m, d in dims.items()},
             "sentiment": sentiment, "emotion": i % 6} for i in range(n)]
    return {"id": cid, "n_parties": 2, "utterances": utts, **extra}


@pytest.mark.parametrize("dims", [MOSEI_DIMS, MOSI_DIMS])
def test_load_benchmark_dims(tmp_path, dims):
    assert dims in ({"text": 300, "video": 35, "audio": 384}, {"text": 100, "video": 100, "audio": 73})
    path = write_jsonl(tmp_path / "d.jsonl", [conv_record("a", dims), conv_record("b", dims)])
    ds = load_dataset(path, expected_dims=dims)
    assert ds.feature_dims == {m: dims[m] for m in ("text", "audio", "video")}
    assert ds.n_utterances == 4


def test_short_text_vector_is_schema_error(tmp_path):
    bad = conv_record("b", MOSEI_DIMS)
    bad["utterances"][1]["text"] = bad["utterances"][1]["text"][:299]
    path = write_jsonl(tmp_path / "d.jsonl", [{"header": {"feature_dims": MOSEI_DIMS}},
                                              conv_record("a", MOSEI_DIMS), bad])
    with pytest.raises(SchemaError, match="'b' utterance 1: text has dim 299, expected 300"):
        load_dataset(path)


def test_expected_dims_mismatch(tmp_path):
    path = write_jsonl(tmp_path / "d.jsonl", [conv_record("a", MOSI_DIMS)])
    with pytest.raises(SchemaError):
        load_dataset(path, expected_dims=MOSEI_DIMS)


def test_parse_error_names_line(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps(conv_record("a", {"text": 2})) + "\n{not json\n")
    with pytest.raises(ParseError, match=":2:"):
        load_dataset(path)


def test_unknown_utterance_key(tmp_path):
    rec = conv_record("a", {"text": 2})
    rec["utterances"][0]["smell"] = [1]
    with pytest.raises(SchemaError, match="unknown keys"):
        load_dataset(write_jsonl(tmp_path / "d.jsonl", [rec]))


def test_label_range_enforced(tmp_path):
    rec = conv_record("a", {"text": 2}, sentiment=2.5)
    with pytest.raises(SchemaError, match="outside"):
        load_dataset(write_jsonl(tmp_path / "d.jsonl", [rec]))
    ds = load_dataset(write_jsonl(tmp_path / "e.jsonl", [rec]), label_range="mosei3")
    assert ds.label_range == "mosei3"


def test_speakerless_defaults_to_slot_zero(tmp_path):
    rec = conv_record("a", {"text": 2})
    for u in rec["utterances"]:
        del u["speaker"]
    rec["n_parties"] = 1
    with pytest.raises(SchemaError, match="missing speaker"):
        load_dataset(write_jsonl(tmp_path / "d.jsonl", [rec]))
    ds = load_dataset(write_jsonl(tmp_path / "e.jsonl", [{"header": {"speakerless": True}}, rec]))
    assert all(u.speaker == 0 for u in ds.utterances())


def test_duplicate_ids_and_disjoint_splits(tmp_path):
    dims = {"text": 2}
    with pytest.raises(SchemaError, match="duplicate"):
        load_dataset(write_jsonl(tmp_path / "d.jsonl", [conv_record("a", dims), conv_record("a", dims)]))
    tr = load_dataset(write_jsonl(tmp_path / "t.jsonl", [conv_record("a", dims)]), split="train")
    va = load_dataset(write_jsonl(tmp_path / "v.jsonl", [conv_record("a", dims)]), split="validation")
    with pytest.raises(SchemaError, match="both"):
        check_disjoint(tr, va)


def test_data_root_env(tmp_path, monkeypatch):
    write_jsonl(tmp_path / "d.jsonl", [conv_record("a", {"text": 2})])
    monkeypatch.setenv(DATA_ROOT_ENV, str(tmp_path))
    monkeypatch.chdir(tmp_path.parent)
    assert load_dataset("d.jsonl").n_utterances == 2


def test_save_load_roundtrip(tmp_path):
    ds = generate_synthetic(SyntheticSpec(n_conversations={"train": 3})).datasets["train"]
    save_dataset(ds, tmp_path / "a.jsonl")
    back = load_dataset(tmp_path / "a.jsonl")
    assert back == ds
    save_dataset(back, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


# --- masking ------------------------------------------------------------------------

def _synth(**kw):
    return generate_synthetic(SyntheticSpec(n_conversations={"train": 4}, **kw)).datasets["train"]


def test_mask_identity_and_subset():
    ds = _synth()
    assert mask_modalities(ds, "t,a,v") is ds
    text = mask_modalities(ds, "t")
    assert text.feature_dims == {"text": 8}
    assert all(set(u.features) == {"text"} for u in text.utterances())
    assert mask_modalities(text, ["text"]) == text
    assert mask_modalities(mask_modalities(ds, "t,v"), "t,v") == mask_modalities(ds, "v,t")


def test_mask_errors():
    ds = mask_modalities(_synth(), "t")
    with pytest.raises(InputError):
        mask_modalities(ds, "")
    with pytest.raises(InputError):
        mask_modalities(ds, "a")


# --- label scaling ----------------------------------------------------------------------

def test_label_scale_values():
    s = LabelScale(3.0)
    assert s.forward(3.0) == 1.0 and s.forward(0.0) == 0.0
    for x in (-3.0, -1.5, 0.6, 3.0):
        assert s.inverse(s.forward(x)) == x


def test_normalize_labels(tmp_path):
    rec = conv_record("a", {"text": 2}, sentiment=-3.0)
    ds = load_dataset(write_jsonl(tmp_path / "d.jsonl", [rec]), label_range="mosei3")
    out, scale = normalize_labels(ds)
    assert out.label_range == "unit" and scale.factor == 3.0
    assert [u.sentiment for u in out.utterances()] == [-1.0, -1.0]
    with pytest.warns(UserWarning):
        again, s1 = normalize_labels(out)
    assert again is out and s1.factor == 1.0


def test_cmu_conversion_feeds_loader(tmp_path):
    rng = np.random.default_rng(0)
    segs = [{"text": rng.normal(size=300), "audio": rng.normal(size=384), "video": rng.normal(size=35),
             "sentiment": s, "spk": k} for s, k in [(2.4, "A"), (-0.6, "B"), (0.0, "A")]]
    rec = convert_cmu_record("vid1", segs, speaker_key="spk")
    assert rec["n_parties"] == 2 and [u["speaker"] for u in rec["utterances"]] == [0, 1, 0]
    path = write_jsonl(tmp_path / "d.jsonl", [{"header": {"label_range": "mosei3"}}, rec])
    ds = load_dataset(path, expected_dims=MOSEI_DIMS)
    assert ds.label_range == "mosei3" and ds.n_utterances == 3
    single = convert_cmu_record("vid2", segs)
    assert single["n_parties"] == 1


# --- synthetic data -------------------------------------------------------------------------

def test_synthetic_shape_and_determinism(tmp_path):
    spec = SyntheticSpec(n_conversations={"train": 20, "validation": 5}, seed=3)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    for split in ("train", "validation"):
        save_dataset(a.datasets[split], tmp_path / f"a{split}")
        save_dataset(b.datasets[split], tmp_path / f"b{split}")
        assert (tmp_path / f"a{split}").read_bytes() == (tmp_path / f"b{split}").read_bytes()
    tr = a.datasets["train"]
    assert tr.feature_dims == {"text": 8, "audio": 6, "video": 6}
    assert all(4 <= len(c) <= 10 for c in tr.conversations)
    ids = {c.id for c in tr.conversations} | {c.id for c in a.datasets["validation"].conversations}
    assert len(ids) == 25


def test_synthetic_noiseless_oracle_is_exact():
    bundle = generate_synthetic(SyntheticSpec(n_conversations={"train": 10}, noise_sigma=0.0))
    o = bundle.oracle
    for u in bundle.datasets["train"].utterances():
        assert o.sentiment(u) == u.sentiment
        assert o.emotion(u) == u.emotion


def test_synthetic_noise_floor():
    bundle = generate_synthetic(SyntheticSpec(n_conversations={"train": 200}, noise_sigma=0.05))
    err = [abs(bundle.oracle.sentiment(u) - u.sentiment) for u in bundle.datasets["train"].utterances()]
    # E|N(0, s)| = s * sqrt(2/pi); clipping at +-1 can only shrink it
    assert np.mean(err) == pytest.approx(0.05 * np.sqrt(2 / np.pi), rel=0.1)


def test_synthetic_covers_all_emotions():
    bundle = generate_synthetic(SyntheticSpec(n_conversations={"train": 150}))
    labels = [u.emotion for u in bundle.datasets["train"].utterances()][:1000]
    assert len(labels) == 1000
    assert set(labels) == set(range(6))


def test_synthetic_sentiment_balance():
    ds = generate_synthetic(SyntheticSpec()).datasets["train"]
    pos = np.mean([u.sentiment >= 0 for u in ds.utterances()])
    assert 0.35 < pos < 0.65


def test_spec_and_oracle_dict_roundtrip():
    spec = SyntheticSpec.from_dict({"lengths": [2, 3], "seed": 9})
    assert (spec.min_len, spec.max_len, spec.seed) == (2, 3, 9)
    with pytest.raises(InputError):
        SyntheticSpec.from_dict({"nope": 1})
    o = generate_synthetic(spec).oracle
    back = PlantedOracle.from_dict(json.loads(json.dumps(o.to_dict())))
    assert np.array_equal(back.w_sentiment, o.w_sentiment) and back.modalities == o.modalities


def test_synthetic_bad_spec():
    with pytest.raises(InputError):
        generate_synthetic(SyntheticSpec(min_len=5, max_len=3))
    with pytest.raises(InputError):
        generate_synthetic(SyntheticSpec(n_conversations={}))


def test_dataset_validation_on_construction():
    u = Utterance(3, {"text": np.ones(2)}, 0.1, None)
    ds = Dataset("train", (Conversation("x", (u,), 2),), {"text": 2})
    from multilogue.data import validate_dataset
    with pytest.raises(SchemaError, match="speaker 3"):
        validate_dataset(ds)

"""Command-line entry point: train, eval, ablate, gradcheck, probe, synth.

Exit codes: 0 success, 1 runtime failure, 2 configuration or validation failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import gradcheck
from .checkpoint import Checkpoint, canonical_json, load_checkpoint, save_checkpoint
from .data import (Dataset, PlantedOracle, SyntheticSpec, check_disjoint, generate_synthetic, load_dataset,
                   mask_modalities, normalize_labels, parse_subset, save_dataset)
from .errors import ConfigError, MultilogueError
from .metrics import format_table
from .model import MODALITIES, ModelConfig, probe_representations
from .training import TASKS, TrainConfig, check_compatible, predict_dataset, split_metrics, train

log = logging.getLogger("multilogue")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

# Bi- and tri-modal subsets, in table row order.
ABLATION_SUBSETS = (("text", "audio"), ("video", "audio"), ("text", "video"), ("text", "audio", "video"))

DEFAULTS = {
    "task": "sentiment",
    "out": "runs/default",
    "subset": None,
    "data": {"train": None, "validation": None, "test": None, "label_range": None},
    "model": {},
    "train": {},
}


class UsageError(MultilogueError):
    """Bad command-line or config-file input; maps to exit code 2."""


# ---------------------------------------------------------------------------
# configuration


def _set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise UsageError(f"override {key!r}: {p!r} is not a section")
    node[parts[-1]] = value


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def read_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"config file {path} is not valid YAML/JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config file {path} must hold a mapping")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise UsageError(f"config: unknown top-level fields {sorted(unknown)}")
    return raw


def resolve_config(args) -> dict:
    """Defaults < config file < flags/overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        cfg = _merge(cfg, read_config(args.config))
    for item in getattr(args, "override", None) or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} must look like key.path=value")
        key, value = item.split("=", 1)
        _set_dotted(cfg, key.strip(), yaml.safe_load(value))
    if getattr(args, "seed", None) is not None:
        cfg["train"]["seed"] = args.seed
    if getattr(args, "subset", None):
        cfg["subset"] = args.subset
    if getattr(args, "fusion", None):
        cfg["model"]["fusion_enabled"] = args.fusion == "on"
    if getattr(args, "task", None):
        cfg["task"] = args.task
    if getattr(args, "out", None):
        cfg["out"] = args.out
    return cfg


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    task: str
    out: Path
    datasets: dict[str, Dataset] = field(default_factory=dict)
    denormalizer: object = None
    raw: dict = field(default_factory=dict)

    def hash(self) -> str:
        return config_hash(self.model.to_dict(), self.train.to_dict(), self.task)


def config_hash(model: dict, train_cfg: dict, task) -> str:
    blob = canonical_json({"model": model, "train": train_cfg, "task": task})
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _load_split(path, split: str, label_range) -> Dataset:
    try:
        return load_dataset(path, split=split, label_range=label_range)
    except FileNotFoundError as exc:
        raise UsageError(f"data.{split}: file not found: {path}") from exc


def build_run(cfg: dict, *, need_train: bool = True) -> RunConfig:
    """Validate everything and load data; no side effects on disk."""
    task = cfg.get("task")
    if task not in TASKS:
        raise UsageError(f"task: must be one of {TASKS}, got {task!r}")
    data = cfg.get("data") or {}
    if need_train and not data.get("train"):
        raise UsageError("data.train: missing dataset path")
    datasets = {}
    for split in ("train", "validation", "test"):
        if data.get(split):
            datasets[split] = _load_split(data[split], split, data.get("label_range"))
    if not datasets:
        raise UsageError("data: no dataset paths given")
    check_disjoint(*datasets.values())

    first = next(iter(datasets.values()))
    subset = parse_subset(cfg["subset"]) if cfg.get("subset") else first.modalities
    scale = None
    for split, ds in list(datasets.items()):
        ds = mask_modalities(ds, subset)
        if ds.label_range != "unit":
            ds, scale = normalize_labels(ds)
        datasets[split] = ds

    model_raw = dict(cfg.get("model") or {})
    dims = {m: first.feature_dims[m] for m in subset}
    if "feature_dims" in model_raw:
        given = {k: int(v) for k, v in model_raw["feature_dims"].items()}
        if any(given.get(m) != d for m, d in dims.items()):
            raise UsageError(f"model.feature_dims {given} do not match dataset dims {dims}")
    model_raw["feature_dims"] = dims
    model_raw["modalities"] = list(subset)
    model_raw.setdefault("n_party_slots", max(ds.max_parties for ds in datasets.values()))
    if len(subset) == 1:
        model_raw.setdefault("fusion_enabled", False)
    try:
        model = ModelConfig.from_dict(model_raw)
        train_cfg = TrainConfig.from_dict(cfg.get("train") or {})
    except TypeError as exc:
        raise UsageError(f"config: {exc}") from exc
    for ds in datasets.values():
        check_compatible(ds, model, task)
    return RunConfig(model, train_cfg, task, Path(cfg.get("out") or DEFAULTS["out"]), datasets,
                     scale.inverse if scale is not None else None, cfg)


# ---------------------------------------------------------------------------
# commands


def _train_run(run: RunConfig) -> tuple:
    ds = run.datasets
    return train(ds["train"], run.model, run.train, run.task, ds.get("validation"),
                 denormalizer=run.denormalizer)


def cmd_train(args) -> int:
    run = build_run(resolve_config(args))
    result = _train_run(run)
    run.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.final, run.out / "final.ckpt")
    save_checkpoint(result.best, run.out / "best.ckpt")
    resolved = {"model": run.model.to_dict(), "train": run.train.to_dict(), "task": run.task,
                "data": run.raw.get("data"), "subset": list(run.model.modalities), "hash": run.hash()}
    (run.out / "run.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    with open(run.out / "epochs.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    last = result.log[-1] if result.log else {}
    print(f"trained {len(result.log)} epochs; config {run.hash()}; wrote {run.out}")
    for split in ("train", "validation"):
        if split in last:
            print(f"final {split}: " + json.dumps(last[split], sort_keys=True))
    return EXIT_OK


def _ckpt_hash(ckpt: Checkpoint) -> str:
    return config_hash(ckpt.model_config.to_dict(), ckpt.train_config, ckpt.task)


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    task = args.task or ckpt.task or "sentiment"
    try:
        ds = load_dataset(args.dataset, split=args.split, label_range=args.label_range)
    except FileNotFoundError as exc:
        raise UsageError(f"dataset not found: {args.dataset}") from exc
    needed = ckpt.model_config.modalities
    if args.subset:
        subset = parse_subset(args.subset)
        missing = [m for m in needed if m not in subset]
        if missing:
            raise UsageError(f"subset {list(subset)} lacks modalities {missing} the checkpoint was trained on")
    missing = [m for m in needed if m not in ds.feature_dims]
    if missing:
        raise UsageError(f"dataset lacks modalities {missing} required by the checkpoint")
    ds = mask_modalities(ds, needed)
    denorm = None
    if ds.label_range != "unit":
        ds, scale = normalize_labels(ds)
        denorm = scale.inverse
    check_compatible(ds, ckpt.model_config, task)
    metrics = split_metrics(ckpt.params, ds, task, denorm)
    report = {"task": task, "split": ds.split, "config_hash": _ckpt_hash(ckpt),
              "n": metrics["n"], "metrics": metrics}
    print(json.dumps(report, sort_keys=True))
    from .metrics import EmotionEval, SentimentEval
    ev_cls = SentimentEval if task == "sentiment" else EmotionEval
    fields = {k: metrics[k] for k in ev_cls.__dataclass_fields__}
    print(format_table(ev_cls(**fields), title=f"{ds.split} ({', '.join(needed)})"))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    base = build_run(cfg)
    if set(base.model.modalities) != set(MODALITIES):
        raise UsageError("ablation needs a dataset with text, audio and video features (and no --subset)")
    cells = []
    for subset in ABLATION_SUBSETS:
        for fusion in (False, True):
            cell_cfg = copy.deepcopy(cfg)
            cell_cfg["subset"] = ",".join(subset)
            cell_cfg["model"]["fusion_enabled"] = fusion
            cells.append((subset, fusion, build_run(cell_cfg)))
    eval_split = "test" if "test" in base.datasets else ("validation" if "validation" in base.datasets else "train")
    rows = []
    for subset, fusion, run in cells:
        result = _train_run(run)
        params = result.best.params
        metrics = split_metrics(params, run.datasets[eval_split], run.task, run.denormalizer)
        rows.append({"subset": list(subset), "fusion": fusion, "config_hash": run.hash(),
                     "model": run.model.to_dict(), "split": eval_split, "metrics": metrics})
        print(f"cell {'+'.join(m[0].upper() for m in subset)} fusion={'on' if fusion else 'off'} done",
              file=sys.stderr)
    table = ablation_table(rows, base.task)
    print(table)
    out = Path(cfg.get("out") or DEFAULTS["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    (out / "ablation.txt").write_text(table + "\n")
    return EXIT_OK


def ablation_table(rows: list[dict], task: str) -> str:
    key, label = ("a2", "A2") if task == "sentiment" else ("accuracy", "Acc")
    lines = [f"{'Fusion':<10}{label:>8}{'MAE':>8}" if task == "sentiment" else f"{'Fusion':<10}{label:>8}"]
    for subset in ABLATION_SUBSETS:
        lines.append(" + ".join(m.capitalize() for m in subset))
        for r in rows:
            if tuple(r["subset"]) != subset:
                continue
            m = r["metrics"]
            line = f"{'with' if r['fusion'] else 'without':<10}{100 * m[key]:>8.2f}"
            if task == "sentiment":
                line += f"{m['mae']:>8.3f}"
            lines.append(line)
    return "\n".join(lines)


def cmd_gradcheck(args) -> int:
    reports, ok = gradcheck.run_all(seed=args.seed or 0, points=args.points)
    for r in reports:
        tol = gradcheck.MODEL_TOLERANCE if r.op_name.startswith("model[") else gradcheck.OP_TOLERANCE
        status = "ok" if r.max_rel_err < tol else "FAIL"
        print(f"{r.op_name:<28} max_rel_err={r.max_rel_err:.3e}  tol={tol:.0e}  {status}")
    worst = max(reports, key=lambda r: r.max_rel_err)
    name, err = worst.worst()
    print(f"worst: {worst.op_name} / {name} rel_err={err:.3e}")
    print("gradcheck " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_RUNTIME


def _load_ckpt(path) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint not found: {path}") from exc


def cmd_probe(args) -> int:
    a, b = _load_ckpt(args.checkpoint_a), _load_ckpt(args.checkpoint_b)
    if a.model_config.to_dict() != b.model_config.to_dict():
        raise UsageError("checkpoints were trained with different model configs")
    try:
        ds = load_dataset(args.dataset, split=args.split)
    except FileNotFoundError as exc:
        raise UsageError(f"dataset not found: {args.dataset}") from exc
    ds = mask_modalities(ds, a.model_config.modalities)
    convs = {c.id: c for c in ds.conversations}
    if args.sample in convs:
        conv = convs[args.sample]
    else:
        try:
            conv = ds.conversations[int(args.sample)]
        except (ValueError, IndexError) as exc:
            raise UsageError(f"sample {args.sample!r} is neither a conversation id nor an index") from exc
    dists = probe_representations(a.params, b.params, conv, args.t, args.modality)
    print(json.dumps({"sample": conv.id, "t": args.t, "modality": args.modality, **dists}, sort_keys=True))
    print(f"{'Representation':<16}Euclidean distance")
    for key, sym in (("dist_s", "s"), ("dist_c", "c"), ("dist_e", "e")):
        print(f"{sym}_{args.t}^{args.modality[0]:<12}{dists[key]:.4f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec_dict = read_synth_spec(args.spec) if args.spec else {}
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = SyntheticSpec.from_dict(spec_dict)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"error: cannot write to {out}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    bundle = generate_synthetic(spec)
    for split, ds in bundle.datasets.items():
        save_dataset(ds, out / f"{split}.jsonl")
    (out / "oracle.json").write_text(json.dumps(bundle.oracle.to_dict(), sort_keys=True) + "\n")
    print(f"wrote {', '.join(bundle.datasets)} and oracle.json to {out}")
    return EXIT_OK


def read_synth_spec(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except FileNotFoundError as exc:
        raise UsageError(f"synthetic spec not found: {path}") from exc
    if not isinstance(raw, dict):
        raise UsageError("synthetic spec must be a mapping")
    return raw


def load_oracle(path) -> PlantedOracle:
    return PlantedOracle.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multilogue", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p):
        p.add_argument("--config", help="YAML or JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--subset", help="comma list of t,a,v")
        p.add_argument("--fusion", choices=("on", "off"))
        p.add_argument("--task", choices=TASKS)
        p.add_argument("--out")
        p.add_argument("-o", "--override", action="append", metavar="KEY=VALUE",
                       help="dotted config override, e.g. train.lr=0.01")

    run_flags(sub.add_parser("train", help="train a model"))
    run_flags(sub.add_parser("ablate", help="modality-subset x fusion on/off grid"))

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--subset")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--split", choices=("train", "validation", "test"))
    p.add_argument("--label-range", choices=("unit", "mosei3"))
    p.add_argument("--out")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--config", help="accepted for symmetry; toy dims are built in")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=3, help="random points per op")

    p = sub.add_parser("probe", help="representation distances between two checkpoints")
    p.add_argument("--checkpoint-a", required=True)
    p.add_argument("--checkpoint-b", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("train", "validation", "test"))
    p.add_argument("--sample", required=True, help="conversation id or index")
    p.add_argument("--t", type=int, required=True, help="1-based timestamp")
    p.add_argument("--modality", default="text")

    p = sub.add_parser("synth", help="generate a planted-signal dataset")
    p.add_argument("--spec", "--config", dest="spec")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    return parser


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck,
            "probe": cmd_probe, "synth": cmd_synth}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MultilogueError as exc:
        code = EXIT_CONFIG if isinstance(exc, ValueError) else EXIT_RUNTIME
        print(f"error: {exc}", file=sys.stderr)
        return code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

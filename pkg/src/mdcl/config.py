"""Experiment configuration: JSON sections, dotted overrides, resolution."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, fields
from pathlib import Path

from .active import ALConfig
from .data import SyntheticSpec
from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig
from .train import PRESETS, TrainConfig

DATA_SOURCES = ("synthetic", "csv_dir", "csv")
# model fields that come from the dataset instead of the config
INFERRED_MODEL = ("input_dim", "num_domains", "num_classes", "init_seed")


def _names(cls):
    return {f.name for f in fields(cls)}


SCHEMA = {
    "dataset": {"synthetic": _names(SyntheticSpec), "csv_dir": None, "csv": None,
                "label_fraction": None, "name": None},
    "model": _names(ModelConfig) - set(INFERRED_MODEL),
    "train": (_names(TrainConfig) - {"weights"}) | {"preset", "weights"},
    "train.weights": _names(LossWeights),
    "al": _names(ALConfig),
}
TOP_LEVEL = {"name", "dataset", "model", "train", "al", "output_dir", "seeds"}


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _check_key(path: list[str]):
    head = path[0]
    if head not in TOP_LEVEL:
        raise ConfigError(f"unknown config field {'.'.join(path)!r}")
    if len(path) == 1:
        return
    if head in ("name", "output_dir", "seeds"):
        raise ConfigError(f"{head} has no sub-fields")
    key = path[1]
    if head == "dataset":
        if key not in SCHEMA["dataset"]:
            raise ConfigError(f"unknown config field dataset.{key}")
        if key == "synthetic" and len(path) > 2 and path[2] not in SCHEMA["dataset"]["synthetic"]:
            raise ConfigError(f"unknown config field dataset.synthetic.{path[2]}")
        return
    if head == "train" and key == "weights":
        if len(path) > 2 and path[2] not in SCHEMA["train.weights"]:
            raise ConfigError(f"unknown config field train.weights.{path[2]}")
        return
    allowed = SCHEMA[head] | (SCHEMA["train.weights"] if head == "train" else set())
    if key not in allowed:
        raise ConfigError(f"unknown config field {head}.{key}")


def apply_override(cfg: dict, assignment: str):
    """Apply one ``a.b.c=value`` override in place (value parsed as JSON)."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"empty override key in {assignment!r}")
    _check_key(path)
    node = cfg
    for p in path[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[path[-1]] = parse_value(raw)


def load_raw(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return raw


def _validate_keys(raw: dict):
    for key, val in raw.items():
        _check_key([key])
        if isinstance(val, dict) and key in ("dataset", "model", "train", "al"):
            for sub, subval in val.items():
                _check_key([key, sub])
                if isinstance(subval, dict) and (key, sub) in (("dataset", "synthetic"), ("train", "weights")):
                    for leaf in subval:
                        _check_key([key, sub, leaf])


def resolve(raw: dict, base_dir=".") -> dict:
    """Fill defaults and validate; the result is the resolved config document."""
    raw = copy.deepcopy(raw)
    _validate_keys(raw)
    out = {"name": raw.get("name", "experiment")}

    ds = dict(raw.get("dataset") or {})
    sources = [s for s in DATA_SOURCES if ds.get(s) is not None]
    if not sources:
        ds["synthetic"] = {}
        sources = ["synthetic"]
    if len(sources) != 1:
        raise ConfigError(f"dataset needs exactly one source, got {sources}")
    src = sources[0]
    dres = {"name": ds.get("name") or ("synthetic" if src == "synthetic" else "csv")}
    if src == "synthetic":
        spec = SyntheticSpec(**ds["synthetic"])
        spec.validate()
        dres["synthetic"] = asdict(spec)
        dres["label_fraction"] = ds.get("label_fraction", 0.05)
    elif src == "csv_dir":
        p = Path(base_dir, ds["csv_dir"])
        if not (p / "manifest.json").exists():
            raise ConfigError(f"dataset.csv_dir has no manifest.json: {p}")
        dres["csv_dir"] = str(p)
        dres["label_fraction"] = ds.get("label_fraction")
    else:
        entries = []
        for entry in ds["csv"]:
            entry = {"train": entry} if isinstance(entry, str) else dict(entry)
            for split, fp in entry.items():
                if split not in ("train", "val", "test"):
                    raise ConfigError(f"unknown csv split {split!r}")
                full = Path(base_dir, fp)
                if not full.exists():
                    raise ConfigError(f"dataset file not found: {full}")
                entry[split] = str(full)
            entries.append(entry)
        dres["csv"] = entries
        dres["label_fraction"] = ds.get("label_fraction")
    lf = dres["label_fraction"]
    if lf is not None and not 0 < lf <= 1:
        raise ConfigError("dataset.label_fraction must be in (0, 1]")
    out["dataset"] = dres

    mraw = dict(raw.get("model") or {})
    probe = ModelConfig(input_dim=1, num_domains=2, num_classes=1, **mraw)
    probe.validate()
    out["model"] = {k: v for k, v in asdict(probe).items() if k not in INFERRED_MODEL}

    tcfg = TrainConfig.from_dict(raw.get("train") or {})
    out["train"] = asdict(tcfg)

    if raw.get("al") is not None:
        al = ALConfig(**raw["al"])
        al.validate()
        out["al"] = asdict(al)
    else:
        out["al"] = None

    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    out["seeds"] = list(seeds)
    out["output_dir"] = raw.get("output_dir") or os.environ.get("MDCL_OUTPUT_DIR") or "runs"
    return out


def train_config(resolved: dict, seed=None) -> TrainConfig:
    cfg = TrainConfig.from_dict(resolved["train"])
    if seed is not None:
        cfg.seed = seed
    return cfg


def preset_names():
    return sorted(PRESETS)

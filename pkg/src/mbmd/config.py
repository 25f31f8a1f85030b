"""Run configuration: JSON in, fully resolved JSON out."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import PreprocessConfig, SynthConfig
from .errors import ConfigError, MissingFileError
from .losses import DistillConfig
from .model import ModelConfig
from .trainer import SUITES, TrainConfig

TRAIN_KEYS = ("batch_size", "learning_rate", "weight_decay", "betas", "adam_eps", "patience", "max_epochs", "seed", "ensemble_mode", "gate_importance_weight", "val_fraction")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    dataset: str | None = None
    out: str | None = None
    suite: str | None = None
    folds: int = 3
    repeats: int = 10
    jobs: int = 1

    def to_json(self) -> dict[str, Any]:
        t = self.train
        return {
            "dataset": self.dataset,
            "out": self.out,
            "suite": self.suite,
            "folds": self.folds,
            "repeats": self.repeats,
            "jobs": self.jobs,
            "train": {k: list(v) if isinstance(v, tuple) else v for k, v in ((k, getattr(t, k)) for k in TRAIN_KEYS)},
            "model": dataclasses.asdict(t.model),
            "distill": dataclasses.asdict(t.distill),
            "synth": dataclasses.asdict(self.synth),
            "preprocess": dataclasses.asdict(self.preprocess),
        }


def _section(cls, values: dict, name: str, allowed: tuple[str, ...] | None = None):
    if not isinstance(values, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = allowed if allowed is not None else tuple(f.name for f in dataclasses.fields(cls))
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    return values


TOP_KEYS = ("dataset", "out", "suite", "folds", "repeats", "jobs", "train", "model", "distill", "synth", "preprocess")


def parse_run_config(doc: dict) -> RunConfig:
    """Validate a JSON document and apply defaults for omitted keys."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(TOP_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    try:
        model = ModelConfig(**_section(ModelConfig, doc.get("model", {}), "model"))
        distill = DistillConfig(**_section(DistillConfig, doc.get("distill", {}), "distill"))
        train_kw = dict(_section(TrainConfig, doc.get("train", {}), "train", TRAIN_KEYS))
        if "betas" in train_kw:
            train_kw["betas"] = tuple(train_kw["betas"])
        train = TrainConfig(model=model, distill=distill, **train_kw)
        synth = SynthConfig(**_section(SynthConfig, doc.get("synth", {}), "synth"))
        pre = PreprocessConfig(**_section(PreprocessConfig, doc.get("preprocess", {}), "preprocess"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    cfg = RunConfig(
        train=train,
        synth=synth,
        preprocess=pre,
        dataset=doc.get("dataset"),
        out=doc.get("out"),
        suite=doc.get("suite"),
        folds=doc.get("folds", 3),
        repeats=doc.get("repeats", 10),
        jobs=doc.get("jobs", 1),
    )
    for name in ("folds", "repeats", "jobs"):
        v = getattr(cfg, name)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise ConfigError(f"{name} must be a positive integer, got {v!r}")
    if cfg.suite is not None and cfg.suite not in SUITES:
        raise ConfigError(f"unknown suite {cfg.suite!r}; known: {', '.join(SUITES)}")
    return cfg


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return parse_run_config({})
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing config file {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_run_config(doc)


def git_blob_sha1(path: str | Path) -> str:
    """Content hash identical to ``git hash-object``."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing input {path}")
    data = path.read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_resolved(cfg: RunConfig, out_dir: str | Path, inputs: dict[str, str] | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = cfg.to_json()
    doc["inputs"] = inputs or {}
    path = out_dir / "resolved_config.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path

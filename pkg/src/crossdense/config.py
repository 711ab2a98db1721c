"""Run configuration: schema validation and object assembly.

Configs are JSON documents validated against the schema shipped in
``schema/runconfig.schema.json`` before any work starts; unknown keys are
rejected. Validation errors carry the dotted path of the offending key.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema

from .attacks import AttackParams
from .corruptions import CORRUPTION_KINDS, SEVERITIES, CorruptionTable
from .data import (AugmentConfig, LabeledImageSet, load_cifar10, load_cifar100,
                   synthetic_dataset)
from .errors import ConfigError
from .model import DccConfig, Model, build_ensemble_cnn, build_model
from .tensor import Precision

DEFAULT_OUTPUT_ENV = "CROSSDENSE_OUT_DIR"


def load_schema() -> dict:
    text = resources.files("crossdense").joinpath(
        "schema/runconfig.schema.json").read_text()
    return json.loads(text)


def validate_document(doc: dict) -> None:
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        path = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"config error at {path}: {err.message}")


def config_hash(doc: dict) -> str:
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


@dataclass
class AttackSpec:
    kind: str
    params: AttackParams


@dataclass
class RunConfig:
    doc: dict
    seed: int
    precision: Precision
    output_dir: Path
    workers: int
    model_kind: str
    model_cfg: DccConfig
    ensemble_members: int
    ensemble_fusion: str
    data: dict
    train: dict
    augment: Optional[AugmentConfig]
    attacks: list[AttackSpec] = field(default_factory=list)
    corruption: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        return config_hash(self.doc)


def _model_config(section: dict, seed: int) -> DccConfig:
    layers = section.get("layers_per_block")
    return DccConfig(
        growth_rate=section.get("growth_rate", 8),
        stem_channels=section.get("stem_channels"),
        num_paths=section.get("num_paths", 3),
        blocks_per_path=section.get("blocks_per_path", 2),
        layers_per_block=[list(row) for row in layers] if layers else None,
        compression=section.get("compression", 0.5),
        dropout_rate=section.get("dropout_rate", 0.2),
        num_classes=section.get("num_classes", 10),
        input_shape=tuple(section.get("input_shape", (3, 32, 32))),
        seed=seed,
        shared_stem=section.get("shared_stem", False),
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return parse_config(doc)


def parse_config(doc: dict) -> RunConfig:
    validate_document(doc)
    seed = doc.get("seed", 0)
    precision = Precision(doc.get("precision", "f32"))
    out_default = os.environ.get(DEFAULT_OUTPUT_ENV, "runs")
    output_dir = Path(doc.get("output_dir", out_default))

    model_section = doc["model"]
    train_section = dict(doc.get("train", {}))
    aug_section = train_section.pop("augment", None)
    augment = None
    if aug_section is not None:
        augment = AugmentConfig(
            crop_padding=aug_section.get("crop_padding", 4),
            flip_prob=aug_section.get("flip_prob", 0.5),
            rotation_degrees=aug_section.get("rotation_degrees", 15.0),
            enabled=aug_section.get("enabled", True),
        ).validate()

    attacks = [AttackSpec(
        kind=a["kind"],
        params=AttackParams(
            epsilon=a["epsilon"],
            steps=a.get("steps", 10),
            step_size=a.get("step_size"),
            random_start=a.get("random_start", True),
        ).validate())
        for a in doc.get("attack", [])]

    return RunConfig(
        doc=doc,
        seed=seed,
        precision=precision,
        output_dir=output_dir,
        workers=doc.get("workers", 1),
        model_kind=model_section["kind"],
        model_cfg=_model_config(model_section, seed),
        ensemble_members=model_section.get("ensemble_members", 3),
        ensemble_fusion=model_section.get("ensemble_fusion", "prob_mean"),
        data=doc["data"],
        train=train_section,
        augment=augment,
        attacks=attacks,
        corruption=doc.get("corruption", {}),
    )


def model_from_section(section: dict, seed: int, precision: Precision) -> Model:
    """Build a model straight from a validated model config section."""
    kind = section["kind"]
    mc = _model_config(section, seed)
    if kind == "ensemble_cnn":
        return build_ensemble_cnn(mc, precision,
                                  members=section.get("ensemble_members", 3),
                                  fusion=section.get("ensemble_fusion", "prob_mean"))
    return build_model(kind, mc, precision)


def make_model(cfg: RunConfig, precision: Optional[Precision] = None) -> Model:
    return model_from_section(cfg.doc["model"], cfg.seed,
                              precision or cfg.precision)


def make_datasets(cfg: RunConfig) -> tuple[LabeledImageSet, LabeledImageSet]:
    data = cfg.data
    source = data["source"]
    if source == "synthetic":
        syn = data.get("synthetic", {})
        classes = syn.get("classes", cfg.model_cfg.resolved().num_classes)
        size = syn.get("size", cfg.model_cfg.resolved().input_shape[1])
        seed = syn.get("seed", cfg.seed)
        difficulty = syn.get("difficulty", "separable")
        train_set = synthetic_dataset(syn.get("n_train", 200), classes, size,
                                      difficulty, seed, split="train")
        test_set = synthetic_dataset(syn.get("n_test", 200), classes, size,
                                     difficulty, seed, split="test")
        return train_set, test_set
    if "path" not in data:
        raise ConfigError(f"config error at data.path: required for source {source!r}")
    loader = load_cifar10 if source == "cifar10" else load_cifar100
    return loader(data["path"])


def apply_normalization(model: Model, cfg: RunConfig) -> None:
    norm = cfg.data.get("normalize")
    if norm is not None:
        model.set_input_normalization(norm["mean"], norm["std"])


def corruption_table(cfg: RunConfig) -> CorruptionTable:
    path = cfg.corruption.get("table")
    return CorruptionTable.load(path)


def corruption_kinds(cfg: RunConfig) -> list[str]:
    return list(cfg.corruption.get("kinds", CORRUPTION_KINDS))


def corruption_severities(cfg: RunConfig) -> list[int]:
    return list(cfg.corruption.get("severities", SEVERITIES))

"""Run configuration: a JSON file with strict key checking.

Unknown keys are rejected (naming the first offender) so typos fail fast
instead of silently falling back to defaults. ``resolved()`` materializes
every default into a plain dict suitable for writing next to a run's
outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import AugmentPolicy
from .model import LayerSpec, MODEL_PRESETS
from .optim import ScheduleSpec
from .train import TrainPlan


class ConfigError(Exception):
    """Invalid run configuration; the message names the offending key."""


_TOP_KEYS = {"dataset_root", "classes", "output_dir", "seed", "model", "train", "augment"}
_MODEL_KEYS = {"preset", "layers", "input_shape"}
_TRAIN_KEYS = {
    "epochs",
    "batch_size",
    "smoothing",
    "class_weights",
    "optimizer",
    "schedule",
}
_OPT_KEYS = {"kind", "lr", "momentum", "beta1", "beta2", "eps"}
_SCHED_KEYS = {
    "warmup_epochs",
    "decay_start_fraction",
    "decay_factor",
    "warmup_steps",
    "decay_start_step",
    "peak_lr",
}
_AUG_KEYS = {
    "flip_prob",
    "crop_fraction",
    "brightness_delta",
    "contrast_range",
    "saturation_range",
    "enable_flip",
    "enable_crop",
    "enable_brightness",
    "enable_contrast",
    "enable_saturation",
}

_TRAIN_DEFAULTS = {
    "epochs": 10,
    "batch_size": 16,
    "smoothing": 0.1,
    "class_weights": "balanced",
}
_OPT_DEFAULTS = {"kind": "adam", "lr": 1e-3, "momentum": 0.0, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}
_SCHED_DEFAULTS = {"warmup_epochs": 1.0, "decay_start_fraction": 0.8, "decay_factor": 0.1}


def _require_keys(section: str, d: dict, allowed: set[str]) -> None:
    for key in d:
        if key not in allowed:
            where = f"{section}.{key}" if section else key
            raise ConfigError(f"unknown config key {where!r}")


@dataclass
class RunConfig:
    dataset_root: str
    classes: list[str]
    output_dir: str
    seed: int
    model_preset: str | None
    model_layers: list[LayerSpec] | None
    input_shape: tuple[int, ...]
    train: dict
    optimizer: dict
    schedule: dict
    augment_policy: AugmentPolicy
    augment_dict: dict

    @property
    def class_count(self) -> int:
        return len(self.classes)

    def model_config(self) -> list[LayerSpec]:
        if self.model_layers is not None:
            return self.model_layers
        return MODEL_PRESETS[self.model_preset](self.class_count)

    def make_plan(self, class_weights: np.ndarray | None) -> TrainPlan:
        sched = None
        if "warmup_steps" in self.schedule or "decay_start_step" in self.schedule:
            try:
                sched = ScheduleSpec(
                    peak_lr=self.schedule.get("peak_lr", self.optimizer["lr"]),
                    warmup_steps=int(self.schedule["warmup_steps"]),
                    decay_start_step=int(self.schedule["decay_start_step"]),
                    decay_factor=float(self.schedule["decay_factor"]),
                )
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"invalid train.schedule: {exc}") from exc
        try:
            return TrainPlan(
                epochs=int(self.train["epochs"]),
                batch_size=int(self.train["batch_size"]),
                seed=self.seed,
                smoothing=float(self.train["smoothing"]),
                class_weights=class_weights,
                optimizer=self.optimizer["kind"],
                lr=float(self.optimizer["lr"]),
                momentum=float(self.optimizer["momentum"]),
                beta1=float(self.optimizer["beta1"]),
                beta2=float(self.optimizer["beta2"]),
                eps=float(self.optimizer["eps"]),
                schedule=sched,
                warmup_epochs=float(self.schedule.get("warmup_epochs", 1.0)),
                decay_start_fraction=float(self.schedule.get("decay_start_fraction", 0.8)),
                decay_factor=float(self.schedule.get("decay_factor", 0.1)),
                augment_policy=self.augment_policy,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def resolved(self) -> dict:
        """The full configuration with every default made explicit."""
        model = {"input_shape": list(self.input_shape)}
        if self.model_layers is not None:
            model["layers"] = [s.to_dict() for s in self.model_layers]
        else:
            model["preset"] = self.model_preset
        return {
            "dataset_root": self.dataset_root,
            "classes": self.classes,
            "output_dir": self.output_dir,
            "seed": self.seed,
            "model": model,
            "train": {**self.train, "optimizer": self.optimizer, "schedule": self.schedule},
            "augment": self.augment_dict,
        }


def _parse_augment(d: dict) -> tuple[AugmentPolicy, dict]:
    _require_keys("augment", d, _AUG_KEYS)
    defaults = AugmentPolicy.default_training()
    merged = {
        "enable_flip": d.get("enable_flip", defaults.enable_flip),
        "flip_prob": d.get("flip_prob", defaults.flip_prob),
        "enable_crop": d.get("enable_crop", defaults.enable_crop),
        "crop_fraction": tuple(d.get("crop_fraction", defaults.crop_fraction)),
        "enable_brightness": d.get("enable_brightness", defaults.enable_brightness),
        "brightness_delta": tuple(d.get("brightness_delta", defaults.brightness_delta)),
        "enable_contrast": d.get("enable_contrast", defaults.enable_contrast),
        "contrast_range": tuple(d.get("contrast_range", defaults.contrast_range)),
        "enable_saturation": d.get("enable_saturation", defaults.enable_saturation),
        "saturation_range": tuple(d.get("saturation_range", defaults.saturation_range)),
    }
    try:
        policy = AugmentPolicy(**merged)
    except ValueError as exc:
        raise ConfigError(f"augment: {exc}") from exc
    serializable = {k: list(v) if isinstance(v, tuple) else v for k, v in merged.items()}
    return policy, serializable


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _require_keys("", raw, _TOP_KEYS)
    for required in ("dataset_root", "classes", "output_dir"):
        if required not in raw:
            raise ConfigError(f"missing required config key {required!r}")
    classes = raw["classes"]
    if not isinstance(classes, list) or not classes:
        raise ConfigError("'classes' must be a non-empty list")
    if len(set(classes)) != len(classes):
        raise ConfigError("'classes' contains duplicates")

    model_raw = dict(raw.get("model", {"preset": "paper-default"}))
    _require_keys("model", model_raw, _MODEL_KEYS)
    preset = model_raw.get("preset")
    layers = None
    if "layers" in model_raw:
        if preset is not None:
            raise ConfigError("model: give either 'preset' or 'layers', not both")
        try:
            layers = [LayerSpec.from_dict(d) for d in model_raw["layers"]]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model.layers: {exc}") from exc
    else:
        preset = preset or "paper-default"
        if preset not in MODEL_PRESETS:
            raise ConfigError(f"model.preset {preset!r} unknown; have {sorted(MODEL_PRESETS)}")
    input_shape = tuple(model_raw.get("input_shape", (3, 80, 80)))

    train_raw = dict(raw.get("train", {}))
    _require_keys("train", train_raw, _TRAIN_KEYS)
    opt_raw = dict(train_raw.pop("optimizer", {}))
    _require_keys("train.optimizer", opt_raw, _OPT_KEYS)
    sched_raw = dict(train_raw.pop("schedule", {}))
    _require_keys("train.schedule", sched_raw, _SCHED_KEYS)
    train = {**_TRAIN_DEFAULTS, **train_raw}
    optimizer = {**_OPT_DEFAULTS, **opt_raw}
    if optimizer["kind"] not in ("adam", "sgd"):
        raise ConfigError(f"train.optimizer.kind must be 'adam' or 'sgd', got {optimizer['kind']!r}")
    schedule = {**_SCHED_DEFAULTS, **sched_raw}

    cw = train["class_weights"]
    if isinstance(cw, list):
        if len(cw) != len(classes):
            raise ConfigError(f"train.class_weights: {len(cw)} values for {len(classes)} classes")
    elif cw not in ("balanced", "uniform"):
        raise ConfigError("train.class_weights must be 'balanced', 'uniform', or a list")

    policy, aug_dict = _parse_augment(dict(raw.get("augment", {})))

    return RunConfig(
        dataset_root=str(raw["dataset_root"]),
        classes=list(classes),
        output_dir=str(raw["output_dir"]),
        seed=int(raw.get("seed", 0)),
        model_preset=preset if layers is None else None,
        model_layers=layers,
        input_shape=input_shape,
        train=train,
        optimizer=optimizer,
        schedule=schedule,
        augment_policy=policy,
        augment_dict=aug_dict,
    )


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
    return parse_config(raw)


def write_resolved(config: RunConfig, path) -> None:
    Path(path).write_text(
        json.dumps(config.resolved(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

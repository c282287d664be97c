"""Run configuration: a nested YAML file addressed by dotted keys.

Every key must exist in ``DEFAULTS``; unknown keys are errors. Keys whose
default is ``REQUIRED`` have to be supplied by the file or a ``--set``
override.
"""

from __future__ import annotations

import hashlib
import json
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from ivt.alignment import DEFAULT_LEVEL_AUGMENTATION, AlignmentConfig
from ivt.encoder import EncoderConfig
from ivt.training import TrainConfig

REQUIRED = object()

DEFAULTS: dict[str, Any] = {
    "model.depth": 2,
    "model.width": 64,
    "model.heads": 4,
    "model.patch_size": 8,
    "model.image_height": 32,
    "model.image_width": 16,
    "model.max_text_len": 16,
    "model.mlp_ratio": 4.0,
    "train.base_lr": 5e-3,
    "train.weight_decay": 1e-4,
    "train.momentum": 0.9,
    "train.grad_clip": 5.0,
    "train.batch_size": 32,
    "train.total_steps": 2000,
    "train.warmup_steps": None,
    "train.seed": 0,
    "train.checkpoint_every": 0,
    "train.eval_every": 0,
    "mla.enabled": True,
    "mla.level_augmentation_map": dict(DEFAULT_LEVEL_AUGMENTATION),
    "bmm.enabled": True,
    "bmm.ratio": 0.3,
    "cmpm.epsilon": 1e-8,
    "cmpm.normalize_targets": False,
    "data.corpus_dir": None,
    "data.n_identities": 64,
    "data.images_per_id": 4,
    "data.captions_per_image": 2,
    "data.seed": None,  # None -> train.seed
    "eval.ks": [1, 5, 10],
    "eval.metric": "cosine",
    "output_dir": REQUIRED,
}

# leaf keys whose values are mappings and must not be flattened further
_MAPPING_LEAVES = {"mla.level_augmentation_map"}


class ConfigError(ValueError):
    pass


def flatten(tree: dict, prefix: str = "") -> dict[str, Any]:
    flat = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict) and name not in _MAPPING_LEAVES:
            flat.update(flatten(value, f"{name}."))
        else:
            flat[name] = value
    return flat


def unflatten(flat: dict[str, Any]) -> dict:
    tree: dict = {}
    for key, value in flat.items():
        node = tree
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return tree


def _coerce(key: str, value: Any) -> Any:
    """YAML reads ``1e-4`` as a string; float-typed keys accept it anyway."""
    if isinstance(DEFAULTS[key], float) and isinstance(value, (str, int)) and not isinstance(value, bool):
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {value!r}") from None
    return value


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


@dataclass
class RunConfig:
    values: dict[str, Any]

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: list[str] | tuple = ()) -> "RunConfig":
        tree = {}
        if path is not None:
            try:
                tree = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
            except (OSError, yaml.YAMLError) as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
            if not isinstance(tree, dict):
                raise ConfigError(f"config {path} must be a mapping")
        flat = flatten(tree)
        for item in overrides:
            key, value = parse_override(item)
            flat[key] = value
        return cls.from_flat(flat)

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> "RunConfig":
        unknown = sorted(set(flat) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config key: {', '.join(unknown)}")
        values = {**DEFAULTS, **{k: _coerce(k, v) for k, v in flat.items()}}
        missing = [k for k, v in values.items() if v is REQUIRED]
        if missing:
            raise ConfigError(f"missing config key: {', '.join(missing)}")
        cfg = cls(values)
        cfg.validate()
        return cfg

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def replace(self, **updates: Any) -> "RunConfig":
        """``updates`` use double underscores for dots: ``bmm__ratio=0.7``."""
        flat = dict(self.values)
        for k, v in updates.items():
            flat[k.replace("__", ".")] = v
        return RunConfig.from_flat(flat)

    def section(self, name: str) -> dict[str, Any]:
        prefix = f"{name}."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    # -- typed views ----------------------------------------------------------

    def model_config(self, vocab_size: int = 64) -> EncoderConfig:
        return EncoderConfig(**self.section("model"), vocab_size=vocab_size)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.section("train"))

    def alignment_config(self) -> AlignmentConfig:
        v = self.values
        return AlignmentConfig(
            mla_enabled=bool(v["mla.enabled"]),
            bmm_enabled=bool(v["bmm.enabled"]),
            bmm_ratio=float(v["bmm.ratio"]),
            epsilon=float(v["cmpm.epsilon"]),
            normalize_targets=bool(v["cmpm.normalize_targets"]),
            level_augmentation=dict(v["mla.level_augmentation_map"]),
        )

    @property
    def data_seed(self) -> int:
        seed = self.values["data.seed"]
        return self.values["train.seed"] if seed is None else seed

    def validate(self) -> None:
        try:
            self.model_config()
            self.train_config()
            self.alignment_config()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        if self.values["eval.metric"] not in ("cosine", "dot"):
            raise ConfigError("eval.metric must be 'cosine' or 'dot'")

    # -- persistence ----------------------------------------------------------

    def to_tree(self) -> dict:
        return unflatten(self.values)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_tree(), sort_keys=True), encoding="utf-8")


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def version_string() -> str:
    from ivt import __version__

    try:
        git = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent,
        )
        described = git.stdout.strip() if git.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        described = ""
    return f"ivt {__version__}" + (f" ({described})" if described else "")

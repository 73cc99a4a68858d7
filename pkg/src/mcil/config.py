"""Experiment configuration: one YAML file drives data, model, and training.

Top-level schema::

    seed: 0                # master seed; MCIL_SEED env var wins when set
    T: 4                   # number of incremental tasks
    method: ours           # ours | naive_finetune | zero_shot
    data:
      kind: synthetic      # or precomputed (then: path: file.mcilfeat)
      n_classes: 8
      samples_per_class: 40
      d_v_raw: 32
      d_a_raw: 48
      sigma_v: 0.1
      sigma_a: 0.5
      rho: 1.0
    model:                 # optional architecture overrides
      d_v: 512
      ...
    train:                 # optional optimization overrides
      epochs: 20
      ...

Component seeds are derived from the master seed, so a single integer
pins the dataset draw, the model initialization, the task shuffle, and
the batch order. The raw feature dims of the model always follow the
dataset. The resolved configuration is echoed verbatim into results
files; its canonical JSON hash doubles as the run id.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from . import __version__
from .encoders import ModelConfig
from .errors import ConfigError, InvalidConfig
from .scenario import Dataset, SyntheticConfig, generate_synthetic, load_precomputed
from .seeding import child_seed
from .trainer import METHODS, RunConfig, TrainConfig

_DATA_SYNTHETIC_FIELDS = {
    "n_classes": int, "samples_per_class": int, "d_v_raw": int,
    "d_a_raw": int, "sigma_v": float, "sigma_a": float, "rho": float,
}
_MODEL_FIELDS = {
    "d_v": int, "d_a": int, "d_l": int, "width": int, "blocks": int,
    "heads": int, "ffn_mult": int, "n_tokens": int, "vocab_size": int,
    "lora_rank": int, "lora_scale": float, "router_hidden": int,
    "critic_dim": int, "tau_mi": float, "th": float,
    "strong_modality": str, "apply_mask": bool, "fusion_kind": str,
}
_TRAIN_FIELDS = {
    "epochs": int, "batch_size": int, "lr": float, "lr_floor": float,
    "weight_decay": float, "alpha": float, "tau": float, "n_templates": int,
}


@dataclass(frozen=True)
class Experiment:
    """A validated experiment file, ready to build runtime objects from."""

    seed: int
    T: int
    method: str
    data_kind: str  # synthetic | precomputed
    synthetic: SyntheticConfig | None
    data_path: Path | None
    model_fields: dict
    train_fields: dict


def _mapping(obj, where: str) -> dict:
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(obj).__name__}")
    return dict(obj)


def _typed(section: dict, schema: dict, where: str) -> dict:
    unknown = sorted(set(section) - set(schema))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    out = {}
    for key, value in section.items():
        want = schema[key]
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, want) or (want is int and isinstance(value, bool)):
            raise ConfigError(
                f"{where}.{key} must be {want.__name__}, got {value!r}"
            )
        out[key] = value
    return out


def _plain_int(raw: dict, key: str, default: int) -> int:
    value = raw.get(key, default)
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(f"{key} must be an integer, got {value!r}")
    return value


def load_experiment(path, env=os.environ) -> Experiment:
    """Parse, validate, and resolve one experiment file."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    raw = _mapping(raw, "config")
    unknown = sorted(set(raw) - {"seed", "T", "method", "data", "model", "train"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")

    seed = _plain_int(raw, "seed", 0)
    override = env.get("MCIL_SEED")
    if override:
        try:
            seed = int(override)
        except ValueError as exc:
            raise ConfigError(f"MCIL_SEED must be an integer, got {override!r}") from exc

    method = raw.get("method", "ours")
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}")

    data = _mapping(raw.get("data"), "data")
    kind = data.pop("kind", None)
    if kind == "synthetic":
        fields = _typed(data, _DATA_SYNTHETIC_FIELDS, "data")
        try:
            synthetic = SyntheticConfig(seed=child_seed(seed, "data"), **fields)
        except InvalidConfig as exc:
            raise ConfigError(f"data: {exc}") from exc
        data_path = None
    elif kind == "precomputed":
        rel = data.pop("path", None)
        if not isinstance(rel, str) or data:
            raise ConfigError("precomputed data needs exactly one key: path")
        synthetic = None
        data_path = (path.parent / rel).resolve()
    else:
        raise ConfigError(f"data.kind must be synthetic or precomputed, got {kind!r}")

    return Experiment(
        seed=seed,
        T=_plain_int(raw, "T", 4),
        method=method,
        data_kind=kind,
        synthetic=synthetic,
        data_path=data_path,
        model_fields=_typed(_mapping(raw.get("model"), "model"),
                            _MODEL_FIELDS, "model"),
        train_fields=_typed(_mapping(raw.get("train"), "train"),
                            _TRAIN_FIELDS, "train"),
    )


def make_dataset(exp: Experiment) -> Dataset:
    if exp.data_kind == "synthetic":
        return generate_synthetic(exp.synthetic)
    return load_precomputed(exp.data_path)


def make_run_config(exp: Experiment, dataset: Dataset) -> RunConfig:
    try:
        model = ModelConfig(
            d_v_raw=dataset.d_v_raw,
            d_a_raw=dataset.d_a_raw,
            seed=child_seed(exp.seed, "model"),
            **exp.model_fields,
        )
        train = TrainConfig(
            seed=child_seed(exp.seed, "train"),
            method=exp.method,
            **exp.train_fields,
        )
        return RunConfig(model=model, train=train, T=exp.T)
    except InvalidConfig as exc:
        raise ConfigError(str(exc)) from exc


def config_echo(exp: Experiment, run_cfg: RunConfig) -> dict:
    """The fully resolved configuration, as persisted with every result."""
    if exp.data_kind == "synthetic":
        data = {"kind": "synthetic", **dataclasses.asdict(exp.synthetic)}
        data.pop("class_names")
    else:
        data = {"kind": "precomputed", "path": str(exp.data_path)}
    return {
        "version": __version__,
        "seed": exp.seed,
        "T": exp.T,
        "method": exp.method,
        "data": data,
        "model": dataclasses.asdict(run_cfg.model),
        "train": dataclasses.asdict(run_cfg.train),
    }


def run_id(echo: dict) -> str:
    """Twelve hex chars identifying a resolved configuration."""
    blob = json.dumps(echo, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("ascii")).hexdigest()[:12]

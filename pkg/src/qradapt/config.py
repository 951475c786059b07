"""Experiment configuration files: YAML in, validated dataclasses out.

The format is strict on purpose: a ``schema: 1`` marker is required, and any
key the loader does not recognize is a hard error naming the key and the
section it sits in.  Silent tolerance of typos ("warmup_epocs") is how wrong
experiments get published.

Layer scopes accept two shorthands besides an explicit index list: ``all``
and ``lastN`` (e.g. ``last4``), resolved against the model's depth at load
time so the same config text works across model sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .adapters import FULL_FT, METHODS, PROJECTIONS, QR_LORA, AdapterSpec
from .model import TinyTransformerConfig
from .rank import RankPolicy
from .tasks import SyntheticTask
from .train import TrainConfig

SCHEMA_VERSION = 1

_TOP_KEYS = {"schema", "output_dir", "model", "task", "train", "specs", "sweep"}
_SPEC_KEYS = {"method", "policy", "rank", "alpha", "svd_k", "layer_scope", "projection_set"}
_SWEEP_KEYS = {"taus", "sizes"}


class ConfigError(ValueError):
    """The config file is missing, malformed, or fails validation."""


@dataclass
class ExperimentConfig:
    model: TinyTransformerConfig
    task: SyntheticTask
    train: TrainConfig
    specs: list[AdapterSpec]
    output_dir: str = "results"
    sweep: dict = field(default_factory=dict)


def _require_mapping(obj, where: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(obj).__name__}")
    return obj

def _check_keys(d: dict, allowed, where: str) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in {where} (allowed: {', '.join(sorted(allowed))})")

def _build(cls, d: dict, where: str):
    names = {f.name for f in fields(cls)}
    _check_keys(d, names, where)
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _resolve_scope(value, n_layers: int, where: str) -> tuple[int, ...]:
    if isinstance(value, str):
        if value == "all":
            return tuple(range(n_layers))
        if value.startswith("last"):
            try:
                n = int(value[4:])
            except ValueError:
                raise ConfigError(f"{where}: bad scope shorthand {value!r}") from None
            if n < 1:
                raise ConfigError(f"{where}: bad scope shorthand {value!r}")
            return tuple(range(max(0, n_layers - n), n_layers))
        raise ConfigError(f"{where}: bad scope {value!r}, expected 'all', 'lastN', or an index list")
    if isinstance(value, list) and all(isinstance(i, int) and not isinstance(i, bool) for i in value):
        return tuple(value)
    raise ConfigError(f"{where}: bad scope {value!r}, expected 'all', 'lastN', or an index list")


def _build_spec(d: dict, n_layers: int, where: str) -> AdapterSpec:
    d = _require_mapping(d, where)
    _check_keys(d, _SPEC_KEYS, where)
    if "method" not in d:
        raise ConfigError(f"{where}: missing 'method' (one of {', '.join(METHODS)})")
    method = d["method"]
    kwargs: dict = {"method": method}
    if "policy" in d:
        try:
            kwargs["policy"] = RankPolicy.parse(str(d["policy"]))
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    if "rank" in d:
        kwargs["rank"] = d["rank"]
    if "alpha" in d:
        kwargs["alpha"] = d["alpha"]
    if "svd_k" in d:
        kwargs["svd_k"] = d["svd_k"]
    if method != FULL_FT:
        kwargs["layer_scope"] = _resolve_scope(d.get("layer_scope", "all"), n_layers, where)
        kwargs["projection_set"] = tuple(d.get("projection_set", ["o"]))
    try:
        spec = AdapterSpec(**kwargs)
        spec.validate_for_depth(n_layers)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    return spec


def config_from_dict(doc, where: str = "config") -> ExperimentConfig:
    doc = _require_mapping(doc, where)
    _check_keys(doc, _TOP_KEYS, where)
    if "schema" not in doc:
        raise ConfigError(f"{where}: missing 'schema' version marker (expected schema: {SCHEMA_VERSION})")
    if doc["schema"] != SCHEMA_VERSION:
        raise ConfigError(f"{where}: unsupported schema {doc['schema']!r}, this build reads schema {SCHEMA_VERSION}")
    if "model" not in doc or "task" not in doc:
        raise ConfigError(f"{where}: 'model' and 'task' sections are required")

    model = _build(TinyTransformerConfig, _require_mapping(doc["model"], f"{where}.model"), f"{where}.model")
    task = _build(SyntheticTask, _require_mapping(doc["task"], f"{where}.task"), f"{where}.task")
    train = _build(TrainConfig, _require_mapping(doc.get("train", {}), f"{where}.train"), f"{where}.train")

    specs_doc = doc.get("specs", [])
    if not isinstance(specs_doc, list):
        raise ConfigError(f"{where}.specs must be a list")
    specs = [_build_spec(s, model.n_layers, f"{where}.specs[{i}]") for i, s in enumerate(specs_doc)]

    sweep = _require_mapping(doc.get("sweep", {}), f"{where}.sweep")
    _check_keys(sweep, _SWEEP_KEYS, f"{where}.sweep")
    if "taus" in sweep:
        taus = sweep["taus"]
        if not isinstance(taus, list) or not taus or not all(isinstance(t, (int, float)) and 0 < t < 1 for t in taus):
            raise ConfigError(f"{where}.sweep.taus must be a non-empty list of thresholds in (0, 1)")
    if "sizes" in sweep:
        sizes = sweep["sizes"]
        if not isinstance(sizes, list) or not sizes or not all(isinstance(s, int) and s >= 1 for s in sizes):
            raise ConfigError(f"{where}.sweep.sizes must be a non-empty list of positive counts")

    out_dir = doc.get("output_dir", "results")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError(f"{where}.output_dir must be a non-empty string")

    cfg = ExperimentConfig(model=model, task=task, train=train, specs=specs, output_dir=out_dir, sweep=dict(sweep))
    _cross_validate(cfg, where)
    return cfg


def _cross_validate(cfg: ExperimentConfig, where: str) -> None:
    if cfg.task.vocab_size != cfg.model.vocab_size:
        raise ConfigError(
            f"{where}: task.vocab_size={cfg.task.vocab_size} must equal model.vocab_size={cfg.model.vocab_size}"
        )
    if cfg.task.seq_len > cfg.model.max_seq_len:
        raise ConfigError(f"{where}: task.seq_len={cfg.task.seq_len} exceeds model.max_seq_len={cfg.model.max_seq_len}")
    if cfg.task.n_classes != cfg.model.n_classes:
        raise ConfigError(
            f"{where}: task.n_classes={cfg.task.n_classes} must equal model.n_classes={cfg.model.n_classes}"
        )
    for size in cfg.sweep.get("sizes", []):
        if size > cfg.task.n_train:
            raise ConfigError(f"{where}: sweep size {size} exceeds task.n_train={cfg.task.n_train}")
    for i, spec in enumerate(cfg.specs):
        if spec.method == QR_LORA and spec.policy.kind == "fixed" and "taus" in cfg.sweep:
            raise ConfigError(f"{where}.specs[{i}]: tau sweep needs a ratio policy, got fixed rank")


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML ({exc})") from exc
    return config_from_dict(doc, where=str(p))

"""Run configuration: YAML schema, dotted overrides and validation."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigurationError

CONFIG_VERSION = 1
OUTPUT_ROOT_ENV = "CGL_OUTPUT_ROOT"

# fields that may change between a checkpoint and the run resuming from it
RESUME_MUTABLE = {"train.epochs", "train.checkpoint_every", "train.parallel", "train.workers", "output_dir"}


@dataclass
class DataSpec:
    kind: str = "blobs"
    n_per_class: int = 625
    test_per_class: int = 125
    n_classes: int = 8
    dim: int = 16
    spread: float = 1.2
    radius: float = 3.5
    holdout_fraction: float = 0.2
    train_path: str | None = None
    test_path: str | None = None
    label_column: str = "label"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass
class GridSpec:
    L: int = 4
    M: int = 2
    width: int = 64


@dataclass
class PoolSpec:
    K: int = 4
    distinct: bool = True
    forced_layers: list = field(default_factory=list)
    independent: bool = False
    structure_file: str | None = None


@dataclass
class TrainSpec:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.001
    lr_milestones: list = field(default_factory=list)
    lr_factor: float = 0.5
    checkpoint_every: int = 0
    parallel: bool = False
    workers: int = 0


@dataclass
class DistillSpec:
    temperature: float = 3.0
    p: float = 0.5
    aggregation: str = "actual_count"
    include_self: bool = False
    detach_teacher: bool = True
    loss_reduction: str = "sum"
    t_squared: bool = True


@dataclass
class ScheduleSpec:
    ramp_start: int = 0
    ramp_end: int | None = None  # None: 20% of the epochs after ramp_start


@dataclass
class PartitionSpec:
    mode: str = "uniform"
    overlap: float = 0.0
    full_data: bool = False
    repartition: bool = False


SECTIONS = {
    "data": DataSpec,
    "grid": GridSpec,
    "pool": PoolSpec,
    "train": TrainSpec,
    "distill": DistillSpec,
    "schedule": ScheduleSpec,
    "partition": PartitionSpec,
}


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    output_dir: str = "runs"
    data: DataSpec = field(default_factory=DataSpec)
    grid: GridSpec = field(default_factory=GridSpec)
    pool: PoolSpec = field(default_factory=PoolSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    distill: DistillSpec = field(default_factory=DistillSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **dotted) -> "RunConfig":
        """Copy with dotted-path overrides, e.g. ``cfg.replace(**{"distill.p": 1.0})``."""
        d = self.to_dict()
        for key, value in dotted.items():
            _set_dotted(d, key, value)
        return from_dict(d)

    @property
    def ramp_end(self) -> int:
        s = self.schedule
        if s.ramp_end is not None:
            return s.ramp_end
        return default_ramp_end(self.train.epochs, s.ramp_start)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def run_id(self) -> str:
        return f"{self.hash()[:12]}-s{self.seed}"


def _set_dotted(d, key, value):
    parts = key.split(".")
    node = d
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigurationError(f"unknown config section {key!r}")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigurationError(f"unknown config field {key!r}")
    node[parts[-1]] = value


OPTIONAL_FIELDS = {
    "data.train_path": "", "data.test_path": "", "data.train_images": "", "data.train_labels": "",
    "data.test_images": "", "data.test_labels": "", "pool.structure_file": "", "schedule.ramp_end": 0,
}


def _coerce(value, default, path, errors):
    if path in OPTIONAL_FIELDS:
        if value is None:
            return None
        default = OPTIONAL_FIELDS[path]
    elif value is None:
        errors.append(f"{path}: must not be null")
        return default
    kind = type(default)
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        errors.append(f"{path}: expected true/false, got {value!r}")
        return default
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        errors.append(f"{path}: expected an integer, got {value!r}")
        return default
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        errors.append(f"{path}: expected a number, got {value!r}")
        return default
    if isinstance(default, list):
        if isinstance(value, list):
            return value
        errors.append(f"{path}: expected a list, got {value!r}")
        return default
    if kind is str and not isinstance(value, str):
        errors.append(f"{path}: expected a string, got {value!r}")
        return default
    return value


def from_dict(d: dict | None) -> RunConfig:
    """Build and validate a config; every violation is reported at once."""
    d = copy.deepcopy(d or {})
    errors = []
    cfg = RunConfig()
    for key, value in d.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                errors.append(f"{key}: expected a mapping")
                continue
            section = getattr(cfg, key)
            names = {f.name for f in dataclasses.fields(section)}
            for sub, v in value.items():
                if sub not in names:
                    errors.append(f"{key}.{sub}: unknown field")
                    continue
                setattr(section, sub, _coerce(v, getattr(section, sub), f"{key}.{sub}", errors))
        elif key in ("version", "seed", "output_dir"):
            setattr(cfg, key, _coerce(value, getattr(cfg, key), key, errors))
        else:
            errors.append(f"{key}: unknown field")
    errors.extend(validate(cfg))
    if errors:
        raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg


def validate(cfg: RunConfig) -> list:
    e = []
    if cfg.version != CONFIG_VERSION:
        e.append(f"version: unsupported config version {cfg.version}")
    if cfg.seed < 0:
        e.append("seed: must be >= 0")
    dt = cfg.data
    if dt.kind not in ("blobs", "csv", "idx"):
        e.append(f"data.kind: must be blobs, csv or idx, got {dt.kind!r}")
    if dt.kind == "blobs":
        for name in ("n_per_class", "n_classes", "dim"):
            if getattr(dt, name) < 1:
                e.append(f"data.{name}: must be >= 1")
        if dt.test_per_class < 0:
            e.append("data.test_per_class: must be >= 0")
        if not dt.spread > 0:
            e.append("data.spread: must be > 0")
    elif dt.kind == "csv":
        if not dt.train_path:
            e.append("data.train_path: required for csv data")
        for name in ("train_path", "test_path"):
            path = getattr(dt, name)
            if path and not Path(path).is_file():
                e.append(f"data.{name}: file not found: {path}")
    elif dt.kind == "idx":
        for name in ("train_images", "train_labels"):
            if not getattr(dt, name):
                e.append(f"data.{name}: required for idx data")
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            path = getattr(dt, name)
            if path and not Path(path).is_file():
                e.append(f"data.{name}: file not found: {path}")
    if not 0 < dt.holdout_fraction < 1:
        e.append("data.holdout_fraction: must lie in (0, 1)")
    g = cfg.grid
    if g.L < 1 or g.M < 1 or g.width < 1:
        e.append("grid: L, M and width must all be >= 1")
    p = cfg.pool
    if p.K < 1:
        e.append("pool.K: must be >= 1")
    bad = [l for l in p.forced_layers if not isinstance(l, int) or not 0 <= l < g.L]
    if bad:
        e.append(f"pool.forced_layers: {bad} outside [0, {g.L - 1}]")
    if p.independent and p.forced_layers:
        e.append("pool.independent: cannot be combined with forced_layers")
    if p.structure_file and not Path(p.structure_file).is_file():
        e.append(f"pool.structure_file: file not found: {p.structure_file}")
    if p.distinct and not p.independent and not p.structure_file and g.L >= 1 and g.M >= 1 and not bad:
        free = g.L - len(set(p.forced_layers))
        cap = g.M ** free
        if p.K > cap:
            e.append(f"pool.K: {p.K} distinct students exceed M^L_free = {g.M}^{free} = {cap}")
    t = cfg.train
    if t.epochs < 0:
        e.append("train.epochs: must be >= 0")
    if t.batch_size < 1:
        e.append("train.batch_size: must be >= 1")
    if not t.lr > 0:
        e.append("train.lr: must be > 0")
    if t.checkpoint_every < 0:
        e.append("train.checkpoint_every: must be >= 0")
    if t.workers < 0:
        e.append("train.workers: must be >= 0")
    ds = cfg.distill
    if not ds.temperature > 0:
        e.append("distill.temperature: must be > 0")
    if not 0 <= ds.p <= 1:
        e.append("distill.p: must lie in [0, 1]")
    if ds.aggregation not in ("actual_count", "expected_count"):
        e.append(f"distill.aggregation: must be actual_count or expected_count, got {ds.aggregation!r}")
    if ds.loss_reduction not in ("sum", "mean"):
        e.append(f"distill.loss_reduction: must be sum or mean, got {ds.loss_reduction!r}")
    s = cfg.schedule
    if s.ramp_start < 0:
        e.append("schedule.ramp_start: must be >= 0")
    end = s.ramp_end if s.ramp_end is not None else s.ramp_start
    if not s.ramp_start <= end <= max(t.epochs, 0) and t.epochs > 0:
        e.append(f"schedule: need 0 <= ramp_start <= ramp_end <= epochs, got {s.ramp_start}, {s.ramp_end}, {t.epochs}")
    pt = cfg.partition
    if pt.mode not in ("uniform", "stratified"):
        e.append(f"partition.mode: must be uniform or stratified, got {pt.mode!r}")
    if not 0 <= pt.overlap < 1:
        e.append("partition.overlap: must lie in [0, 1)")
    return e


def parse_override(text: str):
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigurationError(f"override {text!r} is not of the form section.field=value")
    return key.strip(), yaml.safe_load(raw)


def load_config(path=None, overrides=()) -> RunConfig:
    """Read YAML (or defaults when ``path`` is None) and apply ``--set`` overrides."""
    d = RunConfig().to_dict()
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root:
        d["output_dir"] = root
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as err:
            raise ConfigurationError(f"{path}: {err}") from None
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
        for key, value in loaded.items():
            if key in SECTIONS and isinstance(value, dict) and isinstance(d.get(key), dict):
                d[key].update(value)
            else:
                d[key] = value
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        _set_dotted(d, key, value)
    return from_dict(d)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def default_ramp_end(epochs, start=0) -> int:
    """Ramp-up ends after 20% of the epochs unless set explicitly."""
    return min(epochs, start + int(round(0.2 * epochs)))


def _effective(flat: dict) -> dict:
    # an unset ramp_end means "20% of the epochs"; compare the window it resolves to
    if flat.get("schedule.ramp_end") is None and "train.epochs" in flat:
        flat["schedule.ramp_end"] = default_ramp_end(flat["train.epochs"], flat.get("schedule.ramp_start", 0))
    return flat


def config_mismatches(saved: dict, current: dict, ignore=RESUME_MUTABLE) -> list:
    a, b = _effective(flatten(saved)), _effective(flatten(current))
    return sorted(k for k in set(a) | set(b) if k not in ignore and a.get(k) != b.get(k))

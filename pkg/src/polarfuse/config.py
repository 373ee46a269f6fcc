"""Run configuration: one YAML file with a section per config dataclass, plus ``--set`` overrides.

Key schema (every key optional; omitted keys keep their dataclass default)::

    sim:    SimConfig fields (n_train, n_val, seed, azimuth_res, ...)
    bev:    BevConfig fields (x_range, y_range, cell, c_l, c_c, classes, ground_z)
    db:     DbConfig fields (N, k, max_points, seed, margin)
    fusion: FusionConfig fields (K, hidden, kind)
    train:  TrainConfig fields other than K/hidden/fusion, which come from ``fusion``;
            ``iou_thresholds`` is a class -> threshold mapping

Overrides use dotted keys (``train.lam=0``) and YAML scalar syntax for values.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, Optional

import yaml

from .bev import BevConfig
from .fusion import FusionConfig
from .sampling_db import DbConfig
from .simulator import SimConfig
from .training import TrainConfig

TOOL_NAME = "polarfuse"
TOOL_VERSION = "0.1.0"
CONFIG_FILENAME = "resolved_config.yaml"

_FUSION_KEYS = {"K": "K", "hidden": "hidden", "kind": "fusion"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    bev: BevConfig = field(default_factory=BevConfig)
    db: DbConfig = field(default_factory=DbConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        train = asdict(self.train)
        for k in _FUSION_KEYS.values():
            train.pop(k)
        train["iou_thresholds"] = {c: t for c, t in self.train.iou_thresholds}
        return _plain({
            "sim": asdict(self.sim),
            "bev": asdict(self.bev),
            "db": asdict(self.db),
            "fusion": asdict(self.fusion),
            "train": train,
        })

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def stamp(self) -> dict:
        """Metadata every written artifact carries."""
        return {"tool": TOOL_NAME, "version": TOOL_VERSION, "config_hash": self.hash(),
                "bev_fingerprint": self.bev.fingerprint()}


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, default):
    """YAML gives lists and ints; dataclass defaults use tuples and floats."""
    if isinstance(value, list):
        return tuple(_coerce(v, None) for v in value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _section(cls, values: dict, section: str, skip: Iterable[str] = ()):
    known = {f.name for f in fields(cls)} - set(skip)
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    defaults = {f.name: f.default for f in fields(cls)}
    values = {k: _coerce(v, defaults.get(k)) for k, v in values.items()}
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def from_dict(data: Optional[dict]) -> RunConfig:
    data = dict(data or {})
    unknown = sorted(set(data) - {"sim", "bev", "db", "fusion", "train"})
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    for name, body in data.items():
        if body is not None and not isinstance(body, dict):
            raise ConfigError(f"section {name} must be a mapping")
    sim = _section(SimConfig, data.get("sim") or {}, "sim")
    bev = _section(BevConfig, data.get("bev") or {}, "bev")
    db = _section(DbConfig, data.get("db") or {}, "db")
    fusion = _section(FusionConfig, data.get("fusion") or {}, "fusion")
    train_vals = dict(data.get("train") or {})
    misplaced = sorted(set(train_vals) & set(_FUSION_KEYS.values()))
    if misplaced:
        raise ConfigError(f"key(s) {', '.join(misplaced)} belong in [fusion], not [train]")
    thr = train_vals.get("iou_thresholds")
    if isinstance(thr, dict):
        train_vals["iou_thresholds"] = tuple(sorted((str(k), float(v)) for k, v in thr.items()))
    train_vals.update({dst: getattr(fusion, src) for src, dst in _FUSION_KEYS.items()})
    train = _section(TrainConfig, train_vals, "train")
    return RunConfig(sim, bev, db, fusion, train)


def apply_overrides(data: dict, overrides: Iterable[str]) -> dict:
    """``section.key=value`` strings applied onto a raw config mapping; values parse as YAML."""
    out = {k: dict(v or {}) for k, v in (data or {}).items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not section.key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) < 2:
            raise ConfigError(f"override key {key!r} needs a section prefix")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: {exc}") from None
        node = out.setdefault(parts[0], {})
        for p in parts[1:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a scalar")
        node[parts[-1]] = value
    return out


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    data: Dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping of sections")
    return from_dict(apply_overrides(data, overrides))


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / CONFIG_FILENAME
    path.write_text(cfg.to_yaml())
    return path


def with_train(cfg: RunConfig, **changes) -> RunConfig:
    """Copy of ``cfg`` with training fields changed; fusion keys stay in sync."""
    fusion = replace(cfg.fusion, **{k: changes[v] for k, v in _FUSION_KEYS.items() if v in changes})
    return replace(cfg, fusion=fusion, train=replace(cfg.train, **changes))

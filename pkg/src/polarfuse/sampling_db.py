"""Dense-object database: group training objects by polar index and fuse the densest ones.

File layout (all integers little-endian)::

    b"PSDB"                 magic
    u16                     format version (currently 1)
    u32                     header length in bytes
    header                  UTF-8 JSON: config, bins, classes, entry directory
    payload                 for each directory entry in order: n_points * 4 float32

Entry directory items carry ``class``, ``dir_bin``, ``rot_bin`` (0-based),
``n_points``, ``mean_source_dims`` and ``provenance`` (``[frame_id, object_index]``
pairs of the contributing objects).
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import numpy as np

from .geometry import (
    Box3D,
    DegenerateCenter,
    ObjectPoints,
    PolarIndex,
    polar_index_of,
    to_global,
    to_local,
)

MAGIC = b"PSDB"
VERSION = 1


class DbFormatError(ValueError):
    pass


class BadMagic(DbFormatError):
    pass


class VersionMismatch(DbFormatError):
    pass


class CorruptPayload(DbFormatError):
    pass


class EmptyObject(ValueError):
    pass


@dataclass(frozen=True)
class DbConfig:
    N: int = 8
    k: int = 10
    max_points: int = 5000
    seed: int = 0
    margin: float = 0.25

    def __post_init__(self):
        if self.N < 1 or self.k < 1 or self.max_points < 1:
            raise ValueError(f"invalid DbConfig {self}")


@dataclass
class CanonicalObject:
    points: np.ndarray  # (n, 4) float32 in the unit box frame
    mean_source_dims: tuple = (1.0, 1.0, 1.0)

    def __len__(self):
        return len(self.points)


@dataclass
class DenseObjectDB:
    config: DbConfig
    entries: dict = field(default_factory=dict)  # PolarIndex -> CanonicalObject
    provenance: dict = field(default_factory=dict)  # PolarIndex -> [(frame_id, idx)]
    meta: dict = field(default_factory=dict)

    def classes(self) -> list:
        return sorted({key.class_label for key in self.entries})

    def __len__(self):
        return len(self.entries)


def canonicalize(obj: ObjectPoints) -> CanonicalObject:
    """Map object points into the dims-normalized box frame (box becomes [-0.5, 0.5]^3)."""
    if len(obj.points) == 0:
        raise EmptyObject(f"object {obj.source} has no points")
    local = to_local(obj.points, obj.box)
    local[:, :3] /= np.asarray(obj.box.dims)
    return CanonicalObject(local.astype(np.float32), tuple(obj.box.dims))


def decanonicalize(canon: np.ndarray, box: Box3D) -> np.ndarray:
    """Place unit-box points into ``box`` (scale per axis, rotate by yaw, translate)."""
    pts = np.array(canon, dtype=np.float64, ndmin=2)
    if pts.size == 0:
        return np.zeros((0, 4), np.float32)
    pts[:, :3] *= np.asarray(box.dims)
    return to_global(pts, box).astype(np.float32)


def bin_rng(seed: int, key: PolarIndex) -> np.random.Generator:
    label = zlib.crc32(key.class_label.encode("utf-8"))
    return np.random.default_rng([seed & (2**64 - 1), label, key.dir_bin, key.rot_bin])


def group_objects(scenes: Iterable, n_bins: int) -> dict:
    groups: dict = {}
    for scene in scenes:
        for i, obj in enumerate(scene.objects):
            try:
                key = polar_index_of(obj.box, n_bins)
            except DegenerateCenter:
                continue
            groups.setdefault(key, []).append(obj)
    return groups


def build_database(scenes: Iterable, cfg: DbConfig, meta: Optional[dict] = None) -> DenseObjectDB:
    db = DenseObjectDB(cfg, meta=dict(meta or {}))
    groups = group_objects(scenes, cfg.N)
    for key in sorted(groups):
        members = [m for m in groups[key] if len(m.points)]
        if not members:
            continue
        members.sort(key=lambda m: (-len(m.points), str(m.source[0]), int(m.source[1])))
        chosen = members[: cfg.k]
        canon = [canonicalize(m) for m in chosen]
        pts = np.concatenate([c.points for c in canon], axis=0)
        if len(pts) > cfg.max_points:
            pick = bin_rng(cfg.seed, key).choice(len(pts), cfg.max_points, replace=False)
            pts = pts[np.sort(pick)]
        dims = tuple(float(v) for v in np.mean([m.box.dims for m in chosen], axis=0))
        db.entries[key] = CanonicalObject(np.ascontiguousarray(pts, dtype=np.float32), dims)
        db.provenance[key] = [(str(m.source[0]), int(m.source[1])) for m in chosen]
    return db


def save_db(db: DenseObjectDB) -> bytes:
    keys = sorted(db.entries)
    directory = []
    for key in keys:
        entry = db.entries[key]
        directory.append({
            "class": key.class_label,
            "dir_bin": key.dir_bin,
            "rot_bin": key.rot_bin,
            "n_points": len(entry.points),
            "mean_source_dims": list(entry.mean_source_dims),
            "provenance": [list(p) for p in db.provenance.get(key, [])],
        })
    header = {
        "config": asdict(db.config),
        "bins": db.config.N,
        "classes": db.classes(),
        "meta": db.meta,
        "entries": directory,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MAGIC, struct.pack("<HI", VERSION, len(blob)), blob]
    out += [db.entries[k].points.astype("<f4").tobytes() for k in keys]
    return b"".join(out)


def load_db(data: bytes) -> DenseObjectDB:
    if data[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {data[:4]!r}")
    if len(data) < 10:
        raise CorruptPayload("truncated header")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise VersionMismatch(f"database version {version}, reader supports {VERSION}")
    start = 10 + hlen
    if len(data) < start:
        raise CorruptPayload("header length exceeds file size")
    try:
        header = json.loads(data[10:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptPayload(f"unreadable header: {exc}") from None
    declared = sum(e["n_points"] for e in header["entries"]) * 16
    if len(data) - start != declared:
        raise CorruptPayload(f"payload holds {len(data) - start} bytes, header declares {declared}")
    db = DenseObjectDB(DbConfig(**header["config"]), meta=header.get("meta", {}))
    offset = start
    for e in header["entries"]:
        key = PolarIndex(e["class"], e["dir_bin"], e["rot_bin"])
        nbytes = e["n_points"] * 16
        pts = np.frombuffer(data, dtype="<f4", count=e["n_points"] * 4, offset=offset)
        offset += nbytes
        db.entries[key] = CanonicalObject(pts.reshape(-1, 4).astype(np.float32), tuple(e["mean_source_dims"]))
        db.provenance[key] = [tuple(p) for p in e["provenance"]]
    return db

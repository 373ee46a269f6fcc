"""Densify scene objects by pasting the matching dense object from the database."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .geometry import ObjectPoints, PolarIndex, Scene, polar_index_of
from .sampling_db import DenseObjectDB, decanonicalize


class NoDonor(LookupError):
    def __init__(self, class_label: str):
        super().__init__(f"database has no entries for class {class_label!r}")
        self.class_label = class_label


def _circ(a: int, b: int, n: int) -> int:
    d = (a - b) % n
    return min(d, n - d)


def find_donor(db: DenseObjectDB, key: PolarIndex) -> PolarIndex:
    """Exact bin if populated, else the nearest populated bin of the same class.

    Distance is the Chebyshev ring distance on (dir_bin, rot_bin) with
    wraparound; ties go to the smaller direction offset, then the smaller
    rotation offset, then the lower bin ids.
    """
    if key in db.entries:
        return key
    n = db.config.N
    best, best_rank = None, None
    for cand in db.entries:
        if cand.class_label != key.class_label:
            continue
        dd = _circ(cand.dir_bin, key.dir_bin, n)
        dr = _circ(cand.rot_bin, key.rot_bin, n)
        rank = (max(dd, dr), dd, dr, cand.dir_bin, cand.rot_bin)
        if best_rank is None or rank < best_rank:
            best, best_rank = cand, rank
    if best is None:
        raise NoDonor(key.class_label)
    return best


def added_intensity_policy(raw: ObjectPoints) -> float:
    if len(raw.points) == 0:
        return 0.5
    return float(np.mean(raw.points[:, 3], dtype=np.float64))


def enhance_object(obj: ObjectPoints, db: DenseObjectDB) -> np.ndarray:
    donor = find_donor(db, polar_index_of(obj.box, db.config.N))
    pts = decanonicalize(db.entries[donor].points, obj.box)
    pts[:, 3] = added_intensity_policy(obj)
    return pts


def enhance_scene(scene: Scene, db: DenseObjectDB, classes: Optional[set] = None) -> Scene:
    """Return a copy of ``scene`` whose ``added`` holds one pasted set per object.

    Raw object and background arrays are shared, not copied: enhancement is
    strictly additive. ``classes`` restricts pasting to those labels; other
    objects receive an empty added set.
    """
    added = []
    for obj in scene.objects:
        if classes is not None and obj.box.class_label not in classes:
            added.append(np.zeros((0, 4), np.float32))
        else:
            added.append(enhance_object(obj, db))
    return Scene(scene.frame_id, list(scene.objects), scene.background, added)

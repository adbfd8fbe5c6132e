"""Scene model: identified object proposals over colored point clouds.

A scene is an ordered set of object proposals, each a colored point cloud
with a category label and attribute tags, paired one-to-one with object
identifiers. Identifier text is the canonical "<OBJ%03d>" form used
everywhere downstream (task text, tokenizer, response parsing).

All types are immutable after construction; arrays are copied in and
frozen so a scene can be shared between pipeline stages safely.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

from .errors import DataError

__all__ = [
    "MAX_OBJECTS",
    "IDENTIFIER_RE",
    "PointCloud",
    "ObjectProposal",
    "ObjectIdentifier",
    "AABB3",
    "Scene",
    "identifier_text",
    "make_scene",
    "aabb_from_points",
    "scene_to_json",
    "scene_from_json",
    "save_scene",
    "load_scene",
]

# Three decimal digits in the identifier format cap scenes at 999 objects.
MAX_OBJECTS = 999

IDENTIFIER_RE = re.compile(r"<OBJ(\d{3})>")


def identifier_text(index: int) -> str:
    """Canonical identifier token text for a 1-based object index."""
    if not 1 <= index <= MAX_OBJECTS:
        raise ValueError(f"object index {index} outside 1..{MAX_OBJECTS}")
    return f"<OBJ{index:03d}>"


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Colored points as an (m, 6) array of x, y, z, r, g, b rows."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 6:
            raise ValueError(f"points must have shape (m, 6), got {pts.shape}")
        if pts.shape[0] == 0:
            raise ValueError("point cloud is empty")
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite values")
        rgb = pts[:, 3:6]
        if rgb.min() < 0.0 or rgb.max() > 1.0:
            raise ValueError("color channels must lie in [0, 1]")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, PointCloud) and np.array_equal(self.points, other.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, 0:3]

    @property
    def rgb(self) -> np.ndarray:
        return self.points[:, 3:6]

    def translated(self, offset) -> "PointCloud":
        moved = self.points.copy()
        moved[:, 0:3] += np.asarray(offset, dtype=np.float64)
        return PointCloud(moved)


@dataclass(frozen=True, eq=False)
class AABB3:
    """Axis-aligned box with componentwise min <= max corners."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = _frozen(np.asarray(self.min, dtype=np.float64).reshape(3))
        hi = _frozen(np.asarray(self.max, dtype=np.float64).reshape(3))
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise ValueError("box corners must be finite")
        if (lo > hi).any():
            raise ValueError(f"box min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, AABB3)
            and np.array_equal(self.min, other.min)
            and np.array_equal(self.max, other.max)
        )

    @property
    def extents(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def volume(self) -> float:
        return float(np.prod(self.extents))

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(xyz, dtype=np.float64))
        return ((p >= self.min) & (p <= self.max)).all(axis=1)


@dataclass(frozen=True, eq=False)
class ObjectProposal:
    """One segmented object: 1-based index, points, category, attribute tags."""

    index: int
    cloud: PointCloud
    category: str
    attributes: "MappingProxyType[str, str]" = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= self.index <= MAX_OBJECTS:
            raise ValueError(f"object index {self.index} outside 1..{MAX_OBJECTS}")
        if not self.category:
            raise ValueError("category must be non-empty")
        attrs = dict(self.attributes)
        for k, v in attrs.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise ValueError("attributes must map str -> str")
        object.__setattr__(self, "attributes", MappingProxyType(attrs))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ObjectProposal)
            and self.index == other.index
            and self.category == other.category
            and dict(self.attributes) == dict(other.attributes)
            and self.cloud == other.cloud
        )


@dataclass(frozen=True)
class ObjectIdentifier:
    """Identifier token bound to one proposal index."""

    index: int
    token_text: str

    @classmethod
    def from_index(cls, index: int) -> "ObjectIdentifier":
        return cls(index=index, token_text=identifier_text(index))

    def __post_init__(self):
        if self.token_text != identifier_text(self.index):
            raise ValueError(
                f"identifier text {self.token_text!r} does not match index {self.index}"
            )


@dataclass(frozen=True, eq=False)
class Scene:
    """Proposals sorted by index 1..n with their paired identifiers."""

    scene_id: str
    proposals: tuple[ObjectProposal, ...]
    identifiers: tuple[ObjectIdentifier, ...]

    @property
    def n_objects(self) -> int:
        return len(self.proposals)

    def object(self, index: int) -> ObjectProposal:
        if not 1 <= index <= self.n_objects:
            raise ValueError(f"no object with index {index} in scene of {self.n_objects}")
        return self.proposals[index - 1]

    def aabbs(self) -> list[AABB3]:
        return [aabb_from_points(p.cloud) for p in self.proposals]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Scene)
            and self.scene_id == other.scene_id
            and self.proposals == other.proposals
            and self.identifiers == other.identifiers
        )


def make_scene(proposals, scene_id: str = "") -> Scene:
    """Build a scene, enforcing a contiguous 1..n index range.

    Proposals may arrive in any order; they are sorted by index. Duplicate
    or gapped indices raise ValueError naming the offending index.
    """
    props = list(proposals)
    if not props:
        raise ValueError("a scene needs at least one object proposal")
    if len(props) > MAX_OBJECTS:
        raise ValueError(f"scene exceeds the {MAX_OBJECTS}-object identifier cap")
    seen: set[int] = set()
    for p in props:
        if p.index in seen:
            raise ValueError(f"duplicate object index {p.index}")
        seen.add(p.index)
    for want in range(1, len(props) + 1):
        if want not in seen:
            raise ValueError(
                f"object indices must be contiguous 1..{len(props)}; missing {want}"
            )
    props.sort(key=lambda p: p.index)
    idents = tuple(ObjectIdentifier.from_index(p.index) for p in props)
    return Scene(scene_id=scene_id, proposals=tuple(props), identifiers=idents)


def aabb_from_points(cloud: PointCloud) -> AABB3:
    """Componentwise min/max box over the cloud's coordinates."""
    xyz = cloud.xyz
    return AABB3(min=xyz.min(axis=0), max=xyz.max(axis=0))


_SCHEMA_VERSION = 1


def scene_to_json(scene: Scene) -> str:
    """Serialize to a one-line JSON document with round-trip float precision."""
    doc = {
        "version": _SCHEMA_VERSION,
        "scene_id": scene.scene_id,
        "objects": [
            {
                "index": p.index,
                "category": p.category,
                "attributes": dict(p.attributes),
                "points": [float(v) for v in p.cloud.points.ravel()],
            }
            for p in scene.proposals
        ],
    }
    return json.dumps(doc, separators=(",", ":"))


def scene_from_json(text: str) -> Scene:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"scene document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataError("scene document must be a JSON object")
    version = doc.get("version")
    if version != _SCHEMA_VERSION:
        raise DataError(f"unsupported scene schema version {version!r}")
    try:
        objects = doc["objects"]
        proposals = []
        for entry in objects:
            flat = np.asarray(entry["points"], dtype=np.float64)
            if flat.size % 6 != 0:
                raise DataError(
                    f"object {entry.get('index')}: point list length {flat.size} not a multiple of 6"
                )
            proposals.append(
                ObjectProposal(
                    index=int(entry["index"]),
                    cloud=PointCloud(flat.reshape(-1, 6)),
                    category=str(entry["category"]),
                    attributes={str(k): str(v) for k, v in entry.get("attributes", {}).items()},
                )
            )
        return make_scene(proposals, scene_id=str(doc.get("scene_id", "")))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed scene document: {exc}") from exc


def save_scene(scene: Scene, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(scene_to_json(scene))
        fh.write("\n")


def load_scene(path) -> Scene:
    with open(path, "r", encoding="utf-8") as fh:
        return scene_from_json(fh.read())

"""Procedural desk-scale corpus: scenes, cameras, depth, and language tasks.

Scenes are rooms of non-overlapping axis-aligned boxes resting on the
floor, each box carrying a distinct (category, color) pair and sampled
into a surface point cloud. Cameras circle the room (or walk a line)
with analytically ray-traced depth buffers, so projection-time occlusion
is exact. Every language task ships with ground truth that the generator
re-derives by exhaustive predicate evaluation before emitting it, which
makes downstream accuracy well-defined.

All strings draw from the tokenizer's fixed lexicon, so generated data
never needs byte fallback. Everything is a pure function of (spec, seed,
scene index): regenerating a corpus produces identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .metrics import STMaskVolume
from .projection import (
    CameraView,
    ProjectionParams,
    look_at_extrinsics,
    project_object_to_views,
)
from .rand import derive_rng
from .scene import (
    AABB3,
    ObjectProposal,
    PointCloud,
    Scene,
    make_scene,
    save_scene,
)
from .tasks import (
    DENSE_CAPTION,
    GROUND1,
    GROUND_MULTI,
    SITUATED_VQA,
    VQA,
    RawTask,
    identifier_text,
    save_tasks,
    to_qa,
)

__all__ = [
    "SynthSceneSpec",
    "COLOR_RGB",
    "generate_scene",
    "make_views",
    "render_depth",
    "generate_tasks",
    "make_video_grounding_gt",
    "split_for_index",
    "generate_corpus",
    "load_manifest",
    "spec_hash",
]

COLOR_RGB = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.15, 0.20, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "orange": (0.95, 0.55, 0.05),
    "purple": (0.55, 0.15, 0.70),
    "brown": (0.55, 0.35, 0.15),
    "gray": (0.55, 0.55, 0.55),
}

_PLURALS = {
    "ball": "balls", "book": "books", "box": "boxes", "can": "cans",
    "chair": "chairs", "lamp": "lamps", "table": "tables", "vase": "vases",
}

_COUNT_WORDS = (
    "zero", "one", "two", "three", "four", "five",
    "six", "seven", "eight", "nine", "ten",
)

_SIZE_RANGES = {"small": (0.16, 0.34), "large": (0.44, 0.78)}

_SIDES = {
    # standpoint on each wall, in room-fraction coordinates (x, y)
    "north": (0.5, 1.0),
    "south": (0.5, 0.0),
    "east": (1.0, 0.5),
    "west": (0.0, 0.5),
}

_PLACEMENT_ATTEMPTS = 200
_GAP = 0.05


@dataclass(frozen=True)
class SynthSceneSpec:
    seed: int = 0
    n_scenes: int = 250
    train_scenes: int = 200
    min_objects: int = 8
    max_objects: int = 16
    categories: tuple[str, ...] = tuple(sorted(_PLURALS))
    colors: tuple[str, ...] = tuple(sorted(COLOR_RGB))
    sizes: tuple[str, ...] = ("small", "large")
    room: tuple[float, float, float] = (4.0, 4.0, 2.5)
    n_cameras: int = 8
    trajectory: str = "orbit"
    image_size: int = 96
    focal: float = 80.0
    min_points: int = 200
    points_per_m2: float = 400.0
    n_ground1: int = 4
    n_ground_multi: int = 3
    n_captions: int = 2
    n_vqa: int = 2
    n_situated: int = 1
    relational_fraction: float = 0.35

    _INT_FIELDS = (
        "seed", "n_scenes", "train_scenes", "min_objects", "max_objects",
        "n_cameras", "image_size", "min_points", "n_ground1",
        "n_ground_multi", "n_captions", "n_vqa", "n_situated",
    )

    def __post_init__(self):
        for name in self._INT_FIELDS:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
        if self.min_objects < 2:
            raise ConfigError("need at least two objects for relational queries")
        if self.max_objects < self.min_objects:
            raise ConfigError("max_objects below min_objects")
        if self.max_objects > len(self.categories) * len(self.colors):
            raise ConfigError(
                "max_objects exceeds the number of distinct (category, color) pairs"
            )
        if not (0 < self.train_scenes <= self.n_scenes):
            raise ConfigError("train_scenes must be in 1..n_scenes")
        if any(v <= 0 for v in self.room):
            raise ConfigError("room bounds must be positive")
        if self.trajectory not in ("orbit", "linear"):
            raise ConfigError(f"unknown trajectory {self.trajectory!r}")
        if self.n_cameras < 1 or self.image_size < 8 or self.focal <= 0:
            raise ConfigError("invalid camera configuration")
        if self.min_points < 1 or self.points_per_m2 <= 0:
            raise ConfigError("invalid point sampling density")
        if not 0.0 <= self.relational_fraction <= 1.0:
            raise ConfigError("relational_fraction must be in [0, 1]")
        for color in self.colors:
            if color not in COLOR_RGB:
                raise ConfigError(f"color {color!r} has no RGB value")
        for cat in self.categories:
            if cat not in _PLURALS:
                raise ConfigError(f"category {cat!r} has no plural form")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_scenes": self.n_scenes,
            "train_scenes": self.train_scenes,
            "min_objects": self.min_objects,
            "max_objects": self.max_objects,
            "categories": list(self.categories),
            "colors": list(self.colors),
            "sizes": list(self.sizes),
            "room": list(self.room),
            "n_cameras": self.n_cameras,
            "trajectory": self.trajectory,
            "image_size": self.image_size,
            "focal": self.focal,
            "min_points": self.min_points,
            "points_per_m2": self.points_per_m2,
            "n_ground1": self.n_ground1,
            "n_ground_multi": self.n_ground_multi,
            "n_captions": self.n_captions,
            "n_vqa": self.n_vqa,
            "n_situated": self.n_situated,
            "relational_fraction": self.relational_fraction,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthSceneSpec":
        base = cls()
        kwargs = {}
        for key, default in base.to_dict().items():
            value = doc.get(key, default)
            if isinstance(default, list):
                value = tuple(value)
            kwargs[key] = value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"malformed scene spec: {exc}") from exc


def spec_hash(spec: SynthSceneSpec) -> str:
    blob = json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.blake2b(blob.encode("utf-8"), digest_size=8).hexdigest()


# -- geometry ----------------------------------------------------------------


def _sample_box_surface(rng: np.random.Generator, bmin, bmax, count: int) -> np.ndarray:
    """Uniform-by-area sampling of the box faces; points lie exactly on them."""
    bmin = np.asarray(bmin, dtype=np.float64)
    bmax = np.asarray(bmax, dtype=np.float64)
    ex, ey, ez = bmax - bmin
    pair_areas = np.array([ey * ez, ex * ez, ex * ey])  # faces normal to x, y, z
    weights = np.repeat(pair_areas, 2)
    weights = weights / weights.sum()
    faces = rng.choice(6, size=count, p=weights)
    uv = rng.random((count, 2))
    pts = np.empty((count, 3), dtype=np.float64)
    for f in range(6):
        sel = faces == f
        axis = f // 2
        hi = f % 2 == 1
        a, b = [i for i in range(3) if i != axis]
        pts[sel, axis] = bmax[axis] if hi else bmin[axis]
        pts[sel, a] = bmin[a] + uv[sel, 0] * (bmax[a] - bmin[a])
        pts[sel, b] = bmin[b] + uv[sel, 1] * (bmax[b] - bmin[b])
    return pts


def _disjoint(amin, amax, bmin, bmax, gap: float) -> bool:
    return bool((amax + gap <= bmin).any() or (bmax + gap <= amin).any())


def generate_scene(spec: SynthSceneSpec, index: int = 0) -> tuple[Scene, list[CameraView]]:
    """One deterministic scene plus its cameras with analytic depth."""
    if not 0 <= index < spec.n_scenes:
        raise ConfigError(f"scene index {index} outside 0..{spec.n_scenes - 1}")
    rng = derive_rng(spec.seed, "scene", index)
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    n_colors = len(spec.colors)
    pair_ids = rng.permutation(len(spec.categories) * n_colors)[:n]

    rx, ry, _rz = spec.room
    placed: list[tuple[np.ndarray, np.ndarray]] = []
    proposals = []
    for i, pair in enumerate(pair_ids, start=1):
        category = spec.categories[int(pair) // n_colors]
        color = spec.colors[int(pair) % n_colors]
        size = spec.sizes[int(rng.integers(len(spec.sizes)))]
        lo, hi = _SIZE_RANGES[size]
        for _attempt in range(_PLACEMENT_ATTEMPTS):
            extents = rng.uniform(lo, hi, 3)
            cx = rng.uniform(extents[0] / 2 + _GAP, rx - extents[0] / 2 - _GAP)
            cy = rng.uniform(extents[1] / 2 + _GAP, ry - extents[1] / 2 - _GAP)
            bmin = np.array([cx - extents[0] / 2, cy - extents[1] / 2, 0.0])
            bmax = bmin + extents
            if all(_disjoint(bmin, bmax, pmin, pmax, _GAP) for pmin, pmax in placed):
                break
        else:
            raise ConfigError(
                f"object placement failed after {_PLACEMENT_ATTEMPTS} attempts "
                f"(scene index {index}, object {i})"
            )
        placed.append((bmin, bmax))
        area = 2.0 * (
            extents[0] * extents[1] + extents[0] * extents[2] + extents[1] * extents[2]
        )
        count = max(spec.min_points, int(math.ceil(area * spec.points_per_m2)))
        xyz = np.round(_sample_box_surface(rng, bmin, bmax, count), 6)
        rgb = np.tile(np.asarray(COLOR_RGB[color], dtype=np.float64), (count, 1))
        proposals.append(
            ObjectProposal(
                index=i,
                cloud=PointCloud(np.hstack([xyz, rgb])),
                category=category,
                attributes={"color": color, "size": size},
            )
        )
    scene = make_scene(proposals, scene_id=f"scene{index:04d}")
    return scene, make_views(spec, scene)


def _camera_positions(spec: SynthSceneSpec) -> tuple[np.ndarray, np.ndarray]:
    rx, ry, rz = spec.room
    center = np.array([rx / 2, ry / 2, 0.5])
    eyes = []
    if spec.trajectory == "orbit":
        radius = 0.55 * math.hypot(rx, ry)
        for k in range(spec.n_cameras):
            theta = 2.0 * math.pi * k / spec.n_cameras
            eyes.append(
                [
                    rx / 2 + radius * math.cos(theta),
                    ry / 2 + radius * math.sin(theta),
                    0.8 * rz,
                ]
            )
    else:  # linear walk along the south wall
        xs = np.linspace(0.3 * rx, 0.7 * rx, spec.n_cameras)
        for x in xs:
            eyes.append([float(x), -0.6 * ry, 0.6 * rz])
    return np.asarray(eyes), center


def make_views(spec: SynthSceneSpec, scene: Scene) -> list[CameraView]:
    """Cameras on the spec trajectory, depth-buffered against scene boxes."""
    eyes, center = _camera_positions(spec)
    size = spec.image_size
    half = (size - 1) / 2.0
    boxes = scene.aabbs()
    views = []
    for eye in eyes:
        ext = look_at_extrinsics(eye, center)
        bare = CameraView(
            fx=spec.focal, fy=spec.focal, cx=half, cy=half,
            extrinsics=ext, width=size, height=size,
        )
        views.append(
            CameraView(
                fx=spec.focal, fy=spec.focal, cx=half, cy=half,
                extrinsics=ext, width=size, height=size,
                depth=render_depth(boxes, bare),
            )
        )
    return views


def render_depth(boxes: list[AABB3], view: CameraView) -> np.ndarray:
    """Analytic z-depth of the nearest box along each pixel's center ray.

    Pixels hitting no box hold +inf, which disables occlusion culling
    there by comparison semantics.
    """
    rot = view.extrinsics[:3, :3]
    eye = -rot.T @ view.extrinsics[:3, 3]
    u = np.arange(view.width, dtype=np.float64)
    v = np.arange(view.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack(
        [(uu - view.cx) / view.fx, (vv - view.cy) / view.fy, np.ones_like(uu)],
        axis=-1,
    )
    d_world = d_cam.reshape(-1, 3) @ rot  # R^T applied row-wise
    tiny = 1e-12
    d_safe = np.where(np.abs(d_world) < tiny, np.where(d_world < 0, -tiny, tiny), d_world)
    depth = np.full(d_world.shape[0], np.inf)
    for box in boxes:
        t1 = (box.min - eye) / d_safe
        t2 = (box.max - eye) / d_safe
        t_enter = np.minimum(t1, t2).max(axis=1)
        t_exit = np.maximum(t1, t2).min(axis=1)
        hit = (t_enter <= t_exit) & (t_exit > 0.0)
        t_hit = np.where(t_enter > 0.0, t_enter, t_exit)
        depth = np.where(hit & (t_hit < depth), t_hit, depth)
    return depth.reshape(view.height, view.width)


# -- language tasks ----------------------------------------------------------


class _SceneFacts:
    """Derived per-object facts plus exhaustive predicate evaluators."""

    def __init__(self, scene: Scene):
        self.n = scene.n_objects
        self.category = {p.index: p.category for p in scene.proposals}
        self.color = {p.index: p.attributes["color"] for p in scene.proposals}
        self.size = {p.index: p.attributes["size"] for p in scene.proposals}
        self.center = {
            p.index: p.cloud.xyz.mean(axis=0) for p in scene.proposals
        }
        self.indices = [p.index for p in scene.proposals]

    def matching(self, predicate) -> list[int]:
        return [i for i in self.indices if predicate(i)]

    def distance(self, i: int, j: int) -> float:
        return float(np.linalg.norm(self.center[i] - self.center[j]))

    def nearest_to(self, i: int, candidates=None) -> tuple[int | None, float]:
        """Unique nearest candidate to object i, or (None, gap) on a tie."""
        pool = [j for j in (candidates or self.indices) if j != i]
        if not pool:
            return None, 0.0
        dists = sorted((self.distance(i, j), j) for j in pool)
        if len(dists) > 1 and dists[1][0] - dists[0][0] < 1e-6:
            return None, 0.0
        return dists[0][1], (dists[1][0] - dists[0][0]) if len(dists) > 1 else math.inf


def _attr_description(facts: _SceneFacts, i: int) -> tuple[str, list[int]]:
    desc = f"the {facts.color[i]} {facts.category[i]}"
    hits = facts.matching(
        lambda j: facts.color[j] == facts.color[i] and facts.category[j] == facts.category[i]
    )
    return desc, hits


def _extreme_description(facts: _SceneFacts, i: int) -> tuple[str, list[int]] | None:
    """'the leftmost <category>' when object i is the strict extreme of >= 2."""
    same = facts.matching(lambda j: facts.category[j] == facts.category[i])
    if len(same) < 2:
        return None
    xs = sorted((facts.center[j][0], j) for j in same)
    if xs[0][1] == i and xs[1][0] - xs[0][0] > 1e-6:
        return f"the leftmost {facts.category[i]}", [xs[0][1]]
    if xs[-1][1] == i and xs[-1][0] - xs[-2][0] > 1e-6:
        return f"the rightmost {facts.category[i]}", [xs[-1][1]]
    return None


def _nearest_description(
    facts: _SceneFacts, i: int, rng: np.random.Generator
) -> tuple[str, list[int]] | None:
    """'the <cat_i> nearest to the <color_r> <cat_r>' with verified uniqueness."""
    refs = [r for r in facts.indices if r != i]
    rng.shuffle(refs)
    same_cat = facts.matching(lambda j: facts.category[j] == facts.category[i])
    for r in refs:
        candidates = [j for j in same_cat if j != r]
        if i not in candidates:
            continue
        best, _gap = facts.nearest_to(r, candidates)
        if best == i:
            desc = (
                f"the {facts.category[i]} nearest to "
                f"the {facts.color[r]} {facts.category[r]}"
            )
            return desc, [i]
    return None


def generate_tasks(scene: Scene, seed: int, spec: SynthSceneSpec | None = None) -> list[RawTask]:
    """Raw tasks with exhaustively rechecked ground truth, in a fixed order."""
    spec = spec or SynthSceneSpec()
    facts = _SceneFacts(scene)
    rng = derive_rng(seed, "tasks", scene.scene_id)
    sid = scene.scene_id
    out: list[RawTask] = []

    def recheck_single(desc: str, hits: list[int], target: int):
        if hits != [target]:
            raise AssertionError(
                f"description {desc!r} matched {hits}, wanted [{target}]"
            )

    # -- single-object grounding
    order = list(facts.indices)
    rng.shuffle(order)
    targets = order[: spec.n_ground1]
    for i in targets:
        desc_hits = None
        if rng.random() < spec.relational_fraction:
            desc_hits = _extreme_description(facts, i) or _nearest_description(facts, i, rng)
        if desc_hits is None:
            desc_hits = _attr_description(facts, i)
        desc, hits = desc_hits
        recheck_single(desc, hits, i)
        out.append(
            RawTask(task=GROUND1, scene_ref=sid, description=desc,
                    question=None, answer=None, situation=None, caption=None,
                    object_indices=(i,))
        )

    # -- multi-object grounding: one guaranteed zero-match, then group queries
    present = {(facts.category[i], facts.color[i]) for i in facts.indices}
    absent = [
        (cat, color)
        for cat in spec.categories
        for color in spec.colors
        if (cat, color) not in present
    ]
    if absent and spec.n_ground_multi > 0:
        zcat, zcolor = absent[int(rng.integers(len(absent)))]
        zdesc = f"{zcolor} {_PLURALS[zcat]}"
        assert facts.matching(
            lambda j: facts.category[j] == zcat and facts.color[j] == zcolor
        ) == []
        out.append(
            RawTask(task=GROUND_MULTI, scene_ref=sid, description=zdesc,
                    question=None, answer=None, situation=None, caption=None,
                    object_indices=())
        )

    group_forms = []
    for color in spec.colors:
        hits = facts.matching(lambda j, c=color: facts.color[j] == c)
        if hits:
            group_forms.append((f"{color} objects", hits))
    for cat in spec.categories:
        hits = facts.matching(lambda j, c=cat: facts.category[j] == c)
        if hits:
            group_forms.append((_PLURALS[cat], hits))
    for size in spec.sizes:
        for cat in spec.categories:
            hits = facts.matching(
                lambda j, s=size, c=cat: facts.size[j] == s and facts.category[j] == c
            )
            if hits:
                group_forms.append((f"{size} {_PLURALS[cat]}", hits))
    # prefer several matches so "Yes" answers list more than one identifier
    group_forms.sort(key=lambda item: -len(item[1]))
    chosen = group_forms[: max(spec.n_ground_multi - 1, 0)]
    rng.shuffle(chosen)
    for desc, hits in chosen:
        out.append(
            RawTask(task=GROUND_MULTI, scene_ref=sid, description=desc,
                    question=None, answer=None, situation=None, caption=None,
                    object_indices=tuple(sorted(hits)))
        )

    # -- dense captions from attributes + the actual relation to the nearest object
    cap_targets = order[spec.n_ground1 : spec.n_ground1 + spec.n_captions]
    if len(cap_targets) < spec.n_captions:
        cap_targets = order[: spec.n_captions]
    for i in cap_targets:
        j, _gap = facts.nearest_to(i)
        if j is None:
            j = next(k for k in facts.indices if k != i)
        delta = facts.center[i] - facts.center[j]
        if abs(delta[0]) >= abs(delta[1]):
            rel = "to the right of" if delta[0] > 0 else "to the left of"
        else:
            rel = "behind" if delta[1] > 0 else "in front of"
        caption = (
            f"a {facts.size[i]} {facts.color[i]} {facts.category[i]} {rel} "
            f"the {facts.color[j]} {facts.category[j]}."
        )
        out.append(
            RawTask(task=DENSE_CAPTION, scene_ref=sid, caption=caption,
                    question=None, answer=None, situation=None, description=None,
                    object_indices=(i,))
        )

    # -- VQA: rotate through count / color / category / nearest forms
    vqa_forms = ["count", "color", "category", "nearest"]
    start = int(rng.integers(len(vqa_forms)))
    picked = 0
    attempt = 0
    while picked < spec.n_vqa and attempt < 4 * spec.n_vqa + 8:
        form = vqa_forms[(start + attempt) % len(vqa_forms)]
        attempt += 1
        if form == "count":
            cat = spec.categories[int(rng.integers(len(spec.categories)))]
            members = facts.matching(lambda j, c=cat: facts.category[j] == c)
            if len(members) >= len(_COUNT_WORDS):
                continue
            out.append(
                RawTask(task=VQA, scene_ref=sid,
                        question=f"How many {_PLURALS[cat]} are there?",
                        answer=_COUNT_WORDS[len(members)],
                        description=None, situation=None, caption=None,
                        object_indices=tuple(members))
            )
        elif form in ("color", "category"):
            i = facts.indices[int(rng.integers(facts.n))]
            answer = facts.color[i] if form == "color" else facts.category[i]
            out.append(
                RawTask(task=VQA, scene_ref=sid,
                        question=f"What is the {form} of {identifier_text(i)}?",
                        answer=answer,
                        description=None, situation=None, caption=None,
                        object_indices=(i,))
            )
        else:
            i = facts.indices[int(rng.integers(facts.n))]
            j, _gap = facts.nearest_to(i)
            if j is None:
                continue
            best = min(
                ((facts.distance(i, k), k) for k in facts.indices if k != i)
            )[1]
            assert best == j
            out.append(
                RawTask(task=VQA, scene_ref=sid,
                        question=f"Which object is the nearest to {identifier_text(i)}?",
                        answer=identifier_text(j),
                        description=None, situation=None, caption=None,
                        object_indices=(j,))
            )
        picked += 1

    # -- situated VQA: wall-standpoint left/right questions
    rx, ry, rz = spec.room
    center = np.array([rx / 2, ry / 2, 0.5])
    side_names = sorted(_SIDES)
    picked = 0
    attempt = 0
    while picked < spec.n_situated and attempt < 4 * spec.n_situated + 16:
        attempt += 1
        side = side_names[int(rng.integers(len(side_names)))]
        fx, fy = _SIDES[side]
        eye = np.array([fx * rx, fy * ry, 0.64 * rz])
        ext = look_at_extrinsics(eye, center)
        right_vec = ext[0, :3]  # camera +x row of the rotation
        i = facts.indices[int(rng.integers(facts.n))]
        lateral = float(np.dot(facts.center[i] - eye, right_vec))
        if abs(lateral) < 0.15:
            continue
        answer = "right" if lateral > 0 else "left"
        situation = (
            f"You are standing at the {side} side of the room facing the center."
        )
        out.append(
            RawTask(task=SITUATED_VQA, scene_ref=sid, situation=situation,
                    question=f"Is {identifier_text(i)} on your left or your right?",
                    answer=answer, description=None, caption=None,
                    object_indices=(i,))
        )
        picked += 1

    return out


# -- video grounding ---------------------------------------------------------


def make_video_grounding_gt(
    scene: Scene,
    views,
    object_index: int,
    params: ProjectionParams = ProjectionParams(),
) -> STMaskVolume:
    """Per-frame projected, depth-culled masks of one object, stacked in time."""
    masks = project_object_to_views(scene.object(object_index), views, params)
    return STMaskVolume(frames=tuple(masks))


# -- corpus ------------------------------------------------------------------


def split_for_index(spec: SynthSceneSpec, index: int) -> str:
    return "train" if index < spec.train_scenes else "val"


def generate_corpus(spec: SynthSceneSpec, out_dir) -> dict:
    """Write scenes, task files, and the manifest; returns the manifest."""
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    (out / "tasks").mkdir(parents=True, exist_ok=True)
    split_ids: dict[str, list[str]] = {"train": [], "val": []}
    split_tasks = {"train": [], "val": []}
    task_counts = {"train": 0, "val": 0}
    for index in range(spec.n_scenes):
        scene, _views = generate_scene(spec, index)
        save_scene(scene, out / "scenes" / f"{scene.scene_id}.json")
        split = split_for_index(spec, index)
        split_ids[split].append(scene.scene_id)
        qa = [to_qa(raw, scene) for raw in generate_tasks(scene, spec.seed, spec)]
        split_tasks[split].extend(qa)
        task_counts[split] += len(qa)
    for split, items in split_tasks.items():
        save_tasks(items, out / "tasks" / f"{split}.jsonl")
    manifest = {
        "format": 1,
        "spec": spec.to_dict(),
        "spec_hash": spec_hash(spec),
        "splits": split_ids,
        "task_counts": task_counts,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(corpus_dir) -> tuple[SynthSceneSpec, dict]:
    path = Path(corpus_dir) / "manifest.json"
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"no manifest at {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
    if doc.get("format") != 1:
        raise DataError(f"unsupported manifest format {doc.get('format')!r}")
    spec = SynthSceneSpec.from_dict(doc.get("spec", {}))
    return spec, doc

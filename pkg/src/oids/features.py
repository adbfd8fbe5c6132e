"""Object-centric 2D/3D features: patch pooling and multiview aggregation.

The 2D path mirrors a frozen patch encoder: each view yields a G x G grid
of patch features; an object's per-view vector is the unweighted mean of
the patches its mask intersects, and views are combined by a mask-area
weighted average. The 3D path is a deterministic per-object descriptor.
Both providers are synthetic stand-ins with fixed label code vectors, so
the downstream model has real signal to learn from while everything stays
seeded and bit-reproducible.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ObjectInvisibleError
from .projection import CameraView, Mask2D, ProjectionParams, project_object_to_views, project_points, rasterize_mask
from .rand import derive_rng
from .scene import ObjectProposal, Scene

__all__ = [
    "PatchFeatureMap",
    "ObjectFeatures",
    "FeatureConfig",
    "intersecting_patches",
    "pool_image",
    "aggregate_multiview",
    "select_single_view",
    "label_code",
    "pair_code",
    "background_code",
    "synth_patch_features",
    "synth_point_features",
    "extract_scene_features",
    "write_feature_cache",
    "read_feature_cache",
]

PATCH_NOISE_SIGMA = 0.05
POINT_NOISE_SIGMA = 0.05

# Z^p layout: centroid (3) | extents (3) | mean rgb (3) | category code |
# color code | noise. The color code keys on the quantised mean colour, so
# it stays a pure function of the cloud while spreading the palette into
# near-orthogonal directions the way a strong pretrained encoder would.
_CAT3D_DIM = 32
_COLOR3D_DIM = 16


@dataclass(frozen=True, eq=False)
class PatchFeatureMap:
    """Per-view patch grid: cls vector plus G^2 x D patch rows."""

    grid: int
    dim: int
    cls: np.ndarray
    patches: np.ndarray

    def __post_init__(self):
        if self.grid <= 0:
            raise ValueError("grid size must be positive")
        cls = np.array(self.cls, dtype=np.float32, copy=True).reshape(self.dim)
        patches = np.array(self.patches, dtype=np.float32, copy=True)
        if patches.shape != (self.grid * self.grid, self.dim):
            raise ValueError(
                f"patches shape {patches.shape} != ({self.grid * self.grid}, {self.dim})"
            )
        if not (np.isfinite(cls).all() and np.isfinite(patches).all()):
            raise ValueError("patch features must be finite")
        cls.flags.writeable = False
        patches.flags.writeable = False
        object.__setattr__(self, "cls", cls)
        object.__setattr__(self, "patches", patches)


@dataclass(frozen=True, eq=False)
class ObjectFeatures:
    """Frozen-encoder outputs for one object: Z^p (3D) and Z^v (2D)."""

    z3d: np.ndarray
    z2d: np.ndarray
    visible: bool = True

    def __post_init__(self):
        z3d = np.array(self.z3d, dtype=np.float32, copy=True).reshape(-1)
        z2d = np.array(self.z2d, dtype=np.float32, copy=True).reshape(-1)
        if not (np.isfinite(z3d).all() and np.isfinite(z2d).all()):
            raise ValueError("object features must be finite")
        z3d.flags.writeable = False
        z2d.flags.writeable = False
        object.__setattr__(self, "z3d", z3d)
        object.__setattr__(self, "z2d", z2d)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ObjectFeatures)
            and self.visible == other.visible
            and np.array_equal(self.z3d, other.z3d)
            and np.array_equal(self.z2d, other.z2d)
        )


@dataclass(frozen=True)
class FeatureConfig:
    grid: int = 16
    d2: int = 64
    d3: int = 64
    projection: ProjectionParams = field(default_factory=ProjectionParams)


def _cell_sizes(mask_h: int, mask_w: int, grid: int) -> tuple[int, int]:
    return -(-mask_h // grid), -(-mask_w // grid)


def intersecting_patches(mask: Mask2D, grid: int) -> set[int]:
    """Indices (row-major over the G x G grid) of patches touching the mask.

    Patches tile the image in ceil(H/G) x ceil(W/G) pixel cells; trailing
    cells may be partial (or empty when G exceeds the image size).
    """
    if grid <= 0:
        raise ValueError("grid size must be positive")
    ch, cw = _cell_sizes(mask.height, mask.width, grid)
    padded = np.zeros((grid * ch, grid * cw), dtype=bool)
    padded[: mask.height, : mask.width] = mask.bits
    hit = padded.reshape(grid, ch, grid, cw).any(axis=(1, 3))
    return set(int(i) for i in np.flatnonzero(hit.ravel()))


def _patch_pixel_counts(bits: np.ndarray, grid: int) -> np.ndarray:
    h, w = bits.shape
    ch, cw = _cell_sizes(h, w, grid)
    padded = np.zeros((grid * ch, grid * cw), dtype=np.int64)
    padded[:h, :w] = bits
    return padded.reshape(grid, ch, grid, cw).sum(axis=(1, 3)).ravel()


def pool_image(features: PatchFeatureMap, patches) -> np.ndarray | None:
    """Unweighted mean over the selected patch rows; None for an empty set."""
    idx = sorted(int(p) for p in patches)
    if not idx:
        return None
    if idx[0] < 0 or idx[-1] >= features.grid * features.grid:
        raise ValueError(f"patch index outside grid of {features.grid * features.grid}")
    rows = features.patches[idx].astype(np.float64)
    return rows.sum(axis=0) / len(idx)


def aggregate_multiview(per_view) -> np.ndarray:
    """Mask-area weighted average of per-view pooled vectors.

    `per_view` holds (vector or None, mask_area) pairs; entries with no
    vector or zero area are invisible. Summation runs in f64 over a
    canonical ordering of (area, vector bytes), so any permutation of the
    input views produces bit-identical output.
    """
    visible = [
        (float(area), np.asarray(vec, dtype=np.float64))
        for vec, area in per_view
        if vec is not None and area > 0
    ]
    if not visible:
        raise ObjectInvisibleError("object has no non-empty mask in any view")
    if len(visible) == 1:
        return visible[0][1].copy()
    first = visible[0][1]
    if all(np.array_equal(v, first) for _, v in visible):
        return first.copy()
    visible.sort(key=lambda item: (item[0], item[1].tobytes()))
    num = np.zeros_like(first)
    den = 0.0
    for area, vec in visible:
        num += area * vec
        den += area
    return num / den


def select_single_view(masks) -> int:
    """Index of the largest-area mask; ties break to the lowest index."""
    best, best_area = -1, 0
    for i, mask in enumerate(masks):
        area = mask.area()
        if area > best_area:
            best, best_area = i, area
    if best < 0:
        raise ObjectInvisibleError("all masks are empty")
    return best


# -- synthetic providers -----------------------------------------------------


def label_code(kind: str, label: str, dim: int) -> np.ndarray:
    """Fixed unit-norm code vector for a label, stable across scenes/runs."""
    rng = derive_rng("label-code", kind, label, dim)
    v = rng.standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


def pair_code(category: str, color: str, dim: int) -> np.ndarray:
    """Code for a (category, color) pair: normalized sum of the label codes."""
    v = label_code("category", category, dim).astype(np.float64) + label_code(
        "color", color, dim
    ).astype(np.float64)
    return (v / np.linalg.norm(v)).astype(np.float32)


def background_code(dim: int) -> np.ndarray:
    return label_code("special", "background", dim)


def _view_fingerprint(view: CameraView) -> str:
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<4d2q", view.fx, view.fy, view.cx, view.cy, view.width, view.height))
    h.update(np.ascontiguousarray(view.extrinsics).tobytes())
    return h.hexdigest()


def synth_patch_features(
    view: CameraView,
    scene,
    seed: int,
    grid: int = 16,
    dim: int = 64,
    projection: ProjectionParams = ProjectionParams(),
) -> PatchFeatureMap:
    """Stand-in for a frozen 2D encoder on this view.

    Each patch carries the (category, color) code of the object dominating
    it by projected pixel count (background code where nothing projects),
    plus seeded noise. Deterministic in (view, scene, seed).
    """
    if isinstance(scene, Scene):
        objects = list(scene.proposals)
        scene_tag = scene.scene_id
    else:
        objects = list(scene) if scene is not None else []
        scene_tag = f"adhoc-{len(objects)}"
    counts = np.zeros((len(objects), grid * grid), dtype=np.int64)
    for k, obj in enumerate(objects):
        mask = rasterize_mask(
            project_points(obj.cloud, view),
            view,
            dilation_radius=projection.dilation_radius,
            depth_tolerance=projection.depth_tolerance,
        )
        counts[k] = _patch_pixel_counts(mask.bits, grid)

    bg = background_code(dim).astype(np.float64)
    codes = [
        pair_code(obj.category, obj.attributes.get("color", ""), dim).astype(np.float64)
        for obj in objects
    ]
    patches = np.empty((grid * grid, dim), dtype=np.float64)
    if objects:
        dominant = counts.argmax(axis=0)
        occupied = counts.max(axis=0) > 0
    else:
        dominant = np.zeros(grid * grid, dtype=np.int64)
        occupied = np.zeros(grid * grid, dtype=bool)
    for p in range(grid * grid):
        patches[p] = codes[dominant[p]] if occupied[p] else bg

    rng = derive_rng(seed, "patch-noise", scene_tag, _view_fingerprint(view))
    patches += PATCH_NOISE_SIGMA * rng.standard_normal(patches.shape)
    patches = patches.astype(np.float32)
    cls = patches.mean(axis=0)
    return PatchFeatureMap(grid=grid, dim=dim, cls=cls, patches=patches)


def _object_content_digest(obj: ObjectProposal) -> str:
    h = hashlib.blake2b(digest_size=8)
    h.update(obj.category.encode("utf-8"))
    for k in sorted(obj.attributes):
        h.update(k.encode("utf-8"))
        h.update(obj.attributes[k].encode("utf-8"))
    h.update(np.ascontiguousarray(obj.cloud.points).tobytes())
    return h.hexdigest()


def synth_point_features(obj: ObjectProposal, seed: int, dim: int = 64) -> np.ndarray:
    """Stand-in for a frozen 3D encoder: deterministic cloud descriptor.

    Layout: centroid (3), AABB extents (3), mean color (3), category code,
    then seeded noise padding to `dim`. Identical objects under the same
    seed produce identical descriptors (noise keys on object content).
    """
    cat_dim = min(_CAT3D_DIM, max(dim - 9, 0))
    if dim < 9 + cat_dim:
        raise ValueError(f"feature dim {dim} too small for descriptor layout")
    color_dim = min(_COLOR3D_DIM, dim - 9 - cat_dim)
    xyz = obj.cloud.xyz
    out = np.zeros(dim, dtype=np.float64)
    out[0:3] = xyz.mean(axis=0)
    out[3:6] = xyz.max(axis=0) - xyz.min(axis=0)
    mean_rgb = obj.cloud.rgb.mean(axis=0)
    out[6:9] = mean_rgb
    if cat_dim:
        out[9 : 9 + cat_dim] = label_code("category3d", obj.category, cat_dim)
    if color_dim:
        color_key = ",".join(f"{v:.3f}" for v in np.round(mean_rgb, 3))
        out[9 + cat_dim : 9 + cat_dim + color_dim] = label_code(
            "color3d", color_key, color_dim
        )
    tail = dim - 9 - cat_dim - color_dim
    if tail > 0:
        rng = derive_rng(seed, "point-noise", _object_content_digest(obj))
        out[9 + cat_dim + color_dim :] = POINT_NOISE_SIGMA * rng.standard_normal(tail)
    return out.astype(np.float32)


def extract_scene_features(
    scene: Scene, views, seed: int, cfg: FeatureConfig = FeatureConfig()
) -> list[ObjectFeatures]:
    """Full per-object feature pass over a scene: Z^p plus multiview Z^v.

    Objects invisible in every view fall back to a zero Z^v with the
    visibility flag cleared, keeping sequence shapes fixed downstream.
    """
    views = list(views)
    if not views:
        raise ValueError("at least one view is required")
    maps = [
        synth_patch_features(view, scene, seed, grid=cfg.grid, dim=cfg.d2, projection=cfg.projection)
        for view in views
    ]
    out: list[ObjectFeatures] = []
    for obj in scene.proposals:
        masks = project_object_to_views(obj, views, cfg.projection)
        per_view = []
        for fmap, mask in zip(maps, masks):
            pooled = None if mask.is_empty() else pool_image(fmap, intersecting_patches(mask, cfg.grid))
            per_view.append((pooled, mask.area()))
        try:
            z2d = aggregate_multiview(per_view)
            visible = True
        except ObjectInvisibleError:
            z2d = np.zeros(cfg.d2, dtype=np.float64)
            visible = False
        z3d = synth_point_features(obj, seed, dim=cfg.d3)
        out.append(ObjectFeatures(z3d=z3d, z2d=z2d.astype(np.float32), visible=visible))
    return out


# -- feature cache (OBJF) ----------------------------------------------------

_MAGIC = b"OBJF"
_CACHE_VERSION = 1


def write_feature_cache(path, features) -> None:
    """Little-endian binary cache: OBJF header then per-object f32 rows."""
    feats = list(features)
    if not feats:
        raise ValueError("refusing to write an empty feature cache")
    d3 = feats[0].z3d.shape[0]
    d2 = feats[0].z2d.shape[0]
    for f in feats:
        if f.z3d.shape[0] != d3 or f.z2d.shape[0] != d2:
            raise ValueError("inconsistent feature dimensions in cache write")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<4I", _CACHE_VERSION, len(feats), d3, d2))
        for f in feats:
            fh.write(f.z3d.astype("<f4").tobytes())
            fh.write(f.z2d.astype("<f4").tobytes())


def read_feature_cache(path) -> list[ObjectFeatures]:
    """Read an OBJF cache; visibility is recovered as z2d != 0."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise DataError(f"bad feature cache magic {data[:4]!r}")
    if len(data) < 20:
        raise DataError("feature cache header truncated")
    version, count, d3, d2 = struct.unpack("<4I", data[4:20])
    if version != _CACHE_VERSION:
        raise DataError(f"unsupported feature cache version {version}")
    row = 4 * (d3 + d2)
    if len(data) != 20 + count * row:
        raise DataError(
            f"feature cache size {len(data)} != expected {20 + count * row}"
        )
    out = []
    offset = 20
    for _ in range(count):
        z3d = np.frombuffer(data, dtype="<f4", count=d3, offset=offset)
        offset += 4 * d3
        z2d = np.frombuffer(data, dtype="<f4", count=d2, offset=offset)
        offset += 4 * d2
        out.append(ObjectFeatures(z3d=z3d, z2d=z2d, visible=bool(np.any(z2d != 0))))
    return out

"""Pinhole projection of point clouds into per-view binary masks.

Masks serve two consumers: patch-intersection tests during 2D feature
pooling, and ground-truth mask volumes for video grounding. Projection
rounds to integer pixels (ties away from zero), optionally culls points
against a per-view depth buffer, and densifies the sparse point splats
with a chessboard dilation so downstream patch tests are stable.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError
from .scene import ObjectProposal, PointCloud

__all__ = [
    "CameraView",
    "Mask2D",
    "ProjectionParams",
    "project_points",
    "rasterize_mask",
    "project_object_to_views",
    "look_at_extrinsics",
    "mask_to_pgm",
    "mask_from_pgm",
    "save_mask_pgm",
    "mask_to_rle",
    "rle_to_mask",
    "save_mask_sequence_rle",
    "load_mask_sequence_rle",
]


@dataclass(frozen=True, eq=False)
class CameraView:
    """Pinhole camera: intrinsics, world->camera extrinsics, image size."""

    fx: float
    fy: float
    cx: float
    cy: float
    extrinsics: np.ndarray
    width: int
    height: int
    depth: np.ndarray | None = None

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        ext = np.array(self.extrinsics, dtype=np.float64, copy=True)
        if ext.shape != (4, 4):
            raise ValueError(f"extrinsics must be 4x4, got {ext.shape}")
        rot = ext[:3, :3]
        if np.linalg.norm(rot.T @ rot - np.eye(3)) >= 1e-6:
            raise ValueError("extrinsics rotation block is not orthonormal")
        if not np.allclose(ext[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("extrinsics last row must be [0, 0, 0, 1]")
        ext.flags.writeable = False
        object.__setattr__(self, "extrinsics", ext)
        if self.depth is not None:
            d = np.array(self.depth, dtype=np.float64, copy=True)
            if d.shape != (self.height, self.width):
                raise ValueError(
                    f"depth buffer shape {d.shape} does not match image {self.height}x{self.width}"
                )
            d.flags.writeable = False
            object.__setattr__(self, "depth", d)

    def world_to_camera(self, xyz: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(xyz, dtype=np.float64))
        return pts @ self.extrinsics[:3, :3].T + self.extrinsics[:3, 3]


@dataclass(frozen=True, eq=False)
class Mask2D:
    """Binary image mask; bits has shape (height, width)."""

    width: int
    height: int
    bits: np.ndarray

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool, copy=True)
        if bits.shape != (self.height, self.width):
            raise ValueError(
                f"mask bits shape {bits.shape} does not match {self.height}x{self.width}"
            )
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    def area(self) -> int:
        return int(self.bits.sum())

    def is_empty(self) -> bool:
        return not self.bits.any()

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Mask2D)
            and self.width == other.width
            and self.height == other.height
            and np.array_equal(self.bits, other.bits)
        )


@dataclass(frozen=True)
class ProjectionParams:
    """Rasterization knobs: dilation radius (px) and occlusion tolerance (m)."""

    dilation_radius: int = 2
    depth_tolerance: float = 0.05

    def __post_init__(self):
        if self.dilation_radius < 0:
            raise ValueError("dilation radius must be >= 0")
        if self.depth_tolerance < 0:
            raise ValueError("depth tolerance must be >= 0")


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def project_points(cloud: PointCloud, view: CameraView) -> np.ndarray:
    """Project onto the image; returns (k, 3) rows of (u, v, z).

    u, v are integer pixel coordinates (nearest pixel, ties away from
    zero); rows are limited to points with camera-space z > 0 that land
    inside the image. Input order is preserved among survivors.
    """
    cam = view.world_to_camera(cloud.xyz)
    z = cam[:, 2]
    front = z > 0.0
    cam = cam[front]
    z = z[front]
    if cam.shape[0] == 0:
        return np.empty((0, 3), dtype=np.float64)
    u = _round_half_away(view.fx * cam[:, 0] / z + view.cx)
    v = _round_half_away(view.fy * cam[:, 1] / z + view.cy)
    ok = (u >= 0) & (u < view.width) & (v >= 0) & (v < view.height)
    return np.column_stack([u[ok], v[ok], z[ok]])


def rasterize_mask(
    pixels: np.ndarray,
    view: CameraView,
    dilation_radius: int = 2,
    depth_tolerance: float = 0.05,
) -> Mask2D:
    """Paint projected pixels (with chessboard dilation) into a mask.

    When the view carries a depth buffer, a projected point survives only
    if its z is within depth_tolerance beyond the buffered depth at its
    pixel; dilation happens after culling.
    """
    bits = np.zeros((view.height, view.width), dtype=bool)
    pix = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    if pix.shape[0]:
        u = pix[:, 0].astype(np.intp)
        v = pix[:, 1].astype(np.intp)
        z = pix[:, 2]
        if view.depth is not None:
            keep = z <= view.depth[v, u] + depth_tolerance
            u, v = u[keep], v[keep]
        bits[v, u] = True
        if dilation_radius > 0 and u.size:
            size = 2 * dilation_radius + 1
            bits = ndimage.binary_dilation(bits, structure=np.ones((size, size), dtype=bool))
    return Mask2D(width=view.width, height=view.height, bits=bits)


def project_object_to_views(
    obj: ObjectProposal, views, params: ProjectionParams = ProjectionParams()
) -> list[Mask2D]:
    """One mask per view, in view order; empty masks are legal."""
    views = list(views)
    if not views:
        raise ValueError("at least one view is required")
    return [
        rasterize_mask(
            project_points(obj.cloud, view),
            view,
            dilation_radius=params.dilation_radius,
            depth_tolerance=params.depth_tolerance,
        )
        for view in views
    ]


def look_at_extrinsics(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World->camera transform for a camera at `eye` looking at `target`.

    Camera convention: +x right, +y down, +z forward (into the scene).
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    norm = np.linalg.norm(fwd)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    fwd = fwd / norm
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-12:
        raise ValueError("up vector is parallel to the view direction")
    right = right / rnorm
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    ext = np.eye(4)
    ext[:3, :3] = rot
    ext[:3, 3] = -rot @ eye
    return ext


# -- mask export -------------------------------------------------------------


def mask_to_pgm(mask: Mask2D) -> bytes:
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    body = np.where(mask.bits, 255, 0).astype(np.uint8).tobytes()
    return header + body


_PGM_HEADER = re.compile(rb"^P5\s+(\d+)\s+(\d+)\s+(\d+)\s", re.DOTALL)


def mask_from_pgm(data: bytes) -> Mask2D:
    m = _PGM_HEADER.match(data)
    if not m:
        raise DataError("not a binary PGM (P5) document")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise DataError(f"unsupported PGM maxval {maxval}")
    body = data[m.end() :]
    if len(body) != width * height:
        raise DataError("PGM payload size does not match header dimensions")
    bits = np.frombuffer(body, dtype=np.uint8).reshape(height, width) > 0
    return Mask2D(width=width, height=height, bits=bits)


def save_mask_pgm(mask: Mask2D, path) -> None:
    with open(path, "wb") as fh:
        fh.write(mask_to_pgm(mask))


def mask_to_rle(mask: Mask2D) -> dict:
    """Row-major true-run encoding: {width, height, rle: [start, len, ...]}."""
    flat = mask.bits.ravel()
    rle: list[int] = []
    padded = np.concatenate([[False], flat, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    for start, stop in zip(edges[0::2], edges[1::2]):
        rle.extend((int(start), int(stop - start)))
    return {"width": mask.width, "height": mask.height, "rle": rle}


def rle_to_mask(doc: dict) -> Mask2D:
    try:
        width, height = int(doc["width"]), int(doc["height"])
        runs = list(doc["rle"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed RLE mask document: {exc}") from exc
    if len(runs) % 2 != 0:
        raise DataError("RLE run list must have even length")
    flat = np.zeros(width * height, dtype=bool)
    for start, length in zip(runs[0::2], runs[1::2]):
        if start < 0 or length < 0 or start + length > flat.size:
            raise DataError(f"RLE run ({start}, {length}) outside mask bounds")
        flat[start : start + length] = True
    return Mask2D(width=width, height=height, bits=flat.reshape(height, width))


def save_mask_sequence_rle(masks, path) -> None:
    docs = [mask_to_rle(m) for m in masks]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(docs, fh, separators=(",", ":"))
        fh.write("\n")


def load_mask_sequence_rle(path) -> list[Mask2D]:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            docs = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"mask sequence is not valid JSON: {exc}") from exc
    if not isinstance(docs, list):
        raise DataError("mask sequence document must be a JSON array")
    return [rle_to_mask(doc) for doc in docs]

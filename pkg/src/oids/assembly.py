"""Object features to LM token space: projectors, identifier rows, layout.

Two three-layer MLPs map 3D and 2D object features onto d_model vectors;
an optional fuse layer combines both into one vector. The assembler lays
the per-object blocks out between bracket tokens, separated by spaces,
in one of three shapes:

    separate_token  [O_i, Fp_i, Fv_i]            3 positions per object
    early_fusion    [O_i, fuse(Fp_i, Fv_i)]      2 positions per object
    plain_text      ["OBJ", d, d, d, Fp_i, Fv_i] 6 positions per object

O_i is the identifier embedding (a fresh frozen-random or trainable row);
in plain-text mode the identifier is spelled with four ordinary text
tokens instead. Separator spaces and the brackets are text positions and
do not count toward the object-region length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DataError
from .features import ObjectFeatures
from .scene import Scene

__all__ = [
    "IDENT_PLAIN",
    "IDENT_GAUSSIAN",
    "IDENT_LEARNABLE",
    "IDENTIFIER_MODES",
    "FUSION_SEPARATE",
    "FUSION_EARLY",
    "FUSION_PLAIN",
    "FUSION_MODES",
    "REGION_COST_PER_OBJECT",
    "gelu",
    "gelu_grad",
    "Projector",
    "FuseLayer",
    "IdentifierTable",
    "SceneSequence",
    "AssemblyCache",
    "check_modes",
    "build_scene_sequence",
]

IDENT_PLAIN = "plain_text"
IDENT_GAUSSIAN = "gaussian"
IDENT_LEARNABLE = "learnable"
IDENTIFIER_MODES = (IDENT_PLAIN, IDENT_GAUSSIAN, IDENT_LEARNABLE)

FUSION_SEPARATE = "separate_token"
FUSION_EARLY = "early_fusion"
FUSION_PLAIN = "plain_text"
FUSION_MODES = (FUSION_SEPARATE, FUSION_EARLY, FUSION_PLAIN)

REGION_COST_PER_OBJECT = {FUSION_SEPARATE: 3, FUSION_EARLY: 2, FUSION_PLAIN: 6}

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GELU, dtype-preserving."""
    x = np.asarray(x)
    return (0.5 * x * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return (cdf + x * pdf).astype(x.dtype, copy=False)


def _affine_init(rng: np.random.Generator, n_in: int, n_out: int, dtype):
    w = (rng.standard_normal((n_in, n_out)) / math.sqrt(n_in)).astype(dtype)
    b = np.zeros(n_out, dtype=dtype)
    return w, b


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")


class Projector:
    """Three affine layers (in -> hidden -> hidden -> d_model), GELU between."""

    def __init__(self, w1, b1, w2, b2, w3, b3):
        self.w1, self.b1 = np.asarray(w1), np.asarray(b1)
        self.w2, self.b2 = np.asarray(w2), np.asarray(b2)
        self.w3, self.b3 = np.asarray(w3), np.asarray(b3)
        d_in, hidden = self.w1.shape
        if self.b1.shape != (hidden,):
            raise ValueError("b1 does not match layer width")
        if self.w2.shape != (hidden, hidden) or self.b2.shape != (hidden,):
            raise ValueError("middle layer dims do not chain")
        if self.w3.shape[0] != hidden or self.b3.shape != (self.w3.shape[1],):
            raise ValueError("final layer dims do not chain")
        for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
            _check_finite(name, getattr(self, name))

    @classmethod
    def create(cls, d_in: int, d_model: int, rng: np.random.Generator, dtype=np.float32):
        """Fresh projector with hidden width equal to d_model."""
        hidden = d_model
        w1, b1 = _affine_init(rng, d_in, hidden, dtype)
        w2, b2 = _affine_init(rng, hidden, hidden, dtype)
        w3, b3 = _affine_init(rng, hidden, d_model, dtype)
        # start the injected rows near the text-embedding scale: a fresh
        # projector should perturb the sequence, not dominate it
        w3 = (w3 * 0.25).astype(dtype)
        return cls(w1, b1, w2, b2, w3, b3)

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_model(self) -> int:
        return self.w3.shape[1]

    def forward(self, x: np.ndarray):
        x = np.asarray(x)
        if x.shape[-1] != self.d_in:
            raise ValueError(f"projector expects dim {self.d_in}, got {x.shape[-1]}")
        a1 = x @ self.w1 + self.b1
        h1 = gelu(a1)
        a2 = h1 @ self.w2 + self.b2
        h2 = gelu(a2)
        y = h2 @ self.w3 + self.b3
        cache = {"x": x, "a1": a1, "h1": h1, "a2": a2, "h2": h2}
        return y, cache

    def backward(self, cache, dy: np.ndarray):
        dy = np.asarray(dy)
        h2, a2, h1, a1, x = cache["h2"], cache["a2"], cache["h1"], cache["a1"], cache["x"]
        flat = dy.reshape(-1, dy.shape[-1])
        h2f = h2.reshape(-1, h2.shape[-1])
        grads = {
            "w3": h2f.T @ flat,
            "b3": flat.sum(axis=0),
        }
        dh2 = dy @ self.w3.T
        da2 = dh2 * gelu_grad(a2)
        da2f = da2.reshape(-1, da2.shape[-1])
        h1f = h1.reshape(-1, h1.shape[-1])
        grads["w2"] = h1f.T @ da2f
        grads["b2"] = da2f.sum(axis=0)
        dh1 = da2 @ self.w2.T
        da1 = dh1 * gelu_grad(a1)
        da1f = da1.reshape(-1, da1.shape[-1])
        xf = x.reshape(-1, x.shape[-1])
        grads["w1"] = xf.T @ da1f
        grads["b1"] = da1f.sum(axis=0)
        dx = da1 @ self.w1.T
        return dx, grads

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            "w1": self.w1, "b1": self.b1,
            "w2": self.w2, "b2": self.b2,
            "w3": self.w3, "b3": self.b3,
        }

    def astype(self, dtype) -> "Projector":
        return Projector(*(p.astype(dtype) for p in (
            self.w1, self.b1, self.w2, self.b2, self.w3, self.b3)))


class FuseLayer:
    """Single affine map over concat(Fp, Fv) -> d_model."""

    def __init__(self, w, b):
        self.w, self.b = np.asarray(w), np.asarray(b)
        if self.w.ndim != 2 or self.w.shape[0] != 2 * self.w.shape[1]:
            raise ValueError("fuse weight must map 2*d_model -> d_model")
        if self.b.shape != (self.w.shape[1],):
            raise ValueError("fuse bias does not match output width")
        _check_finite("fuse.w", self.w)
        _check_finite("fuse.b", self.b)

    @classmethod
    def create(cls, d_model: int, rng: np.random.Generator, dtype=np.float32):
        w, b = _affine_init(rng, 2 * d_model, d_model, dtype)
        return cls(w, b)

    @property
    def d_model(self) -> int:
        return self.w.shape[1]

    def forward(self, fp: np.ndarray, fv: np.ndarray):
        fp, fv = np.asarray(fp), np.asarray(fv)
        if fp.shape != fv.shape or fp.shape[-1] != self.d_model:
            raise ValueError("fuse inputs must both be d_model wide")
        z = np.concatenate([fp, fv], axis=-1)
        y = z @ self.w + self.b
        return y, {"z": z}

    def backward(self, cache, dy: np.ndarray):
        dy = np.asarray(dy)
        z = cache["z"]
        zf = z.reshape(-1, z.shape[-1])
        dyf = dy.reshape(-1, dy.shape[-1])
        grads = {"w": zf.T @ dyf, "b": dyf.sum(axis=0)}
        dz = dy @ self.w.T
        d = self.d_model
        return dz[..., :d], dz[..., d:], grads

    def parameters(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b}

    def astype(self, dtype) -> "FuseLayer":
        return FuseLayer(self.w.astype(dtype), self.b.astype(dtype))


class IdentifierTable:
    """Per-object identifier embeddings, or none in plain-text mode.

    Gaussian rows are frozen at creation (never registered as trainable);
    learnable rows start i.i.d. normal with the empirical standard
    deviation of the base text-embedding table.
    """

    def __init__(self, mode: str, embeddings):
        if mode not in IDENTIFIER_MODES:
            raise ConfigError(f"unknown identifier mode {mode!r}")
        if mode == IDENT_PLAIN:
            if embeddings is not None:
                raise ConfigError("plain-text identifiers carry no embedding rows")
            self.embeddings = None
        else:
            emb = np.asarray(embeddings)
            if emb.ndim != 2:
                raise ValueError("identifier table must be (n, d_model)")
            _check_finite("identifier embeddings", emb)
            self.embeddings = emb
        self.mode = mode

    @classmethod
    def create(
        cls,
        mode: str,
        n: int,
        d_model: int,
        rng: np.random.Generator,
        base_table: np.ndarray | None = None,
        dtype=np.float32,
    ) -> "IdentifierTable":
        if mode == IDENT_PLAIN:
            return cls(mode, None)
        if base_table is not None:
            std = float(np.asarray(base_table, dtype=np.float64).std())
        else:
            std = 0.02
        emb = (rng.standard_normal((n, d_model)) * std).astype(dtype)
        return cls(mode, emb)

    @property
    def n(self) -> int:
        return 0 if self.embeddings is None else self.embeddings.shape[0]

    @property
    def trainable(self) -> bool:
        return self.mode == IDENT_LEARNABLE

    def row(self, index: int) -> np.ndarray:
        if self.embeddings is None:
            raise ConfigError("plain-text identifier mode has no embedding rows")
        if not 1 <= index <= self.n:
            raise ValueError(f"identifier index {index} outside 1..{self.n}")
        return self.embeddings[index - 1]

    def parameters(self) -> dict[str, np.ndarray]:
        if self.embeddings is None:
            return {}
        return {"embeddings": self.embeddings}

    def astype(self, dtype) -> "IdentifierTable":
        if self.embeddings is None:
            return IdentifierTable(self.mode, None)
        return IdentifierTable(self.mode, self.embeddings.astype(dtype))


def check_modes(identifier_mode: str, fusion: str) -> None:
    """Plain-text layout and plain-text identifiers imply each other."""
    if identifier_mode not in IDENTIFIER_MODES:
        raise ConfigError(f"unknown identifier mode {identifier_mode!r}")
    if fusion not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {fusion!r}")
    if (identifier_mode == IDENT_PLAIN) != (fusion == FUSION_PLAIN):
        raise ConfigError(
            f"identifier mode {identifier_mode!r} is inconsistent with "
            f"fusion mode {fusion!r}"
        )


@dataclass(frozen=True)
class SceneSequence:
    """Embedded object region: brackets, per-object blocks, separators."""

    embeddings: np.ndarray  # (T, d_model)
    slots: tuple[tuple, ...]
    object_spans: tuple[tuple[int, int, int], ...]  # (index, start, end)
    fusion: str

    def __post_init__(self):
        if self.embeddings.ndim != 2:
            raise ValueError("sequence embeddings must be (T, d_model)")
        if len(self.slots) != self.embeddings.shape[0]:
            raise ValueError("slot tags and embeddings must have equal length")
        last = 0
        for index, start, end in self.object_spans:
            if not (0 <= last <= start < end <= len(self.slots)):
                raise ValueError("object spans must be disjoint and ascending")
            last = end

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]

    @property
    def object_region_length(self) -> int:
        return sum(end - start for _, start, end in self.object_spans)

    def span(self, index: int) -> tuple[int, int]:
        for i, start, end in self.object_spans:
            if i == index:
                return start, end
        raise ValueError(f"no span for object {index}")


@dataclass
class AssemblyCache:
    """Forward intermediates needed to push gradients back to the inputs."""

    fusion: str
    n: int
    z3d: np.ndarray
    z2d: np.ndarray
    fp: np.ndarray
    fv: np.ndarray
    cache3d: dict
    cache2d: dict
    fused: np.ndarray | None = None
    fuse_cache: dict | None = None


def _unit_rms_rows(z: np.ndarray) -> np.ndarray:
    """Scale each feature row to unit RMS before projection.

    Encoder embeddings normally arrive layer-normalized; the synthetic
    stand-ins carry raw geometry (centroids, extents) whose scale varies
    by scene, and unnormalized rows let the projected region drift far
    from the text-embedding scale the attention stack is tuned to.
    """
    rms = np.sqrt((z * z).mean(axis=-1, keepdims=True) + 1e-12)
    return (z / rms).astype(z.dtype)


def _features_by_index(features, n: int) -> list[ObjectFeatures]:
    if isinstance(features, Mapping):
        table = dict(features)
    else:
        table = {i: f for i, f in enumerate(features, start=1)}
    out = []
    for i in range(1, n + 1):
        if i not in table:
            raise DataError(f"missing features for object {i}")
        f = table[i]
        if not isinstance(f, ObjectFeatures):
            raise DataError(f"features for object {i} are not ObjectFeatures")
        out.append(f)
    return out


def build_scene_sequence(
    scene: Scene,
    features,
    table: IdentifierTable,
    fusion: str,
    *,
    proj3d: Projector,
    proj2d: Projector,
    fuse: FuseLayer | None = None,
    vocab,
    text_rows: np.ndarray,
    dtype=np.float32,
):
    """Assemble the embedded object region for one scene.

    `text_rows` is the base text-embedding table (base_size, d_model) used
    for bracket/space separators and, in plain-text mode, the spelled-out
    identifiers. Returns (SceneSequence, AssemblyCache).
    """
    check_modes(table.mode, fusion)
    if fusion == FUSION_EARLY and fuse is None:
        raise ConfigError("early fusion requires a fuse layer")
    n = scene.n_objects
    if table.mode != IDENT_PLAIN and table.n < n:
        raise ConfigError(f"identifier table has {table.n} rows, scene has {n} objects")
    if vocab.n_identifiers < n:
        raise ConfigError(
            f"vocabulary has {vocab.n_identifiers} identifier tokens, scene has {n}"
        )
    feats = _features_by_index(features, n)

    z3d = _unit_rms_rows(np.stack([f.z3d for f in feats]).astype(dtype))
    z2d = _unit_rms_rows(np.stack([f.z2d for f in feats]).astype(dtype))
    fp, cache3d = proj3d.forward(z3d)
    fv, cache2d = proj2d.forward(z2d)
    cache = AssemblyCache(
        fusion=fusion, n=n, z3d=z3d, z2d=z2d, fp=fp, fv=fv,
        cache3d=cache3d, cache2d=cache2d,
    )
    if fusion == FUSION_EARLY:
        cache.fused, cache.fuse_cache = fuse.forward(fp, fv)

    d_model = proj3d.d_model
    text_rows = np.asarray(text_rows)
    if text_rows.shape[1] != d_model:
        raise ConfigError("text embedding rows do not match d_model")

    (lbracket_id,) = vocab.tokenize("[")
    (rbracket_id,) = vocab.tokenize("]")
    (space_id,) = vocab.tokenize(" ")

    rows: list[np.ndarray] = []
    slots: list[tuple] = []
    spans: list[tuple[int, int, int]] = []

    def _text(token_id: int) -> None:
        rows.append(text_rows[token_id].astype(dtype, copy=False))
        slots.append(("text", token_id))

    _text(lbracket_id)
    for i in range(1, n + 1):
        if i > 1:
            _text(space_id)
        start = len(slots)
        if fusion == FUSION_PLAIN:
            id_tokens = vocab.tokenize(f"OBJ{i:03d}")
            if len(id_tokens) != 4:
                raise ConfigError(
                    f"plain-text identifier must span four tokens, got {len(id_tokens)}"
                )
            for tok in id_tokens:
                _text(tok)
            rows.append(fp[i - 1])
            slots.append(("obj3d", i))
            rows.append(fv[i - 1])
            slots.append(("obj2d", i))
        elif fusion == FUSION_SEPARATE:
            rows.append(table.row(i).astype(dtype, copy=False))
            slots.append(("identifier", i))
            rows.append(fp[i - 1])
            slots.append(("obj3d", i))
            rows.append(fv[i - 1])
            slots.append(("obj2d", i))
        else:  # FUSION_EARLY
            rows.append(table.row(i).astype(dtype, copy=False))
            slots.append(("identifier", i))
            rows.append(cache.fused[i - 1])
            slots.append(("fused", i))
        spans.append((i, start, len(slots)))
    _text(rbracket_id)

    seq = SceneSequence(
        embeddings=np.stack(rows).astype(dtype, copy=False),
        slots=tuple(slots),
        object_spans=tuple(spans),
        fusion=fusion,
    )
    return seq, cache

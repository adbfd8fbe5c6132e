"""Evaluation metrics: 3D IoU, grounding accuracy and F1, ST-IoU for
video grounding, BLEU-4, CIDEr, IoU-gated captioning scores, and EM/EM-R.

Conventions that a reimplementation must copy to reproduce our numbers:

* BLEU-4 applies add-one smoothing to an n-gram precision (n >= 2) only
  when its clipped match count is zero; candidates shorter than four
  tokens score 0.
* CIDEr is the plain TF-IDF form: per-n cosine similarity of idf-weighted
  count vectors, averaged over n = 1..4 and scaled by 10. IDF uses the
  evaluation reference corpus; n-grams never seen in any reference get
  zero weight, and a zero vector on either side makes that cosine 0.
* Multi-object F1 matches predictions to ground truths one-to-one,
  maximising the number of pairs with IoU >= t, ties broken by higher
  total IoU; an empty-gt instance answered with an empty prediction
  scores F1 = 1.
* EM/EM-R normalisation lowercases, strips punctuation and articles, and
  collapses whitespace; EM-R additionally accepts token-level containment
  in either direction.
"""

from __future__ import annotations

import csv
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .projection import Mask2D
from .scene import AABB3

__all__ = [
    "iou3d",
    "GroundingEval",
    "acc_at",
    "match_boxes",
    "f1_at_iou",
    "STMaskVolume",
    "st_iou",
    "caption_tokens",
    "bleu4",
    "cider_scores",
    "cider",
    "caption_at_iou",
    "normalize_answer",
    "exact_match",
    "em_refined",
    "write_report",
    "write_instance_csv",
]


# -- 3D IoU ------------------------------------------------------------------


def iou3d(a: AABB3, b: AABB3) -> float:
    """Axis-aligned volume IoU; degenerate (zero-volume) boxes score 0."""
    lo = np.maximum(a.min, b.min)
    hi = np.minimum(a.max, b.max)
    edges = hi - lo
    if np.any(edges <= 0):
        inter = 0.0
    else:
        inter = float(np.prod(edges))
    union = a.volume() + b.volume() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@dataclass(frozen=True)
class GroundingEval:
    """One grounding instance: predicted and gt object indices plus boxes."""

    pred_indices: tuple[int, ...]
    gt_indices: tuple[int, ...]
    boxes: Mapping[int, AABB3] = field(default_factory=dict)

    def __post_init__(self):
        for i in tuple(self.pred_indices) + tuple(self.gt_indices):
            if i not in self.boxes:
                raise ValueError(f"no box for object index {i}")
        object.__setattr__(self, "pred_indices", tuple(self.pred_indices))
        object.__setattr__(self, "gt_indices", tuple(self.gt_indices))

    def single_iou(self) -> float:
        """IoU for the one-prediction / one-gt case; no prediction -> 0."""
        if len(self.gt_indices) != 1:
            raise ValueError("single_iou needs exactly one ground-truth index")
        if not self.pred_indices:
            return 0.0
        if len(self.pred_indices) != 1:
            raise ValueError("single_iou needs at most one predicted index")
        return iou3d(self.boxes[self.pred_indices[0]], self.boxes[self.gt_indices[0]])


def acc_at(evals: Iterable[GroundingEval], t: float) -> float:
    """Fraction of single-object instances with IoU >= t."""
    ious = [e.single_iou() for e in evals]
    if not ious:
        return 0.0
    return sum(1 for v in ious if v >= t) / len(ious)


# -- multi-object F1 ---------------------------------------------------------


def match_boxes(
    pred_boxes: Sequence[AABB3], gt_boxes: Sequence[AABB3], t: float
) -> list[tuple[int, int]]:
    """One-to-one matching maximising pairs with IoU >= t, then total IoU."""
    if not pred_boxes or not gt_boxes:
        return []
    iou = np.array([[iou3d(p, g) for g in gt_boxes] for p in pred_boxes])
    big = float(max(len(pred_boxes), len(gt_boxes)) + 1)
    score = np.where(iou >= t, big + iou, 0.0)
    rows, cols = linear_sum_assignment(score, maximize=True)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if iou[r, c] >= t]


def f1_at_iou(pred_boxes: Sequence[AABB3], gt_boxes: Sequence[AABB3], t: float) -> float:
    if not pred_boxes and not gt_boxes:
        return 1.0
    tp = len(match_boxes(pred_boxes, gt_boxes, t))
    fp = len(pred_boxes) - tp
    fn = len(gt_boxes) - tp
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


# -- spatio-temporal IoU -----------------------------------------------------


@dataclass(frozen=True)
class STMaskVolume:
    """A mask per frame, stacked along time; all frames share one size."""

    frames: tuple[Mask2D, ...]

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValueError("a mask volume needs at least one frame")
        w, h = frames[0].width, frames[0].height
        for f in frames:
            if f.width != w or f.height != h:
                raise ValueError("all frames must share one width and height")
        object.__setattr__(self, "frames", frames)

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def length(self) -> int:
        return len(self.frames)

    def stack(self) -> np.ndarray:
        return np.stack([f.bits for f in self.frames])


def st_iou(pred: STMaskVolume, gt: STMaskVolume) -> float:
    """Cellwise IoU over the full H x W x L volume; both empty -> 0."""
    if (pred.width, pred.height, pred.length) != (gt.width, gt.height, gt.length):
        raise ValueError(
            f"mask volumes disagree: {pred.width}x{pred.height}x{pred.length} "
            f"vs {gt.width}x{gt.height}x{gt.length}"
        )
    p = pred.stack()
    g = gt.stack()
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 0.0
    inter = int(np.count_nonzero(p & g))
    return inter / union


# -- captioning metrics ------------------------------------------------------

_PUNCT_PAD = re.compile(r"([.,!?;:\"()\[\]<>])")


def caption_tokens(text: str) -> list[str]:
    """Lowercase, split punctuation into separate tokens, then whitespace-split."""
    return _PUNCT_PAD.sub(r" \1 ", text.lower()).split()


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    """Sentence-level BLEU-4 with the smoothing convention above."""
    if not references:
        raise ValueError("bleu4 needs at least one reference")
    cand = list(candidate)
    refs = [list(r) for r in references]
    c = len(cand)
    if c < 4:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        cand_counts = _ngrams(cand, n)
        total = sum(cand_counts.values())
        max_ref = Counter()
        for r in refs:
            for gram, cnt in _ngrams(r, n).items():
                if cnt > max_ref[gram]:
                    max_ref[gram] = cnt
        clipped = sum(min(cnt, max_ref[gram]) for gram, cnt in cand_counts.items())
        if clipped == 0:
            if n == 1:
                return 0.0
            p_n = 1.0 / (total + 1)
        else:
            p_n = clipped / total
        log_sum += math.log(p_n)
    # brevity penalty against the closest reference length (ties -> shorter)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / 4.0)


def _idf_table(references: Mapping[str, Sequence[Sequence[str]]]) -> dict[tuple, float]:
    n_items = len(references)
    df: Counter = Counter()
    for refs in references.values():
        grams: set[tuple] = set()
        for ref in refs:
            toks = list(ref)
            for n in range(1, 5):
                grams.update(tuple(toks[i : i + n]) for i in range(len(toks) - n + 1))
        for g in grams:
            df[g] += 1
    return {g: math.log(n_items / cnt) for g, cnt in df.items()}


def _tfidf_vector(tokens: Sequence[str], n: int, idf: Mapping[tuple, float]) -> dict[tuple, float]:
    vec = {}
    for gram, cnt in _ngrams(tokens, n).items():
        w = idf.get(gram, 0.0)
        if w > 0.0:
            vec[gram] = cnt * w
    return vec


def _cosine(a: Mapping[tuple, float], b: Mapping[tuple, float]) -> float:
    if not a or not b:
        return 0.0
    dot = sum(v * b.get(g, 0.0) for g, v in a.items())
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


def cider_scores(
    candidates: Mapping[str, Sequence[str]],
    references: Mapping[str, Sequence[Sequence[str]]],
) -> dict[str, float]:
    """Per-item CIDEr over a shared reference corpus (two passes: IDF, score)."""
    for item_id in candidates:
        if item_id not in references or not references[item_id]:
            raise ValueError(f"candidate {item_id!r} has no references")
    idf = _idf_table(references)
    scores: dict[str, float] = {}
    for item_id, cand in candidates.items():
        cand = list(cand)
        refs = [list(r) for r in references[item_id]]
        total = 0.0
        for n in range(1, 5):
            cand_vec = _tfidf_vector(cand, n, idf)
            sim = sum(_cosine(cand_vec, _tfidf_vector(r, n, idf)) for r in refs)
            total += sim / len(refs)
        scores[item_id] = 10.0 * total / 4.0
    return scores


def cider(
    candidates: Mapping[str, Sequence[str]],
    references: Mapping[str, Sequence[Sequence[str]]],
) -> float:
    scores = cider_scores(candidates, references)
    if not scores:
        return 0.0
    return sum(scores.values()) / len(scores)


def caption_at_iou(per_object: Sequence[tuple[float, float]], t: float) -> float:
    """Mean caption score over GT objects, zeroed where IoU < t."""
    entries = list(per_object)
    if not entries:
        return 0.0
    return sum(score if iou >= t else 0.0 for score, iou in entries) / len(entries)


# -- exact match -------------------------------------------------------------

_ARTICLES = {"a", "an", "the"}
_NON_ALNUM = re.compile(r"[^a-z0-9 ]")


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    text = _NON_ALNUM.sub(" ", text.lower())
    tokens = [t for t in text.split() if t not in _ARTICLES]
    return " ".join(tokens)


def _contains(outer: list[str], inner: list[str]) -> bool:
    if not inner or len(inner) > len(outer):
        return False
    return any(outer[i : i + len(inner)] == inner for i in range(len(outer) - len(inner) + 1))


def exact_match(pred: str, gts: Sequence[str]) -> int:
    norm = normalize_answer(pred)
    return int(any(norm == normalize_answer(g) for g in gts))


def em_refined(pred: str, gts: Sequence[str]) -> int:
    """EM, or token-level contiguous containment in either direction."""
    if exact_match(pred, gts):
        return 1
    p = normalize_answer(pred).split()
    if not p:
        return 0
    for g in gts:
        gt = normalize_answer(g).split()
        if not gt:
            continue
        if _contains(p, gt) or _contains(gt, p):
            return 1
    return 0


# -- report output -----------------------------------------------------------


def write_report(path, rows: Mapping[str, Mapping[str, float]]) -> None:
    """JSON report: metric name -> {value, count, threshold?}."""
    doc = {name: dict(fields) for name, fields in rows.items()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_instance_csv(path, rows: Sequence[Mapping[str, object]]) -> None:
    """Optional per-instance audit dump; column set is the union of keys."""
    rows = list(rows)
    names: list[str] = []
    for row in rows:
        for key in row:
            if key not in names:
                names.append(key)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names)
        writer.writeheader()
        writer.writerows(rows)

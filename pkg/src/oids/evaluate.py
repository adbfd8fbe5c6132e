"""Evaluation harness: generate responses for a task split and score them.

The harness is predictor-agnostic: any callable mapping a TrainingExample
to a response string can be evaluated, which gives three interchangeable
rows per run — the trained model, a deterministic uniform-random guesser,
and an oracle that replays the gold targets. All metrics applicable to a
task family are computed and collected into a single JSON-serialisable
report of ``{metric name: {value, count, threshold?}}`` rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DataError
from .features import ObjectFeatures
from .lm import GroundedLM, TrainingExample, respond
from .metrics import (
    GroundingEval,
    STMaskVolume,
    acc_at,
    bleu4,
    caption_at_iou,
    caption_tokens,
    cider_scores,
    em_refined,
    exact_match,
    f1_at_iou,
    st_iou,
    write_instance_csv,
    write_report,
)
from .projection import CameraView, Mask2D, ProjectionParams
from .rand import derive_rng
from .scene import Scene, identifier_text
from .synth import make_video_grounding_gt
from .tasks import (
    DENSE_CAPTION,
    GROUND1,
    GROUND_MULTI,
    QAInstance,
    SITUATED_VQA,
    VQA,
    parse_identifiers,
)

__all__ = [
    "EvalScene",
    "EvalResult",
    "model_predictor",
    "oracle_predictor",
    "random_predictor",
    "metric_keys",
    "run_eval",
    "format_report",
]

Predictor = Callable[[TrainingExample], str]

VIDEO_ROWS = ("random", "ours", "upperbound")


@dataclass(frozen=True)
class EvalScene:
    """Per-scene assets the harness needs: geometry, features, cameras."""

    scene: Scene
    features: Mapping[int, ObjectFeatures]
    views: tuple[CameraView, ...] = ()


@dataclass
class EvalResult:
    """Metric rows plus the per-instance audit trail."""

    report: dict[str, dict[str, float]]
    rows: list[dict[str, object]] = field(default_factory=list)

    def save(self, report_path, csv_path=None) -> None:
        write_report(report_path, self.report)
        if csv_path is not None:
            write_instance_csv(csv_path, self.rows)


# -- predictors --------------------------------------------------------------


def model_predictor(model: GroundedLM, max_len: int = 48) -> Predictor:
    """Greedy generation from a trained model."""

    def predict(example: TrainingExample) -> str:
        return respond(model, example, max_len)

    return predict


def oracle_predictor() -> Predictor:
    """Replays the gold target; the ceiling for every metric."""

    def predict(example: TrainingExample) -> str:
        return example.qa.target

    return predict


def random_predictor(seed: int = 0) -> Predictor:
    """Uniform single-identifier guess, deterministic per instance."""

    def predict(example: TrainingExample) -> str:
        n = example.scene.n_objects
        rng = derive_rng("eval-random", seed, example.qa.scene_ref, example.qa.user)
        return f"{identifier_text(int(rng.integers(1, n + 1)))}."

    return predict


# -- report key inventory ----------------------------------------------------


def _tname(t: float) -> str:
    return f"{t:g}"


def metric_keys(
    thresholds: Sequence[float] = (0.25, 0.5),
    caption_threshold: float = 0.5,
    video: bool = True,
    video_threshold: float = 0.25,
) -> list[str]:
    """Every metric name a report with this configuration must contain."""
    keys = [f"{GROUND1}/acc@identifier", f"{GROUND1}/mean_iou"]
    keys += [f"{GROUND1}/acc@{_tname(t)}" for t in thresholds]
    keys += [f"{GROUND_MULTI}/f1@identifier", f"{GROUND_MULTI}/zero_target_acc"]
    keys += [f"{GROUND_MULTI}/f1@{_tname(t)}" for t in thresholds]
    keys += [
        f"{DENSE_CAPTION}/bleu4",
        f"{DENSE_CAPTION}/cider",
        f"{DENSE_CAPTION}/bleu4@{_tname(caption_threshold)}",
        f"{DENSE_CAPTION}/cider@{_tname(caption_threshold)}",
    ]
    for fam in (VQA, SITUATED_VQA):
        keys += [f"{fam}/em", f"{fam}/em_r"]
    if video:
        for row in VIDEO_ROWS:
            keys.append(f"video/{row}/acc@{_tname(video_threshold)}")
            keys.append(f"video/{row}/mean_st_iou")
    return keys


def _row(value: float, count: int, threshold: float | None = None) -> dict[str, float]:
    out: dict[str, float] = {"value": float(value), "count": int(count)}
    if threshold is not None:
        out["threshold"] = float(threshold)
    return out


def _mean(values: Sequence[float]) -> float:
    values = list(values)
    return sum(values) / len(values) if values else 0.0


# -- the harness -------------------------------------------------------------


def _set_f1(pred: Sequence[int], gt: Sequence[int]) -> float:
    pred_set, gt_set = set(pred), set(gt)
    if not pred_set and not gt_set:
        return 1.0
    tp = len(pred_set & gt_set)
    denom = 2 * tp + len(pred_set - gt_set) + len(gt_set - pred_set)
    return 2 * tp / denom if denom else 0.0


def _empty_volume(like: STMaskVolume) -> STMaskVolume:
    blank = Mask2D(
        width=like.width,
        height=like.height,
        bits=np.zeros((like.height, like.width), dtype=bool),
    )
    return STMaskVolume(frames=tuple(blank for _ in range(like.length)))


class _VolumeCache:
    """Memoises per-object mask volumes; scenes reuse them across queries."""

    def __init__(self, params: ProjectionParams):
        self.params = params
        self._store: dict[tuple[str, int], STMaskVolume] = {}

    def get(self, ref: str, assets: EvalScene, index: int) -> STMaskVolume:
        key = (ref, index)
        if key not in self._store:
            self._store[key] = make_video_grounding_gt(
                assets.scene, list(assets.views), index, self.params
            )
        return self._store[key]


def run_eval(
    predict: Predictor,
    instances: Sequence[QAInstance],
    scenes: Mapping[str, EvalScene],
    *,
    thresholds: Sequence[float] = (0.25, 0.5),
    caption_threshold: float = 0.5,
    video: bool = True,
    video_threshold: float = 0.25,
    projection: ProjectionParams = ProjectionParams(),
    seed: int = 0,
) -> EvalResult:
    """Score one predictor over a task split.

    The video-grounding track reuses the single-object grounding queries:
    "ours" projects the predictor's chosen object into every camera frame,
    "random" projects a uniformly drawn object, and "upperbound" projects
    the ground-truth object itself (the best any proposal set can do).
    Requires scene views; disabled automatically when a scene has none.
    """
    instances = list(instances)
    rows: list[dict[str, object]] = []

    g1_evals: list[GroundingEval] = []
    g1_ident: list[float] = []
    gm_f1_ident: list[float] = []
    gm_zero: list[float] = []
    gm_f1_box: dict[float, list[float]] = {t: [] for t in thresholds}
    cap_bleu: list[float] = []
    cap_cands: dict[str, list[str]] = {}
    cap_refs: dict[str, list[list[str]]] = {}
    cap_rows: list[dict[str, object]] = []
    em_scores: dict[str, list[float]] = {VQA: [], SITUATED_VQA: []}
    emr_scores: dict[str, list[float]] = {VQA: [], SITUATED_VQA: []}
    video_queries: list[tuple[str, int, int | None]] = []

    for ordinal, qa in enumerate(instances):
        try:
            assets = scenes[qa.scene_ref]
        except KeyError:
            raise DataError(f"no scene assets for task scene {qa.scene_ref!r}") from None
        scene = assets.scene
        response = predict(TrainingExample(qa=qa, scene=scene, features=assets.features))
        parsed = parse_identifiers(response, scene.n_objects)
        boxes = {i + 1: box for i, box in enumerate(scene.aabbs())}
        row: dict[str, object] = {
            "ordinal": ordinal,
            "task": qa.task,
            "scene": qa.scene_ref,
            "target": qa.target,
            "response": response,
            "pred_indices": " ".join(str(i) for i in parsed.indices),
            "gt_indices": " ".join(str(i) for i in qa.gt_object_indices),
        }

        if qa.task == GROUND1:
            first = parsed.indices[:1]
            ev = GroundingEval(pred_indices=first, gt_indices=qa.gt_object_indices, boxes=boxes)
            iou = ev.single_iou()
            ident_ok = float(parsed.indices == qa.gt_object_indices)
            g1_evals.append(ev)
            g1_ident.append(ident_ok)
            row["acc@identifier"] = ident_ok
            row["iou"] = iou
            video_queries.append(
                (qa.scene_ref, qa.gt_object_indices[0], first[0] if first else None)
            )
        elif qa.task == GROUND_MULTI:
            f1i = _set_f1(parsed.indices, qa.gt_object_indices)
            gm_f1_ident.append(f1i)
            row["f1@identifier"] = f1i
            if not qa.gt_object_indices:
                zt = float(not parsed.indices)
                gm_zero.append(zt)
                row["zero_target_acc"] = zt
            pred_boxes = [boxes[i] for i in parsed.indices]
            gt_boxes = [boxes[i] for i in qa.gt_object_indices]
            for t in thresholds:
                f1b = f1_at_iou(pred_boxes, gt_boxes, t)
                gm_f1_box[t].append(f1b)
                row[f"f1@{_tname(t)}"] = f1b
        elif qa.task == DENSE_CAPTION:
            cand = caption_tokens(response)
            refs = [caption_tokens(qa.target)]
            b = bleu4(cand, refs)
            cap_bleu.append(b)
            item = f"{qa.scene_ref}#{ordinal}"
            cap_cands[item] = cand
            cap_refs[item] = refs
            row["bleu4"] = b
            row["caption_item"] = item
            cap_rows.append(row)
        elif qa.task in (VQA, SITUATED_VQA):
            em = float(exact_match(response, [qa.target]))
            emr = float(em_refined(response, [qa.target]))
            em_scores[qa.task].append(em)
            emr_scores[qa.task].append(emr)
            row["em"] = em
            row["em_r"] = emr

        rows.append(row)

    cid_by_item: dict[str, float] = {}
    if cap_cands:
        cid_by_item = cider_scores(cap_cands, cap_refs)
        for row in cap_rows:
            row["cider"] = cid_by_item[row["caption_item"]]

    report: dict[str, dict[str, float]] = {}
    n_g1 = len(g1_ident)
    report[f"{GROUND1}/acc@identifier"] = _row(_mean(g1_ident), n_g1)
    report[f"{GROUND1}/mean_iou"] = _row(_mean([e.single_iou() for e in g1_evals]), n_g1)
    for t in thresholds:
        value = acc_at(g1_evals, t) if g1_evals else 0.0
        report[f"{GROUND1}/acc@{_tname(t)}"] = _row(value, n_g1, t)
    report[f"{GROUND_MULTI}/f1@identifier"] = _row(_mean(gm_f1_ident), len(gm_f1_ident))
    report[f"{GROUND_MULTI}/zero_target_acc"] = _row(_mean(gm_zero), len(gm_zero))
    for t in thresholds:
        report[f"{GROUND_MULTI}/f1@{_tname(t)}"] = _row(_mean(gm_f1_box[t]), len(gm_f1_ident), t)
    # The captioned object is named in the prompt, so its proposal is the
    # ground-truth box: the IoU entering the gated variants is exactly 1.
    n_cap = len(cap_bleu)
    cid_values = [cid_by_item[r["caption_item"]] for r in cap_rows]
    report[f"{DENSE_CAPTION}/bleu4"] = _row(_mean(cap_bleu), n_cap)
    report[f"{DENSE_CAPTION}/cider"] = _row(_mean(cid_values), n_cap)
    report[f"{DENSE_CAPTION}/bleu4@{_tname(caption_threshold)}"] = _row(
        caption_at_iou([(b, 1.0) for b in cap_bleu], caption_threshold),
        n_cap,
        caption_threshold,
    )
    report[f"{DENSE_CAPTION}/cider@{_tname(caption_threshold)}"] = _row(
        caption_at_iou([(c, 1.0) for c in cid_values], caption_threshold),
        n_cap,
        caption_threshold,
    )
    for fam in (VQA, SITUATED_VQA):
        report[f"{fam}/em"] = _row(_mean(em_scores[fam]), len(em_scores[fam]))
        report[f"{fam}/em_r"] = _row(_mean(emr_scores[fam]), len(emr_scores[fam]))

    if video:
        _video_track(
            report,
            video_queries,
            scenes,
            threshold=video_threshold,
            projection=projection,
            seed=seed,
            rows=rows,
        )

    return EvalResult(report=report, rows=rows)


def _video_track(
    report: dict,
    queries: Sequence[tuple[str, int, int | None]],
    scenes: Mapping[str, EvalScene],
    *,
    threshold: float,
    projection: ProjectionParams,
    seed: int,
    rows: list[dict[str, object]],
) -> None:
    """Random / ours / upperbound ST-IoU rows over the grounding queries."""
    cache = _VolumeCache(projection)
    usable = [q for q in queries if scenes[q[0]].views]
    track: dict[str, list[float]] = {name: [] for name in VIDEO_ROWS}
    for ordinal, (ref, gt_index, pred_index) in enumerate(usable):
        assets = scenes[ref]
        gt_vol = cache.get(ref, assets, gt_index)
        rng = derive_rng("eval-video-random", seed, ref, ordinal)
        rand_index = int(rng.integers(1, assets.scene.n_objects + 1))
        rand_vol = cache.get(ref, assets, rand_index)
        if pred_index is None:
            pred_vol = _empty_volume(gt_vol)
        else:
            pred_vol = cache.get(ref, assets, pred_index)
        track["random"].append(st_iou(rand_vol, gt_vol))
        track["ours"].append(st_iou(pred_vol, gt_vol))
        track["upperbound"].append(st_iou(gt_vol, gt_vol))
    for name in VIDEO_ROWS:
        values = track[name]
        acc = _mean([1.0 if v >= threshold else 0.0 for v in values])
        report[f"video/{name}/acc@{_tname(threshold)}"] = _row(acc, len(values), threshold)
        report[f"video/{name}/mean_st_iou"] = _row(_mean(values), len(values))


def format_report(report: Mapping[str, Mapping[str, float]]) -> str:
    """Human-readable one-line-per-metric rendering for terminals."""
    width = max((len(name) for name in report), default=0)
    lines = []
    for name in sorted(report):
        fields = report[name]
        lines.append(f"{name.ljust(width)}  {fields['value']:.4f}  (n={int(fields['count'])})")
    return "\n".join(lines)

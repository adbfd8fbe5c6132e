"""Harness checks: predictors, metric rows, report keys, determinism."""

import json
import math

import numpy as np
import pytest

from oids import evaluate, lm, metrics, synth, tasks
from oids.errors import DataError
from oids.features import FeatureConfig, extract_scene_features
from oids.vocab import build_vocab

SPEC = synth.SynthSceneSpec(
    seed=11,
    n_scenes=16,
    train_scenes=4,
    min_objects=8,
    max_objects=8,
    n_cameras=4,
    image_size=64,
)
FEATURE_SEED = SPEC.seed


def _eval_scene(index):
    scene, _ = synth.generate_scene(SPEC, index)
    views = synth.make_views(SPEC, scene)
    feats = extract_scene_features(scene, views, FEATURE_SEED, FeatureConfig())
    return scene.scene_id, evaluate.EvalScene(
        scene=scene,
        features={i + 1: f for i, f in enumerate(feats)},
        views=tuple(views),
    )


@pytest.fixture(scope="module")
def assets():
    scenes = {}
    instances = []
    for index in range(SPEC.train_scenes, SPEC.n_scenes):
        scene_id, es = _eval_scene(index)
        scenes[scene_id] = es
        raw = synth.generate_tasks(es.scene, SPEC.seed, SPEC)
        instances.extend(tasks.to_qa(r, es.scene) for r in raw)
    return scenes, instances


@pytest.fixture(scope="module")
def model():
    cfg = lm.LMConfig(d_model=32, n_layers=1, n_heads=2, n_ctx=384, n_identifiers=8)
    return lm.GroundedLM.create(build_vocab(n_identifiers=8), cfg, seed=3)


def test_oracle_predictor_hits_every_ceiling(assets):
    scenes, instances = assets
    result = evaluate.run_eval(evaluate.oracle_predictor(), instances, scenes)
    r = result.report
    assert r["ground1/acc@identifier"]["value"] == 1.0
    assert r["ground1/acc@0.5"]["value"] == 1.0
    assert r["ground1/mean_iou"]["value"] == 1.0
    assert r["ground_multi/f1@identifier"]["value"] == 1.0
    assert r["ground_multi/f1@0.25"]["value"] == 1.0
    assert r["ground_multi/zero_target_acc"]["value"] == 1.0
    assert r["vqa/em"]["value"] == 1.0
    assert r["situated_vqa/em_r"]["value"] == 1.0
    assert r["dense_caption/bleu4"]["value"] == pytest.approx(1.0)
    assert r["dense_caption/cider"]["value"] == pytest.approx(10.0)
    assert r["video/upperbound/acc@0.25"]["value"] == 1.0
    assert r["video/ours/acc@0.25"]["value"] == 1.0


def test_random_predictor_matches_binomial_rate(assets):
    scenes, instances = assets
    result = evaluate.run_eval(evaluate.random_predictor(seed=5), instances, scenes)
    acc = result.report["ground1/acc@identifier"]["value"]
    n = result.report["ground1/acc@identifier"]["count"]
    p = 1.0 / SPEC.max_objects
    assert n == 12 * SPEC.n_ground1
    assert abs(acc - p) <= 3.0 * math.sqrt(p * (1 - p) / n)


def test_report_contains_every_configured_key(assets, model):
    scenes, instances = assets
    result = evaluate.run_eval(evaluate.model_predictor(model, max_len=8), instances, scenes)
    assert set(result.report) == set(evaluate.metric_keys())
    for fields in result.report.values():
        assert set(fields) >= {"value", "count"}


def test_report_is_deterministic(assets, model, tmp_path):
    scenes, instances = assets
    predict = evaluate.model_predictor(model, max_len=8)
    a = evaluate.run_eval(predict, instances, scenes)
    b = evaluate.run_eval(predict, instances, scenes)
    assert a.report == b.report
    a.save(tmp_path / "a.json", tmp_path / "a.csv")
    b.save(tmp_path / "b.json", tmp_path / "b.csv")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_caption_gate_with_prompted_objects_equals_plain_scores(assets):
    scenes, instances = assets
    result = evaluate.run_eval(evaluate.oracle_predictor(), instances, scenes)
    r = result.report
    assert r["dense_caption/bleu4@0.5"]["value"] == r["dense_caption/bleu4"]["value"]
    assert r["dense_caption/cider@0.5"]["value"] == r["dense_caption/cider"]["value"]


def test_silent_predictor_scores_zero_but_wins_zero_targets(assets):
    scenes, instances = assets
    result = evaluate.run_eval(lambda example: "nothing here.", instances, scenes)
    r = result.report
    assert r["ground1/acc@identifier"]["value"] == 0.0
    assert r["ground1/mean_iou"]["value"] == 0.0
    assert r["video/ours/acc@0.25"]["value"] == 0.0
    assert r["video/ours/mean_st_iou"]["value"] == 0.0
    assert r["ground_multi/zero_target_acc"]["value"] == 1.0
    assert r["video/upperbound/acc@0.25"]["value"] == 1.0


def test_out_of_range_identifiers_count_as_misses(assets):
    scenes, instances = assets
    result = evaluate.run_eval(lambda example: "<OBJ999>.", instances, scenes)
    assert result.report["ground1/acc@identifier"]["value"] == 0.0


def test_rows_cover_instances_and_responses(assets):
    scenes, instances = assets
    result = evaluate.run_eval(evaluate.oracle_predictor(), instances, scenes)
    assert len(result.rows) == len(instances)
    for row, qa in zip(result.rows, instances):
        assert row["task"] == qa.task
        assert row["response"] == qa.target
    cap_rows = [row for row in result.rows if row["task"] == tasks.DENSE_CAPTION]
    assert cap_rows and all("cider" in row for row in cap_rows)


def test_saved_report_round_trips_through_json(assets, tmp_path):
    scenes, instances = assets
    result = evaluate.run_eval(evaluate.oracle_predictor(), instances, scenes)
    result.save(tmp_path / "report.json")
    loaded = json.loads((tmp_path / "report.json").read_text())
    assert loaded == result.report


def test_unknown_scene_reference_is_a_data_error(assets):
    scenes, _ = assets
    orphan = tasks.QAInstance(
        task=tasks.GROUND1,
        system=tasks.system_message(4),
        user="Where?",
        target="<OBJ001>.",
        gt_object_indices=(1,),
        scene_ref="scene9999",
    )
    with pytest.raises(DataError):
        evaluate.run_eval(evaluate.oracle_predictor(), [orphan], scenes)


def test_video_rows_ordered_upper_model_random(assets):
    """Oracle on grounding, silence elsewhere: ours == upper > random."""
    scenes, instances = assets
    result = evaluate.run_eval(evaluate.oracle_predictor(), instances, scenes)
    r = result.report
    upper = r["video/upperbound/mean_st_iou"]["value"]
    ours = r["video/ours/mean_st_iou"]["value"]
    rand = r["video/random/mean_st_iou"]["value"]
    assert upper == 1.0
    assert ours == upper
    assert rand < ours
    assert r["video/random/acc@0.25"]["count"] == r["ground1/acc@identifier"]["count"]


def test_random_video_row_matches_identifier_rate(assets):
    """The random video row should hit at roughly the 1/n identifier rate."""
    scenes, instances = assets
    result = evaluate.run_eval(evaluate.oracle_predictor(), instances, scenes)
    acc = result.report["video/random/acc@0.25"]["value"]
    n = result.report["video/random/acc@0.25"]["count"]
    p = 1.0 / SPEC.max_objects
    # A matching random object projects to the gt volume (ST-IoU 1); any
    # other object rarely overlaps a quarter of it.
    assert acc <= p + 3.0 * math.sqrt(p * (1 - p) / n) + 0.1


def test_empty_instance_list_reports_zero_counts(assets):
    scenes, _ = assets
    result = evaluate.run_eval(evaluate.oracle_predictor(), [], scenes)
    assert set(result.report) == set(evaluate.metric_keys())
    assert all(fields["count"] == 0 for fields in result.report.values())


def test_format_report_lists_every_metric(assets):
    scenes, instances = assets
    result = evaluate.run_eval(evaluate.oracle_predictor(), instances, scenes)
    text = evaluate.format_report(result.report)
    for name in result.report:
        assert name in text


def test_model_predictor_runs_generation(assets, model):
    scenes, instances = assets
    predict = evaluate.model_predictor(model, max_len=4)
    qa = instances[0]
    out = predict(
        lm.TrainingExample(qa=qa, scene=scenes[qa.scene_ref].scene, features=scenes[qa.scene_ref].features)
    )
    assert isinstance(out, str)

"""End-to-end orchestration: corpus, feature caches, training runs, eval.

Directory layout produced by a full run:

    corpus/
      manifest.json          corpus spec, its hash, and the split lists
      scenes/<id>.json       one scene file per generated scene
      tasks/{train,val}.jsonl
      features/<id>.objf     per-scene feature cache
      features/manifest.json feature settings, seed, and config hash
    run/
      model.oidc             trained weights
      loss.csv               step-ordered loss curve
      run.json               model/train settings, seeds, config hash
      report.json            metric rows wrapped with run provenance

Every JSON output embeds ``config_hash``; binary and CSV artifacts are
covered by the manifest written beside them. The environment variable
``OIDS_SEED`` overrides the seed of whichever stage is being run, and the
effective seed is always recorded in that stage's manifest.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, replace
from pathlib import Path
from typing import Mapping

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError
from .evaluate import (
    EvalResult,
    EvalScene,
    model_predictor,
    oracle_predictor,
    random_predictor,
    run_eval,
)
from .features import (
    FeatureConfig,
    ObjectFeatures,
    extract_scene_features,
    read_feature_cache,
    write_feature_cache,
)
from .lm import GroundedLM, LMConfig, TrainConfig, TrainingExample, train
from .scene import Scene, load_scene
from .synth import SynthSceneSpec, generate_corpus, load_manifest, make_views
from .tasks import load_tasks
from .vocab import Vocab, build_vocab

__all__ = [
    "SEED_ENV",
    "resolve_seed",
    "config_digest",
    "run_gen",
    "run_features",
    "run_train",
    "load_run",
    "run_eval_split",
    "write_wrapped_report",
]

SEED_ENV = "OIDS_SEED"


def resolve_seed(default: int) -> int:
    """The configured seed, unless OIDS_SEED overrides it."""
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return int(default)
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def config_digest(doc: Mapping) -> str:
    """Short stable hash of a JSON-serialisable configuration."""
    import hashlib

    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.blake2b(blob.encode("utf-8"), digest_size=8).hexdigest()


def _write_json(path: Path, doc: Mapping) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- stage: corpus generation ------------------------------------------------


def run_gen(spec: SynthSceneSpec, out_dir) -> dict:
    """Generate the corpus, honouring the seed override."""
    spec = replace(spec, seed=resolve_seed(spec.seed))
    return generate_corpus(spec, out_dir)


# -- stage: feature extraction -----------------------------------------------


def feature_path(corpus_dir, scene_id: str) -> Path:
    return Path(corpus_dir) / "features" / f"{scene_id}.objf"


def _scene_path(corpus_dir, scene_id: str) -> Path:
    return Path(corpus_dir) / "scenes" / f"{scene_id}.json"


def _all_scene_ids(doc: dict) -> list[str]:
    splits = doc.get("splits", {})
    return list(splits.get("train", [])) + list(splits.get("val", []))


def run_features(corpus_dir, cfg: FeatureConfig = FeatureConfig()) -> dict:
    """Build one feature cache per scene; returns the feature manifest."""
    corpus = Path(corpus_dir)
    spec, doc = load_manifest(corpus)
    seed = resolve_seed(spec.seed)
    (corpus / "features").mkdir(exist_ok=True)
    scene_ids = _all_scene_ids(doc)
    for scene_id in scene_ids:
        scene = load_scene(_scene_path(corpus, scene_id))
        views = make_views(spec, scene)
        feats = extract_scene_features(scene, views, seed, cfg)
        write_feature_cache(feature_path(corpus, scene_id), feats)
    settings = {"grid": cfg.grid, "d2": cfg.d2, "d3": cfg.d3}
    manifest = {
        "format": 1,
        "spec_hash": doc["spec_hash"],
        "seed": seed,
        "feature_config": settings,
        "config_hash": config_digest({"spec": spec.to_dict(), "features": settings, "seed": seed}),
        "scene_ids": scene_ids,
    }
    _write_json(corpus / "features" / "manifest.json", manifest)
    return manifest


def _load_features_dict(corpus_dir, scene_id: str) -> dict[int, ObjectFeatures]:
    path = feature_path(corpus_dir, scene_id)
    if not path.exists():
        raise DataError(f"no feature cache for {scene_id} — build features first")
    return {i + 1: f for i, f in enumerate(read_feature_cache(path))}


# -- stage: training ---------------------------------------------------------


def _vocab_for(spec: SynthSceneSpec, lm_cfg: LMConfig) -> Vocab:
    if lm_cfg.n_identifiers < spec.max_objects:
        raise ConfigError(
            f"model has {lm_cfg.n_identifiers} identifiers but scenes hold up to "
            f"{spec.max_objects} objects"
        )
    return build_vocab(n_identifiers=lm_cfg.n_identifiers)


def default_lm_config(spec: SynthSceneSpec, **overrides) -> LMConfig:
    base = LMConfig(n_identifiers=spec.max_objects).to_dict()
    base.update(overrides)
    return LMConfig.from_dict(base)


def _load_examples(corpus_dir, doc: dict, split: str) -> list[TrainingExample]:
    corpus = Path(corpus_dir)
    tasks_file = corpus / "tasks" / f"{split}.jsonl"
    if not tasks_file.exists():
        raise DataError(f"no task file for split {split!r} at {tasks_file}")
    scenes: dict[str, Scene] = {}
    features: dict[str, dict[int, ObjectFeatures]] = {}
    for scene_id in doc["splits"][split]:
        scenes[scene_id] = load_scene(_scene_path(corpus, scene_id))
        features[scene_id] = _load_features_dict(corpus, scene_id)
    out = []
    for qa in load_tasks(tasks_file):
        if qa.scene_ref not in scenes:
            raise DataError(f"task references unknown scene {qa.scene_ref!r}")
        out.append(TrainingExample(qa=qa, scene=scenes[qa.scene_ref], features=features[qa.scene_ref]))
    return out


def run_train(
    corpus_dir,
    run_dir,
    lm_cfg: LMConfig | None = None,
    train_cfg: TrainConfig = TrainConfig(),
    resume_from=None,
) -> tuple[GroundedLM, list]:
    """Train on the corpus train split; writes checkpoint, curve, manifest.

    With ``resume_from`` pointing at an earlier run directory, training
    continues from that checkpoint (the model settings must match); zero
    epochs then re-saves the loaded weights unchanged.
    """
    corpus = Path(corpus_dir)
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    spec, doc = load_manifest(corpus)
    train_cfg = replace(train_cfg, seed=resolve_seed(train_cfg.seed))
    if resume_from is not None:
        model, prev_doc = load_run(resume_from)
        if prev_doc["spec_hash"] != doc["spec_hash"]:
            raise DataError(
                f"resume checkpoint was trained on corpus {prev_doc['spec_hash']} "
                f"but this corpus is {doc['spec_hash']}"
            )
        if lm_cfg is not None and lm_cfg.to_dict() != prev_doc["lm"]:
            raise ConfigError("model settings differ from the resume checkpoint")
        lm_cfg = LMConfig.from_dict(prev_doc["lm"])
        _vocab_for(spec, lm_cfg)
    else:
        if lm_cfg is None:
            lm_cfg = default_lm_config(spec)
        model = GroundedLM.create(_vocab_for(spec, lm_cfg), lm_cfg, seed=train_cfg.seed)
    examples = _load_examples(corpus, doc, "train")
    rows = train(model, examples, train_cfg, log_path=run / "loss.csv")
    save_checkpoint(run / "model.oidc", model.state_tensors())
    run_doc = {
        "format": 1,
        "lm": lm_cfg.to_dict(),
        "train": asdict(train_cfg),
        "seed": train_cfg.seed,
        "spec_hash": doc["spec_hash"],
        "final_loss": rows[-1][2] if rows else None,
        "steps": len(rows),
    }
    run_doc["config_hash"] = config_digest(
        {"spec": spec.to_dict(), "lm": run_doc["lm"], "train": run_doc["train"]}
    )
    _write_json(run / "run.json", run_doc)
    return model, rows


def load_run(run_dir) -> tuple[GroundedLM, dict]:
    """Rebuild the trained model from a run directory."""
    run = Path(run_dir)
    try:
        with open(run / "run.json", "r", encoding="utf-8") as fh:
            run_doc = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"no run manifest at {run / 'run.json'}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"run manifest is not valid JSON: {exc}") from exc
    if run_doc.get("format") != 1:
        raise DataError(f"unsupported run manifest format {run_doc.get('format')!r}")
    lm_cfg = LMConfig.from_dict(run_doc["lm"])
    vocab = build_vocab(n_identifiers=lm_cfg.n_identifiers)
    tensors = load_checkpoint(run / "model.oidc")
    model = GroundedLM.from_tensors(vocab, lm_cfg, tensors)
    return model, run_doc


# -- stage: evaluation -------------------------------------------------------


def _eval_scenes(corpus_dir, spec: SynthSceneSpec, doc: dict, split: str) -> dict[str, EvalScene]:
    corpus = Path(corpus_dir)
    out: dict[str, EvalScene] = {}
    for scene_id in doc["splits"][split]:
        scene = load_scene(_scene_path(corpus, scene_id))
        out[scene_id] = EvalScene(
            scene=scene,
            features=_load_features_dict(corpus, scene_id),
            views=tuple(make_views(spec, scene)),
        )
    return out


def write_wrapped_report(path, result: EvalResult, meta: Mapping) -> None:
    """Metric rows under "metrics", run provenance under "meta"."""
    _write_json(Path(path), {"meta": dict(meta), "metrics": result.report})


def run_eval_split(
    run_dir,
    corpus_dir,
    split: str = "val",
    *,
    predictor: str = "model",
    max_len: int = 48,
    csv_path=None,
    report_name: str | None = "report.json",
) -> EvalResult:
    """Evaluate a trained run on one split and write the wrapped report."""
    model, run_doc = load_run(run_dir)
    spec, doc = load_manifest(corpus_dir)
    if run_doc["spec_hash"] != doc["spec_hash"]:
        raise DataError(
            f"run was trained on corpus {run_doc['spec_hash']} "
            f"but this corpus is {doc['spec_hash']}"
        )
    if split not in doc["splits"]:
        raise DataError(f"unknown split {split!r}")
    tasks_file = Path(corpus_dir) / "tasks" / f"{split}.jsonl"
    if not tasks_file.exists():
        raise DataError(f"no task file for split {split!r} at {tasks_file}")
    instances = load_tasks(tasks_file)
    scenes = _eval_scenes(corpus_dir, spec, doc, split)
    seed = resolve_seed(spec.seed)
    predictors = {
        "model": lambda: model_predictor(model, max_len),
        "oracle": oracle_predictor,
        "random": lambda: random_predictor(seed),
    }
    if predictor not in predictors:
        raise ConfigError(f"unknown predictor {predictor!r}; pick one of {sorted(predictors)}")
    result = run_eval(
        predictors[predictor](),
        instances,
        scenes,
        projection=FeatureConfig().projection,
        seed=seed,
    )
    meta = {
        "config_hash": run_doc["config_hash"],
        "spec_hash": doc["spec_hash"],
        "split": split,
        "predictor": predictor,
        "seed": seed,
    }
    if report_name is not None:
        write_wrapped_report(Path(run_dir) / report_name, result, meta)
    if csv_path is not None:
        from .metrics import write_instance_csv

        write_instance_csv(csv_path, result.rows)
    return result

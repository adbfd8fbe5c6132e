"""Command-line front end: gen, features, train, eval.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
abort. ``OIDS_SEED`` in the environment overrides the configured seed of
the stage being run and is recorded in that stage's manifest.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, DataError, NumericError
from .evaluate import format_report
from .features import FeatureConfig
from .lm import LMConfig, TrainConfig
from .pipeline import run_eval_split, run_features, run_gen, run_train
from .synth import SynthSceneSpec

FUSION_FLAGS = {
    "separate": "separate_token",
    "early": "early_fusion",
    "plaintext": "plain_text",
}
IDENTIFIER_FLAGS = {
    "learnable": "learnable",
    "gaussian": "gaussian",
    "plaintext": "plain_text",
}


def _cap_threads(n: int | None) -> None:
    """Cap numeric worker threads; all outputs are thread-count invariant."""
    if n is None or n < 1:
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(limits=n)


def _load_spec(args) -> SynthSceneSpec:
    doc: dict = {}
    if args.spec is not None:
        try:
            with open(args.spec, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"no spec file at {args.spec}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"spec file is not valid JSON: {exc}") from exc
    overrides = {
        "seed": args.seed,
        "n_scenes": args.scenes,
        "train_scenes": args.train_scenes,
        "min_objects": args.min_objects,
        "max_objects": args.max_objects,
        "n_cameras": args.cameras,
        "image_size": args.image_size,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return SynthSceneSpec.from_dict(doc)


def _cmd_gen(args) -> int:
    spec = _load_spec(args)
    manifest = run_gen(spec, args.out)
    counts = manifest["task_counts"]
    print(
        f"wrote {sum(len(v) for v in manifest['splits'].values())} scenes, "
        f"{counts['train']}+{counts['val']} tasks to {args.out} "
        f"(spec {manifest['spec_hash']})"
    )
    return 0


def _cmd_features(args) -> int:
    cfg = FeatureConfig(grid=args.grid, d2=args.d2, d3=args.d3)
    manifest = run_features(args.corpus, cfg)
    print(
        f"cached features for {len(manifest['scene_ids'])} scenes "
        f"(config {manifest['config_hash']})"
    )
    return 0


def _cmd_train(args) -> int:
    lm_cfg = None
    if args.resume is None:
        overrides = {
            "fusion": FUSION_FLAGS[args.fusion],
            "identifier_mode": IDENTIFIER_FLAGS[args.identifiers],
        }
        if args.d_model is not None:
            overrides["d_model"] = args.d_model
        if args.layers is not None:
            overrides["n_layers"] = args.layers
        if args.heads is not None:
            overrides["n_heads"] = args.heads
        if args.ctx is not None:
            overrides["n_ctx"] = args.ctx
        from .pipeline import default_lm_config
        from .synth import load_manifest

        spec, _ = load_manifest(args.corpus)
        lm_cfg = default_lm_config(spec, **overrides)
    train_cfg = TrainConfig(
        base_lr=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        warmup_steps=args.warmup,
        seed=args.seed,
    )
    model, rows = run_train(
        args.corpus, args.run, lm_cfg, train_cfg, resume_from=args.resume
    )
    last = f", final loss {rows[-1][2]:.4f}" if rows else ""
    print(f"trained {len(rows)} steps{last}; checkpoint in {args.run}")
    return 0


def _cmd_eval(args) -> int:
    result = run_eval_split(
        args.run,
        args.corpus,
        args.split,
        predictor=args.predictor,
        max_len=args.max_len,
        csv_path=args.csv,
        report_name=args.report,
    )
    print(format_report(result.report))
    print(f"report written to {Path(args.run) / args.report}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oids",
        description="Identifier-grounded scene language modelling pipeline.",
    )
    parser.add_argument("--threads", type=int, default=None, help="cap numeric worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate the synthetic corpus")
    gen.add_argument("--out", required=True, help="corpus output directory")
    gen.add_argument("--spec", default=None, help="JSON file of corpus settings")
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--scenes", type=int, default=None, help="total scene count")
    gen.add_argument("--train-scenes", type=int, default=None)
    gen.add_argument("--min-objects", type=int, default=None)
    gen.add_argument("--max-objects", type=int, default=None)
    gen.add_argument("--cameras", type=int, default=None)
    gen.add_argument("--image-size", type=int, default=None)
    gen.set_defaults(func=_cmd_gen)

    feat = sub.add_parser("features", help="build per-scene feature caches")
    feat.add_argument("--corpus", required=True)
    feat.add_argument("--grid", type=int, default=16)
    feat.add_argument("--d2", type=int, default=64)
    feat.add_argument("--d3", type=int, default=64)
    feat.set_defaults(func=_cmd_features)

    tr = sub.add_parser("train", help="train the model on the corpus")
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--run", required=True, help="run output directory")
    tr.add_argument("--fusion", choices=sorted(FUSION_FLAGS), default="separate")
    tr.add_argument("--identifiers", choices=sorted(IDENTIFIER_FLAGS), default="learnable")
    tr.add_argument("--epochs", type=int, default=TrainConfig().epochs)
    tr.add_argument("--batch-size", type=int, default=TrainConfig().batch_size)
    tr.add_argument("--lr", type=float, default=TrainConfig().base_lr)
    tr.add_argument("--warmup", type=int, default=TrainConfig().warmup_steps)
    tr.add_argument("--seed", type=int, default=TrainConfig().seed)
    tr.add_argument("--d-model", type=int, default=None)
    tr.add_argument("--layers", type=int, default=None)
    tr.add_argument("--heads", type=int, default=None)
    tr.add_argument("--ctx", type=int, default=None)
    tr.add_argument("--resume", default=None, help="continue from this run directory")
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a trained run")
    ev.add_argument("--run", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--split", default="val")
    ev.add_argument("--predictor", choices=("model", "oracle", "random"), default="model")
    ev.add_argument("--max-len", type=int, default=48)
    ev.add_argument("--csv", default=None, help="also write per-instance rows here")
    ev.add_argument("--report", default="report.json")
    ev.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _cap_threads(args.threads)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

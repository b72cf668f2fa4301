"""Command line front end.

Subcommands: synth (render a synthetic split), train, eval, predict,
gradcheck, ablate. Model/training settings come from an optional YAML file
(``model:`` and ``train:`` sections) plus ``--set section.key=value``
overrides; a JSON run manifest is written next to every artifact-producing
command. Exit codes: 0 success, 1 failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import torch
import torch.nn.functional as F
import yaml

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ABLATION_ROWS, ModelConfig
from .data import (
    load_fsc147,
    load_png,
    load_synthetic_dataset,
    resize_policy,
    write_synthetic_dataset,
)
from .errors import CheckpointError, GeometryError, ShapeMismatchError
from .gradcheck import DEFAULT_STEP, DEFAULT_TOLERANCE, MODULE_CASES, gradient_check
from .model import build_model, parameter_count
from .presets import desk_scene_spec, desk_train_config
from .train_eval import (
    TrainConfig,
    evaluate,
    run_ablation,
    train,
    write_eval_history,
    write_loss_curve,
)
from .viz import save_similarity_png

DATA_ROOT_ENV = "SIMCOUNT_DATA_ROOT"


def _write_json_atomic(path: Path, payload: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _apply_override(doc: dict, item: str) -> None:
    if "=" not in item:
        raise ValueError(f"--set expects section.key=value, got {item!r}")
    dotted, raw = item.split("=", 1)
    keys = dotted.strip().split(".")
    if any(not k for k in keys):
        raise ValueError(f"bad --set key {dotted!r}")
    node = doc
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ValueError(f"--set key {dotted!r} collides with a non-section entry")
    node[keys[-1]] = yaml.safe_load(raw)


def _load_config_doc(args) -> dict:
    doc = {}
    if getattr(args, "config", None):
        loaded = yaml.safe_load(Path(args.config).read_text())
        if loaded is not None:
            if not isinstance(loaded, dict):
                raise ValueError("config file must hold a mapping")
            doc = loaded
    for item in getattr(args, "set", None) or []:
        _apply_override(doc, item)
    return doc


def _model_config(doc: dict, args) -> ModelConfig:
    params = dict(doc.get("model") or {})
    for key in ("backbone_channels", "head_widths"):
        if key in params:
            params[key] = tuple(params[key])
    if getattr(args, "seed", None) is not None:
        params.setdefault("seed", args.seed)
    if getattr(args, "full_size", False):
        return ModelConfig(**params).validate()
    return ModelConfig.tiny(**params)


def _train_config(doc: dict, args) -> TrainConfig:
    if "train" in doc:
        cfg = TrainConfig.from_dict(doc["train"])
    else:
        cfg = desk_train_config()
    updates = {}
    if getattr(args, "steps", None) is not None:
        updates["max_steps"] = args.steps
    if getattr(args, "lr", None) is not None:
        updates["learning_rate"] = args.lr
    if getattr(args, "batch_size", None) is not None:
        updates["batch_size"] = args.batch_size
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    return replace(cfg, **updates) if updates else cfg


def _records(manifest: str | None, fsc147_root: str | None, split: str):
    if manifest:
        return load_synthetic_dataset(manifest)
    if fsc147_root:
        return load_fsc147(fsc147_root, split)
    raise ValueError(
        f"no data source: pass a manifest or --fsc147-root (or set ${DATA_ROOT_ENV})"
    )


def _add_common_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file with model:/train: sections")
    p.add_argument(
        "--set",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="override one config entry (repeatable)",
    )
    p.add_argument("--seed", type=int, default=None)
    p.add_argument(
        "--full-size",
        action="store_true",
        help="use the full-size architecture instead of the tiny preset",
    )


def cmd_synth(args) -> int:
    overrides = {
        key: value
        for key, value in (
            ("canvas", args.canvas),
            ("count_min", args.count_min),
            ("count_max", args.count_max),
        )
        if value is not None
    }
    spec = desk_scene_spec(
        seed=args.seed if args.seed is not None else 0,
        distractors=args.distractors,
        **overrides,
    )
    manifest = write_synthetic_dataset(
        spec, args.n, args.out, split=args.split, start_index=args.start_index
    )
    print(f"wrote {args.n} {args.split} scenes, manifest {manifest}")
    return 0


def cmd_train(args) -> int:
    doc = _load_config_doc(args)
    model_cfg = _model_config(doc, args)
    train_cfg = _train_config(doc, args)

    train_records = _records(args.train_manifest, args.fsc147_root, "train")
    val_records = None
    if args.val_manifest or (args.fsc147_root and not args.train_manifest):
        val_records = _records(args.val_manifest, args.fsc147_root, "val")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(model_cfg)
    result = train(model, train_records, train_cfg, val_records=val_records, out_dir=out)

    final_path = out / "final.ckpt"
    save_checkpoint(final_path, model, step=result.steps)
    write_loss_curve(out / "loss_curve.csv", result.loss_curve)
    if result.eval_history:
        write_eval_history(out / "eval_history.csv", result.eval_history)
    manifest = {
        "command": "train",
        "argv": sys.argv[1:],
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
        "parameter_count": parameter_count(model),
        "steps": result.steps,
        "stop_reason": result.stop_reason,
        "best_step": result.best_step,
        "best_val_mae": result.best_val_mae,
        "final_loss": result.loss_curve[-1] if result.loss_curve else None,
        "outputs": {
            "final_checkpoint": str(final_path),
            "best_checkpoint": result.checkpoint_path,
            "loss_curve": str(out / "loss_curve.csv"),
        },
    }
    _write_json_atomic(out / "run_manifest.json", manifest)
    print(
        f"trained {result.steps} steps ({result.stop_reason}); "
        f"final loss {manifest['final_loss']:.4f}; artifacts in {out}"
    )
    if result.best_val_mae is not None:
        print(f"best val MAE {result.best_val_mae:.3f} at step {result.best_step}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    records = _records(args.manifest, args.fsc147_root, args.split)
    report = evaluate(model, records, split=args.split)
    print(
        f"{args.split}: MAE {report.mae:.3f}, MSE {report.mse:.3f} "
        f"over {report.n_records} images"
    )
    if args.report:
        _write_json_atomic(
            Path(args.report),
            {
                "command": "eval",
                "checkpoint": str(args.checkpoint),
                "split": report.split,
                "mae": report.mae,
                "mse": report.mse,
                "n_records": report.n_records,
            },
        )
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    model.eval()
    image = load_png(args.image)
    if args.resize == "policy":
        image = resize_policy(image, "train_main")
    else:
        stride = model.config.stride
        h, w = image.shape[-2:]
        target = (max(stride, round(h / stride) * stride), max(stride, round(w / stride) * stride))
        if target != (h, w):
            image = F.interpolate(
                image.unsqueeze(0), size=target, mode="bilinear", align_corners=False
            ).squeeze(0)
    with torch.no_grad():
        output = model(image.unsqueeze(0))
    count = max(0.0, float(output.counts[0]))
    print(f"{args.image}: predicted count {count:.2f}")
    if args.sim_out:
        if output.similarity is None:
            print("no similarity map for this architecture", file=sys.stderr)
            return 1
        sidecar = save_similarity_png(output.similarity[0], args.sim_out)
        print(f"similarity map -> {args.sim_out} (range {sidecar['min']:.3g}..{sidecar['max']:.3g})")
    return 0


def cmd_gradcheck(args) -> int:
    report = gradient_check(target=args.target, h=args.step, seed=args.seed or 0)
    worst = sorted(report.per_tensor.items(), key=lambda kv: -kv[1])[:5]
    for name, err in worst:
        print(f"  {name}: {err:.3g}")
    verdict = "PASS" if report.max_rel_error < args.tolerance else "FAIL"
    print(
        f"{verdict}: max relative error {report.max_rel_error:.3g} over "
        f"{report.n_coordinates} coordinates (tolerance {args.tolerance:g})"
    )
    return 0 if verdict == "PASS" else 1


def cmd_ablate(args) -> int:
    doc = _load_config_doc(args)
    model_cfg = _model_config(doc, args)
    train_cfg = _train_config(doc, args)
    rows = args.rows.split(",") if args.rows else list(ABLATION_ROWS)
    train_records = _records(args.train_manifest, args.fsc147_root, "train")
    heldout_records = _records(args.heldout_manifest, args.fsc147_root, "val")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = run_ablation(
        model_cfg, train_records, heldout_records, train_cfg,
        rows=rows, out_csv=out / "ablation.csv",
    )
    for entry in results:
        if entry["error"]:
            print(f"{entry['row']}: ERROR {entry['error']}")
        else:
            print(
                f"{entry['row']}: params {entry['param_count']}, "
                f"train MAE {entry['train_mae']:.3f}, heldout MAE {entry['heldout_mae']:.3f}"
            )
    _write_json_atomic(
        out / "run_manifest.json",
        {
            "command": "ablate",
            "argv": sys.argv[1:],
            "model_config": model_cfg.to_dict(),
            "train_config": train_cfg.to_dict(),
            "rows": rows,
            "outputs": {"table": str(out / "ablation.csv")},
        },
    )
    print(f"table -> {out / 'ablation.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simcount",
        description="Exemplar-free repeated-object counting toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic counting split")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument(
        "--start-index",
        type=int,
        default=0,
        help="first scene index; disjoint ranges give disjoint scenes per seed",
    )
    p.add_argument("--canvas", type=int, default=None)
    p.add_argument("--count-min", type=int, default=None)
    p.add_argument("--count-max", type=int, default=None)
    p.add_argument("--distractors", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a counting model")
    _add_common_config_args(p)
    p.add_argument("--train-manifest")
    p.add_argument("--val-manifest")
    p.add_argument("--fsc147-root", default=os.environ.get(DATA_ROOT_ENV))
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--fsc147-root", default=os.environ.get(DATA_ROOT_ENV))
    p.add_argument("--split", default="val")
    p.add_argument("--report", help="optional JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict the count for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--sim-out", help="optional similarity-map PNG path")
    p.add_argument("--resize", choices=("multiple", "policy"), default="multiple")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="verify gradients by finite differences")
    p.add_argument(
        "--target", default="full", choices=("full", *sorted(MODULE_CASES))
    )
    p.add_argument("--step", type=float, default=DEFAULT_STEP)
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score the component ablation rows")
    _add_common_config_args(p)
    p.add_argument("--train-manifest")
    p.add_argument("--heldout-manifest")
    p.add_argument("--fsc147-root", default=os.environ.get(DATA_ROOT_ENV))
    p.add_argument("--rows", help="comma-separated row names (default: all)")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        CheckpointError,
        GeometryError,
        ShapeMismatchError,
        FileNotFoundError,
        ValueError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

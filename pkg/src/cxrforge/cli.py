"""Command-line pipeline: prep, train, evaluate, predict, inspect.

Exit codes: 0 success, 1 config error, 2 data error, 3 numeric failure.
Heavy imports happen inside main() so the CXR_FORGE_THREADS cap can be
applied to the BLAS thread pools before numpy loads. Timestamps appear
only in the run log, never in data artifacts, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path


def _apply_thread_cap() -> None:
    raw = os.environ.get("CXR_FORGE_THREADS", "").strip()
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        print(f"warning: ignoring non-integer CXR_FORGE_THREADS={raw!r}", file=sys.stderr)
        return
    if n <= 0:  # 0 = auto
        return
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cxrforge",
        description="Train and evaluate the chest X-ray triage classifier.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="re-encode and resize a dataset tree, write its manifest")
    p.add_argument("src", help="source dataset root (train/test class folders)")
    p.add_argument("out", help="output directory for converted images + manifest.csv")
    p.add_argument("--size", type=int, default=80, help="square output size (default 80)")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True, help="path to the run config JSON")
    p.add_argument("--out", default=None, help="override the config's output_dir")
    p.add_argument("--seed", type=int, default=None, help="override the config's seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics + confusion matrix for a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out", default=".", help="directory for confusion.csv / metrics.csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="class probabilities for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("image", help="path to a JPEG/PNG image")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect", help="layer table and parameter count of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def cmd_prep(args) -> int:
    import numpy as np
    from PIL import Image

    from .data import DatasetManifest, ManifestRecord, compute_class_weights, load_and_resize, scan_dataset

    manifest = scan_dataset(args.src)
    out_root = Path(args.out)
    out_records = []
    for rec in manifest.records:
        img = load_and_resize(rec.path, args.size)
        rel = Path(rec.split) / rec.label / (Path(rec.path).stem + ".png")
        dst = out_root / rel
        dst.parent.mkdir(parents=True, exist_ok=True)
        arr = np.round(img.data.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(dst)
        out_records.append(ManifestRecord(str(rel), rec.label, rec.split))

    out_manifest = DatasetManifest(out_records, manifest.classes)
    out_root.mkdir(parents=True, exist_ok=True)
    out_manifest.write_csv(out_root / "manifest.csv")

    counts = out_manifest.counts(split="train")
    print(f"converted {len(out_records)} images into {out_root}")
    for split in ("train", "test"):
        per = out_manifest.counts(split=split)
        print(f"  {split}: " + ", ".join(f"{c}={per[c]}" for c in out_manifest.classes))
    if all(v > 0 for v in counts.values()):
        weights = compute_class_weights(counts)
        pairs = ", ".join(f"{c}={w:.4f}" for c, w in zip(out_manifest.classes, weights))
        print(f"  class weights (train): {pairs}")
    if manifest.undecodable:
        print(f"undecodable files ({len(manifest.undecodable)}):", file=sys.stderr)
        for path in manifest.undecodable:
            print(f"  {path}", file=sys.stderr)
        return 2
    return 0


def _setup_run_log(out_dir: Path):
    import logging

    logger = logging.getLogger("cxrforge.run")
    logger.setLevel(logging.INFO)
    logger.handlers.clear()
    handler = logging.FileHandler(out_dir / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
    logger.addHandler(handler)
    return logger


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .config import load_config, write_resolved
    from .data import compute_class_weights, scan_dataset
    from .model import build_model, count_parameters
    from .train import fit

    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.output_dir = args.out
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    logger = _setup_run_log(out_dir)

    manifest = scan_dataset(config.dataset_root, classes=config.classes)
    counts = manifest.counts(split="train")
    cw_setting = config.train["class_weights"]
    if isinstance(cw_setting, list):
        class_weights = [float(v) for v in cw_setting]
    elif cw_setting == "balanced":
        class_weights = compute_class_weights(counts)
    else:
        class_weights = None

    model = build_model(
        config.model_config(),
        input_shape=config.input_shape,
        class_count=config.class_count,
        seed=config.seed,
        class_names=config.classes,
    )
    plan = config.make_plan(class_weights)
    write_resolved(config, out_dir / "resolved_config.json")
    logger.info("run config: %s", Path(args.config).resolve())
    logger.info("model parameters: %d", count_parameters(model))
    logger.info("train counts: %s", counts)

    val = "test" if manifest.split_records("test") else None
    history = fit(model, manifest, plan, log_sink=out_dir / "history.csv", val_split=val)
    for stats in history:
        logger.info(
            "epoch %d %s loss=%.5f acc=%.4f", stats.epoch, stats.split, stats.loss, stats.accuracy
        )
    save_checkpoint(model, out_dir / "checkpoint.cxrf")
    print(f"trained {plan.epochs} epochs; artifacts in {out_dir}")
    if history:
        last_train = [h for h in history if h.split == "train"][-1]
        print(f"final train loss {last_train.loss:.5f}, accuracy {last_train.accuracy:.4f}")
    return 0


def _load_checkpoint_or_fail(path):
    from .checkpoint import load_checkpoint

    return load_checkpoint(path)


def cmd_evaluate(args) -> int:
    from .config import ConfigError
    from .data import scan_dataset
    from .evaluate import evaluate, render_report

    model = _load_checkpoint_or_fail(args.checkpoint)
    discovered = scan_dataset(args.data)
    if set(discovered.classes) != set(model.class_names):
        raise ConfigError(
            f"checkpoint classes {model.class_names} do not match dataset classes "
            f"{discovered.classes}"
        )
    manifest = scan_dataset(args.data, classes=model.class_names)
    report, cm = evaluate(model, manifest, args.split)
    render_report(report, cm, args.out)
    return 0


def cmd_predict(args) -> int:
    from .data import load_and_resize
    from .model import predict
    from .tensor import Tensor

    model = _load_checkpoint_or_fail(args.checkpoint)
    img = load_and_resize(args.image, target=model.input_shape[-1])
    probs = predict(model, Tensor(img.data[None])).data[0]
    for name, p in zip(model.class_names, probs):
        print(f"{name},{p:.6f}")
    print(f"prediction: {model.class_names[int(probs.argmax())]}")
    return 0


def _spec_summary(spec) -> str:
    if spec.kind == "conv":
        return f"{spec.kernel}x{spec.kernel}x{spec.filters} {spec.padding} s{spec.stride}"
    if spec.kind == "maxpool":
        return f"{spec.window}x{spec.window} s{spec.stride}"
    if spec.kind == "dense":
        return f"{spec.units} units"
    if spec.kind == "concat":
        return "+".join(spec.inputs)
    return ""


def cmd_inspect(args) -> int:
    from .model import count_parameters

    model = _load_checkpoint_or_fail(args.checkpoint)
    rows = []
    for spec in model.layers:
        shape = model.output_shapes.get(spec.name, ())
        store = model.params.get(spec.name, {})
        n_params = sum(t.size for t in store.values())
        rows.append(
            (spec.name, spec.kind, _spec_summary(spec), "x".join(map(str, shape)), n_params)
        )
    widths = [max(len(str(r[i])) for r in rows + [("layer", "kind", "config", "output", 0)]) + 2
              for i in range(4)]
    print(f"input shape: {'x'.join(map(str, model.input_shape))}")
    print(f"classes: {', '.join(model.class_names)}")
    header = ["layer", "kind", "config", "output"]
    print("".join(h.ljust(w) for h, w in zip(header, widths)) + "params")
    for name, kind, config, shape, n in rows:
        print("".join(v.ljust(w) for v, w in zip((name, kind, config, shape), widths)) + str(n))
    print(f"total parameters: {count_parameters(model)}")
    return 0


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)

    from .checkpoint import CheckpointError
    from .config import ConfigError
    from .data import DataError
    from .model import GraphError
    from .train import NumericError

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except GraphError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: generate / train / decompose / eval / export / bench.

Exit codes: 0 success, 2 invalid arguments, 3 I/O failure, 4 numeric
failure. Every command that owns an output directory writes a
``run_manifest.json`` there atomically at run start. JSON schemas are
frozen in docs/formats.md.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import hashlib
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import datagen, metrics, trainer
from .datagen import generate_dataset, load_dataset, save_image_png
from .errors import InvalidArgumentError, NumericFailureError, UndefinedMetricError
from .model import ModelState, init_model, load_checkpoint
from .trainer import TrainConfig

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

# Flat key=value config file: TrainConfig fields plus model geometry.
MODEL_KEYS = {
    "num_prototypes": int,
    "proto_h": int,
    "proto_w": int,
    "n_max": int,
    "init_value": float,
    "background": bool,
    "checkpoint_every": int,
}
MODEL_DEFAULTS = {
    "num_prototypes": 19,
    "proto_h": 20,
    "proto_w": 20,
    "n_max": 3,
    "init_value": 0.2,
    "background": False,
    "checkpoint_every": 1,
}
TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _parse_value(key: str, raw: str):
    if key in MODEL_KEYS:
        target = MODEL_KEYS[key]
    else:
        target = {"int": int, "float": float}.get(TRAIN_KEYS[key], float)
    if target is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise InvalidArgumentError(f"config key {key}: expected boolean, got {raw!r}")
    try:
        return target(raw)
    except ValueError as exc:
        raise InvalidArgumentError(f"config key {key}: {exc}") from exc


def parse_config_file(path) -> tuple[TrainConfig, dict]:
    """Read the key=value config; unknown keys are errors (fail fast)."""
    train_kwargs = {}
    model_kwargs = dict(MODEL_DEFAULTS)
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidArgumentError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key in TRAIN_KEYS:
                train_kwargs[key] = _parse_value(key, raw)
            elif key in MODEL_KEYS:
                model_kwargs[key] = _parse_value(key, raw)
            else:
                raise InvalidArgumentError(f"{path}:{lineno}: unknown config key {key!r}")
    return TrainConfig(**train_kwargs).validate(), model_kwargs


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_run_manifest(out_dir: Path, command: str, config: dict, seed, outputs: list[str]):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "git_describe": _git_describe(),
        "started_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "outputs": outputs,
    }
    tmp = out_dir / "run_manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, out_dir / "run_manifest.json")


def _to_uint8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# Commands


def cmd_generate(args) -> int:
    if args.n_train < 1 or args.n_test < 0:
        raise InvalidArgumentError(
            f"need --n-train >= 1 and --n-test >= 0, got {args.n_train}/{args.n_test}"
        )
    out = Path(args.out)
    write_run_manifest(
        out,
        "generate",
        {"n_train": args.n_train, "n_test": args.n_test, "cell_size": args.cell_size},
        args.seed,
        ["train/", "test/"] if args.n_test else ["train/"],
    )
    generate_dataset(args.n_train, args.seed, out / "train", cell_size=args.cell_size)
    if args.n_test:
        generate_dataset(args.n_test, args.seed + 1, out / "test", cell_size=args.cell_size)
    print(f"generated {args.n_train} train + {args.n_test} test images in {out}")
    return EXIT_OK


def _resolve_train_dir(data: Path) -> Path:
    if (data / "train").is_dir():
        return data / "train"
    return data


def cmd_train(args) -> int:
    config, model_kwargs = parse_config_file(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    data_dir = _resolve_train_dir(Path(args.data))
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data directory not found: {data_dir}")
    dataset = load_dataset(data_dir)
    n, h, w, c = dataset.images.shape

    out = Path(args.out)
    write_run_manifest(
        out,
        "train",
        {**dataclasses.asdict(config), **model_kwargs, "data": str(data_dir)},
        config.seed,
        ["metrics.jsonl", "checkpoint_final.ckpt"],
    )

    if args.resume:
        state = load_checkpoint(args.resume)
        ph, pw = state.proto_shape
        expect = (
            model_kwargs["num_prototypes"],
            model_kwargs["proto_h"],
            model_kwargs["proto_w"],
            model_kwargs["n_max"],
        )
        actual = (state.num_prototypes, ph, pw, state.n_max)
        if actual != expect or (state.image_h, state.image_w, state.channels) != (h, w, c):
            raise InvalidArgumentError(
                f"--resume checkpoint is incompatible: model {actual} on "
                f"{(state.image_h, state.image_w, state.channels)} images vs "
                f"config {expect} on {(h, w, c)}"
            )
        steps_per_epoch = -(-n // config.batch_size)
        start_epoch = min(config.epochs, state.step // steps_per_epoch)
    else:
        mean = dataset.images.mean(axis=0) if model_kwargs["background"] else None
        state = init_model(
            p=model_kwargs["num_prototypes"],
            proto_h=model_kwargs["proto_h"],
            proto_w=model_kwargs["proto_w"],
            image_h=h,
            image_w=w,
            channels=c,
            init_value=model_kwargs["init_value"],
            train_images_mean=mean,
            n_max=model_kwargs["n_max"],
            epsilon=config.epsilon,
            seed=config.seed,
        )
        start_epoch = 0

    workers = args.threads if args.threads is not None else (os.cpu_count() or 1)
    trainer.train(
        dataset.images,
        config,
        state,
        out_dir=out,
        checkpoint_every=model_kwargs["checkpoint_every"],
        start_epoch=start_epoch,
        quiet=args.quiet,
        workers=workers,
    )
    print(f"trained {config.epochs - start_epoch} epoch(s); final state in {out}")
    return EXIT_OK


def _load_state(path) -> ModelState:
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _emit_set(raw: str) -> set[str]:
    allowed = {"recon", "objects", "labels"}
    if raw == "all":
        return set(allowed)
    if raw == "none":
        return set()
    parts = {p.strip() for p in raw.split(",") if p.strip()}
    unknown = parts - allowed
    if unknown:
        raise InvalidArgumentError(
            f"--emit: unknown parts {sorted(unknown)}; allowed: all, none, "
            f"{', '.join(sorted(allowed))}"
        )
    return parts


def cmd_decompose(args) -> int:
    state = _load_state(args.checkpoint)
    emit = _emit_set(args.emit)
    if (args.image is None) == (args.dir is None):
        raise InvalidArgumentError("pass exactly one of --image or --dir")
    if args.image:
        paths = [Path(args.image)]
    else:
        paths = sorted(Path(args.dir).glob("*.png"))
        if not paths:
            raise FileNotFoundError(f"no PNG files in {args.dir}")
    out = Path(args.out)
    write_run_manifest(
        out,
        "decompose",
        {"checkpoint": str(args.checkpoint), "emit": sorted(emit)},
        None,
        [p.stem for p in paths],
    )

    for path in paths:
        image = datagen.load_image_png(path)
        if image.shape[:2] != (state.image_h, state.image_w):
            raise InvalidArgumentError(
                f"{path}: image {image.shape[:2]} does not match checkpoint "
                f"{(state.image_h, state.image_w)}"
            )
        if state.channels == 1:
            image = image.mean(axis=2, keepdims=True)
        dec = trainer.decompose(image, state)
        record = {
            "image": str(path),
            "selected": [
                {
                    "prototype_id": c.prototype_id,
                    "dx": c.displacement.dx,
                    "dy": c.displacement.dy,
                    "score": c.displacement.score,
                    "color_scale": [float(v) for v in c.color],
                }
                for c in dec.selected
            ],
            "residual_error": dec.residual_error,
        }
        stem = path.stem
        (out / f"{stem}.json").write_text(json.dumps(record, indent=2) + "\n")
        if "recon" in emit:
            save_image_png(out / f"{stem}_recon.png", dec.composite)
        if "objects" in emit:
            for k, cand in enumerate(dec.selected):
                save_image_png(out / f"{stem}_object{k}.png", cand.template)
        if "labels" in emit:
            seg = metrics.labels_from_decomposition(dec, threshold=args.threshold)
            label_png = np.zeros(seg.instance_labels.shape + (3,), dtype=np.uint8)
            label_png[:, :, 0] = seg.instance_labels
            label_png[:, :, 1] = seg.semantic_labels
            datagen.PILImage.fromarray(label_png).save(out / f"{stem}_labels.png")
    print(f"decomposed {len(paths)} image(s) into {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    state = _load_state(args.checkpoint)
    data_dir = Path(args.data)
    if (data_dir / "test").is_dir() and not (data_dir / "manifest.jsonl").exists():
        data_dir = data_dir / "test"
    dataset = load_dataset(data_dir)
    if not dataset.labeled:
        raise InvalidArgumentError(
            f"{data_dir} has no ground-truth masks; use `pcdnet decompose` "
            "for unlabeled data"
        )
    report = metrics.evaluate_dataset(state, dataset, threshold=args.threshold)
    digest = hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest()[:12]
    report = {
        "ari_mean": report["ari_mean"],
        "ari_std": report["ari_std"],
        "n_images": report["n_images"],
        "threshold": report["threshold"],
        "checkpoint_id": digest,
        "per_image": report["per_image"],
    }
    out = Path(args.out)
    if out.suffix == ".json":
        out.parent.mkdir(parents=True, exist_ok=True)
        report_path = out
    else:
        write_run_manifest(
            out, "eval", {"checkpoint": str(args.checkpoint)}, None, ["eval_report.json"]
        )
        report_path = out / "eval_report.json"
    report_path.write_text(json.dumps(report, indent=2) + "\n")
    print(
        f"ARI {report['ari_mean']:.4f} +/- {report['ari_std']:.4f} over "
        f"{report['n_images']} images (threshold {report['threshold']})"
    )
    return EXIT_OK


def cmd_export_prototypes(args) -> int:
    state = _load_state(args.checkpoint)
    out = Path(args.out)
    write_run_manifest(
        out, "export-prototypes", {"checkpoint": str(args.checkpoint)}, None, ["sheet.png"]
    )
    ph, pw = state.proto_shape
    p = state.num_prototypes
    for i, proto in enumerate(state.prototypes):
        save_image_png(out / f"prototype_{i:02d}.png", proto.appearance)
        save_image_png(out / f"mask_{i:02d}.png", proto.alpha)

    # Contact sheet: appearances on the top row, alpha masks below.
    pad = 2
    sheet = np.full(
        ((ph + pad) * 2 + pad, (pw + pad) * p + pad), 0.25, dtype=np.float32
    )
    for i, proto in enumerate(state.prototypes):
        col = pad + i * (pw + pad)
        sheet[pad : pad + ph, col : col + pw] = proto.appearance
        sheet[2 * pad + ph : 2 * pad + 2 * ph, col : col + pw] = proto.alpha
    save_image_png(out / "sheet.png", sheet)
    print(f"exported {2 * p} prototype images + contact sheet to {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    state = _load_state(args.checkpoint)
    data_dir = _resolve_train_dir(Path(args.data))
    dataset = load_dataset(data_dir)
    images = dataset.images[: args.n_images] if args.n_images else dataset.images
    report = metrics.benchmark_throughput(
        state, images, warmup=args.warmup, repeats=args.repeats, threads=args.threads
    )
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser / entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcdnet",
        description="Layered image decomposition with phase-correlation prototype matching.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a tetromino-sprite dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=60000)
    p.add_argument("--n-test", type=int, default=320)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cell-size", type=int, default=datagen.DEFAULT_CELL_SIZE)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--threads", type=int, default=None, help="worker processes (default: logical cores)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decompose", help="decompose images with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", default=None)
    p.add_argument("--dir", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--emit", default="all", help="all, none, or comma list of recon,objects,labels")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("eval", help="foreground ARI on a labeled test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-prototypes", help="write prototype/mask PNGs and a contact sheet")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_prototypes)

    p = sub.add_parser("bench", help="decomposition throughput benchmark")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--n-images", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InvalidArgumentError, UndefinedMetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericFailureError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

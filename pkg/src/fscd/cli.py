"""``fscd`` command line: synthetic data, both training stages, evaluation and prediction.

Every command writes into its own artifact directory and starts by writing a
``manifest.json`` there. A typical chain::

    fscd synth --out data
    fscd train-stage1 --data data --out run
    fscd pseudo-gen --data data --out run
    fscd train-stage2 --data data --out run
    fscd evaluate --data data --out run --split test
    fscd predict --data data --out run --split test --render
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from fscd.datamodel import (
    AnnotatedImage,
    DatasetError,
    SyntheticSceneSpec,
    annotation_path,
    generate_synthetic,
    load_dataset,
    load_predictions,
    save_dataset,
    save_predictions,
)
from fscd.geometry import Box

log = logging.getLogger("fscd")

MANIFEST = "manifest.json"
PSEUDO_FILE = "pseudo_boxes.json"
STAGE_DIRS = {
    "train-stage1": "stage1",
    "pseudo-gen": "pseudo",
    "train-stage2": "stage2",
}


class CliError(Exception):
    """A user-facing failure; the message says what to do next."""


# ---------------------------------------------------------------- manifest


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(config: dict, inputs: Sequence[Path] = ()) -> str:
    """Hash of the canonical config plus the blob hashes of every input file."""
    lines = [json.dumps(config, sort_keys=True, default=str)]
    for p in sorted(Path(x) for x in inputs):
        lines.append(f"{p.name} {git_blob_hash(p.read_bytes())}")
    return hashlib.sha1("\n".join(lines).encode()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    content_hash: str
    started_at: str = field(default_factory=_now)
    finished_at: str | None = None
    status: str = "running"
    outputs: dict[str, str] = field(default_factory=dict)

    def write(self, directory: Path) -> None:
        (directory / MANIFEST).write_text(json.dumps(asdict(self), indent=2, default=str) + "\n")

    def finish(self, directory: Path) -> None:
        self.outputs = {
            str(p.relative_to(directory)): git_blob_hash(p.read_bytes())
            for p in sorted(directory.rglob("*"))
            if p.is_file() and p.name != MANIFEST
        }
        self.finished_at = _now()
        self.status = "complete"
        self.write(directory)

    @classmethod
    def read(cls, directory: Path) -> RunManifest:
        return cls(**json.loads((directory / MANIFEST).read_text()))


def run_subdir(args, name: str) -> Path:
    run = Path(args.out)
    if not run.parent.exists():
        raise CliError(f"parent directory does not exist: {run.parent}")
    run.mkdir(exist_ok=True)
    return prepare_dir(run / name, args.overwrite)


def prepare_dir(directory: Path, overwrite: bool) -> Path:
    if not directory.parent.exists():
        raise CliError(f"parent directory does not exist: {directory.parent}")
    if directory.exists() and any(directory.iterdir()):
        if not overwrite:
            raise CliError(f"{directory} already has outputs; pass --overwrite to replace them")
        shutil.rmtree(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


# ---------------------------------------------------------------- config


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    if p.suffix == ".toml":
        if sys.version_info >= (3, 11):
            import tomllib
        else:
            import tomli as tomllib
        return tomllib.loads(p.read_text())
    return json.loads(p.read_text())


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def train_config(cfg: dict, args, stage: int = 2):
    from fscd.losses import LossWeights
    from fscd.pipeline import TrainConfig, desk_config

    section = dict(cfg.get("train", {}))
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"--set expects key=value, got {item!r}")
        section[key] = _parse_value(value)
    if args.seed is not None:
        section["seed"] = args.seed
    profile = section.pop("profile", "desk")
    if isinstance(section.get("weights"), dict):
        section["weights"] = LossWeights(**section["weights"])
    try:
        if profile == "desk":
            return desk_config(stage, **section)
        if profile == "paper":
            return TrainConfig(**section)
    except TypeError as exc:
        raise CliError(f"bad train config: {exc}") from None
    raise CliError(f"train.profile must be 'desk' or 'paper', got {profile!r}")


def data_root(args) -> Path:
    root = args.data or os.environ.get("FSCD_DATA_ROOT")
    if not root:
        raise CliError("no dataset given: pass --data or set FSCD_DATA_ROOT")
    return Path(root)


def load_split(args, split: str, required: bool = True) -> list[AnnotatedImage]:
    root = data_root(args)
    if not annotation_path(root, split).exists():
        if required:
            raise CliError(f"{annotation_path(root, split)} not found; run `fscd synth --out {root}` or point --data at a dataset")
        return []
    return load_dataset(root, split, strict=not args.permissive)


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise CliError(f"{path} not found: run `fscd {stage}` first")
    return path


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg: dict) -> Path:
    section = dict(cfg.get("synth", {}))
    n_val = int(section.pop("val_images", 50))
    n_test = int(section.pop("test_images", 50))
    if args.seed is not None:
        section["seed"] = args.seed
    spec = SyntheticSceneSpec.from_dict(section) if section else SyntheticSceneSpec()
    out = prepare_dir(Path(args.out), args.overwrite)
    snapshot = {**spec.to_dict(), "val_images": n_val, "test_images": n_test}
    manifest = RunManifest("synth", snapshot, spec.seed, content_hash(snapshot))
    manifest.write(out)
    for offset, (split, n) in enumerate([("train", spec.num_images), ("val", n_val), ("test", n_test)]):
        sub = SyntheticSceneSpec.from_dict({**spec.to_dict(), "num_images": n, "seed": spec.seed + offset})
        save_dataset(generate_synthetic(sub, prefix=split), out, split)
        log.info("wrote %d %s images", n, split)
    manifest.finish(out)
    return out


def cmd_train_stage1(args, cfg: dict) -> Path:
    from fscd.pipeline import train_stage1

    tc = train_config(cfg, args, stage=1)
    train = load_split(args, "train")
    out = run_subdir(args, STAGE_DIRS["train-stage1"])
    inputs = [annotation_path(data_root(args), "train")]
    manifest = RunManifest("train-stage1", tc.to_dict(), tc.seed, content_hash(tc.to_dict(), inputs))
    manifest.write(out)
    res = train_stage1(train, tc, checkpoint_dir=out, progress=_progress("stage1", tc.epochs))
    (out / "losses.json").write_text(json.dumps(res.epoch_losses))
    manifest.finish(out)
    return out


def cmd_pseudo_gen(args, cfg: dict) -> Path:
    from fscd.detector import load_checkpoint
    from fscd.pipeline import generate_pseudo_boxes, pseudo_box_iou

    ckpt = _require(Path(args.out) / "stage1" / "best.ckpt", "train-stage1")
    train = load_split(args, "train")
    out = run_subdir(args, STAGE_DIRS["pseudo-gen"])
    snapshot = {"stage1_checkpoint": str(ckpt)}
    inputs = [ckpt, annotation_path(data_root(args), "train")]
    seed = args.seed if args.seed is not None else 0
    manifest = RunManifest("pseudo-gen", snapshot, seed, content_hash(snapshot, inputs))
    manifest.write(out)
    model, _ = load_checkpoint(ckpt)
    pseudo = generate_pseudo_boxes(model, train)
    doc = {p.base.image_id: [b.as_array().tolist() for b in p.pseudo_boxes] for p in pseudo}
    (out / PSEUDO_FILE).write_text(json.dumps(doc))
    if all(r.gt_boxes is not None for r in train):
        iou = pseudo_box_iou(pseudo)
        (out / "quality.json").write_text(json.dumps({"mean_iou_vs_gt": iou}))
        print(f"pseudo boxes: {sum(len(p.pseudo_boxes) for p in pseudo)} on {len(pseudo)} images, mean IoU vs GT {iou:.3f}")
    manifest.finish(out)
    return out


def load_pseudo(path: Path, train: Sequence[AnnotatedImage]):
    from fscd.pipeline import PseudoLabeledImage

    doc = json.loads(path.read_text())
    missing = [r.image_id for r in train if r.image_id not in doc]
    if missing:
        raise CliError(f"{path} has no pseudo boxes for {missing[:3]}...; rerun `fscd pseudo-gen`")
    return [PseudoLabeledImage(r, tuple(Box.from_array(b) for b in doc[r.image_id])) for r in train]


def cmd_train_stage2(args, cfg: dict) -> Path:
    from fscd.detector import load_checkpoint
    from fscd.pipeline import train_stage2

    tc = train_config(cfg, args)
    ckpt = _require(Path(args.out) / "stage1" / "best.ckpt", "train-stage1")
    pseudo_path = _require(Path(args.out) / "pseudo" / PSEUDO_FILE, "pseudo-gen")
    train = load_split(args, "train")
    val = load_split(args, "val", required=False)
    pseudo = load_pseudo(pseudo_path, train)
    out = run_subdir(args, STAGE_DIRS["train-stage2"])
    inputs = [ckpt, pseudo_path, annotation_path(data_root(args), "train")]
    manifest = RunManifest("train-stage2", tc.to_dict(), tc.seed, content_hash(tc.to_dict(), inputs))
    manifest.write(out)
    model, _ = load_checkpoint(ckpt)
    res = train_stage2(pseudo, model, tc, val_dataset=val or None, checkpoint_dir=out, progress=_progress("stage2", tc.epochs))
    (out / "losses.json").write_text(json.dumps(res.epoch_losses))
    if res.val_history:
        (out / "val_history.json").write_text(json.dumps([asdict(r) for r in res.val_history]))
    manifest.finish(out)
    return out


def _predictions_for(args, cfg, dataset, split):
    from fscd.detector import load_checkpoint
    from fscd.pipeline import predict_dataset

    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.out) / "stage2" / "best.ckpt"
    _require(ckpt, "train-stage2")
    model, meta = load_checkpoint(ckpt)
    tc = train_config(cfg, args) if (cfg.get("train") or args.set) else None
    thr = args.score_threshold
    if thr is None:
        thr = tc.score_threshold if tc else meta.get("train_config", {}).get("score_threshold", 0.5)
    return predict_dataset(model, dataset, tc, score_threshold=thr), ckpt, thr


def cmd_evaluate(args, cfg: dict) -> Path:
    from fscd.metrics import evaluate

    dataset = load_split(args, args.split)
    if any(r.gt_boxes is None for r in dataset):
        raise CliError(f"split {args.split!r} has no gt_boxes; evaluation needs GT boxes")
    out = run_subdir(args, f"eval_{args.split}")
    inputs = [annotation_path(data_root(args), args.split)]
    if args.predictions:
        inputs.append(_require(Path(args.predictions), "predict"))
    snapshot = {"split": args.split, "predictions": args.predictions, "checkpoint": args.checkpoint, "method": args.ap_method}
    manifest = RunManifest("evaluate", snapshot, args.seed or 0, content_hash(snapshot, inputs))
    manifest.write(out)
    if args.predictions:
        preds = load_predictions(args.predictions)
    else:
        preds, _, _ = _predictions_for(args, cfg, dataset, args.split)
        save_predictions(preds, out / "predictions.json")
    report = evaluate(preds, dataset, method=args.ap_method)
    (out / "report.json").write_text(report.to_json() + "\n")
    print(report.table())
    manifest.finish(out)
    return out


def render(record: AnnotatedImage, pred, path: Path, scale: int = 4) -> None:
    from PIL import Image, ImageDraw

    h, w = record.height, record.width
    img = Image.fromarray(record.image).resize((w * scale, h * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    sx, sy = w * scale, h * scale
    for b in pred.boxes:
        x1, y1, x2, y2 = b.to_corners()
        draw.rectangle([x1 * sx, y1 * sy, x2 * sx, y2 * sy], outline=(255, 40, 40), width=2)
    for b in record.exemplars:
        x1, y1, x2, y2 = b.to_corners()
        draw.rectangle([x1 * sx, y1 * sy, x2 * sx, y2 * sy], outline=(40, 120, 255), width=3)
    label = f"count {pred.count}" + (f" / gt {record.count}" if len(record.dots) else "")
    draw.rectangle([0, 0, 8 * len(label) + 8, 16], fill=(0, 0, 0))
    draw.text((4, 2), label, fill=(255, 255, 255))
    img.save(path)


def cmd_predict(args, cfg: dict) -> Path:
    dataset = load_split(args, args.split)
    out = run_subdir(args, f"predict_{args.split}")
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.out) / "stage2" / "best.ckpt"
    _require(ckpt, "train-stage2")
    snapshot = {"split": args.split, "checkpoint": str(ckpt), "render": args.render, "score_threshold": args.score_threshold}
    inputs = [ckpt, annotation_path(data_root(args), args.split)]
    manifest = RunManifest("predict", snapshot, args.seed or 0, content_hash(snapshot, inputs))
    manifest.write(out)
    preds, _, thr = _predictions_for(args, cfg, dataset, args.split)
    save_predictions(preds, out / "predictions.json")
    if args.render:
        (out / "renders").mkdir()
        for rec, pred in zip(dataset, preds):
            render(rec, pred, out / "renders" / f"{rec.image_id}.png")
    total = sum(p.count for p in preds)
    print(f"{len(preds)} images, {total} detections at score > {thr}")
    manifest.finish(out)
    return out


def _progress(stage: str, epochs: int):
    def report(epoch: int, loss: float) -> None:
        print(f"{stage} epoch {epoch + 1}/{epochs} loss {loss:.4f}", flush=True)

    return report


# ---------------------------------------------------------------- entry point

COMMANDS = {
    "synth": (cmd_synth, "render a synthetic crowded-scene dataset (train/val/test)"),
    "train-stage1": (cmd_train_stage1, "train on exemplar boxes with their centers as queries"),
    "pseudo-gen": (cmd_pseudo_gen, "predict one pseudo box per dot on the training split"),
    "train-stage2": (cmd_train_stage2, "fine-tune on pseudo boxes with anchor queries"),
    "evaluate": (cmd_evaluate, "count and detect on a split and print the metric table"),
    "predict": (cmd_predict, "write predictions (and optional renders) for a split"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or TOML file with [synth] and [train] sections")
    common.add_argument("--seed", type=int, help="overrides the seed in the config")
    common.add_argument("--out", required=True, help="dataset directory for synth, run directory otherwise")
    common.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset root (default: $FSCD_DATA_ROOT)")
    data.add_argument("--permissive", action="store_true", help="accept 1..K exemplars per image")
    data.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a train config field")

    infer = argparse.ArgumentParser(add_help=False)
    infer.add_argument("--split", default="val", choices=["train", "val", "test"])
    infer.add_argument("--checkpoint", help="default: <out>/stage2/best.ckpt")
    infer.add_argument("--score-threshold", type=float)

    parser = argparse.ArgumentParser(prog="fscd", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        parents = [common] if name == "synth" else [common, data]
        if name in ("evaluate", "predict"):
            parents.append(infer)
        p = sub.add_parser(name, parents=parents, help=help_text)
        if name == "evaluate":
            p.add_argument("--predictions", help="evaluate an existing predictions file instead of a checkpoint")
            p.add_argument("--ap-method", default="area", choices=["area", "coco101"])
        if name == "predict":
            p.add_argument("--render", action="store_true", help="also write PNGs with boxes and counts")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = COMMANDS[args.command][0]
    from fscd.pipeline import PipelineError

    try:
        out = handler(args, load_config(args.config))
    except (CliError, DatasetError, PipelineError, FileNotFoundError, ValueError) as exc:
        print(f"fscd {args.command}: error: {exc}", file=sys.stderr)
        return 1
    log.info("outputs in %s", out)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: synth, train, infer, shift, eval, report, params,
config-dump.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import data as data_mod
from . import pipeline as pipe
from .codespace import HyperParams, prebuild_inference_codes
from .config import TrainConfig, dump_config, load_train_config
from .data import (
    DatasetManifest,
    ManifestRecord,
    ShiftLevel,
    SynthSpec,
    apply_shift,
    preprocess,
    read_manifest,
    render_raster,
    synthesize_dataset,
    write_manifest,
)
from .errors import AdasegError, ConfigError, DataError
from .networks import NetConfig, build_models, count_parameters
from .training import load_checkpoint, run_schedule


def _load_config(path: str | None) -> TrainConfig:
    if path is None:
        return TrainConfig(hp=HyperParams(), net=NetConfig())
    return load_train_config(Path(path))


def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    spec = cfg.synth or SynthSpec(size=cfg.net.image_size, seed=cfg.hp.seed)
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(args.out)
    train_manifest, eval_manifest = synthesize_dataset(spec, out)
    print(f"wrote {len(train_manifest.records)} records under {out}")
    print(f"manifests: {out / 'manifest.txt'}, {out / 'manifest_eval.txt'}")
    return 0


def cmd_train(args) -> int:
    cfg = load_train_config(Path(args.config))
    if cfg.manifest is None or cfg.manifest_eval is None:
        raise ConfigError("training config must set manifest and manifest_eval")
    registry = data_mod.build_registry(read_manifest(cfg.manifest),
                                       read_manifest(cfg.manifest_eval),
                                       cfg.net.image_size)
    result = run_schedule(cfg.hp, cfg.net, registry, cfg.out_dir,
                          joint_tasks=cfg.joint_tasks, resume=args.resume)
    print(f"final checkpoint: {result.final_path}")
    print(f"best checkpoint:  {result.best_path}")
    for key, value in result.summary.items():
        print(f"{key} = {value}")
    return 0


def _prepare_inference(checkpoint: str, prebuild_seed: int):
    loaded = load_checkpoint(Path(checkpoint))
    codes = loaded.prebuilt
    if codes is None:
        codes = prebuild_inference_codes(loaded.state.models,
                                         loaded.state.hp.prebuild_samples,
                                         prebuild_seed)
    return loaded, codes


def cmd_infer(args) -> int:
    loaded, codes = _prepare_inference(args.checkpoint, args.prebuild_seed)
    gen = loaded.state.models.generator
    manifest = read_manifest(Path(args.manifest))
    if args.split:
        manifest = manifest.select(split=args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.save_adapted:
        (out / "adapted").mkdir(exist_ok=True)
    size = loaded.net_cfg.image_size
    for rec in manifest.records:
        image, _ = data_mod.load_record(rec, manifest.depth, size)
        if args.path == "adapt":
            mask, adapted = pipe.segment_via_adaptation(gen, codes, image,
                                                        return_adapted=True)
            if args.save_adapted:
                Image.fromarray(render_raster(adapted, 8)).save(
                    out / "adapted" / f"{rec.image_path.stem}.png")
        else:
            mask = pipe.segment_direct(gen, codes, image, code_choice=args.code)
        if not args.no_postprocess:
            mask = pipe.postprocess(mask)
        raster = (mask.mask.astype(np.uint8)) * 255
        Image.fromarray(raster).save(out / f"{rec.image_path.stem}.png")
    print(f"wrote {len(manifest.records)} masks to {out}")
    return 0


def cmd_shift(args) -> int:
    manifest = read_manifest(Path(args.manifest))
    level = ShiftLevel.from_str(args.level)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = torch.Generator().manual_seed(args.seed)
    records = []
    for rec in manifest.records:
        raw = data_mod._load_raster(rec.image_path)
        image = preprocess(raw, manifest.depth, raw.shape)
        shifted = apply_shift(image, level, rng)
        path = out / "images" / rec.image_path.name
        Image.fromarray(render_raster(shifted, manifest.depth)).save(path)
        records.append(ManifestRecord(path, rec.mask_path, rec.domain, rec.split))
    shifted_manifest = DatasetManifest(records, manifest.depth)
    write_manifest(shifted_manifest, out / "manifest.txt")
    print(f"wrote {len(records)} {level.label}-shifted images to {out}")
    return 0


def cmd_eval(args) -> int:
    manifest = read_manifest(Path(args.manifest))
    if args.split:
        manifest = manifest.select(split=args.split)
    pred_dir = Path(args.pred)
    rows = []
    for rec in manifest.records:
        if rec.mask_path is None:
            continue
        pred_path = pred_dir / f"{rec.image_path.stem}.png"
        if not pred_path.exists():
            raise DataError(f"missing prediction for record {rec.image_path.stem}")
        pred = pipe.BinaryMask(data_mod._load_raster(pred_path) > 127,
                               provenance="external")
        image, mask = data_mod.load_record(rec, manifest.depth, args.size)
        gt = pipe.BinaryMask(mask[1].numpy() > 0.5)
        if pred.mask.shape != gt.mask.shape:
            raise DataError(f"prediction size mismatch for {rec.image_path.stem}")
        row = pipe.ReportRow(id=rec.image_path.stem, domain=rec.domain.value,
                             shift=args.shift, dice=pipe.dice(pred, gt))
        if args.with_tpr:
            row.tpr = pipe.tpr(pred, gt)
        if pred.mask.any():
            mean, (q25, q50, q75) = pipe.lung_intensity_stats(image, pred)
            row.intensity_mean, row.intensity_q25 = mean, q25
            row.intensity_q50, row.intensity_q75 = q50, q75
        rows.append(row)
    if not rows:
        raise DataError("no labeled records to evaluate")
    groups = pipe.emit_report(rows, Path(args.out))
    for key, entry in groups.items():
        if "dice_mean" in entry:
            print(f"{key}: dice {entry['dice_mean']:.4f} +/- {entry['dice_std']:.4f} "
                  f"(n={entry['n']})")
    return 0


def cmd_report(args) -> int:
    rows = pipe.read_rows(Path(args.rows))
    pipe.emit_report(rows, Path(args.out))
    print(f"report written to {args.out}")
    return 0


def cmd_params(args) -> int:
    if args.checkpoint:
        loaded = load_checkpoint(Path(args.checkpoint))
        models = loaded.state.models
    else:
        cfg = _load_config(args.config)
        models = build_models(cfg.net, cfg.hp.seed)
    total = 0
    print(f"{'module':<16}{'parameters':>14}")
    for name, module in models.named_modules():
        n = count_parameters(module)
        total += n
        print(f"{name:<16}{n:>14,}")
    print(f"{'total':<16}{total:>14,}")
    return 0


def cmd_config_dump(args) -> int:
    cfg = _load_config(args.config)
    sys.stdout.write(dump_config(cfg))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaseg")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the synthetic two-domain dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the training schedule from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment a manifest with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--path", choices=("direct", "adapt"), default="direct")
    p.add_argument("--code", choices=("self", "seg"), default="self")
    p.add_argument("--no-postprocess", action="store_true")
    p.add_argument("--save-adapted", action="store_true",
                   help="with --path adapt, also write the intermediate images")
    p.add_argument("--split", default=None)
    p.add_argument("--prebuild-seed", type=int, default=4242)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("shift", help="apply a distribution-shift level to a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--level", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_shift)

    p = sub.add_parser("eval", help="score predicted masks against a labeled manifest")
    p.add_argument("--pred", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--shift", default="none")
    p.add_argument("--split", default=None)
    p.add_argument("--with-tpr", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="regenerate tables and plots from a row table")
    p.add_argument("--rows", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("params", help="parameter count per module")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("config-dump", help="print effective configuration values")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_config_dump)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AdasegError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

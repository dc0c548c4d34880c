"""Command-line entry point: ``stdaseg {tile,synth,train,eval,inspect}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.

Training configuration is layered. Built-in defaults are overridden by the
file named in ``$STDASEG_CONFIG``, then by ``--config``, then by explicit
flags (``--max-iters``, ``--seed``, ``--set key=value`` ...). Every command
writes a snapshot of its effective settings next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import Checkpoint, CheckpointError
from .data import (
    IMAGE_SUFFIXES,
    ISPRS_CLASSES,
    ISPRS_PALETTE,
    DatasetError,
    RawTile,
    ShiftSpec,
    crop_tile,
    decode_label,
    encode_label,
    normalize,
    read_image,
    scan_dataset,
    synth_dataset,
    write_dataset,
    write_image,
)
from .losses import NonFiniteLossError
from .train import CONFIG_ENV, TrainConfig, TrainState, evaluate, fit

log = logging.getLogger("stdaseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _snapshot(path: Path, command: str, args: argparse.Namespace, **extra) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    skip = {"func", "verbose"}
    body = {"command": command, "version": __version__}
    body["args"] = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in skip}
    body.update(extra)
    path.write_text(json.dumps(body, indent=2, sort_keys=True))


def _load_palette(spec, meta: dict | None):
    """``--palette`` is ``isprs`` or a JSON file with ``class_names`` and ``palette``."""
    if spec is None:
        if meta is None:
            raise DatasetError("no meta.json in the input directory and no --palette given")
        return list(meta["class_names"]), [tuple(c) for c in meta["palette"]]
    if spec == "isprs":
        return list(ISPRS_CLASSES), list(ISPRS_PALETTE)
    path = Path(spec)
    if not path.exists():
        raise UsageError(f"--palette: {path} not found")
    d = json.loads(path.read_text())
    palette = [tuple(c) for c in d["palette"]]
    names = d.get("class_names") or [f"class_{i}" for i in range(len(palette))]
    return list(names), palette


# --------------------------------------------------------------------------- tile


def cmd_tile(args) -> int:
    src, out = Path(args.input_dir), Path(args.output_dir)
    img_dir = src / "images" if (src / "images").is_dir() else src
    if not img_dir.is_dir():
        raise DatasetError(f"{src} is not a directory")
    images = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise DatasetError(f"no tiles found in {img_dir}")
    meta_path = src / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else None
    names, palette = _load_palette(args.palette, meta)

    out.mkdir(parents=True, exist_ok=True)
    patches, per_tile = [], {}
    labeled_any = False
    for img_path in images:
        tile_id = img_path.stem
        pixels = read_image(img_path)
        label_path = src / "labels" / f"{tile_id}.png"
        label = encode_label(read_image(label_path), palette) if label_path.exists() else None
        try:
            tile = RawTile(pixels, label, tile_id)
            crops = crop_tile(tile, args.patch_size, args.stride)
        except (DatasetError, ValueError) as exc:
            culprit = label_path if label is not None else img_path
            raise DatasetError(f"{culprit}: {exc}") from None
        per_tile[tile_id] = len(crops)
        for p in crops:
            _, r, c = p.origin
            pid = f"{tile_id}_{r:05d}_{c:05d}"
            entry = {"id": pid, "tile_id": tile_id, "row": r, "col": c}
            if not args.manifest_only:
                write_image(out / "images" / f"{pid}.png", p.pixels)
                entry["image"] = f"images/{pid}.png"
                if label is not None:
                    labeled_any = True
                    write_image(out / "labels" / f"{pid}.png", decode_label(p.label, palette))
                    entry["label"] = f"labels/{pid}.png"
            patches.append(entry)
        log.info("%s: %d patches", tile_id, len(crops))

    manifest = {
        "patch_size": args.patch_size,
        "stride": args.stride,
        "class_names": names,
        "palette": [list(c) for c in palette],
        "tiles": per_tile,
        "num_patches": len(patches),
        "patches": patches,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if not args.manifest_only:
        # the patch directory is itself a dataset with one patch per tile
        meta_out = {"class_names": names, "palette": [list(c) for c in palette],
                    "splits": {"all": [p["id"] for p in patches]},
                    "labels_eval_only": bool(meta and meta.get("labels_eval_only"))}
        (out / "meta.json").write_text(json.dumps(meta_out, indent=2, sort_keys=True))
    _snapshot(out / "run_config.json", "tile", args)
    print(f"{len(patches)} patches from {len(per_tile)} tiles -> {out / 'manifest.json'}")
    if not labeled_any and not args.manifest_only:
        log.info("no label images found; patches are unlabeled")
    return EXIT_OK


# --------------------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    try:
        shift = ShiftSpec.parse(args.shift)
    except ValueError as exc:
        raise UsageError(f"--shift: {exc}") from None
    src, tgt = synth_dataset(args.seed, args.n_tiles, shift, args.tile_size, args.tile_size, args.tile_size, args.num_classes)
    out = Path(args.out)
    write_dataset(out / "source", list(src.tiles.values()), src.class_names, src.palette)
    write_dataset(out / "target", list(tgt.tiles.values()), tgt.class_names, tgt.palette, labels_eval_only=True)
    _snapshot(out / "run_config.json", "synth", args)
    print(f"wrote {args.n_tiles} source and target tiles under {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- train


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _canonical(d: dict) -> dict:
    # "lambda" in files, "lam" as attribute; either spelling is accepted
    return {("lam" if k == "lambda" else k): v for k, v in d.items()}


def resolve_config(args) -> TrainConfig:
    """Defaults < $STDASEG_CONFIG < --config < flags."""
    d = _canonical(TrainConfig().to_dict())
    for source in (os.environ.get(CONFIG_ENV), getattr(args, "config", None)):
        if source:
            path = Path(source)
            if not path.exists():
                raise UsageError(f"config file {path} not found")
            try:
                d.update(_canonical(json.loads(path.read_text())))
            except json.JSONDecodeError as exc:
                raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    flag_map = {"max_iters": "max_iters", "seed": "seed", "batch_size": "batch_size", "patch_size": "patch_size",
                "checkpoint_interval": "checkpoint_interval", "paradigm": "paradigm"}
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            d[key] = v
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        d.update(_canonical({key.strip(): _parse_value(value)}))
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    stride = args.stride or cfg.patch_size
    source = scan_dataset(args.source, cfg.patch_size, stride, split=args.source_split, domain="source")
    target = scan_dataset(args.target, cfg.patch_size, stride, split=args.target_split, domain="target", check_labels=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(out / "run_config.json", "train", args, config=cfg.to_dict())
    ckpt = fit(cfg, source, target, out_dir=out, resume=args.resume)
    last = ckpt.meta["history"][-1] if ckpt.meta["history"] else {}
    print(f"trained {ckpt.meta['step']} steps; final combined loss {last.get('combined', float('nan')):.4f}; checkpoint {out / 'final.bin'}")
    return EXIT_OK


# --------------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    cfg = TrainConfig.from_dict(ckpt.meta["config"])
    patch = args.patch_size or cfg.patch_size
    manifest = scan_dataset(args.data, patch, args.stride or patch, split=args.split, domain="target")
    if not manifest.has_labels:
        raise DatasetError(f"{args.data} has no label images to evaluate against")
    report = evaluate(ckpt, manifest, batch_size=args.batch_size, vote=args.vote)
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json())
    table = report.to_table()
    path.with_suffix(".txt").write_text(table + "\n")
    _snapshot(path.with_name(path.stem + ".run_config.json"), "eval", args, config=cfg.to_dict())
    print(table)
    return EXIT_OK


# --------------------------------------------------------------------------- inspect


def _to_gray(fmap: torch.Tensor) -> np.ndarray:
    """Channel-wise average, min-max stretched to 8 bits."""
    avg = fmap.mean(dim=0).double().numpy()
    lo, hi = avg.min(), avg.max()
    scaled = np.zeros_like(avg) if hi - lo < 1e-12 else (avg - lo) / (hi - lo)
    return np.rint(scaled * 255).astype(np.uint8)


@torch.no_grad()
def cmd_inspect(args) -> int:
    state = TrainState.from_checkpoint(Checkpoint.load(args.checkpoint))
    ens = state.ensemble.eval()
    dtype = next(ens.parameters()).dtype
    out = Path(args.dump_features)
    out.mkdir(parents=True, exist_ok=True)
    s = ens.downsample
    written = []
    for img_path in args.image:
        img_path = Path(img_path)
        if not img_path.exists():
            raise DatasetError(f"{img_path} not found")
        pixels = read_image(img_path)
        h, w = (pixels.shape[1] // s) * s, (pixels.shape[2] // s) * s
        if h == 0 or w == 0:
            raise DatasetError(f"{img_path}: image smaller than the backbone stride {s}")
        x = torch.from_numpy(normalize(pixels[:, :h, :w]))[None].to(dtype)
        f_s, f_t = ens.backbone_s(x), ens.backbone_t(x)
        d_s, d_t = ens.disentangle(f_s, f_t)
        maps = {"F_S-t": f_s, "F_T-t": f_t, "Fd_S-t": d_s, "Fd_T-t": d_t}
        for name, fmap in maps.items():
            gray = _to_gray(fmap[0])
            dest = out / f"{img_path.stem}_{name}.png"
            write_image(dest, np.repeat(gray[None], 3, axis=0))
            written.append(dest.name)
    _snapshot(out / "run_config.json", "inspect", args, files=written)
    print(f"wrote {len(written)} feature images to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stdaseg", description="Dual-student domain adaptation for aerial image segmentation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("tile", help="crop large tiles into fixed-size patches")
    t.add_argument("--input-dir", required=True, help="directory with images/ (and labels/, meta.json) or bare images")
    t.add_argument("--output-dir", required=True, help="where patches and manifest.json are written")
    t.add_argument("--patch-size", type=int, required=True)
    t.add_argument("--stride", type=int, required=True)
    t.add_argument("--palette", default=None, help="'isprs' or a JSON file with class_names and palette (default: meta.json)")
    t.add_argument("--manifest-only", action="store_true", help="write manifest.json without patch images")
    t.set_defaults(func=cmd_tile)

    s = sub.add_parser("synth", help="write a synthetic source/target dataset pair")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--shift", default="perm:2,0,1", help="identity | perm:a,b,c | scale:f | perm:a,b,c+scale:f")
    s.add_argument("--n-tiles", type=int, default=8)
    s.add_argument("--tile-size", type=int, default=128)
    s.add_argument("--num-classes", type=int, default=6)
    s.set_defaults(func=cmd_synth)

    tr = sub.add_parser("train", help="train the dual-student ensemble")
    tr.add_argument("--config", default=None, help=f"JSON config file (default from ${CONFIG_ENV})")
    tr.add_argument("--source", required=True, help="labelled source dataset directory")
    tr.add_argument("--target", required=True, help="target dataset directory (labels unused)")
    tr.add_argument("--out", required=True, help="output directory for log, checkpoints and config snapshot")
    tr.add_argument("--source-split", default=None)
    tr.add_argument("--target-split", default=None)
    tr.add_argument("--stride", type=int, default=None, help="patch stride (default: patch size)")
    tr.add_argument("--resume", default=None, help="checkpoint to continue from")
    tr.add_argument("--max-iters", type=int, default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--batch-size", type=int, default=None)
    tr.add_argument("--patch-size", type=int, default=None)
    tr.add_argument("--checkpoint-interval", type=int, default=None)
    tr.add_argument("--paradigm", choices=("decoder_only", "single_target"), default=None)
    tr.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key; repeatable")
    tr.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a labelled dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="JSON report path; a .txt table is written beside it")
    e.add_argument("--split", default=None)
    e.add_argument("--patch-size", type=int, default=None)
    e.add_argument("--stride", type=int, default=None)
    e.add_argument("--batch-size", type=int, default=8)
    e.add_argument("--vote", choices=("prob", "logit"), default=None)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="dump channel-averaged feature maps for target images")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True, action="append", help="input image; repeatable")
    i.add_argument("--dump-features", required=True, help="output directory for the feature images")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"stdaseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, FileNotFoundError) as exc:
        print(f"stdaseg {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, CheckpointError, RuntimeError, ValueError) as exc:
        print(f"stdaseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

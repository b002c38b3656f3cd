"""Command line: ``regattn {train,translate,evaluate,make-toy-data}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import config as config_mod
from .checkpoint import load_translator
from .data import (DomainDataset, ToySpec, denormalize, gen_toy, list_images, load_masks,
                   normalize, read_image)
from .errors import ConfigError, DataError, RegAttnError
from .evaluation import (InceptionEmbedder, MetricReport, adapt_classify, attention_iou,
                         fid_from_images, map_accuracy, write_report)
from .models import composite
from .training import TrainStage, run_schedule

log = logging.getLogger("regattn")


def _add_common(p):
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, e.g. schedule.g0_iters=500 (repeatable)")
    p.add_argument("--seed", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="regattn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the three-stage schedule")
    _add_common(p)
    p.add_argument("--output-dir")
    p.add_argument("--resume", help="stage-boundary checkpoint to continue from")
    p.add_argument("--toy", action="store_true", help="start from the CPU-sized toy defaults")

    p = sub.add_parser("translate", help="translate a folder of images with a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("input_dir")
    p.add_argument("out_dir")
    p.add_argument("--export-attention", action="store_true",
                   help="also write attention maps (16-bit PNG) and raw G0 outputs")

    p = sub.add_parser("evaluate", help="compute a metric and append it to a JSON-lines report")
    p.add_argument("kind", choices=["map", "fid", "adapt", "attn-iou"])
    p.add_argument("--pred", help="map: predicted maps dir; fid: generated images dir")
    p.add_argument("--gt", help="map: ground-truth dir; fid: target domain dir")
    p.add_argument("--rule", choices=["sum", "max"], default="sum")
    p.add_argument("--tol", type=int, default=12)
    p.add_argument("--checkpoint", help="translator checkpoint (adapt, attn-iou)")
    p.add_argument("--source", help="adapt: labelled source dir with one subdir per class")
    p.add_argument("--target", help="adapt: labelled target test dir")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--images", help="attn-iou: domain X images")
    p.add_argument("--masks", help="attn-iou: ground-truth masks")
    p.add_argument("--thresh", type=float, default=0.5)
    p.add_argument("--image-size", type=int)
    p.add_argument("--random-embedding", action="store_true",
                   help="fid: use a randomly initialised Inception (identity checks only)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default="reports.jsonl")
    p.add_argument("--config-hash", default="", help="hash recorded for directory-only metrics")

    p = sub.add_parser("make-toy-data", help="write the synthetic two-domain benchmark")
    p.add_argument("out_dir")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-stripes", action="store_true")
    p.add_argument("--shape", choices=["ellipse", "rect", "mixed"], default="mixed")
    p.add_argument("--overwrite", action="store_true")
    return parser


def cmd_train(args):
    base = config_mod.toy_config() if args.toy else None
    cfg = config_mod.load_config(args.config, args.override, args.seed, base=base)
    if args.output_dir:
        cfg["output_dir"] = args.output_dir
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    config_mod.dump_toml(cfg, out / "config.toml")

    def progress(tr):
        if tr.stage_iter % 100 == 0:
            r = tr.rows[-1]
            log.info("%s %d adv %.3f reg %.4f d %.3f lambda %.3f", r["stage"], r["stage_iter"] + 1,
                     r["adv"], r["reg"], r["d_loss"], r["lambda"])

    trainer = run_schedule(cfg, out, resume=args.resume, progress=progress)
    print(json.dumps({"config_hash": trainer.config_hash, "manifest": str(out / "manifest.json"),
                      "stages": [s.value for s in trainer.stages_run]}))
    return 0


def _save_attention(a, path):
    arr = np.round(a.detach().double().squeeze().numpy() * 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def cmd_translate(args):
    g0, attn, stage, header = load_translator(args.checkpoint)
    if args.export_attention and stage == TrainStage.G0_ONLY:
        raise ConfigError(f"{args.checkpoint} is a G0_ONLY checkpoint; it has no trained attention "
                          "branch to export")
    size = header["config"]["data"]["image_size"]
    files = list_images(args.input_dir)
    if not files:
        raise DataError(f"no images in {args.input_dir}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.export_attention:
        (out / "attention").mkdir(exist_ok=True)
        (out / "g0").mkdir(exist_ok=True)
    with torch.no_grad():
        for path in files:
            x = normalize(read_image(path, size)).unsqueeze(0)
            g = g0(x)
            if stage == TrainStage.G0_ONLY:
                final, a = g, None
            else:
                a = attn(x)
                final = composite(x, g, a)
            Image.fromarray(denormalize(final[0])).save(out / path.name)
            if args.export_attention:
                _save_attention(a[0], out / "attention" / (path.stem + ".png"))
                Image.fromarray(denormalize(g[0])).save(out / "g0" / (path.stem + ".png"))
    (out / "translate.json").write_text(json.dumps({
        "checkpoint": str(args.checkpoint), "config_hash": header["config_hash"],
        "stage": stage.value, "count": len(files)}))
    print(f"translated {len(files)} images with {stage.value} checkpoint", file=sys.stderr)
    return 0


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise ConfigError(f"evaluate {args.kind}: missing --{', --'.join(m.replace('_', '-') for m in missing)}")


def _load_dir(path, size=None):
    files = list_images(path)
    if not files:
        raise DataError(f"no images in {path}")
    return files, [read_image(p, size) for p in files]


def _labelled(root, size):
    root = Path(root)
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not classes:
        raise DataError(f"{root} has no class subdirectories")
    imgs, labels = [], []
    for i, c in enumerate(classes):
        for p in list_images(root / c):
            imgs.append(read_image(p, size))
            labels.append(i)
    return normalize(np.stack(imgs)), np.array(labels), classes


def cmd_evaluate(args):
    cfg_hash = args.config_hash
    if args.kind == "map":
        _require(args, "pred", "gt")
        pf, pred = _load_dir(args.pred)
        gf, gt = _load_dir(args.gt)
        if [p.name for p in pf] != [g.name for g in gf]:
            raise DataError("prediction and ground-truth filenames differ")
        value = map_accuracy(pred, gt, tol=args.tol, rule=args.rule)
        report = MetricReport("map_accuracy", value, len(pred), cfg_hash,
                              extra={"rule": args.rule, "tol": args.tol})
    elif args.kind == "fid":
        _require(args, "pred", "gt")
        size = args.image_size
        a = normalize(np.stack(_load_dir(args.pred, size)[1]))
        b = normalize(np.stack(_load_dir(args.gt, size)[1]))
        embedder = InceptionEmbedder(pretrained=not args.random_embedding)
        value = fid_from_images(a, b, embedder)
        report = MetricReport("fid", value, len(a) + len(b), cfg_hash,
                              extra={"embedding": "fid-inception-v3" if embedder.pretrained
                                     else "inception-v3-random-init"})
    elif args.kind == "adapt":
        _require(args, "source", "target")
        size = args.image_size or 32
        translator, stage = None, None
        if args.checkpoint:
            g0, attn, stage, header = load_translator(args.checkpoint)
            cfg_hash = header["config_hash"]
            size = args.image_size or header["config"]["data"]["image_size"]

            def translator(x):
                g = g0(x)
                return g if stage == TrainStage.G0_ONLY else composite(x, g, attn(x))
        sx, sy, classes = _labelled(args.source, size)
        tx, ty, tclasses = _labelled(args.target, size)
        if classes != tclasses:
            raise DataError(f"source classes {classes} differ from target classes {tclasses}")
        value = adapt_classify(translator, (sx, sy), (tx, ty), n_classes=len(classes),
                               epochs=args.epochs, seed=args.seed)
        report = MetricReport("adapt_accuracy", value, len(tx), cfg_hash,
                              extra={"translated": translator is not None})
    else:
        _require(args, "checkpoint", "images", "masks")
        g0, attn, stage, header = load_translator(args.checkpoint)
        if stage == TrainStage.G0_ONLY:
            raise ConfigError("attn-iou needs a checkpoint with a trained attention branch")
        cfg_hash = header["config_hash"]
        ds = DomainDataset(args.images, "X", header["config"]["data"]["image_size"])
        masks = load_masks(args.masks, ds.names())
        with torch.no_grad():
            a = attn(ds.load_all())
        if masks.shape[1:] != tuple(a.shape[2:]):
            raise DataError(f"masks {masks.shape[1:]} do not match attention {tuple(a.shape[2:])}")
        ious = [attention_iou(a[i], masks[i], args.thresh) for i in range(len(a))]
        report = MetricReport("attention_iou", float(np.mean(ious)), len(ious), cfg_hash,
                              extra={"thresh": args.thresh})
    write_report(report, args.report)
    print(report.to_json())
    return 0


def cmd_make_toy_data(args):
    spec = ToySpec(canvas=args.canvas, count=args.count, seed=args.seed,
                   stripes=not args.no_stripes, shape=args.shape)
    ds_x, ds_y, masks = gen_toy(spec, args.out_dir, overwrite=args.overwrite)
    print(json.dumps({"X": str(ds_x.root), "Y": str(ds_y.root), "masks": str(masks),
                      "count": spec.count}))
    return 0


COMMANDS = {"train": cmd_train, "translate": cmd_translate, "evaluate": cmd_evaluate,
            "make-toy-data": cmd_make_toy_data}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except RegAttnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

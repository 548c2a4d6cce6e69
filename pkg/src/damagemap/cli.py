"""Command-line entry point: ``damagemap <command> ...``.

Every command exits 0 on success. On failure it prints a single
``error: <Kind>: <message>`` line to stderr and exits 1.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import assess, data, metrics, saliency
from .network import (PRESETS, TrainConfig, build_network, fine_tune, predict, preset_config)
from .tensor import bilinear_resize
from .weights import load_weights, read_tensors, save_weights, write_tensors

log = logging.getLogger("damagemap")


def _config(args, num_classes=None):
    size = args.image_size
    if size is None:
        size = 64 if args.preset == "tiny" else 224
    return preset_config(args.preset, (3, size, size), num_classes)


def _load_net(args):
    num_classes = None
    if args.preset == "tiny":
        # the tiny head follows the label set, so read its width from the file
        num_classes = read_tensors(args.weights).get("out.bias", np.zeros(2)).shape[0]
    return load_weights(args.weights, _config(args, num_classes))


def _input_size(net):
    return net.config.input_shape[1:]


def _prepare(net, path):
    """(raw [0,1] tensor, network input) for one image."""
    raw = data.load_image(path)
    return raw, data.preprocess(raw, _input_size(net))


def _map_for(net, raw, x, fraction):
    grid, _ = saliency.damage_detection_map(net, x)
    full = bilinear_resize(grid, raw.shape[1], raw.shape[2])
    return grid, full, saliency.binary_mask(full, fraction)


# -- commands --------------------------------------------------------------------

def cmd_synth(args):
    spec = data.SyntheticSpec(count=args.count, size=args.size, seed=args.seed,
                              damage_fraction=args.damage_fraction)
    manifest = data.generate_synthetic(args.out, spec)
    print(manifest)


def cmd_train(args):
    entries = data.load_manifest(args.manifest, merge_labels=args.merge_labels)
    num_classes = 2 if entries[0].label in data.BINARY_LABELS else 3
    cfg = _config(args, num_classes if args.preset == "tiny" else None)
    if cfg.num_classes != num_classes:
        raise ValueError(f"preset {args.preset} has {cfg.num_classes} classes but labels imply {num_classes}")
    train, test = data.split(entries, data.SplitSpec(args.train_fraction, args.seed, not args.no_stratify))
    if args.split_dir:
        split_dir = Path(args.split_dir)
        split_dir.mkdir(parents=True, exist_ok=True)
        data.write_manifest(split_dir / "train.csv", train, labels="original")
        data.write_manifest(split_dir / "test.csv", test, labels="original")
    size = cfg.input_shape[1:]
    x = data.load_batch(train, size)
    y = [data.class_index(e.label, num_classes) for e in train]
    if args.init_weights:
        net = load_weights(args.init_weights, cfg)
    else:
        net = build_network(cfg, seed=args.seed)
    tc = TrainConfig(args.lr, args.batch, args.epochs, args.seed, not args.no_dropout, args.freeze_conv)

    def progress(epoch, report):
        print(f"epoch {epoch + 1} loss {report.losses[-1]:.6f} train_acc {report.accuracies[-1]:.4f}",
              flush=True)

    report = fine_tune(net, x, y, tc, progress=progress)
    save_weights(net, args.out)
    summary = {"seed": report.seed, "losses": report.losses, "train_accuracy": report.accuracies,
               "train_size": len(train), "test_size": len(test)}
    if test:
        xt = data.load_batch(test, size)
        yt = np.array([data.class_index(e.label, num_classes) for e in test])
        summary["test_accuracy"] = float(np.mean(predict(net, xt).argmax(axis=1) == yt))
        print(f"test_acc {summary['test_accuracy']:.4f}")
    if args.report:
        Path(args.report).write_text(json.dumps(summary, indent=2) + "\n")


def cmd_predict(args):
    net = _load_net(args)
    k = net.config.num_classes
    print("image," + ",".join(data.class_label(i, k) for i in range(k)) + ",predicted")
    for path in args.images:
        probs = predict(net, _prepare(net, path)[1])
        print(f"{path}," + ",".join(f"{p:.6f}" for p in probs) + f",{data.class_label(int(probs.argmax()), k)}")


def cmd_map(args):
    net = _load_net(args)
    raw, x = _prepare(net, args.image)
    grid, full, mask = _map_for(net, raw, x, args.fraction)
    data.write_image(args.out, saliency.render_heatmap(full, data.to_pixels(raw)))
    if args.mask_out:
        data.write_mask(args.mask_out, mask)
    if args.grid_out:
        write_tensors(args.grid_out, {"saliency_grid": grid})
    print(f"dav {assess.dav(grid):.6f}")


def cmd_mask(args):
    net = _load_net(args)
    raw, x = _prepare(net, args.image)
    _, _, mask = _map_for(net, raw, x, args.fraction)
    data.write_mask(args.out, mask)
    print(f"damage_pixels {int(np.count_nonzero(mask))}")


def cmd_dav(args):
    net = _load_net(args)
    entries = data.load_manifest(args.manifest, merge_labels=args.merge_labels)
    x = data.load_batch(entries, _input_size(net))
    grids = saliency.batch_detection_maps(net, x)
    records = [assess.DavRecord(e.path.stem, assess.dav(g, args.normalize), e.label)
               for e, g in zip(entries, grids)]
    assess.write_dav_csv(args.out, records, append=args.append)
    if args.histogram:
        assess.write_histogram_csv(args.histogram, assess.dav_histogram(records, args.bins))
    by_label: dict = {}
    for r in records:
        by_label.setdefault(r.label, []).append(r.dav)
    for label, vals in sorted(by_label.items()):
        print(f"mean_dav {label} {np.mean(vals):.6f} n={len(vals)}")


def cmd_fit_thresholds(args):
    records = assess.read_dav_csv(args.dav)
    clf, acc = assess.fit_thresholds(records)
    assess.write_thresholds(args.out, clf)
    print(f"c1 {clf.c1!r} c2 {clf.c2!r} train_acc {acc:.4f}")


def cmd_classify(args):
    clf = assess.read_thresholds(args.thresholds)
    records = assess.read_dav_csv(args.dav)
    preds = [assess.classify_dav(clf, r.dav) for r in records]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "dav", "label", "predicted"])
            for r, p in zip(records, preds):
                w.writerow([r.image_id, repr(r.dav), r.label or "", p])
    labelled = [(p, r.label) for p, r in zip(preds, records) if r.label]
    if labelled:
        acc = metrics.accuracy([p for p, _ in labelled], [l for _, l in labelled])
        print(f"accuracy {acc:.4f} n={len(labelled)}")
    else:
        for r, p in zip(records, preds):
            print(f"{r.image_id} {p}")


def cmd_eval_iou(args):
    net = _load_net(args)
    entries = data.load_manifest(args.manifest, merge_labels=args.merge_labels)
    if args.label:
        entries = [e for e in entries if e.label == args.label]
    entries = [e for e in entries if e.mask is not None]
    if not entries:
        raise ValueError("no manifest entries with masks to evaluate")
    ious = []
    for e in entries:
        raw, x = _prepare(net, e.path)
        _, _, mask = _map_for(net, raw, x, args.fraction)
        ious.append(metrics.iou(mask, data.read_mask(e.mask)))
    rows = {args.name: metrics.iou_report(ious, args.iou_threshold)}
    if args.csv:
        metrics.write_iou_csv(args.csv, rows)
    sys.stdout.write(metrics.format_iou_table(rows))


def _parse_row(text):
    name, _, values = text.partition("=")
    if not values:
        raise ValueError(f"--row expects NAME=v1,v2,..., got {text!r}")
    return name, [float(v) for v in values.split(",")]


def cmd_report(args):
    rows = {}
    for text in args.row or []:
        name, vals = _parse_row(text)
        rows[name] = metrics.iou_report(vals, args.iou_threshold)
    for path in args.iou_csv or []:
        values: dict = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["image"].isdigit():
                    values.setdefault(row["comparison"], []).append(float(row["iou"]))
        for name, vals in values.items():
            rows[name] = metrics.iou_report(vals, args.iou_threshold)
    out = []
    if rows:
        out.append(metrics.format_iou_table(rows))
    if args.classified:
        lines = ["dataset  accuracy  n"]
        for path in args.classified:
            with open(path, newline="") as fh:
                recs = [r for r in csv.DictReader(fh) if r["label"]]
            acc = metrics.accuracy([r["predicted"] for r in recs], [r["label"] for r in recs])
            lines.append(f"{Path(path).stem}  {acc:.3f}  {len(recs)}")
        out.append("\n".join(lines) + "\n")
    if not out:
        raise ValueError("report needs --row, --iou-csv or --classified inputs")
    text = "\n".join(out)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


# -- parser ----------------------------------------------------------------------

def _net_args(p, weights=True):
    if weights:
        p.add_argument("--weights", required=True, help="DMGW weight file")
    p.add_argument("--preset", choices=PRESETS, default="tiny")
    p.add_argument("--image-size", type=int, default=None,
                   help="network input side (default 64 for tiny, 224 for vgg19)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="damagemap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic damage dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=400)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--damage-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fine-tune a network on a manifest")
    _net_args(p, weights=False)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output weight file")
    p.add_argument("--init-weights", help="start from these weights instead of a fresh init")
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--merge-labels", action="store_true", help="severe/mild -> damage, none -> no_damage")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--no-stratify", action="store_true")
    p.add_argument("--no-dropout", action="store_true")
    p.add_argument("--freeze-conv", action="store_true")
    p.add_argument("--split-dir", help="write train.csv/test.csv manifests here")
    p.add_argument("--report", help="write a JSON training report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="class probabilities for images")
    _net_args(p)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("map", help="damage heatmap for one image")
    _net_args(p)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="heatmap image (.png or .ppm)")
    p.add_argument("--mask-out")
    p.add_argument("--grid-out", help="saliency grid as a DMGW tensor file")
    p.add_argument("--fraction", type=float, default=saliency.DEFAULT_FRACTION)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("mask", help="binary damage mask for one image")
    _net_args(p)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fraction", type=float, default=saliency.DEFAULT_FRACTION)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("dav", help="damage assessment values for a manifest")
    _net_args(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="DAV CSV")
    p.add_argument("--append", action="store_true")
    p.add_argument("--merge-labels", action="store_true")
    p.add_argument("--normalize", choices=assess.NORMALIZATIONS, default="none")
    p.add_argument("--histogram", help="also write a binned DAV histogram CSV")
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=cmd_dav)

    p = sub.add_parser("fit-thresholds", help="grid-search c1/c2 on a labelled DAV CSV")
    p.add_argument("--dav", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_thresholds)

    p = sub.add_parser("classify", help="apply c1/c2 thresholds to a DAV CSV")
    p.add_argument("--thresholds", required=True)
    p.add_argument("--dav", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("eval-iou", help="IOU of heatmap masks against manifest masks")
    _net_args(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--merge-labels", action="store_true")
    p.add_argument("--label", help="only evaluate entries with this label")
    p.add_argument("--name", default="reference versus DDM")
    p.add_argument("--fraction", type=float, default=saliency.DEFAULT_FRACTION)
    p.add_argument("--iou-threshold", type=float, default=metrics.DEFAULT_IOU_THRESHOLD)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval_iou)

    p = sub.add_parser("report", help="IOU and accuracy tables")
    p.add_argument("--row", action="append", help="NAME=v1,v2,... IOU values")
    p.add_argument("--iou-csv", action="append", help="CSV written by eval-iou")
    p.add_argument("--classified", action="append", help="CSV written by classify --out")
    p.add_argument("--iou-threshold", type=float, default=metrics.DEFAULT_IOU_THRESHOLD)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as e:  # noqa: BLE001 - one-line machine-parsable failure
        msg = str(e).replace("\n", " ")
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

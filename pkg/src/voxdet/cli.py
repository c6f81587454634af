"""``voxdet`` command line: preprocess, anchors, train, detect, eval, phantom-gen.

Exit codes: 0 success, 2 unreadable or missing input scans, 3 diverged
training loss, 4 scan/label mismatch, 5 checkpoint or config mismatch,
6 prediction/label basename mismatch. Argument errors also exit 2 (argparse).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter

import numpy as np

EXIT_INPUT = 2
EXIT_DIVERGED = 3
EXIT_LABELS = 4
EXIT_CHECKPOINT = 5
EXIT_BASENAMES = 6

log = logging.getLogger("voxdet")


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _emit(obj):
    print(json.dumps(obj, sort_keys=True), flush=True)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _setup(args):
    import torch

    torch.set_num_threads(max(1, args.threads))
    torch.manual_seed(args.seed)
    level = logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _cache_dir():
    from .data import CACHE_ENV

    return os.environ.get(CACHE_ENV) or None


def _scans(data_dir):
    from .data import find_scans

    if not data_dir or not os.path.isdir(data_dir):
        raise CliError(EXIT_INPUT, f"data directory {data_dir!r} does not exist")
    paths = find_scans(data_dir)
    if not paths:
        raise CliError(EXIT_INPUT, f"no scans found in {data_dir}")
    return paths


def _pairs(args):
    from .data import LabelMismatch, pair_labels

    paths = _scans(args.data)
    labels = args.labels or os.path.join(os.path.dirname(os.path.abspath(args.data)), "labels")
    try:
        return pair_labels(paths, labels)
    except LabelMismatch as exc:
        raise CliError(EXIT_LABELS, str(exc)) from exc


def _load_samples(pairs, cube_side):
    from .data import load_samples
    from .labels import ParseError
    from .volume_io import NiftiError

    try:
        return load_samples(pairs, cube_side, _cache_dir())
    except NiftiError as exc:
        raise CliError(EXIT_INPUT, f"unreadable scan: {exc}") from exc
    except ParseError as exc:
        raise CliError(EXIT_LABELS, f"bad label file: {exc}") from exc


def _manifest_for(data_dir):
    for root in (data_dir, os.path.dirname(os.path.abspath(data_dir))):
        path = os.path.join(root, "manifest.json")
        if os.path.isfile(path):
            return root, path
    return None, None


def _hyp(args):
    from .loss import Hyperparameters

    hyp = Hyperparameters.load(args.hyp) if args.hyp else Hyperparameters()
    if getattr(args, "cube_side", None):
        hyp.cube_side = args.cube_side
    if getattr(args, "epochs", None):
        hyp.epochs_max = args.epochs
    if getattr(args, "patience", None) is not None:
        hyp.patience = args.patience
    return hyp


def cmd_preprocess(args):
    from .data import load_cube
    from .volume_io import NiftiError, read_nifti, scan_basename

    paths = _scans(args.data)
    bad, dims, stats = [], Counter(), []
    vols = []
    for p in paths:
        try:
            vol = read_nifti(p)
        except (NiftiError, OSError) as exc:
            bad.append(f"{os.path.basename(p)} ({exc})")
            continue
        vols.append(p)
        dims["x".join(str(n) for n in vol.data.shape)] += 1
        d = vol.data
        stats.append((d.size, float(d.sum()), float((d * d).sum()), float(d.min()), float(d.max())))
    if bad:
        raise CliError(EXIT_INPUT, "unreadable scans: " + "; ".join(bad))
    n = sum(s[0] for s in stats)
    mean = sum(s[1] for s in stats) / n
    var = max(sum(s[2] for s in stats) / n - mean * mean, 0.0)
    cache = _cache_dir()
    if cache:
        for p in vols:
            load_cube(p, args.cube_side, cache)
    summary = {
        "n_scans": len(vols),
        "scans": [scan_basename(p) for p in vols],
        "source_dims": dict(sorted(dims.items())),
        "intensity": {"min": min(s[3] for s in stats), "max": max(s[4] for s in stats), "mean": mean, "std": float(np.sqrt(var))},
        "cube_side": args.cube_side,
        "cache_dir": cache,
    }
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "preprocess_summary.json"), summary)
    _emit(summary)
    return 0


def cmd_anchors(args):
    from .anchors import TooFewLabels, anchor_kmeans, dump_anchor_yaml, extents_in_voxels
    from .labels import read_labels
    from .network import ConfigError, load_model_config

    try:
        spec = load_model_config(args.model_cfg)
    except (ConfigError, OSError) as exc:
        raise CliError(EXIT_CHECKPOINT, f"bad model config: {exc}") from exc
    boxes = [b for _, _, lab in _pairs(args) for b in read_labels(lab)]
    try:
        anchors = anchor_kmeans(extents_in_voxels(boxes, args.cube_side), spec.anchors.k, seed=args.seed, num_scales=spec.anchors.num_scales)
    except TooFewLabels as exc:
        raise CliError(EXIT_LABELS, str(exc)) from exc
    text = dump_anchor_yaml(anchors, args.cube_side)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "anchors.yaml"), "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return 0


def cmd_train(args):
    from .data import resolve_split
    from .network import ConfigError, DetectionModel, load_model_config
    from .train import DivergedLoss, autoanchor, train

    hyp = _hyp(args)
    pairs = _pairs(args)
    try:
        spec = load_model_config(args.model_cfg)
    except (ConfigError, OSError) as exc:
        raise CliError(EXIT_CHECKPOINT, f"bad model config: {exc}") from exc
    samples = _load_samples(pairs, hyp.cube_side)
    root, mpath = _manifest_for(args.data)
    nc = max((b.class_id for s in samples for b in s.boxes), default=-1) + 1
    if mpath:
        with open(mpath) as fh:
            nc = max(nc, int(json.load(fh).get("num_classes", 0)))
    spec = spec.with_num_classes(max(nc, spec.num_classes, 1))
    train_names, val_names = resolve_split([s.name for s in samples], root, seed=args.seed)
    by_name = {s.name: s for s in samples}
    train_s = [by_name[n] for n in train_names]
    val_s = [by_name[n] for n in val_names]
    log.info("%d training / %d validation scans, %d classes", len(train_s), len(val_s), spec.num_classes)

    model = DetectionModel(spec)
    if hyp.autoanchor:
        model = autoanchor(model, train_s, hyp.cube_side, seed=args.seed)
    out = args.out or "runs/train"
    os.makedirs(out, exist_ok=True)
    try:
        res = train(model, train_s, val_s, hyp, seed=args.seed, out_dir=out, callback=_emit)
    except DivergedLoss as exc:
        raise CliError(EXIT_DIVERGED, str(exc)) from exc
    _emit({
        "done": True,
        "epochs_run": len(res.history),
        "early_stopped": res.early_stopped,
        "best_epoch": res.best_epoch,
        "best_fitness": res.best_fitness,
        "weights": os.path.join(out, "best.ckpt"),
    })
    return 0


def cmd_detect(args):
    import torch

    from .data import Sample, prepare_input
    from .evaluate import DEPLOY_CONF_THRESHOLD, NMS_IOU_THRESHOLD, write_overlay, write_predictions
    from .network import CheckpointError, ConfigError, load_checkpoint, load_model_config
    from .preprocess import resample_to_cube, transpose_zxy
    from .train import predict
    from .volume_io import NiftiError, read_nifti, scan_basename

    if not args.weights:
        raise CliError(EXIT_CHECKPOINT, "--weights is required")
    try:
        spec = load_model_config(args.model_cfg) if args.model_cfg else None
        model, meta = load_checkpoint(args.weights, spec)
    except (CheckpointError, ConfigError, OSError) as exc:
        raise CliError(EXIT_CHECKPOINT, f"cannot use checkpoint {args.weights}: {exc}") from exc
    side = args.cube_side or int(meta.get("cube_side", 350))
    norm = meta.get("normalization", "auto")
    window = tuple(meta.get("ct_window", (-1024.0, 1024.0)))
    conf = DEPLOY_CONF_THRESHOLD if args.conf_thr is None else args.conf_thr
    iou = NMS_IOU_THRESHOLD if args.iou_thr is None else args.iou_thr
    out = args.out or "runs/detect"
    os.makedirs(out, exist_ok=True)
    written = []
    for p in _scans(args.data):
        name = scan_basename(p)
        try:
            vol = read_nifti(p)
        except (NiftiError, OSError) as exc:
            raise CliError(EXIT_INPUT, f"unreadable scan {os.path.basename(p)}: {exc}") from exc
        cube = resample_to_cube(transpose_zxy(vol), side, modality=vol.modality)
        arr, _ = prepare_input(Sample(name, cube.data, [], cube.modality, cube.source_dims), norm, ct_window=window)
        with torch.no_grad():
            (dets,) = predict(model, [arr], 1, conf, iou)
        write_predictions(os.path.join(out, name + ".txt"), dets)
        if args.overlay:
            write_overlay(os.path.join(out, name + "_overlay.nii.gz"), dets, vol)
        written.append({"scan": name, "num_detections": len(dets)})
    _emit({"predictions": out, "scans": written})
    return 0


def _txt_names(d):
    return sorted(f[:-4] for f in os.listdir(d) if f.endswith(".txt"))


def cmd_eval(args):
    from .evaluate import map_report, read_predictions
    from .labels import ParseError, read_labels

    for what, d in (("predictions", args.preds), ("labels", args.labels)):
        if not d or not os.path.isdir(d):
            raise CliError(EXIT_INPUT, f"{what} directory {d!r} does not exist")
    pnames, lnames = _txt_names(args.preds), _txt_names(args.labels)
    if pnames != lnames:
        only_p = sorted(set(pnames) - set(lnames))
        only_l = sorted(set(lnames) - set(pnames))
        raise CliError(EXIT_BASENAMES, f"basename mismatch: predictions only {only_p}, labels only {only_l}")
    try:
        preds = [read_predictions(os.path.join(args.preds, n + ".txt")) for n in pnames]
        gts = [read_labels(os.path.join(args.labels, n + ".txt")) for n in lnames]
    except ParseError as exc:
        raise CliError(EXIT_BASENAMES, f"unparseable file: {exc}") from exc
    report = map_report(preds, gts, scan_ids=pnames, method=args.ap_method).to_dict()
    if args.out:
        parent = os.path.dirname(os.path.abspath(args.out))
        os.makedirs(parent, exist_ok=True)
        _write_json(args.out, report)
    print(f"{'class':>6} {'n_gt':>6} {'mAP@0.5':>9} {'mAP@.5:.95':>11} {'mAP@.5:.9':>10}")
    for c, row in report["per_class"].items():
        print(f"{c:>6} {row['num_gt']:>6} {row['map50']:>9.4f} {row['map50_95']:>11.4f} {row['map50_90']:>10.4f}")
    print(f"{'all':>6} {report['counts']['num_gt']:>6} {report['map50']:>9.4f} {report['map50_95']:>11.4f} {report['map50_90']:>10.4f}")
    return 0


def cmd_phantom_gen(args):
    from .phantom import PhantomSpec, PlacementFailed, gen_dataset
    from .volume_io import IoFailure

    out = args.out or "phantoms"
    try:
        manifest = gen_dataset(args.n, PhantomSpec(side=args.side), seed=args.seed, out_dir=out)
    except PlacementFailed as exc:
        raise CliError(EXIT_INPUT, str(exc)) from exc
    except (IoFailure, OSError) as exc:
        raise CliError(EXIT_INPUT, f"cannot write dataset: {exc}") from exc
    _emit({"out": out, "n": manifest["n"], "train": len(manifest["train"]), "val": len(manifest["val"])})
    return 0


def _common(p, data=True, labels=False):
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads; 1 gives bit-reproducible runs (default 1)")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    p.add_argument("--out", help="output directory (eval: report path)")
    if data:
        p.add_argument("--data", required=True, help="directory of .nii/.nii.gz scans")
    if labels:
        p.add_argument("--labels", help="directory of <scan>.txt label files (default: labels/ beside --data)")


def build_parser():
    parser = argparse.ArgumentParser(prog="voxdet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="read, resample and summarize scans; cache cubes under $VOXDET_CACHE")
    _common(p)
    p.add_argument("--cube-side", type=int, default=350, help="cube side in voxels (default 350)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("anchors", help="fit anchor extents to the labels by k-means with a 1-IoU distance")
    _common(p, labels=True)
    p.add_argument("--model-cfg", default="small", help="preset name or model YAML; sets the anchor count (default small)")
    p.add_argument("--cube-side", type=int, default=350, help="cube side the anchors are expressed in (default 350)")
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("train", help="train a detector; writes best.ckpt, last.ckpt and metrics.jsonl")
    _common(p, labels=True)
    p.add_argument("--model-cfg", default="small", help="preset name (small/medium/large) or model YAML (default small)")
    p.add_argument("--hyp", help="hyperparameter YAML (default: built-in values)")
    p.add_argument("--cube-side", type=int, help="override the hyperparameter cube side")
    p.add_argument("--epochs", type=int, help="maximum epochs (overrides epochs_max)")
    p.add_argument("--patience", type=int, help="early-stopping patience in epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run a checkpoint over scans and write per-scan prediction files")
    _common(p)
    p.add_argument("--weights", required=True, help="checkpoint file")
    p.add_argument("--model-cfg", help="model YAML that must match the checkpoint weights")
    p.add_argument("--cube-side", type=int, help="override the cube side stored in the checkpoint")
    p.add_argument("--conf-thr", type=float, help="confidence threshold (default 0.25)")
    p.add_argument("--iou-thr", type=float, help="NMS IoU threshold (default 0.45)")
    p.add_argument("--overlay", action="store_true", help="also write <scan>_overlay.nii.gz box masks")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score prediction files against label files")
    _common(p, data=False, labels=True)
    p.add_argument("--preds", required=True, help="directory of <scan>.txt prediction files")
    p.add_argument("--ap-method", choices=("coco101", "allpoints"), default="coco101", help="AP integration (default coco101)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("phantom-gen", help="write a synthetic labelled dataset")
    _common(p, data=False)
    p.add_argument("--n", type=int, default=200, help="number of phantoms (default 200)")
    p.add_argument("--side", type=int, default=96, help="phantom side in voxels (default 96)")
    p.set_defaults(func=cmd_phantom_gen)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    _setup(args)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"voxdet {args.command}: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())

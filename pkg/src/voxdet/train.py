"""Training loop: SGD with warmup and cosine decay, per-epoch mAP, early stopping."""

from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .anchors import anchor_kmeans, extents_in_voxels
from .augment import AugmentConfig
from .data import EmptyDataset, prepare_input, sample_rng
from .evaluate import EVAL_CONF_THRESHOLD, NMS_IOU_THRESHOLD, map_report, postprocess
from .loss import Hyperparameters, total_loss
from .network import DetectionModel, decode, save_checkpoint

log = logging.getLogger(__name__)


class DivergedLoss(RuntimeError):
    pass


class EarlyStopping:
    """Stop once ``patience`` epochs pass without a strict fitness improvement."""

    def __init__(self, patience=200):
        self.patience = int(patience)
        self.best_fitness = -math.inf
        self.best_epoch = 0

    def step(self, epoch, fitness):
        if fitness > self.best_fitness:
            self.best_fitness = fitness
            self.best_epoch = epoch
        return epoch - self.best_epoch >= self.patience


def cosine_factor(epoch, epochs, lrf):
    return ((1 - math.cos(epoch * math.pi / epochs)) / 2) * (lrf - 1) + 1


def build_optimizer(model, hyp):
    decay, no_decay, biases = [], [], []
    for mod in model.modules():
        for name, p in mod.named_parameters(recurse=False):
            if name == "bias":
                biases.append(p)
            elif isinstance(mod, nn.BatchNorm3d):
                no_decay.append(p)
            else:
                decay.append(p)
    opt = torch.optim.SGD(no_decay, lr=hyp.lr0, momentum=hyp.momentum, nesterov=True)
    opt.add_param_group({"params": decay, "weight_decay": hyp.weight_decay})
    opt.add_param_group({"params": biases})
    return opt


def autoanchor(model, samples, cube_side, seed=0):
    """Rebuild ``model`` with k-means anchors fitted to the training labels (same k, fresh weights)."""
    boxes = [b for s in samples for b in s.boxes]
    k = model.anchors.k
    if len(boxes) < k:
        log.warning("only %d labels for %d anchors; keeping configured anchors", len(boxes), k)
        return model
    anchors = anchor_kmeans(extents_in_voxels(boxes, cube_side), k, seed=seed, num_scales=model.anchors.num_scales)
    log.info("k-means anchors (mean 1-IoU %.4f): %s", anchors.distortion, anchors.to_config())
    return DetectionModel(model.spec.with_anchors(anchors))


def predict(model, arrays, batch_size=8, conf_thr=EVAL_CONF_THRESHOLD, iou_thr=NMS_IOU_THRESHOLD):
    """Run inference on normalized cube arrays; returns post-NMS :class:`Detections` per array."""
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(arrays), batch_size):
            x = torch.as_tensor(np.stack(arrays[i : i + batch_size])[:, None], dtype=torch.float32)
            preds = model(x)
            for d in decode(preds, model.anchors, x.shape[2], conf_thr):
                out.append(postprocess(d, conf_thr, iou_thr))
    return out


def evaluate_model(model, samples, hyp, batch_size=8, conf_thr=EVAL_CONF_THRESHOLD, iou_thr=NMS_IOU_THRESHOLD, classes=None):
    arrays, gts = [], []
    for s in samples:
        a, b = prepare_input(s, hyp.normalization, ct_window=hyp.ct_window)
        arrays.append(a)
        gts.append(b)
    dets = predict(model, arrays, batch_size, conf_thr, iou_thr)
    return map_report(dets, gts, classes=classes, scan_ids=[s.name for s in samples])


@dataclass
class TrainResult:
    model: DetectionModel
    history: list
    best_epoch: int
    best_fitness: float
    stopped_epoch: int
    early_stopped: bool
    best_state: dict = field(repr=False, default=None)


def _set_lr(opt, ni, nw, epoch, epochs, hyp):
    f = cosine_factor(epoch, epochs, hyp.lrf)
    for j, g in enumerate(opt.param_groups):
        target = hyp.lr0 * f
        if ni < nw:
            start = hyp.warmup_bias_lr if j == 2 else 0.0
            g["lr"] = float(np.interp(ni, [0, nw], [start, target]))
            g["momentum"] = float(np.interp(ni, [0, nw], [hyp.warmup_momentum, hyp.momentum]))
        else:
            g["lr"] = target
            g["momentum"] = hyp.momentum


def train(model, train_samples, val_samples, hyp=None, seed=0, epochs=None, out_dir=None, callback=None):
    """Train ``model`` in place and return a :class:`TrainResult`.

    ``epochs`` overrides ``hyp.epochs_max``. Fitness is
    ``0.1 * mAP@0.5 + 0.9 * mAP@0.5:0.95`` on ``val_samples`` each epoch; the
    best-fitness weights are restored on return and, with ``out_dir``, saved
    as ``best.ckpt`` next to ``last.ckpt`` and ``metrics.jsonl``.
    """
    hyp = hyp or Hyperparameters()
    if not train_samples:
        raise EmptyDataset("no training samples")
    epochs = int(epochs or hyp.epochs_max)
    torch.manual_seed(seed)
    aug_cfg = AugmentConfig.from_dict(hyp.augment)
    cube_side = train_samples[0].data.shape[0]
    classes = list(range(model.spec.num_classes))

    opt = build_optimizer(model, hyp)
    bs = int(hyp.batch_size)
    nb = math.ceil(len(train_samples) / bs)
    if nb > 1 and len(train_samples) % bs == 1:
        # a lone trailing sample joins the previous batch: batch norm cannot
        # normalize a single value per channel on a 1-voxel deepest grid
        nb -= 1
    nw = max(int(round(hyp.warmup_epochs * nb)), 1) if hyp.warmup_epochs > 0 else 0
    stopper = EarlyStopping(hyp.patience)
    history, best_state = [], None
    metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w") if out_dir else None
    stopped, early = epochs - 1, False

    try:
        for epoch in range(epochs):
            model.train()
            order = np.random.default_rng(np.random.SeedSequence([int(seed), epoch, 1 << 20])).permutation(len(train_samples))
            sums = {"box": 0.0, "obj": 0.0, "cls": 0.0, "total": 0.0}
            for bi in range(nb):
                idx = order[bi * bs : (bi + 1) * bs if bi < nb - 1 else None]
                arrays, labels = [], []
                for i in idx:
                    a, b = prepare_input(train_samples[i], hyp.normalization, sample_rng(seed, epoch, i), aug_cfg, hyp.ct_window)
                    arrays.append(a)
                    labels.append(b)
                x = torch.as_tensor(np.stack(arrays)[:, None])
                ni = bi + nb * epoch
                _set_lr(opt, ni, nw, epoch, epochs, hyp)
                preds = model(x)
                loss, comps = total_loss(preds, labels, model.anchors, cube_side, hyp)
                if not torch.isfinite(loss):
                    raise DivergedLoss(f"loss became {loss.item()} at epoch {epoch}, batch {bi}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if hyp.grad_clip:
                    nn.utils.clip_grad_norm_(model.parameters(), hyp.grad_clip)
                opt.step()
                for k in sums:
                    sums[k] += comps[k] / nb

            report = evaluate_model(model, val_samples, hyp, bs, classes=classes) if val_samples else None
            m50 = report.map50 if report else 0.0
            m5095 = report.map50_95 if report else 0.0
            fitness = 0.1 * m50 + 0.9 * m5095
            rec = {"epoch": epoch, **sums, "map50": m50, "map50_95": m5095, "fitness": fitness, "lr": opt.param_groups[1]["lr"]}
            history.append(rec)
            if metrics_fh:
                metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                metrics_fh.flush()
            if callback:
                callback(rec)
            improved = fitness > stopper.best_fitness
            stop = stopper.step(epoch, fitness)
            if improved or best_state is None:
                best_state = copy.deepcopy(model.state_dict())
            if stop:
                stopped, early = epoch, True
                break
    finally:
        if metrics_fh:
            metrics_fh.close()

    if out_dir:
        meta = {"cube_side": cube_side, "normalization": hyp.normalization, "ct_window": list(hyp.ct_window), "epoch": stopped}
        save_checkpoint(model, os.path.join(out_dir, "last.ckpt"), meta)
    model.load_state_dict(best_state)
    if out_dir:
        meta = {"cube_side": cube_side, "normalization": hyp.normalization, "ct_window": list(hyp.ct_window), "epoch": stopper.best_epoch, "fitness": stopper.best_fitness}
        save_checkpoint(model, os.path.join(out_dir, "best.ckpt"), meta)
    return TrainResult(model, history, stopper.best_epoch, stopper.best_fitness, stopped, early, best_state)

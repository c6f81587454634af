"""Configurable 3-D CNN detector: config parsing, layers, decode, checkpoints."""

from __future__ import annotations

import copy
import json
import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
import yaml
from torch import nn

from .anchors import AnchorSet
from .boxes import Detections
from .preprocess import MIN_CUBE_SIDE, SideTooSmall

LAYER_KINDS = ("Conv", "C3", "SPPF", "Upsample", "Concat", "Detect")
NUM_STAGES = 5
DETECT_STAGES = (3, 4, 5)
BN_EPS = 1e-3
BN_MOMENTUM = 0.03
OBJ_BIAS_INIT = -5.0
CHECKPOINT_MAGIC = b"VOXDET1\n"
PRESETS = ("small", "medium", "large")


class ConfigError(ValueError):
    pass


class UnknownLayerKind(ConfigError):
    pass


class DanglingReference(ConfigError):
    pass


class MissingDetect(ConfigError):
    pass


class ShapeMismatch(ValueError):
    pass


class UninitializedWeights(RuntimeError):
    pass


class GridMismatch(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointMismatch(CheckpointError):
    pass


@dataclass
class LayerSpec:
    from_: object
    repeats: int
    kind: str
    args: list


@dataclass
class ModelSpec:
    layers: list
    depth_multiple: float
    width_multiple: float
    num_classes: int
    anchors: AnchorSet
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def detect(self):
        return self.layers[-1]

    def to_text(self):
        doc = copy.deepcopy(self.raw)
        doc["nc"] = int(self.num_classes)
        doc["anchors"] = self.anchors.to_config()
        return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)

    def with_anchors(self, anchors):
        return ModelSpec(self.layers, self.depth_multiple, self.width_multiple, self.num_classes, anchors, self.raw)

    def with_num_classes(self, nc):
        return ModelSpec(self.layers, self.depth_multiple, self.width_multiple, int(nc), self.anchors, self.raw)


def parse_model_config(text):
    """Parse YAML model text into a validated :class:`ModelSpec`."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"model config is not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("model config must be a mapping")
    for key in ("depth_multiple", "width_multiple", "anchors", "backbone", "head"):
        if key not in doc:
            raise ConfigError(f"model config is missing {key!r}")
    nc = int(doc.get("nc", 1))
    if nc < 1:
        raise ConfigError("nc must be >= 1")
    anchors = AnchorSet.from_config(doc["anchors"])

    layers = []
    for i, row in enumerate(list(doc["backbone"]) + list(doc["head"])):
        if not isinstance(row, (list, tuple)) or len(row) != 4:
            raise ConfigError(f"layer {i}: rows are [from, repeats, kind, args]")
        src, repeats, kind, args = row
        if kind not in LAYER_KINDS:
            raise UnknownLayerKind(f"layer {i}: unknown layer kind {kind!r}")
        refs = src if isinstance(src, (list, tuple)) else [src]
        for r in refs:
            if not isinstance(r, int) or not (r == -1 or 0 <= r < i):
                raise DanglingReference(f"layer {i}: 'from' {r!r} does not name an earlier layer")
        layers.append(LayerSpec(list(refs) if isinstance(src, (list, tuple)) else src, int(repeats), kind, list(args or [])))

    kinds = [l.kind for l in layers]
    if kinds.count("Detect") != 1 or kinds[-1] != "Detect":
        raise MissingDetect("exactly one Detect layer is required and it must be last")
    det = layers[-1]
    if not isinstance(det.from_, list) or len(det.from_) != anchors.num_scales:
        raise ConfigError(f"Detect consumes {det.from_!r} but anchors define {anchors.num_scales} scales")
    return ModelSpec(layers, float(doc["depth_multiple"]), float(doc["width_multiple"]), nc, anchors, raw=doc)


def preset_text(name="small"):
    from importlib import resources

    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    return resources.files("voxdet").joinpath("configs").joinpath(f"{name}.yaml").read_text()


def load_model_config(path_or_preset="small"):
    if path_or_preset in PRESETS:
        return parse_model_config(preset_text(path_or_preset))
    with open(path_or_preset) as fh:
        return parse_model_config(fh.read())


def feature_shapes(cube_side):
    """Grid sides of the three detection maps for a cube of side ``cube_side``.

    Each stride-2 stage (3x3x3 kernel, padding 1) maps ``n -> ceil(n / 2)``.
    """
    if cube_side < MIN_CUBE_SIDE:
        raise SideTooSmall(f"cube side must be >= {MIN_CUBE_SIDE}, got {cube_side}")
    sides, n = [], int(cube_side)
    for stage in range(1, NUM_STAGES + 1):
        n = -(-n // 2)
        if stage in DETECT_STAGES:
            sides.append(n)
    return tuple(sides)


def round_channels(c, width_multiple):
    return max(8, int(round(c * width_multiple / 8)) * 8)


def scale_depth(n, depth_multiple):
    return max(round(n * depth_multiple), 1) if n > 1 else n


class Conv(nn.Module):
    """Conv3d + BatchNorm3d + SiLU."""

    def __init__(self, c1, c2, k=1, s=1):
        super().__init__()
        self.conv = nn.Conv3d(c1, c2, k, s, k // 2, bias=False)
        self.bn = nn.BatchNorm3d(c2, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class Bottleneck(nn.Module):
    def __init__(self, c1, c2, shortcut=True):
        super().__init__()
        self.cv1 = Conv(c1, c2, 1, 1)
        self.cv2 = Conv(c2, c2, 3, 1)
        self.add = shortcut and c1 == c2

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y


class C3(nn.Module):
    """Split into two 1x1 branches, run bottlenecks on one, merge with a 1x1."""

    def __init__(self, c1, c2, n=1, shortcut=True):
        super().__init__()
        c_ = c2 // 2
        self.cv1 = Conv(c1, c_, 1, 1)
        self.cv2 = Conv(c1, c_, 1, 1)
        self.cv3 = Conv(2 * c_, c2, 1, 1)
        self.m = nn.Sequential(*(Bottleneck(c_, c_, shortcut) for _ in range(n)))

    def forward(self, x):
        return self.cv3(torch.cat((self.m(self.cv1(x)), self.cv2(x)), dim=1))


class SPPF(nn.Module):
    """Serial max-pool pyramid; three pools of kernel ``k`` concatenated with the input."""

    def __init__(self, c1, c2, k=5):
        super().__init__()
        c_ = c1 // 2
        self.cv1 = Conv(c1, c_, 1, 1)
        self.cv2 = Conv(c_ * 4, c2, 1, 1)
        self.m = nn.MaxPool3d(kernel_size=k, stride=1, padding=k // 2)

    def forward(self, x):
        x = self.cv1(x)
        y1 = self.m(x)
        y2 = self.m(y1)
        return self.cv2(torch.cat((x, y1, y2, self.m(y2)), dim=1))


class Upsample(nn.Module):
    def __init__(self, scale=2):
        super().__init__()
        self.scale = int(scale)

    def forward(self, x):
        return nn.functional.interpolate(x, scale_factor=self.scale, mode="nearest")


class Concat(nn.Module):
    """Channel concat. Upsampled maps one voxel larger than their partner are cropped."""

    def forward(self, xs):
        side = [min(x.shape[d] for x in xs) for d in (2, 3, 4)]
        xs = [x[:, :, : side[0], : side[1], : side[2]] for x in xs]
        return torch.cat(xs, dim=1)


class Detect(nn.Module):
    def __init__(self, nc, anchors, ch):
        super().__init__()
        self.nc = nc
        self.no = 7 + nc
        self.na = anchors.k // anchors.num_scales
        self.register_buffer("anchors", torch.tensor(anchors.anchors, dtype=torch.float32).view(anchors.num_scales, self.na, 3))
        self.m = nn.ModuleList(nn.Conv3d(c, self.na * self.no, 1) for c in ch)

    def forward(self, xs):
        out = []
        for conv, x in zip(self.m, xs):
            y = conv(x)
            b, _, g1, g2, g3 = y.shape
            out.append(y.view(b, self.na, self.no, g1, g2, g3).permute(0, 1, 3, 4, 5, 2).contiguous())
        return out


class DetectionModel(nn.Module):
    """The detector. ``forward`` returns one raw ``(B, A, G, G, G, 7 + C)`` tensor per scale."""

    def __init__(self, spec, init=True):
        super().__init__()
        self.spec = spec
        layers, self.sources, save = [], [], set()
        channels = [1]
        for i, l in enumerate(spec.layers):
            n = scale_depth(l.repeats, spec.depth_multiple)
            src = l.from_
            c_in = channels[src] if isinstance(src, int) else None
            if l.kind == "Conv":
                c2 = round_channels(l.args[0], spec.width_multiple)
                k = l.args[1] if len(l.args) > 1 else 1
                s = l.args[2] if len(l.args) > 2 else 1
                mod = Conv(c_in, c2, k, s)
            elif l.kind == "C3":
                c2 = round_channels(l.args[0], spec.width_multiple)
                shortcut = bool(l.args[1]) if len(l.args) > 1 else True
                mod = C3(c_in, c2, n, shortcut)
            elif l.kind == "SPPF":
                c2 = round_channels(l.args[0], spec.width_multiple)
                mod = SPPF(c_in, c2, l.args[1] if len(l.args) > 1 else 5)
            elif l.kind == "Upsample":
                c2 = c_in
                mod = Upsample(l.args[0] if l.args else 2)
            elif l.kind == "Concat":
                c2 = sum(channels[j] for j in src)
                mod = Concat()
            else:
                c2 = None
                mod = Detect(spec.num_classes, spec.anchors, [channels[j] for j in src])
            refs = src if isinstance(src, list) else [src]
            save.update(i + r if r < 0 else r for r in refs)
            self.sources.append(src)
            layers.append(mod)
            channels.append(c2)
            if i == 0:
                channels = channels[1:]
        self.model = nn.ModuleList(layers)
        self.save = sorted(save)
        self.weights_initialized = False
        if init:
            self.init_weights()

    @property
    def detect(self):
        return self.model[-1]

    @property
    def anchors(self):
        return self.spec.anchors

    def init_weights(self):
        """He-uniform (fan-in) conv weights, unit BN, objectness bias at -5."""
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_uniform_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm3d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
                m.reset_running_stats()
        det = self.detect
        with torch.no_grad():
            for conv in det.m:
                b = conv.bias.view(det.na, det.no)
                b[:, 6] = OBJ_BIAS_INIT
        self.weights_initialized = True

    def forward(self, x):
        if not self.weights_initialized:
            raise UninitializedWeights("call init_weights() or load a checkpoint before forward")
        if x.ndim != 5 or x.shape[1] != 1 or not (x.shape[2] == x.shape[3] == x.shape[4]):
            raise ShapeMismatch(f"expected input (B, 1, D, D, D), got {tuple(x.shape)}")
        if x.shape[2] < MIN_CUBE_SIDE:
            raise SideTooSmall(f"cube side must be >= {MIN_CUBE_SIDE}, got {x.shape[2]}")
        outputs = []
        for i, (mod, src) in enumerate(zip(self.model, self.sources)):
            if isinstance(src, list):
                inp = [x if j == -1 else outputs[j] for j in src]
            elif src != -1:
                inp = outputs[src]
            else:
                inp = x
            x = mod(inp)
            outputs.append(x if i in self.save else None)
        return x


def cubes_to_tensor(cubes, dtype=torch.float32):
    """Stack :class:`~voxdet.preprocess.Cube` objects (or arrays) into ``(B, 1, D, D, D)``."""
    arrays = [np.asarray(getattr(c, "data", c)) for c in cubes]
    sides = {a.shape for a in arrays}
    if len(sides) != 1:
        raise ShapeMismatch(f"all cubes in a batch must share a side, got {sorted(sides)}")
    return torch.as_tensor(np.stack(arrays)[:, None], dtype=dtype)


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def _grid(g, device, dtype):
    r = torch.arange(g, device=device, dtype=dtype)
    gz, gx, gy = torch.meshgrid(r, r, r, indexing="ij")
    return torch.stack((gz, gx, gy), dim=-1)


def decode_boxes(raw, anchors, grid_side, cube_side):
    """Differentiable decode of one scale's box logits.

    ``raw`` is ``(..., A, G, G, G, >=6)``; returns ``(..., A, G, G, G, 6)``
    normalized ``[zc, xc, yc, dz, dx, dy]``.
    """
    anchors = torch.as_tensor(anchors, dtype=raw.dtype, device=raw.device).view(-1, 1, 1, 1, 3)
    s = torch.sigmoid(raw[..., :6])
    g = _grid(grid_side, raw.device, raw.dtype)
    centers = (2 * s[..., :3] - 0.5 + g) / grid_side
    extents = anchors * (2 * s[..., 3:6]) ** 2 / cube_side
    return torch.cat((centers, extents), dim=-1)


def decode(preds, anchors, cube_side, conf_threshold=0.001):
    """Turn raw per-scale grids into per-sample :class:`Detections`.

    Confidence is ``sigmoid(obj) * max_c sigmoid(cls_c)``; boxes are clipped to
    the unit cube.
    """
    per_scale = anchors.per_scale
    if len(preds) != len(per_scale):
        raise GridMismatch(f"{len(preds)} prediction grids for {len(per_scale)} anchor scales")
    batch = preds[0].shape[0]
    boxes, confs, classes = [[] for _ in range(batch)], [[] for _ in range(batch)], [[] for _ in range(batch)]
    with torch.no_grad():
        for p, a in zip(preds, per_scale):
            p = p.detach().to(torch.float64)
            if p.ndim != 6 or p.shape[1] != len(a) or not (p.shape[2] == p.shape[3] == p.shape[4]):
                raise GridMismatch(f"grid of shape {tuple(p.shape)} does not match {len(a)} anchors")
            g = p.shape[2]
            xyz = decode_boxes(p, a, g, cube_side).reshape(batch, -1, 6)
            obj = torch.sigmoid(p[..., 6]).reshape(batch, -1)
            cls_p = torch.sigmoid(p[..., 7:]).reshape(batch, -1, p.shape[-1] - 7)
            best, cls = cls_p.max(dim=-1)
            conf = obj * best
            for b in range(batch):
                keep = conf[b] >= conf_threshold
                boxes[b].append(xyz[b][keep].numpy())
                confs[b].append(conf[b][keep].numpy())
                classes[b].append(cls[b][keep].numpy())
    out = []
    for b in range(batch):
        coords = np.concatenate(boxes[b]) if boxes[b] else np.zeros((0, 6))
        out.append(Detections.clipped(coords, np.concatenate(confs[b]), np.concatenate(classes[b])))
    return out


def _logit(p):
    return math.log(p / (1.0 - p))


def encode(box, cell, anchor, grid_side, cube_side):
    """Box logits that :func:`decode` maps back to ``box`` for this cell/anchor.

    Raises ``ValueError`` if the box is outside the cell/anchor's reach.
    """
    t = []
    for c, g in zip(box.center, cell):
        s = (c * grid_side - g + 0.5) / 2
        if not 0 < s < 1:
            raise ValueError(f"center {c} unreachable from cell {g} of {grid_side}")
        t.append(_logit(s))
    for e, a in zip(box.extent, anchor):
        s = math.sqrt(e * cube_side / a) / 2
        if not 0 < s < 1:
            raise ValueError(f"extent {e} unreachable from anchor {a}")
        t.append(_logit(s))
    return np.array(t)


def _tensor_entries(model):
    for name, t in model.state_dict().items():
        yield name, t


def save_checkpoint(model, path, meta=None):
    """Write config text + float32 weights in the VOXDET1 container."""
    entries, blobs, offset = [], [], 0
    for name, t in _tensor_entries(model):
        arr = t.detach().cpu().numpy().astype("<f4")
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    manifest = {
        "version": 1,
        "config": model.spec.to_text(),
        "tensors": entries,
        "payload_crc32": zlib.crc32(payload),
        "meta": meta or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + payload)


def read_checkpoint(path):
    """Returns ``(manifest, {name: float32 array})`` after integrity checks."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(str(exc)) from exc
    n = len(CHECKPOINT_MAGIC)
    if blob[:n] != CHECKPOINT_MAGIC or len(blob) < n + 8:
        raise CheckpointError("not a VOXDET1 checkpoint")
    (hlen,) = struct.unpack("<Q", blob[n : n + 8])
    start = n + 8 + hlen
    try:
        manifest = json.loads(blob[n + 8 : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from exc
    payload = blob[start:]
    if zlib.crc32(payload) != manifest.get("payload_crc32"):
        raise CheckpointError("checkpoint payload failed its checksum")
    arrays = {}
    for e in manifest["tensors"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"tensor {e['name']} is truncated")
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"])
    return manifest, arrays


def load_weights(model, arrays):
    state = model.state_dict()
    if set(state) != set(arrays):
        missing = sorted(set(state) - set(arrays))[:3]
        extra = sorted(set(arrays) - set(state))[:3]
        raise CheckpointMismatch(f"weight names differ from model (missing {missing}, unexpected {extra})")
    new_state = {}
    for name, t in state.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(t.shape):
            raise CheckpointMismatch(f"{name}: checkpoint shape {arr.shape} != model shape {tuple(t.shape)}")
        new_state[name] = torch.as_tensor(np.array(arr)).to(t.dtype)
    model.load_state_dict(new_state)
    model.weights_initialized = True
    return model


def load_checkpoint(path, spec=None):
    """Rebuild a model from a checkpoint; ``spec`` (if given) must match its weights."""
    manifest, arrays = read_checkpoint(path)
    if spec is None:
        try:
            spec = parse_model_config(manifest["config"])
        except ConfigError as exc:
            raise CheckpointError(f"embedded config is invalid: {exc}") from exc
    model = DetectionModel(spec, init=False)
    load_weights(model, arrays)
    model.eval()
    return model, manifest.get("meta", {})

"""Reduced-width YOLOv3 detector with multi-level fusion, DCM and a decoupled head.

Channel plan for width ``w`` (defaults in parentheses, w=0.25)::

    stem 32w (8) -> stages 64w..1024w (16, 32, 64, 128, 256) at strides 2..32
    R1, R2, R3 = stage 1..3 outputs (strides 2, 4, 8); C3, C4, C5 = stages 3..5
    DCM on C5; fusion of R1..R3 -> 256w channels at stride 8
    neck: YOLOv3 top-down path, fused map concatenated into the stride-8
    branch, DCM right before the stride-8 head
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cbam import DEFAULT_REDUCTION, CbamParams, cbam_apply, init_cbam
from .dcm import RESIDUAL_GAIN, DcmParams, dcm_forward, init_dcm
from .postprocess import BBox, Detection
from .rng import Rng
from .tensor import (ConvSpec, as_tensor, concat_channels, conv2d, init_conv, leaky_relu,
                     l2_normalize, mish, pool2d, relu, sigmoid, upsample_nearest)

STRIDES = (8, 16, 32)
NUM_ANCHORS = 3
# YOLOv3 COCO anchors at 416 px, one triple per stride.
COCO_ANCHORS_416 = (
    ((10, 13), (16, 30), (33, 23)),
    ((30, 61), (62, 45), (59, 119)),
    ((116, 90), (156, 198), (373, 326)),
)


def default_anchors(input_size: int) -> tuple:
    r = input_size / 416.0
    return tuple(tuple((round(w * r, 4), round(h * r, 4)) for w, h in tri)
                 for tri in COCO_ANCHORS_416)


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 640
    width: float = 0.25
    blocks: tuple = (1, 1, 2, 2, 1)
    num_classes: int = 80
    anchors: tuple | None = None
    fusion_channels: int | None = None
    cbam_reduction: int = DEFAULT_REDUCTION
    use_fusion: bool = True
    use_dcm: bool = True

    def __post_init__(self):
        if self.input_size <= 0 or self.input_size % 32:
            raise ValueError(f"input size must be a positive multiple of 32, got {self.input_size}")
        if not 0 < self.width <= 1:
            raise ValueError(f"width multiplier must be in (0, 1], got {self.width}")
        blocks = tuple(int(b) for b in self.blocks)
        if len(blocks) != 5 or min(blocks) < 1:
            raise ValueError(f"need five positive residual block counts, got {self.blocks}")
        object.__setattr__(self, "blocks", blocks)
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        anchors = default_anchors(self.input_size) if self.anchors is None else self.anchors
        anchors = tuple(tuple((float(w), float(h)) for w, h in tri) for tri in anchors)
        if len(anchors) != 3 or any(len(tri) != NUM_ANCHORS for tri in anchors):
            raise ValueError("need three anchors for each of three scales")
        if any(v <= 0 for tri in anchors for wh in tri for v in wh):
            raise ValueError("anchors must be positive")
        object.__setattr__(self, "anchors", anchors)
        if self.fusion_channels is None:
            object.__setattr__(self, "fusion_channels", self.ch(256))
        if self.fusion_channels < 1 or self.cbam_reduction < 1:
            raise ValueError("fusion_channels and cbam_reduction must be positive")

    def ch(self, n: int) -> int:
        return max(1, int(round(n * self.width)))

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(self.ch(n) for n in (64, 128, 256, 512, 1024))

    @property
    def grids(self) -> tuple[int, ...]:
        return tuple(self.input_size // s for s in STRIDES)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["blocks"] = list(self.blocks)
        d["anchors"] = [[list(wh) for wh in tri] for tri in self.anchors]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("blocks") is not None:
            d["blocks"] = tuple(d["blocks"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True, eq=False)
class ResidualBlock:
    reduce: ConvSpec
    expand: ConvSpec


@dataclass(frozen=True, eq=False)
class Stage:
    down: ConvSpec
    blocks: tuple


@dataclass(frozen=True, eq=False)
class BackboneParams:
    stem: ConvSpec
    stages: tuple
    dcm: DcmParams | None


@dataclass(frozen=True, eq=False)
class FusionParams:
    cbam: tuple            # CBAM for R1, R2, R3
    scales: tuple          # per-path tuple of l2 scales, one per downsample step
    proj: tuple            # 1x1 convs to the fusion width for R1, R2
    mix: ConvSpec          # 3x3 over the concatenation

    @property
    def channels(self) -> int:
        return self.mix.out_channels


@dataclass(frozen=True, eq=False)
class NeckParams:
    set5: tuple
    lat5: ConvSpec
    set4: tuple
    lat4: ConvSpec
    set3: tuple
    out: tuple             # 3x3 pre-head convs for strides 8, 16, 32
    dcm: DcmParams | None


@dataclass(frozen=True, eq=False)
class HeadParams:
    reduce: ConvSpec
    cls_conv: ConvSpec
    cls_out: ConvSpec
    reg_conv: ConvSpec
    reg_out: ConvSpec


@dataclass(frozen=True, eq=False)
class ModelParams:
    backbone: BackboneParams
    fusion: FusionParams | None
    neck: NeckParams
    heads: tuple


def _conv_set(rng: Rng, cin: int, c: int) -> tuple:
    return (init_conv(rng.child("0"), cin, c, 1),
            init_conv(rng.child("1"), c, 2 * c, 3),
            init_conv(rng.child("2"), 2 * c, c, 1))


OUTPUT_STD = 0.01
OBJECTNESS_PRIOR = 0.01


def _init_prediction(rng: Rng, cin: int, cout: int, bias) -> ConvSpec:
    # small weights keep an untrained head away from sigmoid saturation
    w = (OUTPUT_STD * rng.normal(cout * cin)).astype(np.float32).astype(np.float64)
    return ConvSpec(w.reshape(cout, cin, 1, 1), np.asarray(bias, dtype=np.float32).astype(np.float64))


def init_head(rng: Rng, cin: int, num_classes: int) -> HeadParams:
    """Hidden convs are He-initialized; the prediction convs start near their bias,
    with objectness at a low prior so random weights yield few confident boxes."""
    hidden = max(1, cin // 2)
    reg_bias = np.zeros(NUM_ANCHORS * 5)
    reg_bias[4::5] = -np.log((1 - OBJECTNESS_PRIOR) / OBJECTNESS_PRIOR)
    return HeadParams(
        reduce=init_conv(rng.child("reduce"), cin, hidden, 1),
        cls_conv=init_conv(rng.child("cls_conv"), hidden, hidden, 3),
        cls_out=_init_prediction(rng.child("cls_out"), hidden, NUM_ANCHORS * num_classes,
                                 np.zeros(NUM_ANCHORS * num_classes)),
        reg_conv=init_conv(rng.child("reg_conv"), hidden, hidden, 3),
        reg_out=_init_prediction(rng.child("reg_out"), hidden, NUM_ANCHORS * 5, reg_bias),
    )


def init_model(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Random parameters; every layer draws from its own named stream."""
    rng = Rng(seed)
    stem_c = config.ch(32)
    cs = config.stage_channels

    bb = rng.child("backbone")
    stages, cin = [], stem_c
    for i, (c, n) in enumerate(zip(cs, config.blocks)):
        r = bb.child(f"stage{i + 1}")
        down = init_conv(r.child("down"), cin, c, 3, stride=2, padding=1)
        blocks = tuple(
            ResidualBlock(init_conv(r.child(f"block{j}.reduce"), c, max(1, c // 2), 1),
                          init_conv(r.child(f"block{j}.expand"), max(1, c // 2), c, 3,
                                    gain=RESIDUAL_GAIN))
            for j in range(n))
        stages.append(Stage(down, blocks))
        cin = c
    backbone = BackboneParams(
        stem=init_conv(bb.child("stem"), 3, stem_c, 3),
        stages=tuple(stages),
        dcm=init_dcm(bb.child("dcm"), cs[4]) if config.use_dcm else None,
    )

    fusion = None
    fc = config.fusion_channels
    if config.use_fusion:
        fr = rng.child("fusion")
        fusion = FusionParams(
            cbam=tuple(init_cbam(fr.child(f"cbam{i + 1}"), cs[i], config.cbam_reduction)
                       for i in range(3)),
            scales=((np.ones(cs[0]), np.ones(cs[0])), (np.ones(cs[1]),)),
            proj=(init_conv(fr.child("proj1"), cs[0], fc, 1),
                  init_conv(fr.child("proj2"), cs[1], fc, 1)),
            mix=init_conv(fr.child("mix"), 2 * fc + cs[2], fc, 3),
        )

    nr = rng.child("neck")
    n5, n4, n3 = config.ch(512), config.ch(256), config.ch(128)
    l5, l4 = config.ch(256), config.ch(128)
    in3 = l4 + cs[2] + (fc if config.use_fusion else 0)
    neck = NeckParams(
        set5=_conv_set(nr.child("set5"), cs[4], n5),
        lat5=init_conv(nr.child("lat5"), n5, l5, 1),
        set4=_conv_set(nr.child("set4"), l5 + cs[3], n4),
        lat4=init_conv(nr.child("lat4"), n4, l4, 1),
        set3=_conv_set(nr.child("set3"), in3, n3),
        out=(init_conv(nr.child("out3"), n3, 2 * n3, 3),
             init_conv(nr.child("out4"), n4, 2 * n4, 3),
             init_conv(nr.child("out5"), n5, 2 * n5, 3)),
        dcm=init_dcm(nr.child("dcm"), 2 * n3) if config.use_dcm else None,
    )
    heads = tuple(init_head(rng.child(f"head{s}"), 2 * n, config.num_classes)
                  for s, n in zip(STRIDES, (n3, n4, n5)))
    return ModelParams(backbone, fusion, neck, heads)


def iter_arrays(obj):
    """Yield every parameter array in declaration order."""
    if isinstance(obj, np.ndarray):
        yield obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.name in ("stride", "padding", "dilation"):
                continue
            yield from iter_arrays(getattr(obj, f.name))
    elif isinstance(obj, (tuple, list)):
        for item in obj:
            yield from iter_arrays(item)


def map_arrays(obj, fn):
    """Rebuild ``obj`` with every parameter array replaced by ``fn(array)``."""
    if isinstance(obj, np.ndarray):
        return fn(obj)
    if dataclasses.is_dataclass(obj):
        kw = {f.name: map_arrays(getattr(obj, f.name), fn) for f in dataclasses.fields(obj)
              if f.name not in ("stride", "padding", "dilation")}
        return dataclasses.replace(obj, **kw)
    if isinstance(obj, (tuple, list)):
        return type(obj)(map_arrays(item, fn) for item in obj)
    return obj


def count_params(params) -> int:
    return sum(a.size for a in iter_arrays(params))


# ------------------------------------------------------------------- forward

@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    r1: np.ndarray
    r2: np.ndarray
    r3: np.ndarray
    c3: np.ndarray
    c4: np.ndarray
    c5: np.ndarray


@dataclass(frozen=True, eq=False)
class RawPrediction:
    """Class map ``(3*num_classes, G, G)`` and regression map ``(15, G, G)``.

    Regression channels per anchor are ``tx, ty, tw, th, objectness``.
    """

    cls: np.ndarray
    reg: np.ndarray
    stride: int

    @property
    def grid(self) -> tuple[int, int]:
        return self.reg.shape[1:]

    def stacked(self) -> np.ndarray:
        return concat_channels([self.cls, self.reg])


def _cbl(x, spec: ConvSpec):
    return leaky_relu(conv2d(x, spec))


def _residual(x, block: ResidualBlock):
    return x + _cbl(_cbl(x, block.reduce), block.expand)


def backbone_forward(image, config: ModelConfig, params: ModelParams) -> FeaturePyramid:
    x = as_tensor(image, "image")
    s = config.input_size
    if x.shape != (3, s, s):
        raise ValueError(f"image must be 3x{s}x{s}, got {x.shape}")
    bb = params.backbone
    x = _cbl(x, bb.stem)
    outs = []
    for stage in bb.stages:
        x = _cbl(x, stage.down)
        for block in stage.blocks:
            x = _residual(x, block)
        outs.append(x)
    c5 = dcm_forward(outs[4], bb.dcm) if bb.dcm is not None else outs[4]
    return FeaturePyramid(outs[0], outs[1], outs[2], outs[2], outs[3], c5)


def _downsample(x, scale):
    """One 2x step: sum of 2x2 max and avg pools, then per-pixel L2 normalization."""
    return l2_normalize(pool2d(x, "max", 2, 2) + pool2d(x, "avg", 2, 2), scale)


def fusion_forward(r1, r2, r3, params: FusionParams) -> np.ndarray:
    r1, r2, r3 = as_tensor(r1, "R1"), as_tensor(r2, "R2"), as_tensor(r3, "R3")
    h3, w3 = r3.shape[1:]
    if r2.shape[1:] != (2 * h3, 2 * w3) or r1.shape[1:] != (4 * h3, 4 * w3):
        raise ValueError(
            f"fusion needs R1, R2, R3 at strides 2, 4, 8; got {r1.shape}, {r2.shape}, {r3.shape}")
    paths = []
    for x, cb, scales, proj in zip((r1, r2), params.cbam, params.scales, params.proj):
        x = cbam_apply(x, cb)
        for scale in scales:
            x = _downsample(x, scale)
        paths.append(conv2d(relu(x), proj))
    paths.append(cbam_apply(r3, params.cbam[2]))
    return conv2d(concat_channels(paths), params.mix)


def _run_set(x, convs):
    for conv in convs:
        x = _cbl(x, conv)
    return x


def neck_forward(pyramid: FeaturePyramid, fused, params: NeckParams) -> tuple:
    """Per-scale head inputs for strides 8, 16, 32."""
    route5 = _run_set(pyramid.c5, params.set5)
    up5 = upsample_nearest(_cbl(route5, params.lat5), 2)
    route4 = _run_set(concat_channels([up5, pyramid.c4]), params.set4)
    up4 = upsample_nearest(_cbl(route4, params.lat4), 2)
    parts = [up4, pyramid.c3] + ([fused] if fused is not None else [])
    route3 = _run_set(concat_channels(parts), params.set3)

    p3 = _cbl(route3, params.out[0])
    if params.dcm is not None:
        p3 = dcm_forward(p3, params.dcm)
    p4 = _cbl(route4, params.out[1])
    p5 = _cbl(route5, params.out[2])
    return p3, p4, p5


def head_forward(x, params: HeadParams, stride: int = 0) -> RawPrediction:
    shared = _cbl(x, params.reduce)
    cls = conv2d(mish(conv2d(shared, params.cls_conv)), params.cls_out)
    reg = conv2d(mish(conv2d(shared, params.reg_conv)), params.reg_out)
    return RawPrediction(cls, reg, stride)


def model_forward(image, config: ModelConfig, params: ModelParams) -> tuple:
    pyramid = backbone_forward(image, config, params)
    fused = None
    if params.fusion is not None:
        fused = fusion_forward(pyramid.r1, pyramid.r2, pyramid.r3, params.fusion)
    feats = neck_forward(pyramid, fused, params.neck)
    return tuple(head_forward(f, h, s) for f, h, s in zip(feats, params.heads, STRIDES))


# -------------------------------------------------------------------- decode

_MAX_LOG_SCALE = 20.0


def decode_arrays(raws, config: ModelConfig, score_floor: float = 0.001):
    """Vectorized decode: returns ``(boxes (n, 4), scores (n,), classes (n,))``.

    Each cell/anchor contributes its best class. Order is scale, anchor, row,
    column, which keeps the output deterministic.
    """
    nc = config.num_classes
    size = float(config.input_size)
    all_boxes, all_scores, all_cls = [], [], []
    for raw, anchors in zip(raws, config.anchors):
        g_h, g_w = raw.grid
        stride = raw.stride or config.input_size // g_w
        reg = raw.reg.reshape(NUM_ANCHORS, 5, g_h, g_w)
        cls = raw.cls.reshape(NUM_ANCHORS, nc, g_h, g_w)
        cy, cx = np.meshgrid(np.arange(g_h), np.arange(g_w), indexing="ij")
        aw = np.array([a[0] for a in anchors])[:, None, None]
        ah = np.array([a[1] for a in anchors])[:, None, None]
        xc = (sigmoid(reg[:, 0]) + cx) * stride
        yc = (sigmoid(reg[:, 1]) + cy) * stride
        w = aw * np.exp(np.minimum(reg[:, 2], _MAX_LOG_SCALE))
        h = ah * np.exp(np.minimum(reg[:, 3], _MAX_LOG_SCALE))
        probs = sigmoid(cls)
        best = probs.argmax(axis=1)
        score = sigmoid(reg[:, 4]) * np.take_along_axis(probs, best[:, None], axis=1)[:, 0]
        boxes = np.stack([xc - w / 2, yc - h / 2, xc + w / 2, yc + h / 2], axis=-1)
        keep = (score >= score_floor).ravel()
        all_boxes.append(np.clip(boxes.reshape(-1, 4)[keep], 0.0, size))
        all_scores.append(score.ravel()[keep])
        all_cls.append(best.ravel()[keep])
    return (np.concatenate(all_boxes), np.concatenate(all_scores),
            np.concatenate(all_cls).astype(np.int64))


def decode_predictions(raws, config: ModelConfig, score_floor: float = 0.001,
                       image_id: int = 0) -> list[Detection]:
    boxes, scores, classes = decode_arrays(raws, config, score_floor)
    return [Detection(BBox(*b), int(c), float(s), image_id)
            for b, s, c in zip(boxes.tolist(), scores.tolist(), classes.tolist())]


# ----------------------------------------------------------- serialization

_MAGIC = b"SOW1"
_HEADER = struct.Struct("<4s32sIQ")


class WeightsError(ValueError):
    pass


def save_params(path, params: ModelParams, config: ModelConfig) -> None:
    """Header (magic, config sha256, array count, float count), then LE float32."""
    arrays = list(iter_arrays(params))
    total = sum(a.size for a in arrays)
    body = np.concatenate([a.ravel() for a in arrays]).astype("<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, bytes.fromhex(config.digest()), len(arrays), total))
        f.write(body.tobytes())


def load_params(path, config: ModelConfig) -> ModelParams:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise WeightsError(f"{path}: truncated header")
    magic, digest, n_arrays, total = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise WeightsError(f"{path}: not a weights file")
    if digest.hex() != config.digest():
        raise WeightsError(f"{path}: weights were saved for a different model config")
    template = init_model(config, 0)
    shapes = [a.shape for a in iter_arrays(template)]
    if n_arrays != len(shapes) or total != sum(int(np.prod(s)) for s in shapes):
        raise WeightsError(f"{path}: parameter counts do not match the config")
    body = blob[_HEADER.size:]
    if len(body) != 4 * total:
        raise WeightsError(f"{path}: expected {4 * total} payload bytes, found {len(body)}")
    flat = np.frombuffer(body, dtype="<f4").astype(np.float64)
    offset = 0

    def take(a):
        nonlocal offset
        out = flat[offset:offset + a.size].reshape(a.shape)
        offset += a.size
        return out

    return map_arrays(template, take)

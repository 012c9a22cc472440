"""COCO-style annotations and results, plus a deterministic synthetic scene generator."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import AREA_RANGES, GroundTruth, size_bucket
from .postprocess import BBox, Detection, iou_many
from .rng import Rng


class DataFormatError(ValueError):
    """Malformed or inconsistent annotation / results data."""


# -------------------------------------------------------------- annotations

@dataclass(frozen=True)
class ImageInfo:
    id: int
    width: int
    height: int
    file_name: str


@dataclass(frozen=True)
class Category:
    id: int
    name: str


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    category_id: int
    bbox: tuple          # x, y, w, h
    area: float


@dataclass
class AnnotationSet:
    images: list = field(default_factory=list)
    categories: list = field(default_factory=list)
    annotations: list = field(default_factory=list)

    def validate(self) -> "AnnotationSet":
        image_ids = {im.id for im in self.images}
        cat_ids = {c.id for c in self.categories}
        for a in self.annotations:
            if a.image_id not in image_ids:
                raise DataFormatError(f"annotation {a.id} references unknown image id {a.image_id}")
            if a.category_id not in cat_ids:
                raise DataFormatError(
                    f"annotation {a.id} references unknown category id {a.category_id}")
            if a.bbox[2] < 0 or a.bbox[3] < 0:
                raise DataFormatError(f"annotation {a.id} has negative size {a.bbox}")
        return self

    def ground_truths(self) -> list[GroundTruth]:
        return [GroundTruth(a.image_id, BBox.from_xywh(*a.bbox), a.category_id)
                for a in self.annotations]

    def class_names(self) -> dict:
        return {c.id: c.name for c in self.categories}

    def to_dict(self) -> dict:
        return {
            "images": [{"id": im.id, "width": im.width, "height": im.height,
                        "file_name": im.file_name} for im in self.images],
            "categories": [{"id": c.id, "name": c.name} for c in self.categories],
            "annotations": [{"id": a.id, "image_id": a.image_id, "category_id": a.category_id,
                             "bbox": list(a.bbox), "area": a.area} for a in self.annotations],
        }


def _num(v, what):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise DataFormatError(f"{what} must be a finite number, got {v!r}")
    return v


def _int(v, what):
    if isinstance(v, bool) or not isinstance(v, int):
        raise DataFormatError(f"{what} must be an integer, got {v!r}")
    return v


def _read_json(path):
    try:
        text = Path(path).read_bytes().decode("utf-8")
        return json.loads(text)
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError) as e:
        raise DataFormatError(f"{path}: invalid JSON ({e})") from None


def parse_annotations(doc) -> AnnotationSet:
    try:
        if not isinstance(doc, dict):
            raise DataFormatError("annotation file must hold a JSON object")
        for key in ("images", "categories", "annotations"):
            if not isinstance(doc.get(key), list):
                raise DataFormatError(f"missing or non-list key {key!r}")
        images = [ImageInfo(_int(im["id"], "image id"), _int(im["width"], "width"),
                            _int(im["height"], "height"), str(im.get("file_name", "")))
                  for im in doc["images"]]
        cats = [Category(_int(c["id"], "category id"), str(c.get("name", c["id"])))
                for c in doc["categories"]]
        anns = []
        for n, a in enumerate(doc["annotations"]):
            bbox = a["bbox"]
            if not isinstance(bbox, list) or len(bbox) != 4:
                raise DataFormatError(f"annotation bbox must be [x, y, w, h], got {bbox!r}")
            bbox = tuple(_num(v, "bbox value") for v in bbox)
            area = _num(a["area"], "area") if "area" in a else bbox[2] * bbox[3]
            anns.append(Annotation(_int(a.get("id", n + 1), "annotation id"),
                                   _int(a["image_id"], "image_id"),
                                   _int(a["category_id"], "category_id"), bbox, area))
    except (KeyError, TypeError, AttributeError) as e:
        raise DataFormatError(f"malformed annotation record: {e!r}") from None
    return AnnotationSet(images, cats, anns).validate()


def load_annotations(path) -> AnnotationSet:
    return parse_annotations(_read_json(path))


def save_annotations(ann: AnnotationSet, path) -> None:
    Path(path).write_text(json.dumps(ann.to_dict(), indent=1))


# ------------------------------------------------------------------ results

def detections_to_json(dets) -> str:
    return json.dumps([{"image_id": d.image_id, "category_id": d.class_id,
                        "bbox": d.box.to_xywh(), "score": d.score} for d in dets])


def save_detections(dets, path) -> None:
    Path(path).write_text(detections_to_json(dets))


def parse_detections(doc) -> list[Detection]:
    if not isinstance(doc, list):
        raise DataFormatError("results file must hold a JSON array")
    out = []
    try:
        for r in doc:
            bbox = r["bbox"]
            if not isinstance(bbox, list) or len(bbox) != 4:
                raise DataFormatError(f"result bbox must be [x, y, w, h], got {bbox!r}")
            x, y, w, h = (_num(v, "bbox value") for v in bbox)
            if w < 0 or h < 0:
                raise DataFormatError(f"result bbox has negative size {bbox}")
            score = _num(r["score"], "score")
            if not 0.0 <= score <= 1.0:
                raise DataFormatError(f"score outside [0, 1]: {score}")
            out.append(Detection(BBox.from_xywh(x, y, w, h), _int(r["category_id"], "category_id"),
                                 float(score), _int(r["image_id"], "image_id")))
    except (KeyError, TypeError) as e:
        raise DataFormatError(f"malformed result record: {e!r}") from None
    return out


def load_detections(path) -> list[Detection]:
    return parse_detections(_read_json(path))


# ---------------------------------------------------------------- synthesis

# Area ranges used when sampling each bucket; the smallest objects are 4x4.
_SAMPLE_AREAS = {"small": (16, AREA_RANGES["small"][1]),
                 "medium": (AREA_RANGES["medium"][0] + 1, AREA_RANGES["medium"][1]),
                 "large": (AREA_RANGES["large"][0] + 1, 256 * 256)}
_BUCKETS = ("small", "medium", "large")
_PALETTE = np.array([[0.90, 0.20, 0.20], [0.20, 0.75, 0.25], [0.20, 0.35, 0.90],
                     [0.95, 0.80, 0.15], [0.75, 0.25, 0.80], [0.15, 0.80, 0.80],
                     [0.95, 0.55, 0.10], [0.55, 0.35, 0.20]])
_PLAIN_MAX_IOU = 0.2
_OCCLUSION_IOU = (0.4, 0.8)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    image_size: int = 640
    objects_per_image: tuple = (3, 10)
    size_weights: tuple = (0.5, 0.3, 0.2)
    occlusion_rate: float = 0.0
    num_classes: int = 4

    def __post_init__(self):
        w = tuple(float(v) for v in self.size_weights)
        if len(w) != 3 or min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"size weights must be three non-negative values summing to 1, got {w}")
        object.__setattr__(self, "size_weights", w)
        lo, hi = (int(v) for v in self.objects_per_image)
        if lo < 0 or hi < lo:
            raise ValueError(f"bad objects_per_image range {self.objects_per_image}")
        object.__setattr__(self, "objects_per_image", (lo, hi))
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ValueError("occlusion_rate must lie in [0, 1]")
        if self.image_size < 8 or self.num_classes < 1 or self.seed < 0:
            raise ValueError("need image_size >= 8, num_classes >= 1 and a non-negative seed")


@dataclass(frozen=True)
class SceneObject:
    box: BBox
    class_id: int
    shape: str                      # "rect" or "ellipse"
    occluder: bool = False


def _sample_size(rng: Rng, bucket: str, limit: int):
    lo, hi = _SAMPLE_AREAS[bucket]
    hi = min(hi, limit * limit)
    for _ in range(100):
        area = rng.uniform(lo, max(lo, hi))
        aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
        w = max(2, min(limit, int(round(math.sqrt(area * aspect)))))
        h = max(2, min(limit, int(round(math.sqrt(area / aspect)))))
        if size_bucket(w * h) == bucket:
            return w, h
    return None


def _fits(box, placed, skip=None, max_iou=_PLAIN_MAX_IOU):
    others = [p.box.as_array() for i, p in enumerate(placed) if i != skip]
    if not others:
        return True
    return bool(np.all(iou_many(box.as_array(), np.array(others)) < max_iou))


def _place(rng: Rng, w, h, size, placed, tries=50):
    for _ in range(tries):
        x = rng.integers(0, size - w + 1)
        y = rng.integers(0, size - h + 1)
        box = BBox(x, y, x + w, y + h)
        if _fits(box, placed):
            return box
    return None


def _occluder_for(rng: Rng, target: BBox, size, placed, tries=200):
    """A larger box overlapping ``target`` with IoU inside the occlusion band."""
    lo, hi = _OCCLUSION_IOU
    tw, th = target.width, target.height
    for _ in range(tries):
        k = rng.uniform(1.05, 1.5)
        w, h = int(round(tw * k)), int(round(th * k))
        if w > size or h > size or w * h <= tw * th:
            continue
        x = int(target.x_min) + rng.integers(-int(0.4 * w), int(0.4 * w) + 1)
        y = int(target.y_min) + rng.integers(-int(0.4 * h), int(0.4 * h) + 1)
        if x < 0 or y < 0 or x + w > size or y + h > size:
            continue
        box = BBox(x, y, x + w, y + h)
        v = float(iou_many(target.as_array(), box.as_array()[None])[0])
        if lo <= v <= hi and _fits(box, placed, skip=len(placed) - 1):
            return box
    return None


def scene_objects(spec: SceneSpec, index: int) -> list[SceneObject]:
    """Object layout for scene ``index``; a pure function of ``(spec, index)``."""
    rng = Rng(spec.seed).child("scene").child(int(index))
    size = spec.image_size
    lo, hi = spec.objects_per_image
    count = rng.integers(lo, hi + 1)
    placed: list[SceneObject] = []
    for _ in range(count):
        bucket = _BUCKETS[rng.choice(spec.size_weights)]
        occlude = rng.random() < spec.occlusion_rate
        cls = rng.integers(0, spec.num_classes)
        shape = "ellipse" if rng.random() < 0.5 else "rect"
        wh = _sample_size(rng, bucket, size)
        if wh is None:
            continue
        box = _place(rng, *wh, size, placed)
        if box is None:
            continue
        placed.append(SceneObject(box, cls, shape))
        if occlude:
            obox = _occluder_for(rng, box, size, placed)
            if obox is not None:
                ocls = rng.integers(0, spec.num_classes)
                placed.append(SceneObject(obox, ocls, "rect", occluder=True))
    return placed


def render_scene(spec: SceneSpec, index: int, objects) -> np.ndarray:
    """3 x S x S image in [0, 1], quantized to 8-bit levels."""
    rng = Rng(spec.seed).child("texture").child(int(index))
    size = spec.image_size
    noise = rng.random(3 * size * size).reshape(3, size, size)
    ramp = np.linspace(0.0, 0.1, size)
    img = 0.35 + 0.08 * noise + ramp[None, :, None] + ramp[None, None, :] * 0.5
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for obj in objects:
        color = _PALETTE[obj.class_id % len(_PALETTE)]
        x0, y0, x1, y1 = (int(v) for v in (obj.box.x_min, obj.box.y_min,
                                           obj.box.x_max, obj.box.y_max))
        if obj.shape == "rect":
            img[:, y0:y1, x0:x1] = color[:, None, None]
        else:
            cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
            rx, ry = max((x1 - x0) / 2, 0.5), max((y1 - y0) / 2, 0.5)
            mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
            img[:, mask] = color[:, None]
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate_scene(spec: SceneSpec, index: int, render: bool = True):
    """``(image or None, ground truths)`` for scene ``index``."""
    objects = scene_objects(spec, index)
    gts = [GroundTruth(int(index), o.box, o.class_id) for o in objects]
    image = render_scene(spec, index, objects) if render else None
    return image, gts


def build_annotation_set(spec: SceneSpec, scenes, suffix: str = ".png") -> AnnotationSet:
    """COCO annotation set for per-image GT lists; image ids run from 1."""
    ann = AnnotationSet(categories=[Category(c, f"class{c}") for c in range(spec.num_classes)])
    next_id = 1
    for image_id, gts in enumerate(scenes, 1):
        ann.images.append(ImageInfo(image_id, spec.image_size, spec.image_size,
                                    f"images/{image_id:06d}{suffix}"))
        for g in gts:
            ann.annotations.append(Annotation(next_id, image_id, g.class_id,
                                              tuple(g.box.to_xywh()), g.box.area))
            next_id += 1
    return ann


def generate_dataset(spec: SceneSpec, n: int, render: bool = True):
    """``(AnnotationSet, images)`` for scenes 1..n."""
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    scenes = [generate_scene(spec, i, render) for i in range(1, n + 1)]
    return build_annotation_set(spec, [g for _, g in scenes]), [im for im, _ in scenes]


def dataset_digest(ann: AnnotationSet, images=()) -> str:
    h = hashlib.sha256(json.dumps(ann.to_dict(), sort_keys=True).encode())
    for im in images:
        if im is not None:
            h.update(np.ascontiguousarray(im, dtype="<f8").tobytes())
    return h.hexdigest()


def save_image(image: np.ndarray, path) -> None:
    path = Path(path)
    if path.suffix == ".npy":
        np.save(path, np.asarray(image, dtype=np.float32))
        return
    from PIL import Image
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, "RGB").save(path)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64)
    from PIL import Image
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr.transpose(2, 0, 1) / 255.0

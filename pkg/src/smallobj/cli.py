"""Command-line entry point: ``smallobj {gen,infer,eval,selftest,bench}``.

Exit codes: 0 success, 1 validation error, 2 runtime or I/O error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import arch, data, metrics, postprocess, selftest
from .postprocess import BBox, Detection, SoftNmsConfig

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# defaults live here, not in argparse, so config files can sit between them and the flags
DEFAULTS = {
    "seed": 0,
    "out": None,
    "n": 10,
    "image_size": 640,
    "objects": [3, 10],
    "size_weights": [0.5, 0.3, 0.2],
    "occlusion": 0.0,
    "num_classes": 4,
    "format": "png",
    "data": None,
    "weights": None,
    "input_size": 640,
    "width": 0.25,
    "nms": "soft",
    "sigma": 1.1,
    "nt": 0.9,
    "score_floor": 0.001,
    "iou_threshold": 0.5,
    "max_candidates": 300,
    "max_detections": 100,
    "annotations": None,
    "detections": None,
    "repeat": 1,
}


def read_config_file(path) -> dict:
    """JSON object, or flat ``key=value`` lines (values parsed as JSON when possible)."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: invalid JSON config ({e})") from None
    else:
        cfg = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            try:
                cfg[k] = json.loads(v)
            except json.JSONDecodeError:
                cfg[k] = v
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise UsageError(f"{path}: unknown config keys {sorted(unknown)}")
    return cfg


def _common(p):
    p.add_argument("--config", help="JSON or key=value file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")


def _nms_flags(p):
    p.add_argument("--nms", choices=["hard", "soft", "none"])
    p.add_argument("--sigma", type=float)
    p.add_argument("--nt", type=float)
    p.add_argument("--score-floor", type=float)
    p.add_argument("--iou-threshold", type=float)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="smallobj", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic COCO-style dataset")
    _common(g)
    g.add_argument("--n", type=int)
    g.add_argument("--image-size", type=int)
    g.add_argument("--objects", type=int, nargs=2, metavar=("MIN", "MAX"))
    g.add_argument("--size-weights", type=float, nargs=3, metavar=("S", "M", "L"))
    g.add_argument("--occlusion", type=float)
    g.add_argument("--num-classes", type=int)
    g.add_argument("--format", choices=["png", "npy"])

    i = sub.add_parser("infer", help="run the detector over a dataset")
    _common(i)
    _nms_flags(i)
    i.add_argument("--data", help="dataset directory written by gen")
    i.add_argument("--weights")
    i.add_argument("--input-size", type=int)
    i.add_argument("--width", type=float)
    i.add_argument("--max-candidates", type=int)
    i.add_argument("--max-detections", type=int)

    e = sub.add_parser("eval", help="score detections against annotations")
    _common(e)
    e.add_argument("--data", help="dataset directory (uses its annotations.json)")
    e.add_argument("--annotations")
    e.add_argument("--detections")

    s = sub.add_parser("selftest", help="run invariant and oracle checks")
    _common(s)
    _nms_flags(s)
    s.add_argument("--input-size", type=int)

    b = sub.add_parser("bench", help="time the forward pass and suppression")
    _common(b)
    _nms_flags(b)
    b.add_argument("--input-size", type=int)
    b.add_argument("--width", type=float)
    b.add_argument("--repeat", type=int)
    return p


def resolve(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(read_config_file(args.config))
    for k, v in vars(args).items():
        if k in DEFAULTS and v is not None:
            cfg[k] = v
    cfg["command"] = args.command
    return cfg


def config_hash(cfg: dict) -> str:
    """Hash of the resolved config, ignoring where outputs were written."""
    blob = json.dumps({k: v for k, v in cfg.items() if k != "out"},
                      sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, cfg: dict, outputs: dict) -> str:
    """Write the run manifest; returns a hash of (config, output digests)."""
    digest = hashlib.sha256(json.dumps([config_hash(cfg), outputs], sort_keys=True).encode())
    manifest = {"command": cfg["command"], "seed": cfg["seed"], "config": cfg,
                "config_hash": config_hash(cfg), "outputs": outputs,
                "manifest_hash": digest.hexdigest()}
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return digest.hexdigest()


def worker_count() -> int:
    env = os.environ.get("SMALLOBJ_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"SMALLOBJ_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise UsageError("SMALLOBJ_THREADS must be positive")
        return n
    return os.cpu_count() or 1


def soft_config(cfg: dict) -> SoftNmsConfig:
    return SoftNmsConfig(sigma=cfg["sigma"], nt=cfg["nt"], score_floor=cfg["score_floor"])


# ---------------------------------------------------------------------- gen

def run_gen(cfg: dict) -> int:
    if cfg["out"] is None:
        raise UsageError("gen needs --out DIR")
    if cfg["n"] < 0:
        raise UsageError(f"--n must be non-negative, got {cfg['n']}")
    spec = data.SceneSpec(seed=cfg["seed"], image_size=cfg["image_size"],
                          objects_per_image=tuple(cfg["objects"]),
                          size_weights=tuple(cfg["size_weights"]),
                          occlusion_rate=cfg["occlusion"], num_classes=cfg["num_classes"])
    out = Path(cfg["out"])
    (out / "images").mkdir(parents=True, exist_ok=True)
    ext = "." + cfg["format"]

    def one(index):
        image, gts = data.generate_scene(spec, index)
        data.save_image(image, out / "images" / f"{index:06d}{ext}")
        return gts

    with ThreadPoolExecutor(worker_count()) as pool:
        scenes = list(pool.map(one, range(1, cfg["n"] + 1)))

    ann = data.build_annotation_set(spec, scenes, ext)
    data.save_annotations(ann, out / "annotations.json")
    outputs = {"annotations.json": _sha(out / "annotations.json")}
    for im in ann.images:
        outputs[im.file_name] = _sha(out / im.file_name)
    digest = write_manifest(out / "manifest.json", cfg, outputs)
    print(json.dumps({"images": len(ann.images), "annotations": len(ann.annotations),
                      "manifest_hash": digest}))
    return EXIT_OK


# -------------------------------------------------------------------- infer

def letterbox(image: np.ndarray, size: int):
    """Nearest-neighbour resize of the long side to ``size``, zero pad bottom/right."""
    _, h, w = image.shape
    scale = size / max(h, w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    ys = np.minimum((np.arange(nh) / scale).astype(int), h - 1)
    xs = np.minimum((np.arange(nw) / scale).astype(int), w - 1)
    out = np.zeros((3, size, size))
    out[:, :nh, :nw] = image[:, ys][:, :, xs]
    return out, scale


def infer_image(image, model_cfg, params, cfg: dict, image_id: int = 0, cat_ids=None):
    """``(candidates, final)`` detections for one image in original pixel coordinates."""
    _, h, w = image.shape
    x, scale = letterbox(image, model_cfg.input_size)
    raws = arch.model_forward(x, model_cfg, params)
    boxes, scores, classes = arch.decode_arrays(raws, model_cfg, cfg["score_floor"])
    order = np.argsort(-scores, kind="stable")[:cfg["max_candidates"]]
    boxes = boxes[order] / scale
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0, w)
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0, h)
    cat_ids = cat_ids or list(range(model_cfg.num_classes))
    candidates = [Detection(BBox(*b), cat_ids[c], float(s), image_id)
                  for b, s, c in zip(boxes.tolist(), scores[order].tolist(),
                                     classes[order].tolist())]
    if cfg["nms"] == "hard":
        final = postprocess.nms_hard(candidates, cfg["iou_threshold"])
    elif cfg["nms"] == "soft":
        final = postprocess.soft_nms(candidates, soft_config(cfg))
    else:
        final = list(candidates)
    final = sorted(final, key=lambda d: -d.score)[:cfg["max_detections"]]
    return candidates, final


def run_infer(cfg: dict) -> int:
    if cfg["data"] is None or cfg["out"] is None:
        raise UsageError("infer needs --data DIR and --out FILE")
    soft_config(cfg)
    root = Path(cfg["data"])
    ann = data.load_annotations(root / "annotations.json")
    cat_ids = sorted(c.id for c in ann.categories)
    model_cfg = arch.ModelConfig(input_size=cfg["input_size"], width=cfg["width"],
                                 num_classes=len(cat_ids))
    if cfg["weights"]:
        params = arch.load_params(cfg["weights"], model_cfg)
    else:
        params = arch.init_model(model_cfg, cfg["seed"])

    def one(im):
        image = data.load_image(root / im.file_name)
        return infer_image(image, model_cfg, params, cfg, im.id, cat_ids)

    with ThreadPoolExecutor(worker_count()) as pool:
        results = list(pool.map(one, ann.images))
    dets = [d for _, final in results for d in final]
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save_detections(dets, out)
    write_manifest(out.with_name(out.name + ".manifest.json"), cfg, {out.name: _sha(out)})
    print(json.dumps({"images": len(results),
                      "candidates": sum(len(c) for c, _ in results),
                      "detections": len(dets)}))
    return EXIT_OK


# --------------------------------------------------------------------- eval

def run_eval(cfg: dict) -> int:
    ann_path = cfg["annotations"] or (Path(cfg["data"]) / "annotations.json" if cfg["data"] else None)
    if ann_path is None or cfg["detections"] is None or cfg["out"] is None:
        raise UsageError("eval needs --annotations (or --data), --detections and --out")
    ann = data.load_annotations(ann_path)
    dets = data.load_detections(cfg["detections"])
    known = {im.id for im in ann.images}
    stray = sorted({d.image_id for d in dets} - known)
    if stray:
        raise UsageError(f"detections reference unknown image ids {stray[:10]}")
    report = metrics.evaluate(dets, ann.ground_truths(), ann.class_names())
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    csv_path = out.with_suffix(".csv")
    csv_path.write_text(report.to_csv())
    write_manifest(out.with_name(out.name + ".manifest.json"), cfg,
                   {out.name: _sha(out), csv_path.name: _sha(csv_path)})
    print(report.to_json())
    return EXIT_OK


# ---------------------------------------------------------- selftest, bench

def run_selftest_cmd(cfg: dict) -> int:
    results = selftest.run_selftest(sigma=cfg["sigma"], input_size=cfg["input_size"])
    print(selftest.format_results(results))
    if cfg["out"]:
        Path(cfg["out"]).write_text(json.dumps(
            [{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results], indent=2))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def run_bench(cfg: dict) -> int:
    model_cfg = arch.ModelConfig(input_size=cfg["input_size"], width=cfg["width"], num_classes=4)
    params = arch.init_model(model_cfg, cfg["seed"])
    img = np.random.default_rng(cfg["seed"]).random((3, model_cfg.input_size, model_cfg.input_size))
    times = []
    for _ in range(max(1, cfg["repeat"])):
        t0 = time.perf_counter()
        raws = arch.model_forward(img, model_cfg, params)
        times.append(time.perf_counter() - t0)
    candidates, _ = infer_image(img, model_cfg, params, dict(cfg, nms="none"))
    t0 = time.perf_counter()
    postprocess.soft_nms(candidates, soft_config(cfg))
    t_soft = time.perf_counter() - t0
    t0 = time.perf_counter()
    postprocess.nms_hard(candidates, cfg["iou_threshold"])
    t_hard = time.perf_counter() - t0
    print(json.dumps({"input_size": model_cfg.input_size, "width": model_cfg.width,
                      "params": arch.count_params(params), "forward_s": min(times),
                      "candidates": len(candidates), "soft_nms_s": t_soft,
                      "hard_nms_s": t_hard}, indent=2))
    return EXIT_OK


COMMANDS = {"gen": run_gen, "infer": run_infer, "eval": run_eval,
            "selftest": run_selftest_cmd, "bench": run_bench}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except (UsageError, ValueError) as e:
        print(f"smallobj: error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, RuntimeError) as e:
        print(f"smallobj: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

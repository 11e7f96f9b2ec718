"""Command-line surface: detect, embed, classify, evaluate, report, toy-train, focus.

Every command is deterministic given --seed and identical inputs. The one
wall-clock input (annotation timestamps) is overridable with --generated-at
so repeated runs can be compared byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import glob
import hashlib
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import raster, vit
from .annot import AnnotationFile, GrainDataset, annotation_path_for, write_annotations
from .detect import DetectParams, detect_grains
from .embed import DEFAULT_DIM, ExternalEmbedder, MockEmbedder, VitEmbedder
from .errors import InputError, NumericError, ParseError, PollenError, TransportError
from .metrics import (
    CentroidSet,
    classify,
    evaluate_embeddings,
    fit_centroids,
    read_embeddings_csv,
    write_embeddings_csv,
)
from .msloss import MsParams, make_cluster_batch, toy_optimize
from .pipeline import CALIBRATION_PRESETS, run_pipeline
from .prep import prepare_grain

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_TRANSPORT = 4

DETECTOR_TAG = "pollengine-0.1"

CONFIG_KEYS = frozenset({
    "detect.k",
    "detect.t_min",
    "detect.t_max",
    "detect.min_area",
    "detect.max_area",
    "detect.min_circularity",
    "embed.backend",
    "embed.weights",
    "embed.endpoint",
    "calib.preset",
    "report.dir",
    "seed",
})


@dataclass(frozen=True)
class CliConfig:
    """Values from a key=value config file, restricted to the documented keys."""

    values: dict

    def __post_init__(self):
        for key in self.values:
            if key not in CONFIG_KEYS:
                raise ParseError(f"unknown config key {key!r}")

    @classmethod
    def load(cls, path) -> "CliConfig":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        values = {}
        for lineno, line in enumerate(lines, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            key, sep, value = stripped.partition("=")
            if not sep:
                raise ParseError(f"expected key=value, got {stripped!r}", line=lineno)
            key = key.strip()
            if key not in CONFIG_KEYS:
                raise ParseError(f"unknown config key {key!r}", line=lineno)
            values[key] = value.strip()
        return cls(values)

    def get(self, key, default=None):
        return self.values.get(key, default)


def stage_seed(seed: int, stage: str) -> int:
    """Derive a per-stage RNG seed from the single user-facing seed."""
    digest = hashlib.blake2b(f"{seed}:{stage}".encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little")


# ---------------------------------------------------------------------------
# flag / config / default resolution

def _load_cfg(args) -> CliConfig:
    if getattr(args, "config", None):
        return CliConfig.load(args.config)
    return CliConfig({})


def _resolve(flag_value, cfg: CliConfig, key: str, default, cast=str):
    """Precedence: explicit flag, then config file, then the built-in default."""
    if flag_value is not None:
        return flag_value
    raw = cfg.get(key)
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError:
        raise ParseError(f"config {key} = {raw!r} is not a valid {cast.__name__}") from None


def _seed(args, cfg: CliConfig) -> int:
    return _resolve(args.seed, cfg, "seed", 0, int)


def _threads(args) -> int:
    return args.threads if args.threads is not None else 1


def _detect_params(args, cfg: CliConfig) -> DetectParams:
    base = DetectParams()
    return DetectParams(
        k=_resolve(args.k, cfg, "detect.k", base.k, float),
        t_min=_resolve(args.t_min, cfg, "detect.t_min", base.t_min, float),
        t_max=_resolve(args.t_max, cfg, "detect.t_max", base.t_max, float),
        min_area=_resolve(args.min_area, cfg, "detect.min_area", base.min_area, float),
        max_area=_resolve(args.max_area, cfg, "detect.max_area", base.max_area, float),
        min_circularity=_resolve(
            args.min_circularity, cfg, "detect.min_circularity", base.min_circularity, float
        ),
    )


def _build_embedder(args, cfg: CliConfig, seed: int):
    backend = _resolve(args.backend, cfg, "embed.backend", "mock")
    if backend == "mock":
        return MockEmbedder(dim=args.dim, seed=stage_seed(seed, "embed"))
    if backend == "vit":
        weights = _resolve(args.weights, cfg, "embed.weights", None)
        if weights is None:
            raise InputError("the vit backend needs --weights (or embed.weights in the config)")
        return VitEmbedder(vit.load_weights(weights))
    if backend == "external":
        endpoint = _resolve(args.endpoint, cfg, "embed.endpoint", None)
        if endpoint is None:
            raise InputError("the external backend needs --endpoint (or embed.endpoint)")
        return ExternalEmbedder(endpoint, dim=args.dim, timeout=args.timeout)
    raise InputError(f"unknown embed backend {backend!r}")


def _expand_globs(patterns) -> list[Path]:
    """Expand each pattern (sorted), keeping literal paths as-is, deduplicated."""
    out: list[Path] = []
    seen = set()
    for pattern in patterns:
        if Path(pattern).exists():
            matches = [pattern]
        else:
            matches = sorted(glob.glob(pattern))
        for m in matches:
            p = Path(m)
            if p not in seen:
                seen.add(p)
                out.append(p)
    return out


def _read_centroids(path) -> CentroidSet:
    """Centroid files reuse the embeddings CSV layout: id = class, label = count."""
    classes, counts_raw, mat = read_embeddings_csv(path)
    try:
        counts = [int(c) for c in counts_raw]
    except ValueError:
        raise ParseError(f"{path}: centroid labels must be per-class sample counts") from None
    # %.8g serialization leaves rows ~1e-9 off the sphere; put them back
    mat = mat / np.linalg.norm(mat, axis=1, keepdims=True)
    return CentroidSet(classes=tuple(classes), centroids=mat, counts=counts)


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


def parse_synthetic_spec(spec: str):
    """Build a scene from `WxH:cx,cy,r,shade;...`, e.g. `280x280:70,70,26,0.3`."""
    from .pipeline import synthetic_scene

    try:
        size, _, rest = spec.partition(":")
        w, h = (int(v) for v in size.lower().split("x"))
        disks = []
        if rest:
            for part in rest.split(";"):
                cx, cy, r, shade = part.split(",")
                disks.append((int(cx), int(cy), int(r), float(shade)))
    except ValueError:
        raise ParseError(
            f"cannot parse synthetic scene {spec!r}; expected WxH:cx,cy,r,shade;..."
        ) from None
    return synthetic_scene(w, h, disks)


# ---------------------------------------------------------------------------
# commands

def cmd_detect(args) -> None:
    cfg = _load_cfg(args)
    params = _detect_params(args, cfg)
    image_path = Path(args.image)
    if args.synthetic:
        img, sal = parse_synthetic_spec(args.synthetic)
        raster.save_png(img, image_path)
        raster.write_saliency(sal, image_path.with_suffix(".sal"))
    else:
        sal = raster.load_saliency(args.saliency)
    grains = detect_grains(sal, params)
    generated = args.generated_at or datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    ann = AnnotationFile(
        image_name=image_path.name,
        generated_at=generated,
        detector_tag=DETECTOR_TAG,
        params=params,
        grains=grains,
    )
    out = annotation_path_for(image_path)
    write_annotations(ann, out)
    if args.json:
        print(json.dumps({"grains": len(grains), "annotations": str(out)}))
    else:
        print(f"{len(grains)} grains -> {out}")


def cmd_embed(args) -> None:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    paths = _expand_globs(args.annotations)
    if not paths:
        raise InputError(f"no annotation files match {args.annotations}")
    ds = GrainDataset(paths)
    embedder = _build_embedder(args, cfg, seed)

    def one(index: int):
        img, det = ds.get(index)
        crop = prepare_grain(img, det, source_grain=det.id)
        return embedder(crop)

    threads = _threads(args)
    if threads > 1 and len(ds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            vecs = list(pool.map(one, range(len(ds))))
    else:
        vecs = [one(i) for i in range(len(ds))]

    ids = []
    for ann_path, grain_id in ds.entries:
        name = ann_path.name
        base = name[: -len(".pollen.txt")] if name.endswith(".pollen.txt") else ann_path.stem
        ids.append(f"{base}:{grain_id}")
    labels = [args.label] * len(ds)
    write_embeddings_csv(args.out, ids, labels, vecs)
    if args.json:
        print(json.dumps({"embeddings": len(ds), "out": str(args.out)}))
    else:
        print(f"{len(ds)} embeddings -> {args.out}")


def cmd_fit_centroids(args) -> None:
    _, labels, mat = read_embeddings_csv(args.embeddings)
    cs = fit_centroids(mat, labels)
    write_embeddings_csv(args.out, cs.classes, [str(c) for c in cs.counts], cs.centroids)
    if args.json:
        print(json.dumps({"classes": list(cs.classes), "out": str(args.out)}))
    else:
        print(f"{len(cs.classes)} centroids -> {args.out}")


def cmd_classify(args) -> None:
    ids, _, mat = read_embeddings_csv(args.embeddings)
    cs = _read_centroids(args.centroids)
    preds = [classify(vec, cs, tau=args.tau) for vec in mat]
    rows = [
        (ids[i], str(p.class_name), "%.8g" % p.distance, "%.8g" % p.confidence)
        for i, p in enumerate(preds)
    ]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "predicted", "distance", "confidence"])
            writer.writerows(rows)
        print(f"{len(rows)} predictions -> {args.out}")
    elif args.json:
        print(json.dumps([
            {"id": r[0], "predicted": r[1], "distance": float(r[2]), "confidence": float(r[3])}
            for r in rows
        ], indent=2))
    else:
        for r in rows:
            print(" ".join(r))


def _eval_dict(rep) -> dict:
    return {
        "recall_at_k": {str(k): v for k, v in sorted(rep.recall_at_k.items())},
        "map_at_r": rep.map_at_r,
        "nmi": rep.nmi,
        "rho": _jsonable(rep.rho),
        "macro_f1": rep.macro_f1,
        "classes": [str(c) for c in rep.classes],
        "class_counts": list(rep.class_counts),
        "confusion": rep.confusion.tolist(),
        "intra_class": {str(k): list(v) for k, v in rep.intra_class.items()},
    }


def cmd_evaluate(args) -> None:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    _, labels, mat = read_embeddings_csv(args.embeddings)
    ks = tuple(int(k) for k in args.ks.split(","))
    rep = evaluate_embeddings(mat, labels, ks=ks, kmeans_seed=stage_seed(seed, "kmeans"))
    if args.out:
        Path(args.out).write_text(json.dumps(_eval_dict(rep), indent=2, sort_keys=True) + "\n")
    if args.figures:
        # matplotlib is slow to import; only the chart paths pay for it
        from . import figures

        fig_dir = Path(args.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        figures.confusion_figure(rep.classes, rep.confusion, fig_dir / "confusion.png")
        figures.recall_figure(rep.recall_at_k, fig_dir / "recall.png")
    if args.json:
        print(json.dumps(_eval_dict(rep), indent=2, sort_keys=True))
        return
    for k, v in sorted(rep.recall_at_k.items()):
        print(f"Recall@{k}: {v:.4f}")
    print(f"mAP@R: {rep.map_at_r:.4f}")
    print(f"NMI: {rep.nmi:.4f}")
    print(f"rho: {rep.rho:.4f}" if math.isfinite(rep.rho) else f"rho: {rep.rho}")
    print(f"macro F1: {rep.macro_f1:.4f}")
    names = [str(c) for c in rep.classes]
    width = max(max(len(n) for n in names), 5)
    print("confusion (rows true, cols predicted):")
    print(" " * (width + 1) + " ".join(f"{n:>{width}}" for n in names))
    for name, row in zip(names, rep.confusion):
        print(f"{name:>{width}} " + " ".join(f"{int(v):>{width}}" for v in row))


def cmd_report(args) -> None:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    params = _detect_params(args, cfg)
    image_path = Path(args.image)
    image = raster.load_image(image_path)
    sal = raster.load_saliency(args.saliency)
    cs = _read_centroids(args.centroids)
    embedder = _build_embedder(args, cfg, seed)
    preset = _resolve(args.calib, cfg, "calib.preset", "fine")
    if preset not in CALIBRATION_PRESETS:
        raise InputError(f"unknown calibration preset {preset!r}")
    out_dir = Path(_resolve(args.out_dir, cfg, "report.dir",
                            image_path.parent / f"{image_path.stem}_report"))
    out_dir.mkdir(parents=True, exist_ok=True)

    report, overlay = run_pipeline(
        image, sal, params, embedder, cs,
        cal=CALIBRATION_PRESETS[preset],
        emit_heatmaps=args.heatmaps,
        image_name=image_path.name,
        out_dir=out_dir,
        tau=args.tau,
        threads=_threads(args),
    )

    stem = image_path.stem
    json_path = out_dir / f"{stem}.report.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    raster.save_png(overlay, out_dir / f"{stem}.overlay.png")
    with open(out_dir / f"{stem}.counts.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "count", "percent"])
        for name in sorted(report.counts):
            writer.writerow([name, report.counts[name], "%.2f" % report.percentages[name]])
        if report.unclassified:
            writer.writerow(["(unclassified)", report.unclassified, ""])

    from . import figures

    figures.composition_figure(report, out_dir / f"{stem}.composition.png")

    if args.json:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        return
    print(f"{report.total_grains} grains ({report.unclassified} unclassified) -> {out_dir}")
    for name in sorted(report.counts):
        print(f"  {name}: {report.counts[name]} ({report.percentages[name]:.2f}%)")


def cmd_toy_train(args) -> None:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    batch = make_cluster_batch(
        classes=args.classes, per_class=args.per_class, dim=args.dim,
        spread=args.spread, seed=stage_seed(seed, "batch"),
    )
    _, trace = toy_optimize(
        batch, MsParams(), lr=args.lr, steps=args.steps, seed=stage_seed(seed, "jitter"),
    )
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "rho"])
            for step, (loss, rho) in enumerate(trace, start=1):
                writer.writerow([step, "%.8g" % loss, "%.8g" % rho])
    if args.figure:
        from . import figures

        figures.trace_figure(trace, args.figure)
    if trace:
        loss, rho = trace[-1]
    else:
        loss, rho = math.nan, math.nan
    if args.json:
        print(json.dumps({
            "steps": len(trace), "final_loss": _jsonable(loss), "final_rho": _jsonable(rho),
        }))
    else:
        print(f"step {len(trace)} loss {loss:.6f} rho {rho:.4f}")


def cmd_focus(args) -> None:
    paths = _expand_globs(args.stack)
    if not paths:
        raise InputError(f"no stack images match {args.stack}")
    stack = [raster.load_image(p) for p in paths]
    best = raster.best_focus(stack)
    scores = [raster.laplacian_variance(raster.to_gray(img)) for img in stack]
    if args.json:
        print(json.dumps({
            "best_index": best,
            "path": str(paths[best]),
            "scores": scores,
        }))
    else:
        print(f"best focus: index {best} ({paths[best].name})")


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="master seed (default 0)")
    common.add_argument("--threads", type=int, help="worker thread cap (default 1)")
    common.add_argument("--json", action="store_true", help="machine-readable stdout")

    detect_flags = argparse.ArgumentParser(add_help=False)
    detect_flags.add_argument("--k", type=float, help="threshold slope over sigma")
    detect_flags.add_argument("--t-min", type=float, dest="t_min")
    detect_flags.add_argument("--t-max", type=float, dest="t_max")
    detect_flags.add_argument("--min-area", type=float, dest="min_area")
    detect_flags.add_argument("--max-area", type=float, dest="max_area")
    detect_flags.add_argument("--min-circularity", type=float, dest="min_circularity")

    backend_flags = argparse.ArgumentParser(add_help=False)
    backend_flags.add_argument("--backend", choices=["mock", "vit", "external"])
    backend_flags.add_argument("--weights", help="AVIT1 weights file for the vit backend")
    backend_flags.add_argument("--endpoint", help="host:port for the external backend")
    backend_flags.add_argument("--dim", type=int, default=DEFAULT_DIM,
                               help="embedding dimension for mock/external backends")
    backend_flags.add_argument("--timeout", type=float, default=30.0,
                               help="external backend socket timeout in seconds")

    parser = argparse.ArgumentParser(
        prog="pollengine",
        description="Pollen grain detection, embedding and reporting toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", parents=[common, detect_flags],
                       help="detect grains in a saliency map, write an annotation file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--saliency", help="SAL1 saliency map file")
    src.add_argument("--synthetic", metavar="SPEC",
                     help="generate a WxH:cx,cy,r,shade;... test scene instead")
    p.add_argument("--image", required=True, help="image path the annotations belong to")
    p.add_argument("--generated-at", help="timestamp override for reproducible files")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("embed", parents=[common, backend_flags],
                       help="embed every annotated grain into a CSV")
    p.add_argument("--annotations", nargs="+", required=True,
                   help="annotation files or glob patterns")
    p.add_argument("--out", required=True, help="output embeddings CSV")
    p.add_argument("--label", default="unlabeled",
                   help="label to record for every grain (edit the CSV to refine)")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("fit-centroids", parents=[common],
                       help="average a labeled embeddings CSV into class centroids")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True, help="output centroid file")
    p.set_defaults(func=cmd_fit_centroids)

    p = sub.add_parser("classify", parents=[common],
                       help="nearest-centroid classification of an embeddings CSV")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--centroids", required=True)
    p.add_argument("--tau", type=float, default=0.1, help="confidence temperature")
    p.add_argument("--out", help="write predictions CSV instead of stdout")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", parents=[common],
                       help="run the retrieval/cluster metric battery on a labeled CSV")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--ks", default="1,2,4,8", help="comma-separated recall cutoffs")
    p.add_argument("--out", help="write the report as JSON")
    p.add_argument("--figures", metavar="DIR",
                   help="also render confusion/recall charts into DIR")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common, detect_flags, backend_flags],
                       help="full pipeline: report JSON, overlay, counts CSV and chart")
    p.add_argument("--image", required=True)
    p.add_argument("--saliency", required=True)
    p.add_argument("--centroids", required=True)
    p.add_argument("--heatmaps", action="store_true",
                   help="write attention heatmaps (vit backend only)")
    p.add_argument("--calib", choices=sorted(CALIBRATION_PRESETS),
                   help="calibration preset (default fine)")
    p.add_argument("--out-dir", dest="out_dir", help="output directory")
    p.add_argument("--tau", type=float, default=0.1)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("toy-train", parents=[common],
                       help="optimize a synthetic batch and trace loss/separability")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=8, dest="per_class")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--spread", type=float, default=0.5)
    p.add_argument("--out", help="trace CSV path")
    p.add_argument("--figure", help="render the trace as a chart")
    p.set_defaults(func=cmd_toy_train)

    p = sub.add_parser("focus", parents=[common],
                       help="pick the sharpest image of a z-stack")
    p.add_argument("--stack", nargs="+", required=True, help="image files or globs")
    p.set_defaults(func=cmd_focus)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_INPUT
    try:
        args.func(args)
        return EXIT_OK
    except TransportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PollenError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

"""Command-line entry point.

Stages talk only through files: canonical annotation JSON, checkpoints,
prediction JSON and report JSON. Failures print one JSON line on stderr,
``{"error": <kind>, "message": <text>}``, and exit 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__
from .config import RunConfig, load_config
from .dataio import (
    AnnotationTier,
    DatasetIndex,
    FusionSummary,
    export_annotations,
    fuse_pseudo_labels,
    import_annotations,
    load_predictions,
    merge_colocated_boxes,
    save_predictions,
)
from .errors import DentalDetError, MalformedFile

log = logging.getLogger("dentaldet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_tier(path) -> Optional[str]:
    try:
        return json.loads(Path(path).read_text()).get("tier")
    except (OSError, json.JSONDecodeError, AttributeError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc


def load_dataset(paths: Sequence[str], tier: Optional[str] = None) -> DatasetIndex:
    """Import one or more annotation files; each file's tier comes from ``tier`` or its header."""
    index = DatasetIndex()
    for p in paths:
        t = tier or _read_tier(p)
        if t is None:
            raise UsageError(f"{p}: file declares no tier; pass --tier")
        index = index.extend(import_annotations(p, t))
    return index


def _config(args) -> RunConfig:
    return load_config(getattr(args, "config", None), getattr(args, "set", None) or ())


# ---------------------------------------------------------------------------
# commands

def cmd_prepare(args) -> Dict:
    cfg = _config(args)
    tier = AnnotationTier.parse(args.tier)
    index = import_annotations(args.annotations, tier, args.image_root)
    pseudo = load_predictions(args.pseudo) if args.pseudo else {}
    if pseudo and tier is not AnnotationTier.DISEASE:
        raise UsageError("--pseudo only applies to the disease tier")
    summary = FusionSummary()
    counts = {}
    for info in index.images:
        recs = index.records.get(info.image_id, [])
        if tier is AnnotationTier.DISEASE:
            recs = merge_colocated_boxes(recs, cfg.prep.merge_iou)
            annotated = len(recs)
            recs = fuse_pseudo_labels(recs, pseudo.get(info.image_id, []), cfg.prep.pseudo_conf_min, cfg.prep.pseudo_iou_max, summary)
            counts[info.image_id] = {"annotated": annotated, "pseudo": len(recs) - annotated}
        else:
            counts[info.image_id] = {"annotated": len(recs), "pseudo": 0}
        index.records[info.image_id] = recs
    export_annotations(index, args.out, tier)
    return {"out": str(args.out), "images": len(index), "records": counts, "fusion": vars(summary)}


def cmd_train(args) -> Dict:
    from .training.loop import train

    cfg = _config(args)
    dataset = load_dataset(args.data, args.tier)
    result = train(dataset, cfg.model, cfg.train, args.out, cfg.loss, cfg.assigner, cfg.augment, time_limit=args.time_limit)
    (Path(args.out) / "config.json").write_text(json.dumps(cfg.to_flat(), indent=1))
    last = result.history[-1] if result.history else {}
    return {"checkpoint": str(result.checkpoint), "steps": len(result.history), "seconds": round(result.seconds, 2), "final_loss": last.get("total")}


def _image_list(args) -> DatasetIndex:
    if args.images:
        return load_dataset(args.images, args.tier)
    from .dataio import ImageInfo
    from .imaging import load_gray

    index = DatasetIndex()
    for k, p in enumerate(args.image or []):
        h, w = load_gray(p).shape
        index.images.append(ImageInfo(k, str(Path(p).resolve()), w, h, AnnotationTier.ENUMERATION))
    if not index.images:
        raise UsageError("give --images FILE or at least one --image PATH")
    return index


def cmd_predict(args) -> Dict:
    from .network import load_checkpoint
    from .predict import predict_dataset

    cfg = _config(args)
    model, _ = load_checkpoint(args.checkpoint)
    preds = predict_dataset(model, _image_list(args), cfg.post)
    save_predictions(preds, args.out)
    return {"out": str(args.out), "images": len(preds), "detections": sum(len(v) for v in preds.values())}


def cmd_postprocess(args) -> Dict:
    from dataclasses import replace

    from .postprocess import postprocess_image

    cfg = _config(args)
    post = replace(cfg.post, assignment=False) if args.no_assignment else cfg.post
    preds = load_predictions(args.input)
    out = {k: postprocess_image(v, post) for k, v in preds.items()}
    save_predictions(out, args.out)
    return {"out": str(args.out), "images": len(out), "detections": sum(len(v) for v in out.values())}


def _write_report(report, out, name="model", figures=True) -> Dict:
    from .plotting import plot_pr_curves

    out = Path(out)
    report.to_json(out)
    text_path = out.with_suffix(".txt")
    text_path.write_text(report.to_text(name))
    written = {"report": str(out), "table": str(text_path)}
    curve_dir = out.parent / f"{out.stem}_curves"
    written["pr_csv"] = [str(p) for p in report.write_pr_csv(curve_dir)]
    if figures:
        written["figure"] = str(plot_pr_curves(report, curve_dir / "pr_curves.png"))
    return written


def cmd_evaluate(args) -> Dict:
    from .evaluation import challenge_report

    cfg = _config(args)
    gt = load_dataset(args.gt, args.tier)
    preds = load_predictions(args.pred)
    report = challenge_report(preds, gt.records, cfg.eval)
    written = _write_report(report, args.out, figures=not args.no_figures)
    return {**written, "ap_quadrant": report.ap_quadrant, "ap_diagnosis": report.ap_diagnosis, "ap_enumeration": report.ap_enumeration}


def cmd_ablate(args) -> Dict:
    """Evaluate each checkpoint with the enumeration post-process off and on.

    Upsampling and CoordConv are architectural, so each of those rows needs
    its own trained checkpoint; only the post-process column is toggled here.
    """
    from dataclasses import replace

    from .evaluation import challenge_report
    from .network import load_checkpoint
    from .plotting import plot_ablation
    from .postprocess import postprocess_image
    from .predict import predict_dataset

    cfg = _config(args)
    gt = load_dataset(args.gt, args.tier)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for ck in args.checkpoint:
        model, _ = load_checkpoint(ck)
        raw = predict_dataset(model, gt, cfg.post)
        for assignment in (False, True):
            post = replace(cfg.post, assignment=assignment)
            preds = {k: postprocess_image(v, post) for k, v in raw.items()}
            rep = challenge_report(preds, gt.records, cfg.eval)
            flags = {
                "upsampling": model.cfg.extra_upsample_enabled,
                "coordconv": model.cfg.coordconv_enabled,
                "post_process": assignment,
            }
            name = "+".join(k for k, v in flags.items() if v) or "vanilla"
            rows.append({"name": name, "checkpoint": str(ck), **flags,
                         **{f"ap_{a}": rep.ap(a) for a in ("quadrant", "diagnosis", "enumeration")},
                         **{f"ap50_{a}": rep.ap(a, True) for a in ("quadrant", "diagnosis", "enumeration")}})
    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=1))
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    lines = ["upsampling | coordconv | post-process | AP-Quadrant | AP-Diagnosis | AP-Enumeration"]
    for r in rows:
        mark = lambda v: "x" if v else "-"  # noqa: E731
        lines.append(f"{mark(r['upsampling']):^10} | {mark(r['coordconv']):^9} | {mark(r['post_process']):^12} | "
                     f"{r['ap_quadrant']:11.3f} | {r['ap_diagnosis']:12.3f} | {r['ap_enumeration']:14.3f}")
    (out_dir / "ablation.txt").write_text("\n".join(lines) + "\n")
    written = {"rows": len(rows), "table": str(out_dir / "ablation.txt")}
    if not args.no_figures:
        written["figure"] = str(plot_ablation(rows, out_dir / "ablation.png"))
    return written


def cmd_synth(args) -> Dict:
    from .synthetic import make_synthetic_dataset, write_raw_disease_files

    index, path = make_synthetic_dataset(args.out, args.n, args.seed, args.width, args.height, AnnotationTier.parse(args.tier))
    out = {"annotations": str(path), "images": len(index)}
    if args.raw and AnnotationTier.parse(args.tier) is AnnotationTier.DISEASE:
        raw, pseudo = write_raw_disease_files(index, args.out, args.seed)
        out.update({"raw_annotations": str(raw), "pseudo": str(pseudo)})
    return out


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dentaldet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="JSON config file (default: $DENTALDET_CONFIG)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        return sp

    sp = with_config(sub.add_parser("prepare", help="import, merge duplicates, fuse pseudo labels"))
    sp.add_argument("--tier", required=True, choices=[t.value for t in AnnotationTier])
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--pseudo", help="prediction JSON with healthy-tooth detections")
    sp.add_argument("--image-root")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_prepare)

    sp = with_config(sub.add_parser("train", help="train a detector"))
    sp.add_argument("--data", required=True, action="append", help="canonical annotation file (repeatable)")
    sp.add_argument("--tier", help="tier for files that do not declare one")
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--time-limit", type=float, help="stop after the epoch that crosses this many seconds")
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("predict", help="run a checkpoint over images"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--images", action="append", help="annotation/image-list file (repeatable)")
    sp.add_argument("--image", action="append", help="single image path (repeatable)")
    sp.add_argument("--tier")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = with_config(sub.add_parser("postprocess", help="NMS and one-tooth-per-FDI relabelling"))
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-assignment", action="store_true", help="label by argmax instead of assignment")
    sp.set_defaults(func=cmd_postprocess)

    sp = with_config(sub.add_parser("evaluate", help="three-axis AP report"))
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True, action="append")
    sp.add_argument("--tier")
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_evaluate)

    sp = with_config(sub.add_parser("ablate", help="post-process on/off grid over checkpoints"))
    sp.add_argument("--checkpoint", required=True, action="append")
    sp.add_argument("--gt", required=True, action="append")
    sp.add_argument("--tier")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("synth", help="write a procedural demo dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--width", type=int, default=256)
    sp.add_argument("--height", type=int, default=128)
    sp.add_argument("--tier", default="disease", choices=[t.value for t in AnnotationTier])
    sp.add_argument("--raw", action="store_true", help="also write raw disease annotations and pseudo detections")
    sp.set_defaults(func=cmd_synth)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def run_command(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("dentaldet: a command is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        result = args.func(args)
    except UsageError as exc:
        return _fail("UsageError", str(exc), 2)
    except DentalDetError as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    except (OSError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    print(json.dumps(result))
    return 0


def main() -> None:
    sys.exit(run_command())

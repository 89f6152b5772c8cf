"""Command-line entry point.

    ovcos train   --config run.yaml --set optimizer.lr=1e-3
    ovcos eval    --config run.yaml --checkpoint runs/x/checkpoints/last.npz --table
    ovcos ablate  --config run.yaml --presets baseline +P T=2
    ovcos report  --run runs/x
    ovcos data validate manifest.jsonl
    ovcos data stats manifest.jsonl --out stats/
    ovcos data toy out_dir
    ovcos prompts analyze --config run.yaml

Exit status is 0 when no sample-level error occurred, 1 when some sample or
manifest row failed, 2 on invalid invocation or configuration.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Iterable, List, Optional

from . import engine, report
from .analysis import compute_attributes
from .backbone import InvalidInputError, build_backbone
from .config import RunConfig, load_config
from .data import ManifestError, _read_mask, _read_rgb, load_manifest
from .prompts import BUILTIN_SETS, EmbeddingCache, get_template_set, hausdorff_distance

log = logging.getLogger("ovcos")

OUTPUTS_FILE = "outputs.json"


def record_outputs(run_dir, verb: str, paths: Iterable) -> Path:
    """Append produced files to the run directory's output manifest."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    target = run_dir / OUTPUTS_FILE
    data = json.loads(target.read_text()) if target.exists() else {}
    listed = set(data.get(verb, []))
    for p in paths:
        p = Path(p)
        try:
            listed.add(str(p.relative_to(run_dir)))
        except ValueError:
            listed.add(str(p))
    data[verb] = sorted(listed)
    target.write_text(json.dumps(data, indent=1))
    return target


def _files_under(root: Path) -> List[Path]:
    return sorted(p for p in root.rglob("*") if p.is_file() and p.name != OUTPUTS_FILE)


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "output", None):
        overrides.append(f"output_dir={args.output}")
    return load_config(args.config or [], overrides)


# -- verbs --------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config(args)
    res = engine.train(cfg, resume=args.resume)
    out = Path(cfg.output_dir)
    record_outputs(out, "train", [p for p in _files_under(out) if "eval" not in p.parts])
    print(f"checkpoint: {res.checkpoint}")
    print("epoch losses: " + " ".join(f"{x:.4f}" for x in res.epoch_losses))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    rep = engine.evaluate(
        cfg,
        args.checkpoint,
        ideal=args.ideal,
        synthetic_accuracy=args.synthetic_accuracy,
    )
    out = Path(cfg.output_dir)
    record_outputs(out, "eval", _files_under(out / "eval"))
    if args.table:
        print(rep.table_header())
        print(rep.table_row())
    else:
        print(json.dumps({"aggregate": rep.aggregate, "accuracy": rep.accuracy}, indent=1))
    skipped = rep.meta.get("skipped", [])
    for item in skipped:
        print(f"skipped sample: {item}", file=sys.stderr)
    return 1 if skipped else 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    if args.sweep:
        presets = engine.iteration_sweep(args.sweep)
    else:
        names = args.presets or list(engine.PRESETS)
        unknown = [n for n in names if n not in engine.PRESETS]
        if unknown:
            raise InvalidInputError(f"unknown presets {unknown}; known: {list(engine.PRESETS)}")
        presets = [engine.PRESETS[n] for n in names]
    rows = engine.ablate(presets, cfg, baseline=args.baseline)
    out = Path(cfg.output_dir)
    record_outputs(out, "ablate", _files_under(out))
    print(engine.format_ablation(rows), end="")
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    produced: List[Path] = []
    out = run / "report"
    rep_path = run / "eval" / "report.json"
    if rep_path.exists():
        data = json.loads(rep_path.read_text())
        produced += report.metric_table({args.name or run.name: _Agg(data["aggregate"])}, out)
    log_path = run / "train_log.jsonl"
    if log_path.exists():
        recs = [json.loads(ln) for ln in log_path.read_text().splitlines() if ln.strip()]
        if recs:
            produced += report.loss_curve(recs, out)
    ckpt = Path(args.checkpoint) if args.checkpoint else run / "checkpoints" / "last.npz"
    if ckpt.exists():
        cfg = load_config([run / "config.yaml"]) if (run / "config.yaml").exists() else RunConfig()
        backbone = build_backbone(cfg.backbone.kind, cfg.backbone.seed)
        decoder, _, _ = engine.load_decoder(ckpt, backbone)
        alphas = {k: v.tolist() for k, v in decoder.alphas().items()}
        if alphas:
            produced += report.alpha_chart(alphas, out)
    if not produced:
        raise InvalidInputError(f"nothing to report under {run}")
    record_outputs(run, "report", produced)
    for p in produced:
        print(p)
    return 0


class _Agg:
    """Minimal stand-in carrying an ``aggregate`` dict for table output."""

    def __init__(self, aggregate):
        self.aggregate = aggregate


def cmd_data_validate(args) -> int:
    try:
        manifest = load_manifest(args.manifest, args.split)
    except ManifestError as exc:
        for p in exc.problems:
            print(p, file=sys.stderr)
        print(f"{len(exc.problems)} problem(s)")
        return 1
    print(json.dumps(manifest.summary(), indent=1))
    return 0


def cmd_data_stats(args) -> int:
    manifest = load_manifest(args.manifest, args.split)
    attrs, failed = {}, []
    for rec in manifest.records:
        try:
            attrs[rec.image_id] = compute_attributes(_read_mask(rec.mask_path), _read_rgb(rec.image_path))
        except (OSError, ValueError) as exc:
            failed.append(f"{rec.image_id}: {exc}")
    out = Path(args.out)
    produced = report.attribute_histograms(attrs, out)
    record_outputs(out, "data stats", produced)
    for f in failed:
        print(f"failed sample: {f}", file=sys.stderr)
    for p in produced:
        print(p)
    return 1 if failed else 0


def cmd_data_toy(args) -> int:
    from .synthetic import write_toy_dataset

    path = write_toy_dataset(args.out, size=args.size, seed=args.seed)
    print(path)
    return 0


def cmd_prompts_analyze(args) -> int:
    """Hausdorff distance between train-class and test-class embeddings per
    template set, optionally paired with the classification accuracy of a
    checkpoint evaluated under the same set."""
    cfg = _config(args)
    manifest = load_manifest(cfg.data.manifest, cfg.data.split)
    backbone = build_backbone(cfg.backbone.kind, cfg.backbone.seed)
    cache = EmbeddingCache(backbone)
    train_classes = manifest.class_names(cfg.data.train_split)
    test_classes = manifest.class_names(cfg.data.eval_split)
    names = args.templates or list(BUILTIN_SETS)
    points = {}
    for name in names:
        ts = get_template_set(name)
        a = cache.get(ts, train_classes).embeddings.double().numpy()
        b = cache.get(ts, test_classes).embeddings.double().numpy()
        acc = None
        if args.checkpoint:
            ecfg = cfg.replace(**{"prompts.eval_templates": name, "output_dir": str(Path(cfg.output_dir) / "prompts" / ts.name)})
            acc = engine.evaluate(ecfg, args.checkpoint, backbone=backbone, manifest=manifest, write_outputs=False).accuracy
        points[ts.name] = (hausdorff_distance(a, b), acc)
        print(f"{ts.name}\thausdorff={points[ts.name][0]:.4f}\taccuracy={acc if acc is not None else '-'}")
    out = Path(cfg.output_dir)
    produced = report.hausdorff_scatter(points, out / "prompts")
    record_outputs(out, "prompts analyze", produced)
    return 0


# -- parser -------------------------------------------------------------------


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", action="append", help="config file; repeat to layer, later wins")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override")
    p.add_argument("--output", help="run directory (same as --set output_dir=...)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ovcos", description="open-vocabulary camouflaged object segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train the decoder")
    _add_config_args(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--ideal", action="store_true", help="use ground-truth masks as the segmentation")
    p.add_argument("--synthetic-accuracy", type=float, help="replace the classifier by one of this accuracy")
    p.add_argument("--table", action="store_true", help="print a tab-separated metric row")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate ablation presets")
    _add_config_args(p)
    p.add_argument("--presets", nargs="+", help=f"preset names, from {list(engine.PRESETS)}")
    p.add_argument("--sweep", nargs="+", type=int, help="iteration counts to sweep instead of presets")
    p.add_argument("--baseline", help="row that relative gains are computed against")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="plots and tables for a finished run")
    p.add_argument("--run", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--name", help="row label in the metric table")
    p.set_defaults(func=cmd_report)

    data = sub.add_parser("data", help="dataset tools").add_subparsers(dest="data_verb", required=True)
    p = data.add_parser("validate")
    p.add_argument("manifest")
    p.add_argument("--split")
    p.set_defaults(func=cmd_data_validate)
    p = data.add_parser("stats")
    p.add_argument("manifest")
    p.add_argument("--split")
    p.add_argument("--out", default="stats")
    p.set_defaults(func=cmd_data_stats)
    p = data.add_parser("toy", help="write the synthetic camouflage set")
    p.add_argument("out")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_data_toy)

    prompts = sub.add_parser("prompts", help="prompt tools").add_subparsers(dest="prompts_verb", required=True)
    p = prompts.add_parser("analyze")
    _add_config_args(p)
    p.add_argument("--templates", nargs="+", help="built-in set names or template files")
    p.add_argument("--checkpoint", help="also measure accuracy under each set")
    p.set_defaults(func=cmd_prompts_analyze)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ManifestError as exc:
        for p in exc.problems:
            print(p, file=sys.stderr)
        return 1
    except engine.TrainingAborted as exc:
        print(f"training aborted: {exc} (last checkpoint: {exc.last_checkpoint})", file=sys.stderr)
        return 1
    except (InvalidInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

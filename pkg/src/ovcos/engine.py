"""Training, evaluation and ablation runs."""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .backbone import Backbone, InvalidInputError, build_backbone
from .config import RunConfig, config_diff, config_from_dict, dump_config
from .data import Augment, CamoDataset, DatasetManifest, load_manifest
from .decoder import DecoderConfig, IterativeDecoder, build_decoder
from .losses import total_loss
from .metrics import METRIC_ORDER, GroundTruth, MetricReport, evaluate as evaluate_metrics, relative_gain
from .prompts import EmbeddingCache, get_template_set
from .recognizer import SamplePrediction, recognize

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Optional[Path]):
        super().__init__(f"{message}; last good checkpoint: {last_checkpoint}")
        self.last_checkpoint = last_checkpoint


class CheckpointMismatch(InvalidInputError):
    pass


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, decoder: IterativeDecoder, config: RunConfig, epoch: int, step: int, optimizer=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in decoder.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in decoder.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                n = names[id(p)]
                arrays[f"optim/{n}/exp_avg"] = st["exp_avg"].cpu().numpy()
                arrays[f"optim/{n}/exp_avg_sq"] = st["exp_avg_sq"].cpu().numpy()
                arrays[f"optim/{n}/step"] = np.asarray(float(st["step"]))
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "epoch": epoch,
        "step": step,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, Dict[str, np.ndarray]]:
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"checkpoint format {meta.get('format_version')} != {CHECKPOINT_VERSION}")
    return meta, arrays


def load_decoder(path, backbone: Backbone, config: Optional[RunConfig] = None):
    meta, arrays = read_checkpoint(path)
    saved = config_from_dict(meta["config"])
    if config is not None:
        diff = config_diff(saved.decoder.to_dict(), config.decoder.to_dict(), "decoder.")
        if saved.backbone.kind != config.backbone.kind:
            diff["backbone.kind"] = (saved.backbone.kind, config.backbone.kind)
        if diff:
            lines = ", ".join(f"{k}: checkpoint={a!r} config={b!r}" for k, (a, b) in diff.items())
            raise CheckpointMismatch(f"config does not match checkpoint ({lines})")
    decoder = build_decoder(saved.decoder, backbone.spec, saved.seed)
    state = {k[len("param/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param/")}
    decoder.load_state_dict(state)
    return decoder, meta, arrays


def _restore_optimizer(optimizer, decoder, arrays) -> None:
    for n, p in decoder.named_parameters():
        key = f"optim/{n}/exp_avg"
        if key in arrays:
            optimizer.state[p] = {
                "step": torch.tensor(float(arrays[f"optim/{n}/step"])),
                "exp_avg": torch.from_numpy(arrays[key].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[f"optim/{n}/exp_avg_sq"].copy()),
            }


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    epoch_losses: List[float]
    step_losses: List[float]
    backbone_digest_before: str
    backbone_digest_after: str
    grad_touched: Dict[str, bool] = field(default_factory=dict)
    decoder: Optional[IterativeDecoder] = None


def make_optimizer(decoder: IterativeDecoder, config: RunConfig):
    o = config.optimizer
    if o.name.lower() != "adamw":
        raise InvalidInputError(f"unsupported optimizer {o.name!r}")
    params = [p for p in decoder.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=o.lr, betas=tuple(o.betas), eps=o.eps, weight_decay=o.weight_decay)


def _manifest(config: RunConfig) -> DatasetManifest:
    if not config.data.manifest:
        raise InvalidInputError("data.manifest is not set")
    return load_manifest(config.data.manifest, config.data.split)


def train(
    config: RunConfig,
    resume: Optional[str] = None,
    backbone: Optional[Backbone] = None,
    manifest: Optional[DatasetManifest] = None,
) -> TrainResult:
    out = Path(config.output_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    dump_config(config, out / "config.yaml")
    torch.manual_seed(config.seed)
    backbone = backbone or build_backbone(config.backbone.kind, config.backbone.seed)
    digest_before = backbone.parameter_digest()
    manifest = manifest or _manifest(config)
    classes = manifest.class_names(config.data.train_split)
    text = EmbeddingCache(backbone).get(get_template_set(config.prompts.templates), classes)

    start_epoch, step = 0, 0
    if resume:
        decoder, meta, arrays = load_decoder(resume, backbone, config)
        optimizer = make_optimizer(decoder, config)
        _restore_optimizer(optimizer, decoder, arrays)
        start_epoch, step = meta["epoch"] + 1, meta["step"]
    else:
        decoder = build_decoder(config.decoder, backbone.spec, config.seed)
        optimizer = make_optimizer(decoder, config)
    decoder.train()

    aug = None
    if config.data.augment:
        aug = Augment(config.data.flip_p, config.data.max_rotation, config.data.jitter)
    else:
        aug = Augment(0.0, 0.0, 0.0)
    dataset = CamoDataset(
        manifest.split(config.data.train_split), classes, "train", config.resolution, config.seed, aug
    )
    dcfg = config.decoder
    se_stages = dcfg.se_stages if dcfg.structure_enabled else ()
    size = (config.resolution, config.resolution)
    touched = {n: False for n, p in decoder.named_parameters() if p.requires_grad}
    log_path = out / "train_log.jsonl"
    mode = "a" if resume else "w"
    epoch_losses, step_losses = [], []
    last_ckpt = Path(resume) if resume else None
    with open(log_path, mode) as log_fh:
        for epoch in range(start_epoch, config.epochs):
            running = []
            for batch in dataset.batches(config.batch_size, epoch, shuffle=True):
                pyramid = backbone.encode_image(batch.image)
                states = decoder(pyramid, text, backbone.project_visual, size)
                breakdown = total_loss(
                    states,
                    (batch.mask, batch.edge, batch.depth),
                    se_stages,
                    edge=dcfg.edge_aux,
                    depth=dcfg.depth_aux,
                    seg_variant=config.loss.seg,
                )
                if not torch.isfinite(breakdown.total):
                    raise TrainingAborted(f"non-finite loss at step {step}", last_ckpt)
                optimizer.zero_grad(set_to_none=True)
                breakdown.total.backward()
                for n, p in decoder.named_parameters():
                    if p.grad is not None and not touched[n] and bool(p.grad.abs().sum() > 0):
                        touched[n] = True
                optimizer.step()
                step += 1
                rec = breakdown.record(step)
                rec["epoch"] = epoch
                log_fh.write(json.dumps(rec) + "\n")
                running.append(rec["total"])
                step_losses.append(rec["total"])
                if config.max_steps and step >= config.max_steps:
                    break
            epoch_losses.append(float(np.mean(running)) if running else float("nan"))
            last_ckpt = save_checkpoint(out / "checkpoints" / f"epoch_{epoch:03d}.npz", decoder, config, epoch, step, optimizer)
            save_checkpoint(out / "checkpoints" / "last.npz", decoder, config, epoch, step, optimizer)
            log.info("epoch %d mean loss %.4f", epoch, epoch_losses[-1])
            if config.max_steps and step >= config.max_steps:
                break
    digest_after = backbone.parameter_digest()
    if digest_after != digest_before:
        raise TrainingAborted("backbone parameters changed during training", last_ckpt)
    return TrainResult(
        out / "checkpoints" / "last.npz",
        log_path,
        epoch_losses,
        step_losses,
        digest_before,
        digest_after,
        touched,
        decoder,
    )


# -- evaluation --------------------------------------------------------------


def eval_class_names(config: RunConfig, manifest: DatasetManifest) -> List[str]:
    if config.data.eval_classes == "all":
        return manifest.classes
    return manifest.class_names(config.data.eval_split)


def synthetic_classifier(true_classes: Sequence[int], num_classes: int, accuracy: float, seed: int = 0) -> List[int]:
    """Predicted labels that are right on exactly round(accuracy * N) samples."""
    n = len(true_classes)
    n_right = int(round(accuracy * n))
    order = np.random.default_rng(seed).permutation(n)
    right = np.zeros(n, dtype=bool)
    right[order[:n_right]] = True
    return [t if r else (t + 1) % num_classes for t, r in zip(true_classes, right)]


def evaluate(
    config: RunConfig,
    checkpoint: Optional[str] = None,
    backbone: Optional[Backbone] = None,
    manifest: Optional[DatasetManifest] = None,
    ideal: bool = False,
    synthetic_accuracy: Optional[float] = None,
    write_outputs: bool = True,
) -> MetricReport:
    """Inference over the eval split and class-aware scoring.

    ``ideal`` substitutes ground-truth masks for the predicted P_s;
    ``synthetic_accuracy`` additionally replaces the classifier by one of the
    given accuracy. Only images and masks are read.
    """
    out = Path(config.output_dir) / "eval"
    backbone = backbone or build_backbone(config.backbone.kind, config.backbone.seed)
    manifest = manifest or _manifest(config)
    classes = eval_class_names(config, manifest)
    templates = get_template_set(config.prompts.eval_templates or config.prompts.templates)
    cache = EmbeddingCache(backbone)
    text = cache.get(templates, classes)
    records = manifest.split(config.data.eval_split)
    # No depth is consumed at inference.
    records = [r.__class__(r.image_id, r.image_path, r.mask_path, None, r.class_name) for r in records]
    dataset = CamoDataset(records, classes, "eval", config.resolution, config.seed)

    decoder = None
    if not ideal:
        if checkpoint is None:
            raise InvalidInputError("evaluation needs a checkpoint unless running in ideal mode")
        decoder, _, _ = load_decoder(checkpoint, backbone, config)
        decoder.eval()
    size = (config.resolution, config.resolution)
    predictions: List[SamplePrediction] = []
    gts: List[GroundTruth] = []
    with torch.no_grad():
        for batch in dataset.batches(config.batch_size):
            pyramid = backbone.encode_image(batch.image)
            if ideal:
                seg = batch.mask[:, 0]
            else:
                states = decoder(pyramid, text, backbone.project_visual, size)
                seg = states[-1].seg_prob[:, 0]
            predictions += recognize(pyramid[5], seg, text, backbone.project_visual, batch.image_ids)
            gts += [
                GroundTruth(i, m[0].numpy().astype(bool), int(c))
                for i, m, c in zip(batch.image_ids, batch.mask, batch.class_index)
            ]
    if synthetic_accuracy is not None:
        labels = synthetic_classifier([g.class_index for g in gts], len(classes), synthetic_accuracy, config.seed)
        for p, lab in zip(predictions, labels):
            p.class_index = lab
    report = evaluate_metrics(predictions, gts)
    report.meta = {
        "checkpoint": str(checkpoint) if checkpoint else None,
        "ideal": ideal,
        "synthetic_accuracy": synthetic_accuracy,
        "templates": templates.name,
        "classes": classes,
        "skipped": list(dataset.skipped),
        "text_encodes": cache.encode_count,
    }
    if write_outputs:
        write_predictions(out, predictions, classes)
        report.to_json(out / "report.json")
        report.to_csv(out / "report.csv")
        (out / "table.tsv").write_text(MetricReport.table_header() + "\n" + report.table_row() + "\n")
    return report


def write_predictions(out: Path, predictions: Sequence[SamplePrediction], classes: Sequence[str]) -> None:
    (out / "masks").mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.jsonl", "w") as fh:
        for p in predictions:
            rec = {
                "image_id": p.image_id,
                "class_name": classes[p.class_index],
                "class_score": float(p.class_scores[p.class_index]),
                "degenerate_flag": bool(p.degenerate),
            }
            fh.write(json.dumps(rec) + "\n")
            img = np.clip(np.round(p.seg_prob * 255), 0, 255).astype(np.uint8)
            Image.fromarray(img).save(out / "masks" / f"{p.image_id}.png")


# -- ablation ----------------------------------------------------------------


@dataclass(frozen=True)
class AblationPreset:
    name: str
    camo_prompts: bool = True
    semantic_guidance: bool = True
    depth_aux: bool = True
    edge_aux: bool = True
    iterations: int = 2
    correlation: bool = True
    object_repr: bool = True
    se_fusion: str = "sea"

    @property
    def slug(self) -> str:
        return re.sub(r"[^A-Za-z0-9=+,.-]+", "_", self.name)

    def apply(self, config: RunConfig) -> RunConfig:
        return config.replace(
            **{
                "prompts.templates": "camo" if self.camo_prompts else "bare",
                "decoder.semantic_guidance": self.semantic_guidance,
                "decoder.depth_aux": self.depth_aux,
                "decoder.edge_aux": self.edge_aux,
                "decoder.iterations": self.iterations,
                "decoder.use_correlation": self.correlation,
                "decoder.use_object_repr": self.object_repr,
                "decoder.se_fusion": self.se_fusion,
                "output_dir": str(Path(config.output_dir) / self.slug),
            }
        )


_OFF = dict(camo_prompts=False, semantic_guidance=False, depth_aux=False, edge_aux=False, iterations=1)

PRESETS: Dict[str, AblationPreset] = {
    p.name: p
    for p in [
        AblationPreset("baseline", **_OFF),
        AblationPreset("+P", **{**_OFF, "camo_prompts": True}),
        AblationPreset("+P,C", **{**_OFF, "camo_prompts": True, "semantic_guidance": True}),
        AblationPreset("+P,C,D", iterations=1, edge_aux=False),
        AblationPreset("+P,C,E", iterations=1, depth_aux=False),
        AblationPreset("+P,C,D,E", iterations=1),
        AblationPreset("SE->addition", iterations=1, se_fusion="addition"),
        AblationPreset("T=1", iterations=1),
        AblationPreset("T=2", iterations=2),
        AblationPreset("w/o M_cor", correlation=False),
        AblationPreset("w/o f_obj", object_repr=False),
        AblationPreset("T=3", iterations=3),
    ]
}


def iteration_sweep(values: Sequence[int] = (1, 2, 3)) -> List[AblationPreset]:
    return [AblationPreset(f"T={t}", iterations=t) for t in values]


@dataclass
class AblationRow:
    name: str
    metrics: Dict[str, float]
    delta: float


def ablation_table(rows: Dict[str, Dict[str, float]], baseline: str) -> List[AblationRow]:
    base = rows[baseline]
    return [AblationRow(name, m, relative_gain(m, base)) for name, m in rows.items()]


def format_ablation(rows: Sequence[AblationRow]) -> str:
    lines = ["model\t" + MetricReport.table_header() + "\tdelta"]
    for r in rows:
        cells = "\t".join(f"{r.metrics[k]:.3f}" for k in METRIC_ORDER)
        delta = "n/a" if math.isnan(r.delta) else f"{100 * r.delta:.1f}%"
        lines.append(f"{r.name}\t{cells}\t{delta}")
    return "\n".join(lines) + "\n"


def ablate(
    presets: Sequence[AblationPreset],
    config: RunConfig,
    baseline: Optional[str] = None,
    backbone: Optional[Backbone] = None,
) -> List[AblationRow]:
    names = [p.name for p in presets]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise InvalidInputError(f"preset name collision: {dupes}")
    backbone = backbone or build_backbone(config.backbone.kind, config.backbone.seed)
    manifest = _manifest(config)
    results: Dict[str, Dict[str, float]] = {}
    for preset in presets:
        cfg = preset.apply(config)
        res = train(cfg, backbone=backbone, manifest=manifest)
        report = evaluate(cfg, str(res.checkpoint), backbone=backbone, manifest=manifest)
        results[preset.name] = report.aggregate
    rows = ablation_table(results, baseline or presets[0].name)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.tsv").write_text(format_ablation(rows))
    return rows

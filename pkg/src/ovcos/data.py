"""Manifest ingestion, class-disjoint splits and per-sample loading."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .analysis import make_edge_gt
from .backbone import InvalidInputError

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "ovcos-manifest"
MANIFEST_VERSION = 1
RECORD_FIELDS = ("image_id", "image", "mask", "depth", "class")


class ManifestError(InvalidInputError):
    def __init__(self, problems: List[str]):
        self.problems = problems
        super().__init__("; ".join(problems[:10]) + (" ..." if len(problems) > 10 else ""))


class SampleError(RuntimeError):
    pass


@dataclass(frozen=True)
class Record:
    image_id: str
    image_path: Path
    mask_path: Path
    depth_path: Optional[Path]
    class_name: str


@dataclass
class DatasetManifest:
    records: List[Record]
    seen: Set[str]
    unseen: Set[str]

    @property
    def classes(self) -> List[str]:
        return sorted(self.seen | self.unseen)

    def split(self, which: str) -> List[Record]:
        names = {"seen": self.seen, "train": self.seen, "unseen": self.unseen, "test": self.unseen}[which]
        return [r for r in self.records if r.class_name in names]

    def class_names(self, which: str) -> List[str]:
        return sorted({"seen": self.seen, "train": self.seen, "unseen": self.unseen, "test": self.unseen}[which])

    def summary(self) -> dict:
        return {
            "records": len(self.records),
            "classes": len(self.seen | self.unseen),
            "seen_classes": len(self.seen),
            "unseen_classes": len(self.unseen),
            "seen_records": len(self.split("seen")),
            "unseen_records": len(self.split("unseen")),
        }


def read_split(path) -> Tuple[Set[str], Set[str]]:
    data = json.loads(Path(path).read_text())
    return set(data["seen"]), set(data["unseen"])


def write_split(path, seen: Sequence[str], unseen: Sequence[str]) -> None:
    Path(path).write_text(json.dumps({"seen": sorted(seen), "unseen": sorted(unseen)}, indent=1))


def write_manifest(path, rows: Sequence[dict], split_file: Optional[str] = None) -> None:
    header = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION}
    if split_file:
        header["split"] = split_file
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def load_manifest(path, split_path=None, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a line-delimited manifest plus its class split.

    All problems are collected and raised together as a :class:`ManifestError`.
    """
    path = Path(path)
    root = path.parent
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ManifestError([f"{path}: empty manifest"])
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError([f"{path}:1: header is not JSON ({exc})"]) from None
    if header.get("format") != MANIFEST_FORMAT:
        raise ManifestError([f"{path}:1: not an {MANIFEST_FORMAT} file"])
    if header.get("version") != MANIFEST_VERSION:
        raise ManifestError([f"{path}:1: unsupported version {header.get('version')}"])

    problems: List[str] = []
    if split_path is None and "split" in header:
        split_path = root / header["split"]
    if split_path is None:
        raise ManifestError([f"{path}: no class split given"])
    seen, unseen = read_split(split_path)
    overlap = sorted(seen & unseen)
    if overlap:
        problems.append(f"classes in both splits: {overlap}")

    records, ids = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append(f"{path}:{lineno}: parse error ({exc})")
            continue
        missing = [k for k in ("image_id", "image", "mask", "class") if k not in row]
        if missing:
            problems.append(f"{path}:{lineno}: missing fields {missing}")
            continue
        rec = Record(
            image_id=str(row["image_id"]),
            image_path=root / row["image"],
            mask_path=root / row["mask"],
            depth_path=root / row["depth"] if row.get("depth") else None,
            class_name=row["class"],
        )
        if rec.image_id in ids:
            problems.append(f"{path}:{lineno}: duplicate image_id {rec.image_id!r}")
        ids.add(rec.image_id)
        if rec.class_name not in seen and rec.class_name not in unseen:
            problems.append(f"{rec.image_id}: class {rec.class_name!r} in neither split")
        if check_files:
            for label, p in (("image", rec.image_path), ("mask", rec.mask_path), ("depth", rec.depth_path)):
                if p is not None and not p.exists():
                    problems.append(f"{rec.image_id}: dangling {label} path {p}")
        records.append(rec)
    if problems:
        raise ManifestError(problems)
    return DatasetManifest(records, seen, unseen)


# -- sample loading ------------------------------------------------------------


@dataclass
class Augment:
    flip_p: float = 0.5
    max_rotation: float = 15.0
    jitter: float = 0.2


@dataclass
class Sample:
    image_id: str
    image: torch.Tensor  # (3, S, S) in [0, 1]
    mask: torch.Tensor  # (S, S) binary
    edge: torch.Tensor  # (S, S) in [0, 1]
    depth: Optional[torch.Tensor]  # (S, S) in [0, 1]
    class_index: int
    flipped: bool = False
    angle: float = 0.0


def sample_seed(global_seed: int, image_id: str, epoch: int = 0) -> np.random.SeedSequence:
    digest = hashlib.blake2b(image_id.encode(), digest_size=8).digest()
    return np.random.SeedSequence([global_seed, epoch, int.from_bytes(digest, "little")])


def _read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def _read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) >= 128).astype(np.float32)


def _read_depth(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    arr = arr.astype(np.float64)
    lo, hi = arr.min(), arr.max()
    if hi <= lo:
        return np.zeros_like(arr, dtype=np.float32)
    return ((arr - lo) / (hi - lo)).astype(np.float32)


def _resize(x: torch.Tensor, size: int, mode: str) -> torch.Tensor:
    x4 = x.reshape(1, -1, *x.shape[-2:])
    if tuple(x4.shape[-2:]) == (size, size):
        return x
    kw = {} if mode == "nearest" else {"align_corners": False}
    out = F.interpolate(x4, size=(size, size), mode=mode, **kw)
    return out.reshape(*x.shape[:-2], size, size)


def _rotate(x: torch.Tensor, angle_deg: float, mode: str) -> torch.Tensor:
    x4 = x.reshape(1, -1, *x.shape[-2:])
    a = math.radians(angle_deg)
    theta = torch.tensor(
        [[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0]], dtype=x4.dtype
    )[None]
    grid = F.affine_grid(theta, x4.shape, align_corners=False)
    out = F.grid_sample(x4, grid, mode=mode, padding_mode="zeros", align_corners=False)
    return out.reshape(x.shape)


def _jitter(image: torch.Tensor, rng: np.random.Generator, strength: float) -> torch.Tensor:
    b, c, s = rng.uniform(1 - strength, 1 + strength, size=3)
    img = image * b
    mean = img.mean()
    img = (img - mean) * c + mean
    gray = img.mean(dim=0, keepdim=True)
    img = (img - gray) * s + gray
    return img.clamp(0, 1)


def load_sample(
    record: Record,
    class_names: Sequence[str],
    mode: str = "eval",
    size: int = 384,
    seed: int = 0,
    epoch: int = 0,
    augment: Optional[Augment] = None,
) -> Sample:
    """Read, resize and (in train mode) augment one record.

    Depth is optional in eval mode and required in train mode.
    """
    try:
        image = torch.from_numpy(_read_rgb(record.image_path)).permute(2, 0, 1).contiguous()
        mask = torch.from_numpy(_read_mask(record.mask_path))
        depth = None
        if record.depth_path is not None:
            depth = torch.from_numpy(_read_depth(record.depth_path))
        elif mode == "train":
            raise SampleError(f"{record.image_id}: training requires a depth map")
    except SampleError:
        raise
    except Exception as exc:  # unreadable or corrupt file
        raise SampleError(f"{record.image_id}: {exc}") from exc
    if mask.shape != image.shape[-2:]:
        raise SampleError(f"{record.image_id}: mask {tuple(mask.shape)} vs image {tuple(image.shape[-2:])}")

    image = _resize(image, size, "bilinear").clamp(0, 1)
    mask = _resize(mask, size, "nearest")
    if depth is not None:
        depth = _resize(depth, size, "bilinear").clamp(0, 1)

    flipped, angle = False, 0.0
    if mode == "train":
        aug = augment or Augment()
        rng = np.random.default_rng(sample_seed(seed, record.image_id, epoch))
        flipped = bool(rng.random() < aug.flip_p)
        angle = float(rng.uniform(-aug.max_rotation, aug.max_rotation))
        if flipped:
            image, mask = image.flip(-1), mask.flip(-1)
            depth = depth.flip(-1) if depth is not None else None
        if angle:
            image = _rotate(image, angle, "bilinear")
            mask = _rotate(mask, angle, "nearest")
            depth = _rotate(depth, angle, "bilinear") if depth is not None else None
        if aug.jitter:
            image = _jitter(image, rng, aug.jitter)

    edge = torch.from_numpy(make_edge_gt(mask.numpy() > 0.5))
    return Sample(
        image_id=record.image_id,
        image=image,
        mask=mask,
        edge=edge,
        depth=depth,
        class_index=list(class_names).index(record.class_name),
        flipped=flipped,
        angle=angle,
    )


@dataclass
class Batch:
    image_ids: List[str]
    image: torch.Tensor
    mask: torch.Tensor
    edge: torch.Tensor
    depth: Optional[torch.Tensor]
    class_index: torch.Tensor


class CamoDataset:
    """Records plus loading policy; iterates in deterministic batches."""

    def __init__(
        self,
        records: Sequence[Record],
        class_names: Sequence[str],
        mode: str = "eval",
        size: int = 384,
        seed: int = 0,
        augment: Optional[Augment] = None,
    ):
        self.records = list(records)
        self.class_names = list(class_names)
        self.mode = mode
        self.size = size
        self.seed = seed
        self.augment = augment
        self.skipped: List[str] = []

    def __len__(self) -> int:
        return len(self.records)

    def load(self, i: int, epoch: int = 0) -> Sample:
        return load_sample(
            self.records[i], self.class_names, self.mode, self.size, self.seed, epoch, self.augment
        )

    def batches(self, batch_size: int, epoch: int = 0, shuffle: bool = False) -> Iterator[Batch]:
        order = np.arange(len(self.records))
        if shuffle:
            np.random.default_rng([self.seed, epoch]).shuffle(order)
        chunk: List[Sample] = []
        for i in order:
            try:
                chunk.append(self.load(int(i), epoch))
            except SampleError as exc:
                log.warning("skipping sample: %s", exc)
                self.skipped.append(self.records[int(i)].image_id)
                continue
            if len(chunk) == batch_size:
                yield collate(chunk)
                chunk = []
        if chunk:
            yield collate(chunk)


def collate(samples: Sequence[Sample]) -> Batch:
    depth = None
    if all(s.depth is not None for s in samples):
        depth = torch.stack([s.depth for s in samples])[:, None]
    return Batch(
        image_ids=[s.image_id for s in samples],
        image=torch.stack([s.image for s in samples]),
        mask=torch.stack([s.mask for s in samples])[:, None],
        edge=torch.stack([s.edge for s in samples])[:, None],
        depth=depth,
        class_index=torch.tensor([s.class_index for s in samples]),
    )

"""Synthetic camouflage scenes for smoke tests and the toy learnability run.

Each class owns a colour palette. Objects are blobs filled with a fine
oriented stripe pattern; the background reuses the same palette as smooth,
low-frequency blotches, so colour alone does not separate them.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .backbone import StubBackbone
from .data import write_manifest, write_split
from .prompts import BARE_PROMPTS, class_embeddings
from .recognizer import masked_average_pool

TOY_CLASSES = ("moth", "frog", "octopus", "lizard")
TOY_PALETTES = {
    "moth": ((0.62, 0.52, 0.38), (0.42, 0.34, 0.22)),
    "frog": ((0.30, 0.62, 0.25), (0.16, 0.40, 0.14)),
    "octopus": ((0.70, 0.30, 0.28), (0.45, 0.16, 0.18)),
    "lizard": ((0.30, 0.40, 0.70), (0.16, 0.22, 0.45)),
}


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    mask: np.ndarray  # (H, W) bool
    depth: np.ndarray  # (H, W) float in [0, 1]
    class_name: str


def _blob_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    ry, rx = rng.uniform(0.14, 0.26, size=2) * size
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    # Wobbly ellipse boundary.
    ang = np.arctan2(v, u)
    wobble = 1 + 0.15 * np.sin(3 * ang + rng.uniform(0, 2 * np.pi))
    return (u / rx) ** 2 + (v / ry) ** 2 <= wobble**2


def make_scene(class_name: str, size: int = 64, seed: int = 0, palette=None) -> Scene:
    rng = np.random.default_rng(seed)
    light, dark = (np.asarray(c) for c in (palette or TOY_PALETTES[class_name]))
    shift = rng.normal(0, 0.03, size=3)
    light, dark = np.clip(light + shift, 0, 1), np.clip(dark + shift, 0, 1)
    mask = _blob_mask(rng, size)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phi = rng.uniform(0, np.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(phi) + yy * np.sin(phi)) / 4.0)
    blotch = ndimage.gaussian_filter(rng.normal(size=(size, size)), 4.0)
    blotch = (blotch - blotch.min()) / (np.ptp(blotch) + 1e-12)
    mix = np.where(mask, stripes, blotch)
    image = mix[..., None] * light + (1 - mix[..., None]) * dark
    image = np.clip(image + rng.normal(0, 0.02, size=image.shape), 0, 1)

    depth = 0.15 + 0.45 * yy / (size - 1)
    depth = np.where(mask, 0.85 + 0.1 * rng.random(), depth)
    depth = ndimage.gaussian_filter(depth, 1.0)
    return Scene(image, mask, np.clip(depth, 0, 1), class_name)


def write_toy_dataset(
    root,
    seen: Sequence[str] = TOY_CLASSES[:2],
    unseen: Sequence[str] = TOY_CLASSES[2:],
    per_seen: int = 24,
    per_unseen: int = 8,
    size: int = 64,
    seed: int = 0,
) -> Path:
    """Write PNG images/masks/depths plus manifest and split; return the manifest path."""
    root = Path(root)
    for sub in ("images", "masks", "depth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    counter = 0
    for names, per in ((seen, per_seen), (unseen, per_unseen)):
        for name in names:
            for j in range(per):
                scene = make_scene(name, size, seed=seed * 100_003 + counter)
                counter += 1
                image_id = f"{name}_{j:03d}"
                Image.fromarray((scene.image * 255).round().astype(np.uint8)).save(root / "images" / f"{image_id}.png")
                Image.fromarray(scene.mask.astype(np.uint8) * 255).save(root / "masks" / f"{image_id}.png")
                Image.fromarray((scene.depth * 255).round().astype(np.uint8)).save(root / "depth" / f"{image_id}.png")
                rows.append(
                    {
                        "image_id": image_id,
                        "image": f"images/{image_id}.png",
                        "mask": f"masks/{image_id}.png",
                        "depth": f"depth/{image_id}.png",
                        "class": name,
                    }
                )
    write_split(root / "split.json", seen, unseen)
    write_manifest(root / "manifest.jsonl", rows, split_file="split.json")
    return root / "manifest.jsonl"


def plant_class_signal(
    backbone: StubBackbone,
    class_names: Sequence[str] = TOY_CLASSES,
    per_class: int = 16,
    size: int = 64,
    seed: int = 10_007,
) -> None:
    """Refit the stub projection so object-pooled deep features of each class's
    scenes land on that class's bare-name text embedding."""
    targets = class_embeddings(backbone, BARE_PROMPTS, class_names).embeddings
    pooled, rows = [], []
    for k, name in enumerate(class_names):
        for j in range(per_class):
            scene = make_scene(name, size, seed=seed + 1000 * k + j)
            img = torch.from_numpy(scene.image).permute(2, 0, 1).float()
            f5 = backbone.encode_image(img)[5][0]
            vec, _ = masked_average_pool(f5, torch.from_numpy(scene.mask.astype(np.float32)))
            pooled.append(vec)
            rows.append(targets[k])
    backbone.plant(torch.stack(pooled), torch.stack(rows))


def toy_backbone(seed: int = 1337, classes: Sequence[str] = TOY_CLASSES, **kw) -> StubBackbone:
    backbone = StubBackbone(seed=seed, **kw)
    plant_class_signal(backbone, classes)
    return backbone

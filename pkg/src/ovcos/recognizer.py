"""Class assignment from the final segmentation: masked pooling of the deepest
features, projection into the joint space and cosine matching against the
class embeddings."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import ClassEmbeddingSet, InvalidInputError

TAU = 0.01
POOL_EPS = 1e-6


@dataclass
class SamplePrediction:
    image_id: str
    seg_prob: np.ndarray  # (H, W) in [0, 1]
    class_index: int
    class_scores: np.ndarray
    correlation: np.ndarray
    degenerate: bool = False


def masked_average_pool(
    feature: torch.Tensor, mask: torch.Tensor, eps: float = POOL_EPS
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mask-weighted spatial mean.

    feature: (C, h, w) or (B, C, h, w); mask: (H, W), (B, H, W) or (B, 1, H, W)
    with values in [0, 1], bilinearly resized to (h, w) when needed.
    Returns the pooled vectors and a per-sample flag set when the mask is empty.
    """
    squeeze = feature.ndim == 3
    if squeeze:
        feature = feature.unsqueeze(0)
        mask = mask.reshape(1, 1, *mask.shape[-2:])
    elif mask.ndim == 3:
        mask = mask.unsqueeze(1)
    elif mask.ndim == 2:
        mask = mask.reshape(1, 1, *mask.shape)
    mask = mask.to(feature.dtype)
    if mask.shape[-2:] != feature.shape[-2:]:
        # Antialiased so that downsampling sees every mask pixel.
        mask = F.interpolate(
            mask, size=feature.shape[-2:], mode="bilinear", align_corners=False, antialias=True
        )
    area = mask.sum(dim=(2, 3))  # (B, 1)
    pooled = (feature * mask).sum(dim=(2, 3)) / area.clamp_min(eps)
    degenerate = area.squeeze(1) < eps
    if squeeze:
        return pooled[0], degenerate[0]
    return pooled, degenerate


def classify(
    f_v: torch.Tensor, text_embeds: ClassEmbeddingSet, tau: float = TAU
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Return (class_index, class_scores, correlation) for (D,) or (B, D) inputs.

    Ties resolve to the lowest class index (torch.argmax returns the first
    maximal entry).
    """
    if len(text_embeds) < 1:
        raise InvalidInputError("no classes to match against")
    t = text_embeds.embeddings.to(f_v.dtype)
    if f_v.shape[-1] != t.shape[-1]:
        raise InvalidInputError(f"embedding dims differ: {f_v.shape[-1]} vs {t.shape[-1]}")
    correlation = f_v @ t.T
    scores = torch.softmax(correlation / tau, dim=-1)
    index = torch.argmax(correlation, dim=-1)
    return index, scores, correlation


def recognize(
    f5: torch.Tensor,
    seg_prob: torch.Tensor,
    text_embeds: ClassEmbeddingSet,
    project: Callable[[torch.Tensor], Tuple[torch.Tensor, torch.Tensor]],
    image_ids: Optional[list] = None,
    tau: float = TAU,
) -> list:
    """Batch recognition: f5 (B, C5, h, w), seg_prob (B, H, W)."""
    with torch.no_grad():
        pooled, empty = masked_average_pool(f5, seg_prob)
        f_v, zero = project(pooled)
        index, scores, corr = classify(f_v, text_embeds, tau)
    out = []
    for b in range(f5.shape[0]):
        out.append(
            SamplePrediction(
                image_id=image_ids[b] if image_ids else str(b),
                seg_prob=seg_prob[b].detach().cpu().numpy().astype(np.float64),
                class_index=int(index[b]),
                class_scores=scores[b].detach().cpu().numpy().astype(np.float64),
                correlation=corr[b].detach().cpu().numpy().astype(np.float64),
                degenerate=bool(empty[b] or zero[b]),
            )
        )
    return out

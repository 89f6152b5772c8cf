"""Training objective: weighted segmentation loss per iteration plus dice edge
and L1+SSIM depth losses for every structure-enhanced stage."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import torch
import torch.nn.functional as F

from .backbone import InvalidInputError

BCE_EPS = 1e-7
DICE_EPS = 1.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _4d(x: torch.Tensor) -> torch.Tensor:
    while x.ndim < 4:
        x = x.unsqueeze(0)
    return x


def boundary_weight(gt: torch.Tensor, kernel: int = 31, gain: float = 5.0) -> torch.Tensor:
    gt = _4d(gt)
    local = F.avg_pool2d(gt, kernel, stride=1, padding=kernel // 2)
    return 1.0 + gain * (local - gt).abs()


def seg_loss(pred_prob: torch.Tensor, gt: torch.Tensor, variant: str = "wbce_wiou") -> torch.Tensor:
    """Weighted BCE + weighted IoU on probabilities (batch mean).

    ``variant="bce_iou"`` drops the boundary weighting.
    """
    pred, gt = _4d(pred_prob), _4d(gt).to(pred_prob.dtype)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if not torch.all((gt == 0) | (gt == 1)):
        raise InvalidInputError("segmentation ground truth must be binary")
    if variant == "wbce_wiou":
        w = boundary_weight(gt)
    elif variant == "bce_iou":
        w = torch.ones_like(gt)
    else:
        raise InvalidInputError(f"unknown segmentation loss {variant!r}")
    p = pred.clamp(BCE_EPS, 1 - BCE_EPS)
    bce = -(gt * torch.log(p) + (1 - gt) * torch.log(1 - p))
    wbce = (w * bce).sum(dim=(2, 3)) / w.sum(dim=(2, 3))
    inter = (pred * gt * w).sum(dim=(2, 3))
    union = ((pred + gt) * w).sum(dim=(2, 3))
    wiou = 1 - (inter + 1) / (union - inter + 1)
    return (wbce + wiou).mean()


def edge_loss(pred_logits: torch.Tensor, gt_edge: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    logits, g = _4d(pred_logits), _4d(gt_edge).to(pred_logits.dtype)
    if logits.shape != g.shape:
        raise InvalidInputError(f"shape mismatch {tuple(logits.shape)} vs {tuple(g.shape)}")
    p = torch.sigmoid(logits)
    inter = (p * g).sum(dim=(2, 3))
    dice = (2 * inter + eps) / (p.sum(dim=(2, 3)) + g.sum(dim=(2, 3)) + eps)
    return (1 - dice).mean()


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - size // 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a: torch.Tensor, b: torch.Tensor, size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Mean SSIM with a Gaussian window and zero padding ("same" output)."""
    a, b = _4d(a), _4d(b)
    w = gaussian_window(size, sigma, a.dtype).to(a.device)[None, None]
    pad = size // 2
    conv = lambda x: F.conv2d(x, w, padding=pad)
    mu_a, mu_b = conv(a), conv(b)
    var_a = conv(a * a) - mu_a**2
    var_b = conv(b * b) - mu_b**2
    cov = conv(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean(dim=(1, 2, 3))


def depth_loss(pred_logits: torch.Tensor, gt_depth: torch.Tensor) -> torch.Tensor:
    logits, g = _4d(pred_logits), _4d(gt_depth).to(pred_logits.dtype)
    if logits.shape != g.shape:
        raise InvalidInputError(f"shape mismatch {tuple(logits.shape)} vs {tuple(g.shape)}")
    if g.min() < 0 or g.max() > 1:
        raise InvalidInputError("depth ground truth must lie in [0, 1]")
    p = torch.sigmoid(logits)
    l1 = (p - g).abs().mean(dim=(1, 2, 3))
    return (l1 + 1 - ssim(p, g)).mean()


def resize_gt(gt: torch.Tensor, size, mode: str) -> torch.Tensor:
    gt = _4d(gt)
    if tuple(gt.shape[-2:]) == tuple(size):
        return gt
    if mode == "nearest":
        return F.interpolate(gt, size=size, mode="nearest")
    return F.interpolate(gt, size=size, mode="bilinear", align_corners=False)


@dataclass
class LossBreakdown:
    seg_terms: List[torch.Tensor]
    edge_terms: List[Dict[int, torch.Tensor]] = field(default_factory=list)
    depth_terms: List[Dict[int, torch.Tensor]] = field(default_factory=list)
    total: torch.Tensor = None

    FAMILIES = ("seg", "edge", "depth")

    def terms(self) -> List[Tuple[str, int, int, torch.Tensor]]:
        """Flat (family, iteration, stage, value) list; stage 0 for seg terms."""
        out = [("seg", t + 1, 0, v) for t, v in enumerate(self.seg_terms)]
        for fam, table in (("edge", self.edge_terms), ("depth", self.depth_terms)):
            for t, per_stage in enumerate(table):
                out.extend((fam, t + 1, i, v) for i, v in sorted(per_stage.items()))
        return out

    def record(self, step: int) -> dict:
        f = lambda v: float(v.detach())
        return {
            "step": step,
            "l_s": [f(v) for v in self.seg_terms],
            "l_e": {str(i): [f(t[i]) for t in self.edge_terms] for i in sorted(self.edge_terms[0])}
            if self.edge_terms and self.edge_terms[0]
            else {},
            "l_d": {str(i): [f(t[i]) for t in self.depth_terms] for i in sorted(self.depth_terms[0])}
            if self.depth_terms and self.depth_terms[0]
            else {},
            "total": f(self.total),
        }


def total_loss(
    states: Sequence,
    gts: Tuple[torch.Tensor, torch.Tensor | None, torch.Tensor | None],
    se_stages: Sequence[int] = (1, 2, 3),
    edge: bool = True,
    depth: bool = True,
    seg_variant: str = "wbce_wiou",
) -> LossBreakdown:
    """Plain sum over iterations of the segmentation term and, per stage in
    ``se_stages``, the edge and depth terms. ``edge``/``depth`` switch off the
    corresponding families (ablation)."""
    g_s, g_e, g_d = gts
    seg_terms, edge_terms, depth_terms = [], [], []
    for state in states:
        t = state.iteration
        seg_terms.append(seg_loss(state.seg_prob, g_s, seg_variant))
        e_row, d_row = {}, {}
        for i in se_stages:
            if edge:
                if i not in state.edge_logits:
                    raise InvalidInputError(f"missing edge logits at stage {i}, iteration {t}")
                m = state.edge_logits[i]
                e_row[i] = edge_loss(m, resize_gt(g_e, m.shape[-2:], "nearest"))
            if depth:
                if i not in state.depth_logits:
                    raise InvalidInputError(f"missing depth logits at stage {i}, iteration {t}")
                if g_d is None:
                    raise InvalidInputError("depth supervision requested without depth maps")
                m = state.depth_logits[i]
                d_row[i] = depth_loss(m, resize_gt(g_d, m.shape[-2:], "bilinear"))
        edge_terms.append(e_row)
        depth_terms.append(d_row)
    breakdown = LossBreakdown(seg_terms, edge_terms, depth_terms)
    breakdown.total = sum(v for *_, v in breakdown.terms())
    return breakdown

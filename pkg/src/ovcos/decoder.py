"""Iterative refinement decoder with semantic guidance and structure enhancement.

Stages are indexed 1..5 following the feature pyramid (5 is the deepest). The
first pass runs stages 5 -> 1; every later pass re-enters at stage 3 and reuses
the cached stage-4 output, with top-down object cues re-modulating the
semantic guidance weight.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Dict, List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import (
    BackboneSpec,
    ClassEmbeddingSet,
    FeaturePyramid,
    InvalidInputError,
    NumericalFaultError,
    upsample2x,
)
from .recognizer import POOL_EPS, masked_average_pool

Projector = Callable[[torch.Tensor], Tuple[torch.Tensor, torch.Tensor]]


@dataclass
class DecoderConfig:
    width: int = 32
    heads: int = 4
    iterations: int = 2
    se_stages: Tuple[int, ...] = (1, 2, 3)
    num_stages: int = 5
    agg: str = "max"
    tau: float = 0.01
    # ablation switches
    semantic_guidance: bool = True
    edge_aux: bool = True
    depth_aux: bool = True
    se_fusion: str = "sea"
    use_correlation: bool = True
    use_object_repr: bool = True
    entry_stage: int = 3

    def __post_init__(self):
        self.se_stages = tuple(sorted(int(s) for s in self.se_stages))
        if self.width <= 0 or self.heads <= 0 or self.width % self.heads:
            raise InvalidInputError("width must be a positive multiple of heads")
        if self.iterations < 1:
            raise InvalidInputError("iterations must be >= 1")
        if self.num_stages != 5:
            raise InvalidInputError("the decoder is built for 5 pyramid levels")
        if not set(self.se_stages) <= set(range(1, self.num_stages + 1)):
            raise InvalidInputError(f"se_stages {self.se_stages} outside 1..{self.num_stages}")
        if not 1 <= self.entry_stage <= self.num_stages:
            raise InvalidInputError("entry_stage outside the stage range")
        if self.agg not in ("max", "mean"):
            raise InvalidInputError(f"unknown aggregation {self.agg!r}")
        if self.se_fusion not in ("sea", "addition"):
            raise InvalidInputError(f"unknown SE fusion {self.se_fusion!r}")

    @property
    def structure_enabled(self) -> bool:
        return bool(self.se_stages) and (self.edge_aux or self.depth_aux)

    @property
    def uses_cue(self) -> bool:
        return self.iterations > 1 and (self.use_correlation or self.use_object_repr)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["se_stages"] = list(self.se_stages)
        return d


@dataclass
class DecodeState:
    iteration: int
    stage_features: Dict[int, torch.Tensor]
    seg_logits: torch.Tensor  # (B, 1, H, W) at input resolution
    seg_prob: torch.Tensor
    edge_logits: Dict[int, torch.Tensor] = field(default_factory=dict)
    depth_logits: Dict[int, torch.Tensor] = field(default_factory=dict)
    edge_features: Dict[int, torch.Tensor] = field(default_factory=dict)
    depth_features: Dict[int, torch.Tensor] = field(default_factory=dict)
    base_weights: Dict[int, torch.Tensor] = field(default_factory=dict)
    remod_weights: Dict[int, torch.Tensor] = field(default_factory=dict)
    correlation: Optional[torch.Tensor] = None
    object_repr: Optional[torch.Tensor] = None
    degenerate: Optional[torch.Tensor] = None


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, c = x.shape
    return x.reshape(b, n, heads, c // heads).transpose(1, 2)  # (B, h, N, dh)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Scaled dot-product attention over the last two dims, per head."""
    return F.scaled_dot_product_attention(q, k, v)


def guidance_weight(q: torch.Tensor, g: torch.Tensor, agg: str = "max") -> torch.Tensor:
    """Per-pixel base weight from query/class similarities.

    q: (B, N, C), g: (K, C). Softmax over classes, then reduce over classes.
    """
    sim = q @ g.T / math.sqrt(q.shape[-1])
    prob = torch.softmax(sim, dim=-1)
    if agg == "max":
        return prob.max(dim=-1).values
    return prob.mean(dim=-1)


class SemanticGuidanceAttention(nn.Module):
    """Self-attention whose values are gated by text-derived spatial guidance.

    With ``guided=False`` this is plain pre-norm multi-head self-attention.
    """

    def __init__(self, width: int, heads: int, text_dim: int, agg: str = "max", guided: bool = True):
        super().__init__()
        self.heads = heads
        self.agg = agg
        self.guided = guided
        self.norm = nn.LayerNorm(width)
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.out = nn.Linear(width, width)
        if guided:
            self.guide = nn.Linear(text_dim, width)

    def forward(
        self,
        x: torch.Tensor,
        text: torch.Tensor,
        remod: Optional[torch.Tensor] = None,
        context: str = "",
    ) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """x: (B, N, C) tokens; text: (K, D); remod: (B, N) or None."""
        h = self.norm(x)
        q, k, v = self.q(h), self.k(h), self.v(h)
        base = None
        if self.guided:
            if text.shape[0] < 1:
                raise InvalidInputError("semantic guidance needs at least one class")
            g = self.guide(text.to(x.dtype))
            base = guidance_weight(q, g, self.agg)
            if not torch.isfinite(base).all():
                raise NumericalFaultError(f"non-finite class similarity {context}".strip())
            gate = base if remod is None else base * remod
            v = v * (1.0 + gate.unsqueeze(-1))
        o = attention(_split_heads(q, self.heads), _split_heads(k, self.heads), _split_heads(v, self.heads))
        o = o.transpose(1, 2).reshape(x.shape)
        return x + self.out(o), base


class StructureEnhancementAttention(nn.Module):
    """Cross-attention from visual tokens to edge and depth stem features,
    blended per head by a learnable weight in (0, 1)."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(width)
        self.norm_kv = nn.LayerNorm(width)
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.out = nn.Linear(width, width)
        self.alpha_logit = nn.Parameter(torch.zeros(heads))

    @property
    def alpha(self) -> torch.Tensor:
        return torch.sigmoid(self.alpha_logit)

    def _branch(self, q: torch.Tensor, src: torch.Tensor) -> torch.Tensor:
        s = self.norm_kv(src)
        return attention(q, _split_heads(self.k(s), self.heads), _split_heads(self.v(s), self.heads))

    def forward(
        self, x: torch.Tensor, edge: Optional[torch.Tensor], depth: Optional[torch.Tensor]
    ) -> torch.Tensor:
        """All inputs are (B, N, C) token sequences at the same resolution."""
        for src in (edge, depth):
            if src is not None and src.shape != x.shape:
                raise InvalidInputError(f"structure feature {tuple(src.shape)} vs {tuple(x.shape)}")
        q = _split_heads(self.q(self.norm(x)), self.heads)
        if edge is not None and depth is not None:
            a = self.alpha.to(x.dtype).view(1, -1, 1, 1)
            o = a * self._branch(q, edge) + (1 - a) * self._branch(q, depth)
        elif edge is not None:
            o = self._branch(q, edge)
        elif depth is not None:
            o = self._branch(q, depth)
        else:
            return x
        return x + self.out(o.transpose(1, 2).reshape(x.shape))


class AdditionFusion(nn.Module):
    """Ablation replacement for structure attention: project and add."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.edge = nn.Linear(width, width)
        self.depth = nn.Linear(width, width)

    def forward(self, x, edge, depth):
        if edge is not None:
            x = x + self.edge(edge)
        if depth is not None:
            x = x + self.depth(depth)
        return x


class _Stem(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        # Bias-free so that a zero input maps to a zero stem feature.
        self.conv1 = nn.Conv2d(width, width, 3, padding=1, bias=False)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1, bias=False)
        self.head = nn.Conv2d(width, 1, 1)

    def forward(self, x):
        f = F.gelu(self.conv2(F.gelu(self.conv1(x))))
        return f, self.head(f)


class StructureBranch(nn.Module):
    """Edge and depth stems + heads for one decoding stage."""

    def __init__(self, width: int, edge: bool = True, depth: bool = True):
        super().__init__()
        self.edge = _Stem(width) if edge else None
        self.depth = _Stem(width) if depth else None

    def forward(self, x: torch.Tensor):
        f_e = m_e = f_d = m_d = None
        if self.edge is not None:
            f_e, m_e = self.edge(x)
        if self.depth is not None:
            f_d, m_d = self.depth(x)
        return f_e, f_d, m_e, m_d


@dataclass
class TopDownGuidance:
    correlation: torch.Tensor  # (B, K)
    object_repr: torch.Tensor  # (B, C5)
    cue: Optional[torch.Tensor]  # (B, C) or None when both cue sources are ablated
    degenerate: torch.Tensor  # (B,) bool

    def remod_weight(self, tokens: torch.Tensor) -> torch.Tensor:
        """Spatial activation of the cue over (B, N, C) stage tokens."""
        c = tokens.shape[-1]
        return torch.sigmoid((tokens @ self.cue.unsqueeze(-1)).squeeze(-1) / math.sqrt(c))


class CueProjector(nn.Module):
    def __init__(self, feat_dim: int, text_dim: int, width: int):
        super().__init__()
        self.obj = nn.Linear(feat_dim, width)
        self.txt = nn.Linear(text_dim, width)


def build_topdown_guidance(
    seg_prob: torch.Tensor,
    f5: torch.Tensor,
    text: ClassEmbeddingSet,
    project: Projector,
    cue_proj: Optional[CueProjector],
    tau: float = 0.01,
    use_correlation: bool = True,
    use_object_repr: bool = True,
) -> TopDownGuidance:
    """Object cues from the previous pass.

    seg_prob: (B, 1, H, W) previous P_s; f5: (B, C5, h, w) deepest features.
    """
    pooled, empty = masked_average_pool(f5, seg_prob, POOL_EPS)
    if empty.any():
        gap = f5.mean(dim=(2, 3))
        pooled = torch.where(empty.unsqueeze(-1), gap, pooled)
    f_v, zero = project(pooled)
    f_t = text.embeddings.to(f_v.dtype)
    corr = f_v @ f_t.T
    cue = None
    if cue_proj is not None and (use_correlation or use_object_repr):
        parts = []
        if use_object_repr:
            parts.append(cue_proj.obj(pooled))
        if use_correlation:
            proto = torch.softmax(corr / tau, dim=-1) @ f_t
            parts.append(cue_proj.txt(proto))
        cue = sum(parts) / len(parts)
    return TopDownGuidance(corr, pooled, cue, empty | zero)


class IterativeDecoder(nn.Module):
    def __init__(self, config: DecoderConfig, backbone_spec: BackboneSpec):
        super().__init__()
        self.config = config
        self.backbone_spec = backbone_spec
        c = config.width
        chans = backbone_spec.stage_channels
        in_ch = {1: chans[0], 2: chans[0], 3: chans[1], 4: chans[2], 5: chans[3]}
        d = backbone_spec.embed_dim
        self.entry = nn.ModuleDict({str(i): nn.Conv2d(in_ch[i], c, 1) for i in range(1, 6)})
        self.sg = nn.ModuleDict(
            {
                str(i): SemanticGuidanceAttention(c, config.heads, d, config.agg, config.semantic_guidance)
                for i in range(1, 6)
            }
        )
        self.structure = nn.ModuleDict()
        self.fusion = nn.ModuleDict()
        if config.structure_enabled:
            fusion_cls = StructureEnhancementAttention if config.se_fusion == "sea" else AdditionFusion
            for i in config.se_stages:
                self.structure[str(i)] = StructureBranch(c, config.edge_aux, config.depth_aux)
                self.fusion[str(i)] = fusion_cls(c, config.heads)
        self.seg_head = nn.Conv2d(c, 1, 1)
        self.cue = CueProjector(chans[3], d, c) if config.uses_cue else None

    def _run_stage(
        self,
        i: int,
        fused: torch.Tensor,
        text: torch.Tensor,
        guidance: Optional[TopDownGuidance],
        state: DecodeState,
    ) -> torch.Tensor:
        b, c, h, w = fused.shape
        tokens = fused.flatten(2).transpose(1, 2)
        remod = None
        if guidance is not None and guidance.cue is not None and self.config.semantic_guidance:
            remod = guidance.remod_weight(tokens)
            state.remod_weights[i] = remod.reshape(b, h, w)
        x, base = self.sg[str(i)](tokens, text, remod, context=f"at stage {i}, iteration {state.iteration}")
        if base is not None:
            state.base_weights[i] = base.reshape(b, h, w)
        x = x.transpose(1, 2).reshape(b, c, h, w)
        if str(i) in self.structure:
            f_e, f_d, m_e, m_d = self.structure[str(i)](x)
            tok = lambda t: None if t is None else t.flatten(2).transpose(1, 2)
            y = self.fusion[str(i)](tok(x), tok(f_e), tok(f_d))
            x = y.transpose(1, 2).reshape(b, c, h, w)
            if m_e is not None:
                state.edge_logits[i], state.edge_features[i] = m_e, f_e
            if m_d is not None:
                state.depth_logits[i], state.depth_features[i] = m_d, f_d
        state.stage_features[i] = x
        return x

    def _pass(
        self,
        pyramid: FeaturePyramid,
        text: torch.Tensor,
        start: int,
        deeper: Optional[torch.Tensor],
        guidance: Optional[TopDownGuidance],
        state: DecodeState,
        out_size: Tuple[int, int],
    ) -> DecodeState:
        x = deeper
        for i in range(start, 0, -1):
            fused = self.entry[str(i)](pyramid[i].to(self.seg_head.weight.dtype))
            if x is not None:
                fused = fused + upsample2x(x)
            x = self._run_stage(i, fused, text, guidance, state)
        logits = F.interpolate(self.seg_head(x), size=out_size, mode="bilinear", align_corners=False)
        state.seg_logits = logits
        state.seg_prob = torch.sigmoid(logits)
        return state

    def forward(
        self,
        pyramid: FeaturePyramid,
        text_embeds: ClassEmbeddingSet,
        project: Projector,
        out_size: Optional[Tuple[int, int]] = None,
    ) -> List[DecodeState]:
        for lvl in range(1, 6):
            pyramid[lvl]
        if out_size is None:
            h, w = pyramid[2].shape[-2:]
            s = self.backbone_spec.stage_strides[0]
            out_size = (h * s, w * s)
        cfg = self.config
        text = text_embeds.embeddings
        states: List[DecodeState] = []
        state = DecodeState(1, {}, None, None)
        self._pass(pyramid, text, 5, None, None, state, out_size)
        states.append(state)
        entry = cfg.entry_stage
        for t in range(2, cfg.iterations + 1):
            prev = states[-1]
            guidance = build_topdown_guidance(
                prev.seg_prob,
                pyramid[5],
                text_embeds,
                project,
                self.cue,
                cfg.tau,
                cfg.use_correlation,
                cfg.use_object_repr,
            )
            state = DecodeState(t, {}, None, None)
            # Stages above the entry point are carried over from the first pass.
            for i in range(entry + 1, 6):
                state.stage_features[i] = states[0].stage_features[i]
            deeper = states[0].stage_features.get(entry + 1)
            state.correlation = guidance.correlation
            state.object_repr = guidance.object_repr
            state.degenerate = guidance.degenerate
            self._pass(pyramid, text, entry, deeper, guidance, state, out_size)
            states.append(state)
        return states

    def alphas(self) -> Dict[int, torch.Tensor]:
        return {
            int(i): m.alpha.detach().clone()
            for i, m in self.fusion.items()
            if isinstance(m, StructureEnhancementAttention)
        }


def count_parameters(module: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def build_decoder(config: DecoderConfig, backbone_spec: BackboneSpec, seed: int = 0) -> IterativeDecoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return IterativeDecoder(config, backbone_spec)

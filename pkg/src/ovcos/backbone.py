"""Frozen vision-language backbone: text encoder, multi-scale visual encoder and
visual projection.

The deterministic :class:`StubBackbone` is what the tests and the toy pipeline
run on. A real CLIP adapter only has to subclass :class:`Backbone`, implement
the three encoder hooks and register itself with :func:`register_backend`.
"""
from __future__ import annotations

import hashlib
import re
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn


class InvalidInputError(ValueError):
    """Raised when an operation receives arguments violating its contract."""


class NumericalFaultError(FloatingPointError):
    """Raised when a forward pass produces non-finite intermediate values."""


@dataclass(frozen=True)
class BackboneSpec:
    embed_dim: int
    stage_channels: Tuple[int, int, int, int]
    stage_strides: Tuple[int, int, int, int] = (4, 8, 16, 32)
    frozen: bool = True
    # Parameter count of the real encoder; None for the stub (counted directly).
    param_count: int | None = None

    def __post_init__(self):
        if self.embed_dim <= 0:
            raise InvalidInputError("embed_dim must be positive")
        if len(self.stage_channels) != 4 or len(self.stage_strides) != 4:
            raise InvalidInputError("expected 4 visual stages")
        if any(c <= 0 for c in self.stage_channels):
            raise InvalidInputError("stage channels must be positive")
        if any(b <= a for a, b in zip(self.stage_strides, self.stage_strides[1:])):
            raise InvalidInputError("stage strides must be strictly increasing")
        if not self.frozen:
            raise InvalidInputError("the backbone is always frozen")

    @property
    def max_stride(self) -> int:
        return self.stage_strides[-1]


STUB_SPEC = BackboneSpec(embed_dim=64, stage_channels=(24, 48, 96, 192))

# CLIP-ConvNeXt-L: 359M total minus ~7M trainable decoder leaves ~352M frozen.
CONVNEXT_L_SPEC = BackboneSpec(
    embed_dim=768,
    stage_channels=(192, 384, 768, 1536),
    param_count=352_000_000,
)

TOKEN_LIMIT = 77


@dataclass
class FeaturePyramid:
    """Multi-scale features keyed by level 1..5, each shaped (B, C, H, W).

    Level 1 is synthesized from level 2 by 2x bilinear upsampling.
    """

    levels: Dict[int, torch.Tensor] = field(default_factory=dict)

    def __getitem__(self, level: int) -> torch.Tensor:
        if level not in self.levels:
            raise InvalidInputError(f"pyramid level {level} missing")
        return self.levels[level]

    def shapes(self) -> Dict[int, Tuple[int, ...]]:
        return {k: tuple(v.shape[1:]) for k, v in sorted(self.levels.items())}

    def select(self, index) -> "FeaturePyramid":
        return FeaturePyramid({k: v[index] for k, v in self.levels.items()})


@dataclass
class ClassEmbeddingSet:
    class_names: List[str]
    embeddings: torch.Tensor  # (num_classes, D), unit rows

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.class_names):
            raise InvalidInputError("one embedding row per class name expected")
        norms = self.embeddings.norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-5):
            raise InvalidInputError("class embeddings must be unit-norm")

    def __len__(self) -> int:
        return len(self.class_names)

    def index(self, name: str) -> int:
        return self.class_names.index(name)

    def to(self, dtype: torch.dtype) -> "ClassEmbeddingSet":
        return ClassEmbeddingSet(list(self.class_names), self.embeddings.to(dtype))


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def tokenize(prompt: str) -> List[str]:
    return re.findall(r"[a-z0-9<>]+", prompt.lower())


class Backbone(nn.Module):
    """Contract every backbone satisfies. All parameters are frozen."""

    spec: BackboneSpec

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # Frozen: stays in eval mode whatever the caller asks for.
        return super().train(False)

    # -- hooks implemented by concrete backends --------------------------------
    def _text_features(self, token_lists: List[List[str]]) -> torch.Tensor:
        raise NotImplementedError

    def _visual_stages(self, image: torch.Tensor) -> List[torch.Tensor]:
        raise NotImplementedError

    def _projection(self, pooled: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    # -- public API ------------------------------------------------------------
    @torch.no_grad()
    def encode_text(self, prompts: Sequence[str]) -> torch.Tensor:
        if len(prompts) == 0:
            raise InvalidInputError("encode_text needs at least one prompt")
        token_lists = []
        for prompt in prompts:
            if not isinstance(prompt, str) or not prompt.strip():
                raise InvalidInputError("prompts must be non-empty strings")
            tokens = tokenize(prompt)
            if len(tokens) > TOKEN_LIMIT:
                warnings.warn(
                    f"prompt truncated from {len(tokens)} to {TOKEN_LIMIT} tokens",
                    stacklevel=2,
                )
                tokens = tokens[:TOKEN_LIMIT]
            token_lists.append(tokens)
        feats = self._text_features(token_lists)
        return F.normalize(feats, dim=-1)

    def encode_image(self, image: torch.Tensor) -> FeaturePyramid:
        """Encode a (3, H, W) or (B, 3, H, W) image into levels 1..5."""
        if image.ndim == 3:
            image = image.unsqueeze(0)
        if image.ndim != 4 or image.shape[1] != 3:
            raise InvalidInputError(f"expected (B, 3, H, W) image, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        m = self.spec.max_stride
        if h % m or w % m:
            raise InvalidInputError(f"image size {h}x{w} must be a multiple of {m}")
        with torch.no_grad():
            stages = self._visual_stages(image)
        levels = {i + 2: s for i, s in enumerate(stages)}
        levels[1] = upsample2x(levels[2])
        return FeaturePyramid(levels)

    def project_visual(self, feature: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Map pooled stage-5 features (..., C5) to unit joint-space vectors.

        Returns ``(f_v, degenerate)``; zero-norm projections come back as zero
        vectors with ``degenerate`` set instead of raising.
        """
        c5 = self.spec.stage_channels[-1]
        if feature.shape[-1] != c5:
            raise InvalidInputError(f"expected {c5} channels, got {feature.shape[-1]}")
        proj = self._projection(feature)
        norm = proj.norm(dim=-1, keepdim=True)
        degenerate = norm.squeeze(-1) <= 1e-12
        f_v = torch.where(norm > 1e-12, proj / norm.clamp_min(1e-12), torch.zeros_like(proj))
        return f_v, degenerate

    def parameter_digest(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


class StubBackbone(Backbone):
    """Deterministic CPU backbone with seeded weights.

    Text: bag of hashed tokens times a fixed random projection. Vision: four
    strided convolutions with GELU; the last four channels of every stage
    carry the block-averaged RGB input and a local high-frequency energy map,
    so deep features keep region colour and texture statistics. Projection: a
    bias-free linear map.
    """

    carry = 4

    def __init__(self, spec: BackboneSpec = STUB_SPEC, seed: int = 1337, vocab: int = 4096):
        super().__init__()
        self.spec = spec
        self.seed = seed
        self.vocab = vocab
        gen = torch.Generator().manual_seed(seed)
        d = spec.embed_dim
        self.token_proj = nn.Parameter(torch.randn(vocab, d, generator=gen))

        in_ch = [3, *spec.stage_channels[:-1]]
        kernels = [spec.stage_strides[0]] + [
            b // a for a, b in zip(spec.stage_strides, spec.stage_strides[1:])
        ]
        self.stages = nn.ModuleList()
        for cin, cout, k in zip(in_ch, spec.stage_channels, kernels):
            with torch.random.fork_rng(devices=[]):  # keep the caller's RNG untouched
                conv = nn.Conv2d(cin, cout - self.carry, kernel_size=k, stride=k)
            fan_in = cin * k * k
            conv.weight.data = torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5
            conv.bias.data = torch.randn(cout - self.carry, generator=gen) * 0.1
            self.stages.append(conv)
        c5 = spec.stage_channels[-1]
        self.proj = nn.Parameter(torch.randn(d, c5, generator=gen) / c5**0.5)
        self.freeze()

    def _token_bucket(self, token: str) -> int:
        digest = hashlib.blake2b(f"{self.seed}:{token}".encode(), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.vocab

    def _text_features(self, token_lists):
        bags = torch.zeros(len(token_lists), self.vocab, dtype=self.token_proj.dtype)
        for row, tokens in enumerate(token_lists):
            for tok in tokens:
                bags[row, self._token_bucket(tok)] += 1.0
        return bags @ self.token_proj

    def _visual_stages(self, image):
        image = image.to(self.proj.dtype)
        blur = F.avg_pool2d(image, 3, stride=1, padding=1, count_include_pad=False)
        energy = 4.0 * (image - blur).abs().mean(dim=1, keepdim=True)
        summary = torch.cat([image, energy], dim=1)
        out, x = [], image
        for conv, stride in zip(self.stages, self.spec.stage_strides):
            x = torch.cat([F.gelu(conv(x)), F.avg_pool2d(summary, stride)], dim=1)
            out.append(x)
        return out

    def _projection(self, pooled):
        return pooled.to(self.proj.dtype) @ self.proj.T

    @torch.no_grad()
    def plant(self, pooled: torch.Tensor, targets: torch.Tensor, ridge: float = 1e-4) -> None:
        """Refit the projection so ``pooled`` rows map onto ``targets`` rows.

        Used to build synthetic scenes whose object features carry a known
        class signal. Must happen before any training starts.
        """
        x = pooled.to(torch.float64)
        y = targets.to(torch.float64)
        gram = x.T @ x + ridge * torch.eye(x.shape[1], dtype=torch.float64)
        w = torch.linalg.solve(gram, x.T @ y)  # (C5, D)
        self.proj.copy_(w.T.to(self.proj.dtype))


_BACKENDS: Dict[str, Callable[..., Backbone]] = {}


def register_backend(kind: str, factory: Callable[..., Backbone]) -> None:
    _BACKENDS[kind] = factory


def build_backbone(kind: str = "stub", seed: int = 1337, **kwargs) -> Backbone:
    if kind not in _BACKENDS:
        raise InvalidInputError(
            f"unknown backbone kind {kind!r}; registered: {sorted(_BACKENDS)}"
        )
    return _BACKENDS[kind](seed=seed, **kwargs)


register_backend("stub", lambda seed=1337, **kw: StubBackbone(seed=seed, **kw))


def trainable_fraction(decoder_params: int, spec: BackboneSpec, backbone_params: int | None = None) -> float:
    total_backbone = spec.param_count if backbone_params is None else backbone_params
    if total_backbone is None:
        raise InvalidInputError("backbone parameter count unknown")
    return decoder_params / (decoder_params + total_backbone)


def _toy_factory(seed=1337, **kw):
    from .synthetic import toy_backbone

    return toy_backbone(seed=seed, **kw)


register_backend("toy", _toy_factory)

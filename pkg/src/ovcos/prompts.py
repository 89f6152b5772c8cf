"""Prompt template sets, per-class text embeddings and embedding-set diagnostics."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import Backbone, ClassEmbeddingSet, InvalidInputError

PLACEHOLDER = "<class>"


@dataclass(frozen=True)
class PromptTemplateSet:
    name: str
    templates: Tuple[str, ...]

    def __post_init__(self):
        if not self.templates:
            raise InvalidInputError(f"template set {self.name!r} is empty")
        for t in self.templates:
            if t.count(PLACEHOLDER) != 1:
                raise InvalidInputError(
                    f"template {t!r} must contain {PLACEHOLDER} exactly once"
                )

    def __len__(self) -> int:
        return len(self.templates)

    @classmethod
    def from_file(cls, path: str | Path, name: str | None = None) -> "PromptTemplateSet":
        path = Path(path)
        lines = []
        for raw in path.read_text().splitlines():
            line = raw.strip()
            if line and not line.startswith("#"):
                lines.append(line)
        return cls(name or path.stem, tuple(lines))


CAMO_PROMPTS = PromptTemplateSet(
    "camo",
    (
        "A photo of the camouflaged <class>.",
        "A photo of the concealed <class>.",
        "A photo of the <class> camouflaged in the background.",
        "A photo of the <class> concealed in the background.",
        "A photo of the <class> camouflaged to blend in with its surroundings.",
        "A photo of the <class> concealed to blend in with its surroundings.",
    ),
)
PHOTO_PROMPTS = PromptTemplateSet("photo", ("A photo of the <class>.",))
BARE_PROMPTS = PromptTemplateSet("bare", ("<class>",))

BUILTIN_SETS: Dict[str, PromptTemplateSet] = {
    s.name: s for s in (CAMO_PROMPTS, PHOTO_PROMPTS, BARE_PROMPTS)
}


def get_template_set(name_or_path: str) -> PromptTemplateSet:
    if name_or_path in BUILTIN_SETS:
        return BUILTIN_SETS[name_or_path]
    path = Path(name_or_path)
    if path.exists():
        return PromptTemplateSet.from_file(path)
    raise InvalidInputError(
        f"unknown template set {name_or_path!r}; built-ins: {sorted(BUILTIN_SETS)}"
    )


def expand(template_set: PromptTemplateSet, class_name: str) -> List[str]:
    if not class_name:
        raise InvalidInputError("class name must be non-empty")
    return [t.replace(PLACEHOLDER, class_name) for t in template_set.templates]


def class_embeddings(
    backbone: Backbone, template_set: PromptTemplateSet, class_names: Sequence[str]
) -> ClassEmbeddingSet:
    """Average each class's template embeddings and renormalize to unit length."""
    if not class_names:
        raise InvalidInputError("need at least one class name")
    seen = set()
    dupes = sorted({c for c in class_names if c in seen or seen.add(c)})
    if dupes:
        raise InvalidInputError(f"duplicate class names: {dupes}")
    k = len(template_set)
    prompts = [p for name in class_names for p in expand(template_set, name)]
    emb = backbone.encode_text(prompts).reshape(len(class_names), k, -1)
    mean = emb.to(torch.float64).mean(dim=1)
    mean = F.normalize(mean, dim=-1).to(emb.dtype)
    return ClassEmbeddingSet(list(class_names), mean)


class EmbeddingCache:
    """Computes class embeddings once per (template set, class list) and reuses them."""

    def __init__(self, backbone: Backbone):
        self.backbone = backbone
        self.encode_count = 0
        self._store: Dict[Tuple[str, Tuple[str, ...]], ClassEmbeddingSet] = {}

    def get(self, template_set: PromptTemplateSet, class_names: Sequence[str]) -> ClassEmbeddingSet:
        key = (template_set.name + "\x00" + "\x00".join(template_set.templates), tuple(class_names))
        if key not in self._store:
            self.encode_count += 1
            self._store[key] = class_embeddings(self.backbone, template_set, class_names)
        return self._store[key]


def _as_rows(x) -> np.ndarray:
    arr = x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None]
    return arr


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise InvalidInputError("Hausdorff distance needs non-empty sets")
    if a.shape[1] != b.shape[1]:
        raise InvalidInputError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff**2).sum(-1))


def directed_hausdorff(set_a, set_b) -> float:
    """sup over a of the distance to the nearest b."""
    d = _pairwise(_as_rows(set_a), _as_rows(set_b))
    return float(d.min(axis=1).max())


def hausdorff_distance(set_a, set_b) -> float:
    d = _pairwise(_as_rows(set_a), _as_rows(set_b))
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))

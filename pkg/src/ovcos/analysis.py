"""Mask-level statistics, edge ground truth and taxonomy path similarity."""
from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import networkx as nx
import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

from .backbone import InvalidInputError

SQUARE_3x3 = np.ones((3, 3), dtype=bool)
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def make_edge_gt(mask) -> np.ndarray:
    """Boundary band: 3x3 dilation minus 3x3 erosion (image border counts as background)."""
    m = np.asarray(mask).astype(bool)
    dil = ndimage.binary_dilation(m, structure=SQUARE_3x3)
    ero = ndimage.binary_erosion(m, structure=SQUARE_3x3, border_value=0)
    return (dil & ~ero).astype(np.float32)


@dataclass
class ObjectAttributes:
    concentration: float
    avg_color_ratio: float
    area_ratio: float
    num_parts: int
    centroid: Tuple[float, float]
    empty: bool = False

    def as_row(self) -> dict:
        d = asdict(self)
        d["centroid_x"], d["centroid_y"] = d.pop("centroid")
        return d


def pixel_corners(mask: np.ndarray) -> np.ndarray:
    """(x, y) corner points of every foreground pixel (unit squares)."""
    ys, xs = np.nonzero(mask)
    pts = np.concatenate(
        [np.stack([xs + dx, ys + dy], axis=1) for dx in (0, 1) for dy in (0, 1)]
    ).astype(np.float64)
    return np.unique(pts, axis=0)


def min_area_rect(points: np.ndarray) -> float:
    """Area of the minimum-area rotated rectangle enclosing ``points``.

    Rotating calipers: the optimum has one side collinear with a hull edge.
    """
    try:
        hull = points[ConvexHull(points).vertices]
    except QhullError:
        return 0.0  # collinear points
    edges = np.roll(hull, -1, axis=0) - hull
    edges = edges / np.linalg.norm(edges, axis=1, keepdims=True)
    normals = np.stack([-edges[:, 1], edges[:, 0]], axis=1)
    u = hull @ edges.T  # (n_pts, n_edges)
    v = hull @ normals.T
    areas = (u.max(0) - u.min(0)) * (v.max(0) - v.min(0))
    return float(areas.min())


def count_parts(mask) -> int:
    _, n = ndimage.label(np.asarray(mask).astype(bool), structure=FOUR_CONNECTED)
    return int(n)


def compute_attributes(mask, image) -> ObjectAttributes:
    """Table-style object statistics for one image.

    mask: (H, W) binary; image: (H, W, 3) or (3, H, W) colour array.
    """
    m = np.asarray(mask).astype(bool)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[-1] != 3:
        img = np.moveaxis(img, 0, -1)
    if img.shape[:2] != m.shape:
        raise InvalidInputError(f"mask {m.shape} and image {img.shape[:2]} differ in size")
    h, w = m.shape
    area = int(m.sum())
    if area == 0:
        return ObjectAttributes(0.0, 0.0, 0.0, 0, (0.0, 0.0), empty=True)
    concentration = area / min_area_rect(pixel_corners(m))
    bg = ~m
    if bg.any():
        obj_mean = img[m].mean(axis=0)
        bg_mean = img[bg].mean(axis=0)
        avg_color_ratio = float(np.mean(obj_mean / np.maximum(bg_mean, 1e-12)))
    else:
        avg_color_ratio = 1.0
    ys, xs = np.nonzero(m)
    centroid = (float((xs + 0.5).mean() / w), float((ys + 0.5).mean() / h))
    return ObjectAttributes(
        concentration=float(concentration),
        avg_color_ratio=avg_color_ratio,
        area_ratio=area / (h * w),
        num_parts=count_parts(m),
        centroid=centroid,
    )


class Taxonomy:
    """Undirected concept graph over class names."""

    def __init__(self, edges: Iterable[Tuple[str, str]] = (), nodes: Iterable[str] = ()):
        self.graph = nx.Graph()
        self.graph.add_nodes_from(nodes)
        for a, b in edges:
            if a == b:
                raise InvalidInputError(f"self-loop on {a!r}")
            self.graph.add_edge(a, b)

    @classmethod
    def from_file(cls, path) -> "Taxonomy":
        """Edge list: one ``parent<TAB>child`` (or comma-separated) pair per line;
        a single name on a line declares an isolated node."""
        edges, nodes = [], []
        for raw in Path(path).read_text().splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in (line.split("\t") if "\t" in line else line.split(","))]
            if len(parts) == 1:
                nodes.append(parts[0])
            else:
                edges.append((parts[0], parts[1]))
        return cls(edges, nodes)

    def __contains__(self, name: str) -> bool:
        return name in self.graph

    def check_classes(self, classes: Iterable[str]) -> None:
        missing = sorted(c for c in classes if c not in self.graph)
        if missing:
            raise InvalidInputError(f"classes missing from taxonomy: {missing}")


def path_similarity(taxonomy: Taxonomy, class_a: str, class_b: str) -> float:
    """1 / (p + 1) for shortest path length p; 0 when no path exists."""
    taxonomy.check_classes([class_a, class_b])
    try:
        p = nx.shortest_path_length(taxonomy.graph, class_a, class_b)
    except nx.NetworkXNoPath:
        return 0.0
    return 1.0 / (p + 1)


def similarity_matrix(taxonomy: Taxonomy, classes: Sequence[str]) -> np.ndarray:
    taxonomy.check_classes(classes)
    n = len(classes)
    out = np.eye(n)
    for i in range(n):
        lengths = nx.single_source_shortest_path_length(taxonomy.graph, classes[i])
        for j in range(i + 1, n):
            p = lengths.get(classes[j])
            out[i, j] = out[j, i] = 0.0 if p is None else 1.0 / (p + 1)
    return out

"""Heatmap-to-graph construction.

Pixels are sampled from the usable-tissue mask, clustered with BIRCH in a
joint (scaled coordinates, class logits) feature space, summarized into
per-cluster node features, and wired with directed k-nearest-neighbor edges
between cluster centroids.

Heatmap raster file (``.hmp``): magic ``HMP1``, H u32, W u32, C u32,
H*W*C f32 logits row-major, then H*W u8 mask bytes (nonzero = usable).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .birch import ClusterSet, birch_cluster
from .data import ModalGraph, Modality
from .errors import ContractError, EmptyTissueError, ParseError, ValidationError

HMP_MAGIC = b"HMP1"

#: Heatmap class counts per modality.
MODALITY_CLASSES = {Modality.A: 13, Modality.B: 5}


@dataclass
class Heatmap:
    """Per-pixel class-logit raster for one stain modality."""

    modality: Modality
    logits: np.ndarray  # (H, W, C) float64
    usable_mask: np.ndarray  # (H, W) bool

    @property
    def height(self) -> int:
        return self.logits.shape[0]

    @property
    def width(self) -> int:
        return self.logits.shape[1]

    @property
    def classes(self) -> int:
        return self.logits.shape[2]

    def validate(self) -> None:
        if self.logits.ndim != 3:
            raise ValidationError("logits must be (H, W, C)", invariant="raster-shape")
        if not np.isfinite(self.logits).all():
            raise ValidationError("logits contain non-finite values", invariant="logits-finite")
        if self.usable_mask.shape != self.logits.shape[:2]:
            raise ValidationError(
                f"mask shape {self.usable_mask.shape} != raster {self.logits.shape[:2]}",
                invariant="mask-shape",
            )


def write_heatmap(hm: Heatmap, path) -> None:
    hm.validate()
    h, w, c = hm.logits.shape
    parts = [
        HMP_MAGIC,
        struct.pack("<III", h, w, c),
        np.ascontiguousarray(hm.logits, dtype="<f4").tobytes(),
        np.ascontiguousarray(hm.usable_mask, dtype=np.uint8).tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def read_heatmap(path, modality: Modality | None = None) -> Heatmap:
    buf = Path(path).read_bytes()
    if buf[:4] != HMP_MAGIC:
        raise ParseError("bad magic, not an HMP raster", offset=0)
    if len(buf) < 16:
        raise ParseError("truncated header", offset=len(buf))
    h, w, c = struct.unpack("<III", buf[4:16])
    need = 16 + 4 * h * w * c + h * w
    if len(buf) != need:
        raise ParseError(f"file size {len(buf)} != expected {need}", offset=min(len(buf), need))
    logits = (
        np.frombuffer(buf, dtype="<f4", count=h * w * c, offset=16)
        .reshape(h, w, c)
        .astype(np.float64)
    )
    mask = (
        np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=16 + 4 * h * w * c)
        .reshape(h, w)
        .astype(bool)
    )
    if modality is None:
        modality = Modality.A if c == MODALITY_CLASSES[Modality.A] else Modality.B
    hm = Heatmap(modality, logits, mask)
    hm.validate()
    return hm


@dataclass
class GraphBuildConfig:
    n_pixels: int = 10000
    target_k: int = 5000
    knn_k: int = 5
    birch_threshold: float = 0.25
    birch_branching: int = 50
    logit_weight: float = 1.0  # scale of the logit block relative to coordinates
    seed: int = 0
    extra_feature_blocks: tuple[str, ...] = field(default_factory=tuple)  # {"minmax", "class_fraction"}


def sample_pixels(hm: Heatmap, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniformly sample up to ``n`` usable pixels without replacement.

    Returns (coords, logits): (m, 2) integer (x, y) positions and the
    (m, C) logit vectors at those positions. Deterministic per seed.
    """
    hm.validate()
    ys, xs = np.nonzero(hm.usable_mask)
    usable = len(xs)
    if usable == 0:
        raise EmptyTissueError("heatmap has no usable pixels")
    take = min(n, usable)
    rng = np.random.default_rng(seed)
    pick = rng.choice(usable, size=take, replace=False)
    pick.sort()
    coords = np.stack([xs[pick], ys[pick]], axis=1).astype(np.int64)
    logit_vectors = hm.logits[ys[pick], xs[pick], :]
    return coords, logit_vectors


def clustering_features(
    hm: Heatmap, coords: np.ndarray, logits: np.ndarray, logit_weight: float
) -> np.ndarray:
    """Joint feature space for clustering: coords scaled to [0,1] plus logits."""
    sx = max(hm.width - 1, 1)
    sy = max(hm.height - 1, 1)
    scaled = np.stack([coords[:, 0] / sx, coords[:, 1] / sy], axis=1)
    return np.concatenate([scaled, logit_weight * logits], axis=1)


# ---------------------------------------------------------------------------
# Cluster summary features
# ---------------------------------------------------------------------------

def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull; returns hull vertices in CCW order."""
    pts = np.unique(points, axis=0)
    if len(pts) <= 2:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    def half(seq):
        out: list[np.ndarray] = []
        for p in seq:
            while len(out) >= 2 and cross(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _hull_perimeter_area(points: np.ndarray) -> tuple[float, float]:
    hull = _convex_hull(points)
    if len(hull) == 1:
        return 0.0, 0.0
    if len(hull) == 2:
        return 2.0 * float(np.linalg.norm(hull[1] - hull[0])), 0.0
    closed = np.vstack([hull, hull[0]])
    seg = np.diff(closed, axis=0)
    perimeter = float(np.sqrt((seg**2).sum(axis=1)).sum())
    x, y = hull[:, 0], hull[:, 1]
    area = 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))
    return perimeter, area


def extract_node_features(
    cs: ClusterSet,
    coords: np.ndarray,
    logits: np.ndarray,
    extra_blocks: tuple[str, ...] = (),
) -> tuple[np.ndarray, np.ndarray]:
    """Summarize each cluster into a node feature vector.

    Per cluster: mean/std of pixel coordinates (4), area = pixel count,
    perimeter and convexity from the convex hull of member pixel centers (3),
    then per-class logit mean and std (2C). Optional extra blocks append
    per-class min/max ("minmax", 2C) and the fraction of member pixels whose
    argmax logit is each class ("class_fraction", C).

    Returns (features, centroids): (K, d) and (K, 2) arrays. Standard
    deviations are population (ddof=0) so singleton clusters yield zeros.
    """
    n_classes = logits.shape[1]
    feats = []
    cents = []
    for cid in range(cs.count):
        member = cs.assignments == cid
        if not member.any():
            raise ContractError(f"cluster {cid} is empty")
        xy = coords[member].astype(np.float64)
        lg = logits[member]
        mean_xy = xy.mean(axis=0)
        std_xy = xy.std(axis=0)
        area = float(member.sum())
        perimeter, hull_area = _hull_perimeter_area(xy)
        convexity = 1.0 if hull_area < 1.0 else min(area / hull_area, 1.0)
        row = [
            mean_xy[0],
            mean_xy[1],
            std_xy[0],
            std_xy[1],
            area,
            perimeter,
            convexity,
        ]
        row.extend(lg.mean(axis=0))
        row.extend(lg.std(axis=0))
        if "minmax" in extra_blocks:
            row.extend(lg.min(axis=0))
            row.extend(lg.max(axis=0))
        if "class_fraction" in extra_blocks:
            frac = np.bincount(lg.argmax(axis=1), minlength=n_classes) / len(lg)
            row.extend(frac)
        feats.append(row)
        cents.append(mean_xy)
    return np.asarray(feats, dtype=np.float64), np.asarray(cents, dtype=np.float64)


def knn_edges(centroids: np.ndarray, k: int) -> np.ndarray:
    """Directed edges from each node to its k nearest Euclidean neighbors.

    Ties in distance resolve toward the lower node index. Returns (K*k, 2)
    rows of (src, dst).
    """
    cents = np.asarray(centroids, dtype=np.float64)
    n = cents.shape[0]
    if n <= k:
        raise ContractError(f"need more nodes ({n}) than neighbors ({k})")
    edges = np.empty((n * k, 2), dtype=np.int64)
    chunk = max(1, int(2e6) // max(n, 1))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d2 = ((cents[start:stop, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
        for row, i in enumerate(range(start, stop)):
            d2[row, i] = np.inf
        # stable sort keeps index order among exact ties
        nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
        for row, i in enumerate(range(start, stop)):
            edges[i * k : (i + 1) * k, 0] = i
            edges[i * k : (i + 1) * k, 1] = nearest[row]
    return edges


def heatmap_build_seed(hm_bytes: bytes, seed: int) -> int:
    """Derive a per-heatmap sampling seed from file content and a base seed."""
    digest = hashlib.sha256(hm_bytes + struct.pack("<q", seed)).digest()
    return int.from_bytes(digest[:8], "little")


def build_graph(hm: Heatmap, config: GraphBuildConfig, seed: int | None = None) -> ModalGraph:
    """Full pipeline: sample pixels, cluster, featurize, wire kNN edges."""
    if config.n_pixels < config.target_k:
        raise ContractError(
            f"n_pixels ({config.n_pixels}) must be >= target_k ({config.target_k})"
        )
    if seed is None:
        seed = config.seed
    coords, logits = sample_pixels(hm, config.n_pixels, seed)
    points = clustering_features(hm, coords, logits, config.logit_weight)
    target = min(config.target_k, len(points))
    cs = birch_cluster(
        points, target, config.birch_threshold, config.birch_branching
    )
    feats, cents = extract_node_features(cs, coords, logits, config.extra_feature_blocks)
    if cs.count <= config.knn_k:
        raise ContractError(
            f"clustering produced {cs.count} nodes, need more than knn_k={config.knn_k}"
        )
    edges = knn_edges(cents, config.knn_k)
    g = ModalGraph(hm.modality, feats, edges, cents, k=config.knn_k)
    g.validate()
    return g

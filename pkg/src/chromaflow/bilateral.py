"""K-nearest-neighbour graphs in bilateral (colour + position) space and the
colour-consistency loss defined over their edges.

A pixel at row ``y``, column ``x`` with colour ``(r, g, b)`` embeds as
``(r, g, b, lam * x / s, lam * y / s)`` with ``s = max(H, W)``. Neighbours
are ranked by squared Euclidean distance; equal distances go to the lower
pixel index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.spatial import cKDTree

from .neural import autodiff as ad


@dataclass(frozen=True)
class KnnParams:
    k: int = 5
    lambda_b: float = 0.5
    sample_size: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.lambda_b < 0:
            raise ValueError("lambda_b must be >= 0")
        if self.sample_size < self.k + 1:
            raise ValueError("sample_size must be at least k + 1")


@dataclass(frozen=True)
class KnnGraph:
    """Directed graph: ``neighbors[i]`` lists the K nearest nodes of node ``i``.

    ``nodes`` holds row-major pixel indices in ascending order; entries of
    ``neighbors`` index into ``nodes``.
    """

    nodes: np.ndarray
    neighbors: np.ndarray
    points: np.ndarray
    frame_shape: Tuple[int, int]

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    @property
    def num_edges(self) -> int:
        return self.neighbors.size

    def edges(self) -> Tuple[np.ndarray, np.ndarray]:
        """Pixel-index endpoints ``(p, q)`` of every directed edge."""
        src = np.repeat(self.nodes, self.k)
        dst = self.nodes[self.neighbors.reshape(-1)]
        return src, dst


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # fixed summation order so the tree path and the brute-force oracle agree bit for bit
    d = a - b
    out = d[..., 0] * d[..., 0]
    for j in range(1, d.shape[-1]):
        out = out + d[..., j] * d[..., j]
    return out


def bilateral_points(frame, lambda_b: float, nodes: np.ndarray = None) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) frame, got {frame.shape}")
    h, w = frame.shape[:2]
    scale = float(max(h, w))
    yy, xx = np.divmod(np.arange(h * w), w)
    pts = np.concatenate(
        [frame.reshape(-1, 3), (lambda_b * xx / scale)[:, None], (lambda_b * yy / scale)[:, None]], axis=1
    )
    return pts if nodes is None else pts[nodes]


def brute_force_knn(points, k: int) -> np.ndarray:
    """Exact O(N^2) neighbour lists; ties resolved by lower index."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if k >= n:
        raise ValueError(f"k={k} needs at least {k + 1} points, got {n}")
    d2 = _sqdist(pts[:, None, :], pts[None, :, :])
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]


def kdtree_knn(points, k: int) -> np.ndarray:
    """Same contract as :func:`brute_force_knn`, answered with a KD-tree.

    The tree supplies a radius that provably contains the K nearest
    neighbours; candidates inside it are re-ranked with the exact distance
    and the index tie rule.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if k >= n:
        raise ValueError(f"k={k} needs at least {k + 1} points, got {n}")
    tree = cKDTree(pts)
    dist, _ = tree.query(pts, k=k + 1)
    radius = dist[:, -1] * (1 + 1e-9) + 1e-12
    balls = tree.query_ball_point(pts, radius)
    out = np.empty((n, k), dtype=np.int64)
    for i, cand in enumerate(balls):
        cand = np.sort(np.asarray(cand, dtype=np.int64))
        cand = cand[cand != i]
        d2 = _sqdist(pts[cand], pts[i])
        out[i] = cand[np.argsort(d2, kind="stable")[:k]]
    return out


def sample_nodes(h: int, w: int, sample_size: int, seed: int) -> np.ndarray:
    total = h * w
    if total <= sample_size:
        return np.arange(total)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(total, size=sample_size, replace=False))


def build_knn_graph(gt_frame, params: KnnParams = KnnParams()) -> KnnGraph:
    """KNN graph over a seeded pixel sample of a ground-truth colour frame."""
    frame = np.asarray(gt_frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) frame, got {frame.shape}")
    h, w = frame.shape[:2]
    nodes = sample_nodes(h, w, params.sample_size, params.seed)
    if params.k >= len(nodes):
        raise ValueError(f"k={params.k} needs more than {len(nodes)} sampled nodes")
    pts = bilateral_points(frame, params.lambda_b, nodes)
    return KnnGraph(nodes=nodes, neighbors=kdtree_knn(pts, params.k), points=pts, frame_shape=(h, w))


def bilateral_loss(colorized, graph: KnnGraph) -> ad.Tensor:
    """Mean absolute colour difference across graph edges.

    ``colorized`` is channel-first, ``(..., 3, H, W)``; leading axes (e.g.
    several candidates of the same frame) are averaged.
    """
    c = ad.tensor(colorized)
    if c.ndim < 3 or c.shape[-3] != 3 or tuple(c.shape[-2:]) != tuple(graph.frame_shape):
        raise ValueError(f"colorized shape {c.shape} does not match graph frame {graph.frame_shape}")
    p, q = graph.edges()
    return ad.mean(ad.abs(ad.take(c, p) - ad.take(c, q)))

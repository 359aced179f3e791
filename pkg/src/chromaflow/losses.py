"""Training objectives beyond the bilateral term.

Every loss takes channel-first arrays or :class:`~chromaflow.neural.Tensor`
objects (``(..., C, H, W)``) and returns a scalar Tensor, so the same code
serves evaluation (``.item()``) and training (``backward``). All raw sums are
normalised to means.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import NumericError
from .neural import autodiff as ad


@dataclass(frozen=True)
class ConfidenceParams:
    alpha: float = 15.0
    zero_confidence_at_occlusion: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")


@dataclass(frozen=True)
class DiversityParams:
    d: int = 4
    betas: Tuple[float, ...] = (0.30, 0.15, 0.075, 0.0375)
    rank_sorted: bool = False

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if len(self.betas) != self.d:
            raise ValueError(f"need {self.d} betas, got {len(self.betas)}")
        if any(b <= 0 for b in self.betas):
            raise ValueError("betas must be positive")
        if any(a <= b for a, b in zip(self.betas, self.betas[1:])):
            raise ValueError("betas must be strictly decreasing")

    @classmethod
    def geometric(cls, d: int, first: float = 0.30, ratio: float = 0.5, **kw) -> "DiversityParams":
        return cls(d=d, betas=tuple(first * ratio ** i for i in range(d)), **kw)


def _mask_tensor(mask, like_ndim: int) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float32)
    # (H, W) -> broadcastable against (..., C, H, W)
    while m.ndim < like_ndim:
        m = m[None]
    return m


def confidence_map(c_s, warped_c_t, mask, params: ConfidenceParams = ConfidenceParams()) -> ad.Tensor:
    """Per-pixel trust in a warped neighbour, in ``[0, 1]``.

    ``W = max(1 - alpha * mean_c |c_s - warped| * M, 0)``; with
    ``zero_confidence_at_occlusion`` the map is additionally forced to 0 where
    ``M = 0``. Output keeps a singleton channel axis: ``(..., 1, H, W)``.
    """
    c_s, warped_c_t = ad.tensor(c_s), ad.tensor(warped_c_t)
    if c_s.shape != warped_c_t.shape:
        raise ValueError(f"shape mismatch: {c_s.shape} vs {warped_c_t.shape}")
    m = _mask_tensor(mask, c_s.ndim)
    if m.shape[-2:] != c_s.shape[-2:]:
        raise ValueError(f"mask {m.shape[-2:]} does not match frames {c_s.shape[-2:]}")
    diff = ad.mean(ad.abs(c_s - warped_c_t), axis=-3, keepdims=True) * m
    w = ad.relu(1.0 - diff * params.alpha)
    if params.zero_confidence_at_occlusion:
        w = w * m
    return w


@dataclass(frozen=True)
class TemporalLoss:
    value: ad.Tensor
    empty: bool
    coverage: float


def temporal_loss_f(cand_t, warped_cand_t1, mask) -> TemporalLoss:
    """Masked mean ``|cand_t - warp(cand_t1)|`` over pixels and channels.

    ``warped_cand_t1`` must already be aligned to frame t (see
    :func:`chromaflow.neural.autodiff.warp`); ``mask`` should combine the
    occlusion mask with the warp's validity.
    """
    a, b = ad.tensor(cand_t), ad.tensor(warped_cand_t1)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    m = _mask_tensor(mask, a.ndim)
    m = np.broadcast_to(m, a.shape)
    support = float(m.sum())
    coverage = support / m.size
    if support == 0:
        return TemporalLoss(ad.Tensor(np.zeros((), dtype=a.dtype)), True, 0.0)
    total = ad.sum(ad.abs(a - b) * np.ascontiguousarray(m))
    return TemporalLoss(total * (1.0 / support), False, coverage)


def temporal_loss_g(refined_s, y_s) -> ad.Tensor:
    """Mean absolute error between a refined frame and its ground truth."""
    a, b = ad.tensor(refined_s), ad.tensor(y_s)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return ad.mean(ad.abs(a - b))


def candidate_distances(candidates, y, phi) -> ad.Tensor:
    """Perceptual distance of each candidate to ``y``.

    ``candidates`` is ``(d, 3, H, W)`` (or ``(B, d, 3, H, W)``) and ``y`` is
    ``(3, H, W)`` (or ``(B, 3, H, W)``). Returns shape ``(d,)`` or ``(B, d)``.
    """
    c = ad.tensor(candidates)
    y = np.asarray(y.data if isinstance(y, ad.Tensor) else y, dtype=np.float32)
    batched = c.ndim == 5
    if not batched:
        c = ad.reshape(c, (1,) + c.shape)
        y = y[None]
    b, d = c.shape[:2]
    h, w = c.shape[-2:]
    with ad.no_grad():
        fy = phi(y).data
    fc = phi(ad.reshape(c, (b * d, 3, h, w)))
    fc = ad.reshape(fc, (b, d) + fc.shape[1:])
    dist = ad.mean(ad.abs(fc - fy[:, None]), axis=(2, 3, 4))
    return dist if batched else ad.reshape(dist, (d,))


def diversity_from_distances(distances, params: DiversityParams) -> ad.Tensor:
    """``min_i D_i + sum_i beta_i D_i`` averaged over any leading batch axis."""
    dist = ad.tensor(distances)
    if dist.shape[-1] != params.d:
        raise ValueError(f"got {dist.shape[-1]} candidates, expected d={params.d}")
    betas = np.asarray(params.betas, dtype=dist.dtype)
    best = ad.amin(dist, axis=-1)
    if params.rank_sorted:
        order = np.argsort(dist.data, axis=-1, kind="stable")
        weights = np.empty_like(dist.data)
        np.put_along_axis(weights, order, np.broadcast_to(betas, dist.shape), axis=-1)
    else:
        weights = np.broadcast_to(betas, dist.shape)
    ranked = ad.sum(dist * np.ascontiguousarray(weights), axis=-1)
    return ad.mean(best + ranked)


def diversity_loss(candidates, y, phi, params: DiversityParams = DiversityParams()) -> ad.Tensor:
    c = ad.tensor(candidates)
    count = c.shape[-4]
    if count != params.d:
        raise ValueError(f"got {count} candidates, expected d={params.d}")
    return diversity_from_distances(candidate_distances(c, y, phi), params)


def self_reg_total(bilateral, temporal_f, temporal_g, weights: Sequence[float] = (1.0, 1.0, 1.0)):
    """Weighted sum of the three self-regularisation terms.

    Accepts floats or scalar Tensors; returns the same kind.
    """
    terms = [bilateral, temporal_f, temporal_g]
    for t in terms:
        v = t.item() if isinstance(t, ad.Tensor) else float(t)
        if not np.isfinite(v):
            raise NumericError(f"non-finite loss term {v}")
    if len(weights) != 3:
        raise ValueError("need three weights")
    if not any(isinstance(t, ad.Tensor) for t in terms):
        return float(sum(w * float(t) for w, t in zip(weights, terms)))
    total = None
    for w, t in zip(weights, terms):
        piece = ad.tensor(np.float32(t)) if not isinstance(t, ad.Tensor) else t
        piece = piece * float(w)
        total = piece if total is None else total + piece
    return total

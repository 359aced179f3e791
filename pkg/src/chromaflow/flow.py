"""Optical flow: Middlebury ``.flo`` I/O, backward warping, occlusion masks and
a pyramidal Horn-Schunck estimator.

Convention used everywhere in the package: a flow field is an ``(H, W, 2)``
float32 array of ``(u, v)`` displacements defined on the *target* grid. To
bring a source frame onto the target grid, the source is sampled at
``p + flow(p)``. A flow estimated by ``estimate_flow(a, b)`` therefore lives
on ``a``'s grid and points into ``b``, and ``backward_warp(b, flow)`` aligns
``b`` with ``a``.

Occlusion masks are boolean ``(H, W)`` arrays on the target grid, ``True``
where the correspondence is usable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
from scipy import ndimage, sparse

from .errors import FormatError

FLO_MAGIC = b"PIEH"


def as_flow(flow) -> np.ndarray:
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"expected (H, W, 2) flow, got shape {flow.shape}")
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains non-finite values")
    return flow


# ---------------------------------------------------------------- .flo I/O

def write_flo(flow, path) -> None:
    flow = as_flow(flow)
    h, w = flow.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<ii", w, h))
        fh.write(flow.astype("<f4").tobytes(order="C"))


def read_flo(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such flow file: {path}")
    raw = path.read_bytes()
    if raw[:4] != FLO_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {FLO_MAGIC!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    w, h = struct.unpack("<ii", raw[4:12])
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: invalid size {w}x{h}")
    expected = 12 + 8 * w * h
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw) - 12} bytes, expected {expected - 12}")
    flow = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)
    if not np.all(np.isfinite(flow)):
        raise FormatError(f"{path}: non-finite flow values")
    return flow


# ---------------------------------------------------------------- warping

@dataclass(frozen=True)
class WarpOperator:
    """Bilinear resampling as a sparse ``(target_pixels, source_pixels)`` matrix.

    ``valid`` marks target pixels whose sample position lies inside the
    source domain ``[0, W-1] x [0, H-1]``; rows of invalid pixels are empty,
    so warped values there are zero.
    """

    matrix: sparse.csr_matrix
    valid: np.ndarray
    target_shape: Tuple[int, int]
    source_shape: Tuple[int, int]

    @classmethod
    def from_flow(cls, flow, source_shape=None) -> "WarpOperator":
        flow = as_flow(flow)
        ht, wt = flow.shape[:2]
        hs, ws = source_shape if source_shape is not None else (ht, wt)
        yy, xx = np.mgrid[0:ht, 0:wt]
        # float64 keeps integer sample positions exact
        sx = xx + flow[:, :, 0].astype(np.float64)
        sy = yy + flow[:, :, 1].astype(np.float64)
        valid = (sx >= 0) & (sx <= ws - 1) & (sy >= 0) & (sy <= hs - 1)

        x0 = np.clip(np.floor(sx), 0, ws - 1).astype(np.int64)
        y0 = np.clip(np.floor(sy), 0, hs - 1).astype(np.int64)
        x1 = np.minimum(x0 + 1, ws - 1)
        y1 = np.minimum(y0 + 1, hs - 1)
        fx = np.clip(sx - x0, 0.0, 1.0)
        fy = np.clip(sy - y0, 0.0, 1.0)

        rows = np.arange(ht * wt).reshape(ht, wt)
        corners = [
            (y0, x0, (1 - fx) * (1 - fy)),
            (y0, x1, fx * (1 - fy)),
            (y1, x0, (1 - fx) * fy),
            (y1, x1, fx * fy),
        ]
        r = np.concatenate([rows[valid]] * 4)
        c = np.concatenate([(yc * ws + xc)[valid] for yc, xc, _ in corners])
        v = np.concatenate([wgt[valid] for _, _, wgt in corners]).astype(np.float32)
        keep = v != 0
        mat = sparse.csr_matrix((v[keep], (r[keep], c[keep])), shape=(ht * wt, hs * ws), dtype=np.float32)
        return cls(mat, valid, (ht, wt), (hs, ws))

    def apply(self, image) -> np.ndarray:
        """Warp an ``(Hs, Ws, C)`` array onto the target grid."""
        img = np.asarray(image)
        squeeze = img.ndim == 2
        if squeeze:
            img = img[:, :, None]
        if img.shape[:2] != tuple(self.source_shape):
            raise ValueError(f"source shape {img.shape[:2]} does not match operator {self.source_shape}")
        flat = img.reshape(-1, img.shape[2]).astype(np.float32, copy=False)
        out = (self.matrix @ flat).astype(np.float32).reshape(self.target_shape + (img.shape[2],))
        return out[:, :, 0] if squeeze else out


def backward_warp(source, flow, output_shape=None) -> Tuple[np.ndarray, np.ndarray]:
    """Sample ``source`` at ``p + flow(p)``; returns ``(warped, validity)``."""
    flow = as_flow(flow)
    if output_shape is not None and tuple(output_shape[:2]) != flow.shape[:2]:
        raise ValueError(f"flow grid {flow.shape[:2]} does not match requested output {tuple(output_shape[:2])}")
    src = np.asarray(source, dtype=np.float32)
    op = WarpOperator.from_flow(flow, src.shape[:2])
    return op.apply(src), op.valid


def occlusion_mask(flow_fwd, flow_bwd) -> np.ndarray:
    """Forward-backward consistency check.

    ``flow_fwd`` lives on frame t and points into t+1; ``flow_bwd`` lives on
    t+1 and points back into t. A pixel is kept when the round trip nearly
    closes and its forward target is inside the frame.
    """
    flow_fwd = as_flow(flow_fwd)
    flow_bwd = as_flow(flow_bwd)
    if flow_fwd.shape != flow_bwd.shape:
        raise ValueError(f"flow size mismatch: {flow_fwd.shape} vs {flow_bwd.shape}")
    bwd_at_target, inside = backward_warp(flow_bwd, flow_fwd)
    f = flow_fwd.astype(np.float64)
    b = bwd_at_target.astype(np.float64)
    lhs = ((f + b) ** 2).sum(axis=2)
    rhs = 0.01 * ((f ** 2).sum(axis=2) + (b ** 2).sum(axis=2)) + 0.5
    return (lhs < rhs) & inside


def endpoint_error(flow, reference, mask=None) -> float:
    d = np.linalg.norm(np.asarray(flow, np.float64) - np.asarray(reference, np.float64), axis=2)
    if mask is not None:
        d = d[np.asarray(mask, dtype=bool)]
    return float(d.mean()) if d.size else 0.0


# ---------------------------------------------------------------- estimation

@dataclass
class FlowConfig:
    """``smoothness`` is the Horn-Schunck alpha; alpha squared enters the update.

    With ``normalize_contrast`` both frames are divided by their joint
    standard deviation first, so alpha does not depend on image contrast.
    """

    levels: int = 3
    iterations: int = 100
    smoothness: float = 0.1
    presmooth_sigma: float = 1.0
    warps: int = 2
    normalize_contrast: bool = True

    def validate(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.iterations < 0 or self.warps < 1:
            raise ValueError("iterations must be >= 0 and warps >= 1")
        if self.smoothness <= 0:
            raise ValueError("smoothness must be > 0")
        return self


_AVG_KERNEL = np.array([[1, 2, 1], [2, 0, 2], [1, 2, 1]], dtype=np.float64) / 12.0


def _pyramid(img: np.ndarray, levels: int):
    pyr = [img]
    for _ in range(levels - 1):
        prev = ndimage.gaussian_filter(pyr[-1], 0.8, mode="nearest")
        pyr.append(ndimage.zoom(prev, 0.5, order=1, mode="nearest", grid_mode=True))
    return pyr[::-1]


def _resize_flow(flow: np.ndarray, shape) -> np.ndarray:
    h, w = flow.shape[:2]
    sy, sx = shape[0] / h, shape[1] / w
    out = np.empty(tuple(shape) + (2,), dtype=np.float64)
    out[:, :, 0] = ndimage.zoom(flow[:, :, 0], (sy, sx), order=1, mode="nearest", grid_mode=True) * sx
    out[:, :, 1] = ndimage.zoom(flow[:, :, 1], (sy, sx), order=1, mode="nearest", grid_mode=True) * sy
    return out


def _horn_schunck(a, b_warped, u0, v0, du, dv, cfg: FlowConfig):
    # linearise b(p + w0 + dw) ~ b_w + grad(b_w) . dw, smooth the full flow w0 + dw
    ix = 0.5 * (np.gradient(a, axis=1) + np.gradient(b_warped, axis=1))
    iy = 0.5 * (np.gradient(a, axis=0) + np.gradient(b_warped, axis=0))
    it = b_warped - a
    denom = cfg.smoothness ** 2 + ix * ix + iy * iy
    u, v = u0 + du, v0 + dv
    for _ in range(cfg.iterations):
        ub = ndimage.convolve(u, _AVG_KERNEL, mode="nearest")
        vb = ndimage.convolve(v, _AVG_KERNEL, mode="nearest")
        r = (ix * (ub - u0) + iy * (vb - v0) + it) / denom
        u = ub - ix * r
        v = vb - iy * r
    return u - u0, v - v0


def estimate_flow(a, b, cfg: FlowConfig = None) -> np.ndarray:
    """Pyramidal Horn-Schunck flow on ``a``'s grid pointing into ``b``."""
    cfg = (cfg or FlowConfig()).validate()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[2] != 1:
            raise ValueError("estimate_flow expects grayscale frames")
        a = a[:, :, 0]
    if b.ndim == 3:
        if b.shape[2] != 1:
            raise ValueError("estimate_flow expects grayscale frames")
        b = b[:, :, 0]
    if a.shape != b.shape:
        raise ValueError(f"frame size mismatch: {a.shape} vs {b.shape}")
    coarsest = (a.shape[0] >> (cfg.levels - 1), a.shape[1] >> (cfg.levels - 1))
    if min(coarsest) < 8:
        raise ValueError(f"frames of {a.shape} are below 8x8 at the coarsest of {cfg.levels} levels")
    if cfg.iterations == 0:
        return np.zeros(a.shape + (2,), dtype=np.float32)

    if cfg.normalize_contrast:
        scale = max(float(np.concatenate([a.ravel(), b.ravel()]).std()), 1e-3)
        a, b = a / scale, b / scale
    if cfg.presmooth_sigma > 0:
        a = ndimage.gaussian_filter(a, cfg.presmooth_sigma, mode="nearest")
        b = ndimage.gaussian_filter(b, cfg.presmooth_sigma, mode="nearest")
    pa, pb = _pyramid(a, cfg.levels), _pyramid(b, cfg.levels)

    flow = np.zeros(pa[0].shape + (2,))
    for la, lb in zip(pa, pb):
        if flow.shape[:2] != la.shape:
            flow = _resize_flow(flow, la.shape)
        for _ in range(cfg.warps):
            bw = _warp_clamped(lb, flow)
            du, dv = _horn_schunck(la, bw, flow[:, :, 0], flow[:, :, 1],
                                   np.zeros_like(la), np.zeros_like(la), cfg)
            flow[:, :, 0] += du
            flow[:, :, 1] += dv
    return flow.astype(np.float32)


def _warp_clamped(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    # edge-replicating sampler; estimation must not see zero fill
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([np.clip(yy + flow[:, :, 1], 0, h - 1), np.clip(xx + flow[:, :, 0], 0, w - 1)])
    return ndimage.map_coordinates(img, coords, order=1, mode="nearest")

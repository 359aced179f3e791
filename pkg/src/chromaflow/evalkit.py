"""Evaluation metrics and JSON reports.

``phi_distance`` uses the package's fixed random feature bank. It stands in
for a learned perceptual metric and its values are not comparable to LPIPS.

Report schema (all keys stable)::

    {
      "label": str,
      "metric_notes": {...},
      "config": {...},                  # echo of the run configuration
      "clips": [ {clip_id, frames, selected, psnr_mean, gray_psnr_mean,
                  warp_error, warp_error_coverage, warp_error_unrefined,
                  warp_error_per_pass, phi_distance, mean_saturation,
                  saturation_argmax, diverse_frame_fraction} ... ],
      "aggregate": {same numeric keys, arithmetic means over clips}
    }
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import imagecore
from .flow import WarpOperator
from .imagecore import VideoClip
from .neural import autodiff as ad
from .neural.nets import FeatureExtractor, image_to_tensor

PHI_NOTE = ("phi_distance: mean absolute difference of hypercolumns from a fixed, seeded random "
            "convolutional bank; a stand-in for LPIPS, not comparable to published LPIPS numbers")


@dataclass(frozen=True)
class WarpErrorResult:
    value: float
    coverage: float
    empty_pairs: int


def warp_error_stats(video: VideoClip, flows: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> WarpErrorResult:
    """Mean over consecutive pairs of masked mean ``|O^t - warp(O^{t+1})|``.

    ``flows[t]`` lives on frame t's grid and points into frame t+1.
    """
    n = len(video)
    if len(flows) != n - 1 or len(masks) != n - 1:
        raise ValueError(f"{n} frames need {n - 1} flows and masks, got {len(flows)} and {len(masks)}")
    if n < 2:
        return WarpErrorResult(0.0, 0.0, 0)
    errs, covered, empty = [], 0.0, 0
    for t in range(n - 1):
        op = WarpOperator.from_flow(flows[t])
        warped = op.apply(video[t + 1])
        m = np.asarray(masks[t], dtype=bool) & op.valid
        covered += m.mean()
        if not m.any():
            errs.append(0.0)
            empty += 1
            continue
        diff = np.abs(video[t].astype(np.float64) - warped.astype(np.float64)).mean(axis=2)
        errs.append(float(diff[m].mean()))
    return WarpErrorResult(float(np.mean(errs)), float(covered / (n - 1)), empty)


def warp_error(video: VideoClip, flows, masks) -> float:
    return warp_error_stats(video, flows, masks).value


def phi_distance(a, b, phi: FeatureExtractor) -> float:
    """Mean absolute difference between hypercolumns of two same-shape images."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    with ad.no_grad():
        fa = phi(image_to_tensor(a)[None]).data.astype(np.float64)
        fb = phi(image_to_tensor(b)[None]).data.astype(np.float64)
    return float(np.mean(np.abs(fa - fb)))


def diverse_frame_fraction(streams: Sequence[VideoClip], threshold: float = 1e-3) -> float:
    """Share of frames where every pair of candidates differs by mean L1 above ``threshold``."""
    d = len(streams)
    if d < 2:
        return 0.0
    hits = 0
    for t in range(len(streams[0])):
        ok = all(imagecore.mean_l1(streams[i][t], streams[j][t]) > threshold
                 for i in range(d) for j in range(i + 1, d))
        hits += ok
    return hits / len(streams[0])


@dataclass
class ClipEval:
    clip_id: str
    frames: int
    selected: int
    psnr_mean: float
    gray_psnr_mean: float
    warp_error: float
    warp_error_coverage: float
    warp_error_unrefined: float
    warp_error_per_pass: List[float]
    phi_distance: float
    mean_saturation: List[float]
    saturation_argmax: int
    diverse_frame_fraction: float


NUMERIC_KEYS = ("psnr_mean", "gray_psnr_mean", "warp_error", "warp_error_coverage", "warp_error_unrefined",
                "phi_distance", "diverse_frame_fraction")


@dataclass
class EvalReport:
    clips: List[ClipEval]
    config: Dict = field(default_factory=dict)
    label: str = "chromaflow-eval"

    def aggregate(self) -> Dict[str, float]:
        agg = {k: float(np.mean([getattr(c, k) for c in self.clips])) for k in NUMERIC_KEYS}
        passes = [c.warp_error_per_pass for c in self.clips]
        if passes and all(len(p) == len(passes[0]) for p in passes):
            agg["warp_error_per_pass"] = [float(v) for v in np.mean(passes, axis=0)]
        agg["psnr_gain_over_gray"] = agg["psnr_mean"] - agg["gray_psnr_mean"]
        agg["selection_matches_saturation_argmax"] = all(c.selected == c.saturation_argmax for c in self.clips)
        agg["clips"] = len(self.clips)
        return agg

    def to_json(self) -> Dict:
        return {"label": self.label, "metric_notes": {"phi_distance": PHI_NOTE}, "config": self.config,
                "clips": [asdict(c) for c in self.clips], "aggregate": self.aggregate()}

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")


def read_report(path) -> Dict:
    return json.loads(Path(path).read_text())


def evaluate_clip(clip_id: str, streams: Sequence[VideoClip], selected: int, y: VideoClip, gray: VideoClip,
                  flows, masks, phi: FeatureExtractor, raw: Optional[Sequence[VideoClip]] = None,
                  history: Optional[Sequence[Sequence[VideoClip]]] = None) -> ClipEval:
    """Metrics of one clip's selected candidate against ground truth."""
    if not streams:
        raise ValueError("no candidate streams")
    out = streams[selected]
    if len(out) != len(y) or len(gray) != len(y):
        raise ValueError(f"clip lengths differ: output {len(out)}, truth {len(y)}, gray {len(gray)}")
    psnr_mean = float(np.mean([imagecore.psnr(a, b) for a, b in zip(out, y)]))
    gray_psnr = float(np.mean([imagecore.psnr(imagecore.gray_to_rgb(g), b) for g, b in zip(gray, y)]))
    we = warp_error_stats(out, flows, masks)
    we_raw = warp_error(raw[selected], flows, masks) if raw is not None else we.value
    per_pass = [warp_error(h[selected], flows, masks) for h in history] if history else []
    phi_d = float(np.mean([phi_distance(a, b, phi) for a, b in zip(out, y)]))
    sats = [imagecore.mean_saturation(s.frames) for s in streams]
    return ClipEval(clip_id, len(y), int(selected), psnr_mean, gray_psnr, we.value, we.coverage, we_raw,
                    per_pass, phi_d, sats, int(np.argmax(sats)), diverse_frame_fraction(streams))


def evaluate(results: Sequence[Tuple[str, object]], truths, phi: FeatureExtractor, config: Optional[Dict] = None,
             label: str = "chromaflow-eval") -> EvalReport:
    """Build a report from ``(clip_id, ColorizeResult)`` and matching truths.

    Each truth is a :class:`chromaflow.synthdata.LoadedClip`-like object with
    ``color``, ``gray``, ``flows_fwd`` and ``occ_fwd``.
    """
    if len(results) != len(truths):
        raise ValueError(f"{len(results)} results but {len(truths)} ground-truth clips")
    clips = []
    for (clip_id, res), truth in zip(results, truths):
        clips.append(evaluate_clip(clip_id, res.streams, res.selected, truth.color, truth.gray,
                                   truth.flows_fwd, truth.occ_fwd, phi, raw=res.raw, history=res.history or None))
    return EvalReport(clips, dict(config or {}), label)

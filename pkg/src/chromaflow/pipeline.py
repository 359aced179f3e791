"""Two-phase training and video inference.

Phase one trains the colorizer f on single frames (bilateral + diversity
losses) mixed with adjacent-frame pairs that add the temporal term on f.
Phase two trains the refiner g together with f on frame pairs within the
temporal window. Inference runs f per frame, then repeatedly refines every
candidate stream with g using the frames within +-lambda_t, and finally picks
one candidate by mean saturation.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import imagecore
from .bilateral import KnnGraph, KnnParams, bilateral_loss, build_knn_graph
from .errors import NumericError
from .flow import FlowConfig, WarpOperator, estimate_flow, occlusion_mask
from .imagecore import VideoClip
from .losses import (ConfidenceParams, DiversityParams, candidate_distances, confidence_map,
                     diversity_from_distances, self_reg_total, temporal_loss_f, temporal_loss_g)
from .neural import autodiff as ad
from .neural.nets import ColorizerNet, FeatureExtractor, RefinerNet, image_to_tensor, tensor_to_image
from .neural.optim import AdamState, adam_step
from .synthdata import LoadedClip, Manifest, load_clip

log = logging.getLogger(__name__)

SELECT_MODES = ("max_saturation", "index_k", "all")


@dataclass
class ModelConfig:
    d: int = 4
    reduced_channels: int = 32
    widths: Tuple[int, int, int] = (16, 32, 64)
    phi_seed: int = 1234
    f_seed: int = 0
    g_seed: int = 1
    refiner_gated: bool = True


@dataclass
class TrainConfig:
    epochs: int = 20
    images_per_epoch: int = 140
    pairs_per_epoch: int = 28
    joint_epochs: int = 10
    joint_pairs_per_epoch: int = 16
    batch_size: int = 4
    lr: float = 1e-3
    joint_f_lr_scale: float = 0.1
    w_b: float = 1.0
    w_tf: float = 1.0
    w_tg: float = 1.0
    w_div: float = 1.0
    lambda_t: int = 1
    betas: Tuple[float, ...] = (0.30, 0.15, 0.075, 0.0375)
    rank_sorted_betas: bool = False
    knn_k: int = 5
    knn_lambda: float = 0.5
    knn_sample_size: int = 1024
    alpha: float = 15.0
    zero_confidence_at_occlusion: bool = True
    seed: int = 7
    checkpoint_every: int = 0

    def validate(self):
        for name in ("images_per_epoch", "pairs_per_epoch", "joint_pairs_per_epoch", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.joint_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.lambda_t < 1:
            raise ValueError("training needs lambda_t >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        return self

    def knn(self, seed: int = 0) -> KnnParams:
        return KnnParams(self.knn_k, self.knn_lambda, self.knn_sample_size, seed)

    def diversity(self, d: int) -> DiversityParams:
        return DiversityParams(d, tuple(self.betas), self.rank_sorted_betas)

    def confidence(self) -> ConfidenceParams:
        return ConfidenceParams(self.alpha, self.zero_confidence_at_occlusion)


@dataclass
class InferConfig:
    lambda_t: int = 1
    passes: int = 2
    select_mode: str = "max_saturation"
    index_k: int = 0
    replace_luminance: bool = True
    alpha: float = 15.0
    zero_confidence_at_occlusion: bool = True

    def validate(self):
        if self.lambda_t < 0 or self.passes < 0:
            raise ValueError("lambda_t and passes must be >= 0")
        if self.select_mode not in SELECT_MODES:
            raise ValueError(f"select_mode must be one of {SELECT_MODES}")
        return self


@dataclass
class Models:
    f: ColorizerNet
    g: RefinerNet
    phi: FeatureExtractor


def build_models(cfg: ModelConfig = ModelConfig()) -> Models:
    phi = FeatureExtractor(seed=cfg.phi_seed, widths=cfg.widths)
    f = ColorizerNet(d=cfg.d, reduced_channels=cfg.reduced_channels, feature_channels=phi.channels,
                     widths=cfg.widths, seed=cfg.f_seed)
    g = RefinerNet(widths=cfg.widths, seed=cfg.g_seed, gated=cfg.refiner_gated)
    return Models(f, g, phi)


# ---------------------------------------------------------------- data access

class TrainingData:
    """In-memory view of one manifest split with cached graphs and warps."""

    def __init__(self, manifest: Manifest, split: str = "train", knn: Optional[Callable[[int], KnnParams]] = None,
                 flow_cfg: FlowConfig = None):
        self.clips: List[LoadedClip] = [load_clip(manifest, r) for r in manifest.split(split)]
        if not self.clips:
            raise ValueError(f"manifest has no clips in split {split!r}")
        self._knn = knn or (lambda seed: KnnParams(seed=seed))
        self._graphs: Dict[Tuple[int, int], KnnGraph] = {}
        self._warps: Dict[Tuple[int, int, int], Tuple[WarpOperator, np.ndarray]] = {}
        self.flow_cfg = flow_cfg or FlowConfig()
        self.gray = [image_to_tensor(c.gray.stack()) for c in self.clips]
        self.color = [image_to_tensor(c.color.stack()) for c in self.clips]

    def __len__(self):
        return len(self.clips)

    def frames(self, clip: int) -> int:
        return len(self.clips[clip].color)

    def graph(self, clip: int, frame: int) -> KnnGraph:
        key = (clip, frame)
        if key not in self._graphs:
            params = self._knn(clip * 1000 + frame)
            self._graphs[key] = build_knn_graph(self.clips[clip].color[frame], params)
        return self._graphs[key]

    def warp(self, clip: int, s: int, t: int) -> Tuple[WarpOperator, np.ndarray]:
        """Operator bringing frame t onto frame s's grid, and the usable-pixel mask."""
        key = (clip, s, t)
        if key not in self._warps:
            c = self.clips[clip]
            if abs(s - t) == 1:
                flow, occ = c.flow_between(s, t)
            else:
                flow = estimate_flow(c.gray[s], c.gray[t], self.flow_cfg)
                back = estimate_flow(c.gray[t], c.gray[s], self.flow_cfg)
                occ = occlusion_mask(flow, back)
            op = WarpOperator.from_flow(flow)
            self._warps[key] = (op, occ & op.valid)
        return self._warps[key]


def _check_finite(value: float, what: str):
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what} loss: {value}")


def _apply(net, grads_scale: float, lr: float, state: AdamState):
    grads = net.grads()
    if grads_scale != 1.0:
        grads = {k: v * grads_scale for k, v in grads.items()}
    adam_step(net.arrays(), grads, state, lr)
    net.zero_grad()


# ---------------------------------------------------------------- phase 1

def _frame_losses(models: Models, data: TrainingData, items, cfg: TrainConfig, div: DiversityParams):
    """Forward f on (clip, frame) items; returns candidates, bilateral and diversity terms."""
    gray = np.stack([data.gray[c][t] for c, t in items])
    color = np.stack([data.color[c][t] for c, t in items])
    out = models.f(gray, models.phi)
    bil = None
    for i, (c, t) in enumerate(items):
        term = bilateral_loss(out[i], data.graph(c, t))
        bil = term if bil is None else bil + term
    bil = bil * (1.0 / len(items))
    dist = candidate_distances(out, color, models.phi)
    return out, bil, diversity_from_distances(dist, div)


def _temporal_f(out, data: TrainingData, pairs):
    """Temporal loss on f for a batch laid out as [t_0, t1_0, t_1, t1_1, ...]."""
    total = None
    for i, (c, t) in enumerate(pairs):
        op, mask = data.warp(c, t, t + 1)
        warped = ad.warp(out[2 * i + 1], op)
        term = temporal_loss_f(out[2 * i], warped, mask).value
        total = term if total is None else total + term
    return total * (1.0 / len(pairs))


def train_colorizer(data: TrainingData, cfg: TrainConfig, models: Models,
                    on_epoch: Optional[Callable[[Dict], None]] = None) -> List[Dict]:
    """Phase one. Updates ``models.f`` in place and returns the loss curve."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    div = cfg.diversity(models.f.d)
    state = AdamState()
    curve = []
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        images = [(int(c), int(rng.integers(data.frames(c))))
                  for c in rng.integers(len(data), size=cfg.images_per_epoch)]
        pairs = [(int(c), int(rng.integers(data.frames(c) - 1)))
                 for c in rng.integers(len(data), size=cfg.pairs_per_epoch)]
        pairs = [p for p in pairs if data.frames(p[0]) > 1]
        bs = cfg.batch_size
        pair_bs = max(1, bs // 2)
        batches = [("image", images[i:i + bs]) for i in range(0, len(images), bs)]
        batches += [("pair", pairs[i:i + pair_bs]) for i in range(0, len(pairs), pair_bs)]
        order = rng.permutation(len(batches))

        sums = {"bilateral": 0.0, "diversity": 0.0, "temporal_f": 0.0, "total": 0.0}
        counts = {"image": 0, "pair": 0}
        for b in order:
            kind, items = batches[b]
            if kind == "image":
                _, bil, dv = _frame_losses(models, data, items, cfg, div)
                loss = bil * cfg.w_b + dv * cfg.w_div
            else:
                frames = [(c, t + k) for c, t in items for k in (0, 1)]
                out, bil, dv = _frame_losses(models, data, frames, cfg, div)
                tf = _temporal_f(out, data, items)
                loss = bil * cfg.w_b + dv * cfg.w_div + tf * cfg.w_tf
                sums["temporal_f"] += tf.item()
            value = loss.item()
            _check_finite(value, "colorizer")
            ad.backward(loss)
            _apply(models.f, 1.0, cfg.lr, state)
            sums["bilateral"] += bil.item()
            sums["diversity"] += dv.item()
            sums["total"] += value
            counts[kind] += 1
        n = max(1, counts["image"] + counts["pair"])
        rec = {"phase": "f", "epoch": epoch + 1,
               "bilateral": sums["bilateral"] / n, "diversity": sums["diversity"] / n,
               "temporal_f": sums["temporal_f"] / max(1, counts["pair"]), "total": sums["total"] / n,
               "steps": n, "wall_time": time.perf_counter() - start}
        curve.append(rec)
        log.info("f epoch %d: total %.4f bil %.4f div %.4f tf %.4f", rec["epoch"], rec["total"],
                 rec["bilateral"], rec["diversity"], rec["temporal_f"])
        if on_epoch:
            on_epoch(rec)
    return curve


# ---------------------------------------------------------------- phase 2

def window_pairs(n_frames: int, lambda_t: int) -> List[Tuple[int, int]]:
    """All ordered (s, t) with 1 <= |s - t| <= lambda_t."""
    return [(s, t) for s in range(n_frames) for t in range(n_frames) if 1 <= abs(s - t) <= lambda_t]


def _refine_batch(g: RefinerNet, c_s, c_t, x_s, x_t, op: WarpOperator, mask, conf: ConfidenceParams):
    """Refine every candidate of frame s from its counterpart in frame t.

    ``c_s``/``c_t`` are ``(d, 3, H, W)``; ``x_s``/``x_t`` are ``(1, H, W)``.
    """
    warped = ad.warp(c_t, op)
    w_color = confidence_map(c_s, warped, mask, conf)
    x_warped = ad.warp(x_t, op)
    w_gray = confidence_map(x_s, x_warped, mask, conf)
    d = c_s.shape[0]
    w_gray = ad.Tensor(np.broadcast_to(ad.tensor(w_gray).data[None], (d,) + w_gray.shape).copy())
    return g(c_s, warped, w_color, w_gray)


def joint_pair_loss(models: Models, data: TrainingData, clip: int, s: int, t: int, cfg: TrainConfig,
                    div: DiversityParams):
    """All loss terms for one (s, t) pair; returns (total, parts)."""
    conf = cfg.confidence()
    out, bil, dv = _frame_losses(models, data, [(clip, s), (clip, t)], cfg, div)
    c_s, c_t = out[0], out[1]
    op, mask = data.warp(clip, s, t)
    x = data.gray[clip]
    refined = _refine_batch(models.g, c_s, c_t, x[s], x[t], op, mask, conf)
    y_s = np.broadcast_to(data.color[clip][s][None], refined.shape).copy()
    tg = temporal_loss_g(refined, y_s)
    tf = temporal_loss_f(c_s, ad.warp(c_t, op), mask).value
    self_reg = self_reg_total(bil, tf, tg, (cfg.w_b, cfg.w_tf, cfg.w_tg))
    total = self_reg + dv * cfg.w_div
    return total, {"bilateral": bil.item(), "temporal_f": tf.item(), "temporal_g": tg.item(),
                   "diversity": dv.item()}


def evaluate_refiner_loss(models: Models, data: TrainingData, cfg: TrainConfig, max_pairs: int = 32) -> float:
    """Mean refiner loss over a fixed, evenly spread set of window pairs."""
    conf = cfg.confidence()
    pairs = [(c, s, t) for c in range(len(data)) for s, t in window_pairs(data.frames(c), cfg.lambda_t)]
    if not pairs:
        raise ValueError("no frame pairs available")
    idx = np.linspace(0, len(pairs) - 1, min(max_pairs, len(pairs))).round().astype(int)
    vals = []
    with ad.no_grad():
        for i in idx:
            c, s, t = pairs[i]
            out = models.f(np.stack([data.gray[c][s], data.gray[c][t]]), models.phi)
            op, mask = data.warp(c, s, t)
            refined = _refine_batch(models.g, out[0], out[1], data.gray[c][s], data.gray[c][t], op, mask, conf)
            vals.append(temporal_loss_g(refined, np.broadcast_to(data.color[c][s], refined.shape)).item())
    return float(np.mean(vals))


def train_joint(data: TrainingData, cfg: TrainConfig, models: Models,
                on_epoch: Optional[Callable[[Dict], None]] = None,
                val: Optional[TrainingData] = None) -> List[Dict]:
    """Phase two: g and f together on pairs with ``1 <= |s - t| <= lambda_t``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed + 1)
    div = cfg.diversity(models.f.d)
    all_pairs = [(c, s, t) for c in range(len(data)) for s, t in window_pairs(data.frames(c), cfg.lambda_t)]
    if not all_pairs:
        raise ValueError("no frame pairs within the temporal window")
    state_f, state_g = AdamState(), AdamState()
    curve = []
    if val is not None:
        curve.append({"phase": "joint", "epoch": 0, "val_temporal_g": evaluate_refiner_loss(models, val, cfg)})
        if on_epoch:
            on_epoch(curve[0])
    for epoch in range(cfg.joint_epochs):
        start = time.perf_counter()
        chosen = rng.integers(len(all_pairs), size=cfg.joint_pairs_per_epoch)
        sums: Dict[str, float] = {}
        for i in chosen:
            c, s, t = all_pairs[int(i)]
            loss, parts = joint_pair_loss(models, data, c, s, t, cfg, div)
            value = loss.item()
            _check_finite(value, "joint")
            ad.backward(loss)
            _apply(models.g, 1.0, cfg.lr, state_g)
            _apply(models.f, 1.0, cfg.lr * cfg.joint_f_lr_scale, state_f)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            sums["total"] = sums.get("total", 0.0) + value
        n = len(chosen)
        rec = {"phase": "joint", "epoch": epoch + 1, **{k: v / n for k, v in sums.items()},
               "steps": n, "wall_time": time.perf_counter() - start}
        if val is not None:
            rec["val_temporal_g"] = evaluate_refiner_loss(models, val, cfg)
        curve.append(rec)
        log.info("joint epoch %d: total %.4f tg %.4f", rec["epoch"], rec["total"], rec["temporal_g"])
        if on_epoch:
            on_epoch(rec)
    return curve


# ---------------------------------------------------------------- inference

@dataclass
class ColorizeResult:
    streams: List[VideoClip]
    raw: List[VideoClip]
    selected: int
    saturations: List[float]
    history: List[List[VideoClip]] = field(default_factory=list)

    @property
    def selected_stream(self) -> VideoClip:
        return self.streams[self.selected]


def select_by_saturation(candidates: Sequence[VideoClip]) -> int:
    """Index of the candidate with the highest mean HSV saturation (ties: lowest)."""
    if not candidates:
        raise ValueError("no candidates to select from")
    scores = [imagecore.mean_saturation(c.frames) for c in candidates]
    return int(np.argmax(scores))


def clip_flows(gray: VideoClip, lambda_t: int, flow_cfg: FlowConfig = None) -> Dict[Tuple[int, int], Tuple[WarpOperator, np.ndarray]]:
    """Estimated warp operators and usable masks for all window pairs."""
    flow_cfg = flow_cfg or FlowConfig()
    raw: Dict[Tuple[int, int], np.ndarray] = {}
    for s, t in window_pairs(len(gray), lambda_t):
        raw[(s, t)] = estimate_flow(gray[s], gray[t], flow_cfg)
    return flows_to_operators(raw)


def flows_to_operators(flows: Dict[Tuple[int, int], np.ndarray], masks=None):
    """Pair ``flows[(s, t)]`` (s-grid into t) with occlusion masks.

    Masks come from ``masks`` when given, else from the forward-backward check
    against ``flows[(t, s)]``.
    """
    out = {}
    for (s, t), flow in flows.items():
        op = WarpOperator.from_flow(flow)
        if masks is not None and (s, t) in masks:
            occ = np.asarray(masks[(s, t)], dtype=bool)
        elif (t, s) in flows:
            occ = occlusion_mask(flow, flows[(t, s)])
        else:
            occ = np.ones(flow.shape[:2], dtype=bool)
        out[(s, t)] = (op, occ & op.valid)
    return out


def colorize_candidates(gray: VideoClip, models: Models, batch: int = 8) -> np.ndarray:
    """Run f on every frame; returns ``(n, d, 3, H, W)``."""
    x = image_to_tensor(gray.stack())
    outs = []
    with ad.no_grad():
        for i in range(0, len(x), batch):
            outs.append(models.f(x[i:i + batch], models.phi).data)
    return np.concatenate(outs)


def refine_pass(cands: np.ndarray, gray_t: np.ndarray, models: Models, ops, lambda_t: int,
                conf: ConfidenceParams) -> np.ndarray:
    """One refinement sweep over all frames; frames use the previous sweep only."""
    n = cands.shape[0]
    out = cands.copy()
    with ad.no_grad():
        for s in range(n):
            results = []
            for t in range(max(0, s - lambda_t), min(n, s + lambda_t + 1)):
                if t == s:
                    continue
                op, mask = ops[(s, t)]
                r = _refine_batch(models.g, ad.Tensor(cands[s]), ad.Tensor(cands[t]),
                                  gray_t[s], gray_t[t], op, mask, conf)
                results.append(r.data)
            if results:
                out[s] = np.mean(results, axis=0) if len(results) > 1 else results[0]
    return out


def colorize_video(gray: VideoClip, models: Models, cfg: InferConfig = InferConfig(),
                   flow_cfg: FlowConfig = None, operators=None, keep_history: bool = False) -> ColorizeResult:
    """Colorize a grayscale clip into ``d`` refined candidate streams."""
    cfg.validate()
    if gray.channels != 1:
        raise ValueError("colorize_video expects a 1-channel clip")
    if gray.height % 4 or gray.width % 4:
        raise ValueError(f"frame size {gray.height}x{gray.width} must be divisible by 4")
    cands = colorize_candidates(gray, models)
    conf = ConfidenceParams(cfg.alpha, cfg.zero_confidence_at_occlusion)
    gray_t = image_to_tensor(gray.stack())

    def to_clips(arr):
        streams = []
        for k in range(arr.shape[1]):
            frames = [tensor_to_image(arr[i, k]) for i in range(arr.shape[0])]
            if cfg.replace_luminance:
                frames = [imagecore.replace_luminance(f, g) for f, g in zip(frames, gray.frames)]
            streams.append(VideoClip([np.clip(f, 0.0, 1.0) for f in frames]))
        return streams

    raw = to_clips(cands)
    history = [raw] if keep_history else []
    current = cands
    if cfg.passes > 0 and len(gray) > 1 and cfg.lambda_t > 0:
        if operators is None:
            operators = clip_flows(gray, cfg.lambda_t, flow_cfg)
        for _ in range(cfg.passes):
            current = refine_pass(current, gray_t, models, operators, cfg.lambda_t, conf)
            if keep_history:
                history.append(to_clips(current))
    streams = history[-1] if keep_history else to_clips(current)
    saturations = [imagecore.mean_saturation(s.frames) for s in streams]
    if cfg.select_mode == "index_k":
        if not 0 <= cfg.index_k < len(streams):
            raise ValueError(f"index_k={cfg.index_k} out of range for {len(streams)} candidates")
        selected = cfg.index_k
    else:
        selected = select_by_saturation(streams)
    return ColorizeResult(streams, raw, selected, saturations, history)

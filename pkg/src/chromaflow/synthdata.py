"""Synthetic moving-shape videos with exact colour, flow and occlusion labels.

Shapes translate by an integer velocity every frame and carry their own
luminance texture, so warping frame t+1 with the ground-truth flow reproduces
frame t exactly wherever the surface stays visible. Colours come from a fixed
palette keyed to (kind, size class), which makes the gray-to-colour mapping
learnable from shape cues alone.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .flow import read_flo, write_flo
from .imagecore import FRAME_PATTERN, VideoClip, load_png, save_png, to_grayscale

log = logging.getLogger(__name__)

KINDS = ("rectangle", "disk")
SIZES = (8, 12, 16, 20)
PALETTE = {
    ("rectangle", 0): (0.90, 0.10, 0.10),
    ("rectangle", 1): (0.10, 0.80, 0.10),
    ("rectangle", 2): (0.15, 0.25, 0.95),
    ("rectangle", 3): (0.95, 0.85, 0.10),
    ("disk", 0): (0.85, 0.10, 0.80),
    ("disk", 1): (0.10, 0.80, 0.85),
    ("disk", 2): (0.95, 0.50, 0.05),
    ("disk", 3): (0.45, 0.10, 0.75),
}
BACKGROUNDS = (
    ((0.62, 0.58, 0.50), (0.40, 0.36, 0.30)),
    ((0.55, 0.62, 0.68), (0.30, 0.36, 0.42)),
    ((0.70, 0.70, 0.64), (0.48, 0.50, 0.46)),
    ((0.50, 0.56, 0.46), (0.28, 0.32, 0.26)),
)
SPLITS = ("train", "val", "test")


@dataclass
class ShapeSpec:
    kind: str
    size: int
    color: Tuple[float, float, float]
    position: Tuple[int, int]  # top-left (x, y) at frame 0
    velocity: Tuple[int, int]  # (vx, vy) pixels per frame

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.size < 1:
            raise ValueError("shape size must be positive")
        self.color = tuple(float(c) for c in self.color)
        self.position = tuple(int(p) for p in self.position)
        self.velocity = tuple(int(v) for v in self.velocity)

    def footprint(self) -> np.ndarray:
        s = self.size
        if self.kind == "rectangle":
            return np.ones((s, s), dtype=bool)
        yy, xx = np.mgrid[0:s, 0:s]
        c = (s - 1) / 2.0
        return (xx - c) ** 2 + (yy - c) ** 2 <= (s / 2.0) ** 2


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    frames: int = 8
    shapes: List[ShapeSpec] = field(default_factory=list)
    background: Tuple[Tuple[float, float, float], Tuple[float, float, float]] = BACKGROUNDS[0]
    texture_noise: float = 0.05
    seed: int = 0
    allow_exit: bool = False

    def validate(self):
        if self.frames < 1 or self.height < 1 or self.width < 1:
            raise ValueError("canvas and frame count must be positive")
        limit = min(self.height, self.width) / self.frames
        for sh in self.shapes:
            x, y = sh.position
            if x < 0 or y < 0 or x + sh.size > self.width or y + sh.size > self.height:
                raise ValueError(f"shape {sh} does not fit the canvas at frame 0")
            if np.hypot(*sh.velocity) >= limit:
                raise ValueError(f"shape velocity {sh.velocity} too fast for {self.frames} frames")
            if not self.allow_exit:
                xe = x + sh.velocity[0] * (self.frames - 1)
                ye = y + sh.velocity[1] * (self.frames - 1)
                if xe < 0 or ye < 0 or xe + sh.size > self.width or ye + sh.size > self.height:
                    raise ValueError(f"shape {sh} leaves the canvas mid-clip")
        return self


@dataclass
class SynthClip:
    color: VideoClip
    gray: VideoClip
    flows_fwd: List[np.ndarray]  # frame t grid -> t+1
    flows_bwd: List[np.ndarray]  # frame t+1 grid -> t
    occ_fwd: List[np.ndarray]
    occ_bwd: List[np.ndarray]
    spec: SceneSpec


def random_scene(seed: int, height: int = 64, width: int = 64, frames: int = 8,
                 max_shapes: int = 4, texture_noise: float = 0.05, max_speed: int = 2) -> SceneSpec:
    """Draw a scene whose shapes stay on the canvas for the whole clip."""
    rng = np.random.default_rng(seed)
    bg = BACKGROUNDS[int(rng.integers(len(BACKGROUNDS)))]
    fitting = [i for i, s in enumerate(SIZES) if s <= min(height, width)]
    if not fitting:
        raise ValueError(f"canvas {height}x{width} is smaller than every shape size")
    shapes = []
    for _ in range(int(rng.integers(2, max_shapes + 1))):
        kind = KINDS[int(rng.integers(2))]
        cls = fitting[int(rng.integers(len(fitting)))]
        size = SIZES[cls]
        span = frames - 1
        vel = []
        pos = []
        for extent in (width, height):
            v = int(rng.integers(-max_speed, max_speed + 1))
            lo = max(0, -v * span)
            hi = min(extent - size, extent - size - v * span)
            if hi < lo:
                v, lo, hi = 0, 0, extent - size
            vel.append(v)
            pos.append(int(rng.integers(lo, hi + 1)))
        shapes.append(ShapeSpec(kind, size, PALETTE[(kind, cls)], tuple(pos), tuple(vel)))
    return SceneSpec(height, width, frames, shapes, bg, texture_noise, seed).validate()


def _render(spec: SceneSpec, textures, bg_img, t: int):
    h, w = spec.height, spec.width
    img = bg_img.copy()
    ids = np.full((h, w), -1, dtype=np.int64)
    for k, sh in enumerate(spec.shapes):
        x0 = sh.position[0] + sh.velocity[0] * t
        y0 = sh.position[1] + sh.velocity[1] * t
        fp = sh.footprint()
        xs, ys = max(x0, 0), max(y0, 0)
        xe, ye = min(x0 + sh.size, w), min(y0 + sh.size, h)
        if xe <= xs or ye <= ys:
            continue
        local = fp[ys - y0:ye - y0, xs - x0:xe - x0]
        tex = textures[k][ys - y0:ye - y0, xs - x0:xe - x0]
        patch = np.clip(np.asarray(sh.color)[None, None, :] + tex[:, :, None], 0.0, 1.0)
        region = img[ys:ye, xs:xe]
        region[local] = patch[local]
        ids[ys:ye, xs:xe][local] = k
    return img, ids


def _flow_and_occlusion(spec: SceneSpec, ids_src, ids_dst, sign: int):
    """Flow on the source grid into the destination frame plus its validity."""
    h, w = ids_src.shape
    vel = np.array([s.velocity for s in spec.shapes] + [(0, 0)], dtype=np.int64) * sign
    v = vel[ids_src]  # id -1 indexes the trailing zero row
    yy, xx = np.mgrid[0:h, 0:w]
    tx, ty = xx + v[:, :, 0], yy + v[:, :, 1]
    inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    same = np.zeros((h, w), dtype=bool)
    same[inside] = ids_dst[ty[inside], tx[inside]] == ids_src[inside]
    return v.astype(np.float32), same


def generate_clip(spec: SceneSpec) -> SynthClip:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    top, bottom = np.asarray(spec.background[0]), np.asarray(spec.background[1])
    ramp = np.linspace(0.0, 1.0, h)[:, None, None]
    bg = top[None, None, :] * (1 - ramp) + bottom[None, None, :] * ramp
    bg = np.broadcast_to(bg, (h, w, 3)).copy()
    a = spec.texture_noise
    bg = np.clip(bg + rng.uniform(-a, a, size=(h, w, 1)), 0.0, 1.0)
    textures = [rng.uniform(-a, a, size=(sh.size, sh.size)) for sh in spec.shapes]

    frames, ids = [], []
    for t in range(spec.frames):
        img, idm = _render(spec, textures, bg, t)
        frames.append(img.astype(np.float32))
        ids.append(idm)

    flows_fwd, flows_bwd, occ_fwd, occ_bwd = [], [], [], []
    for t in range(spec.frames - 1):
        f, m = _flow_and_occlusion(spec, ids[t], ids[t + 1], +1)
        b, mb = _flow_and_occlusion(spec, ids[t + 1], ids[t], -1)
        flows_fwd.append(f)
        occ_fwd.append(m)
        flows_bwd.append(b)
        occ_bwd.append(mb)

    color = VideoClip(frames)
    gray = VideoClip([to_grayscale(f) for f in frames])
    return SynthClip(color, gray, flows_fwd, flows_bwd, occ_fwd, occ_bwd, spec)


# ---------------------------------------------------------------- datasets

def split_for(index: int, n_clips: int) -> str:
    if index < int(n_clips * 0.8):
        return "train"
    if index < int(n_clips * 0.9):
        return "val"
    return "test"


def clip_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])


@dataclass
class ClipRecord:
    clip_id: str
    seed: int
    split: str
    frames_color: List[str]
    frames_gray: List[str]
    flows_fwd: List[str]
    flows_bwd: List[str]
    occlusion_fwd: List[str]
    occlusion_bwd: List[str]


@dataclass
class Manifest:
    root: Path
    base_seed: int
    clips: List[ClipRecord]
    config: Dict = field(default_factory=dict)

    def split(self, name: str) -> List[ClipRecord]:
        return [c for c in self.clips if c.split == name]

    def to_json(self) -> Dict:
        return {"version": 1, "base_seed": self.base_seed, "config": self.config,
                "clips": [asdict(c) for c in self.clips]}


def save_clip(clip: SynthClip, root: Path, clip_id: str, split: str) -> ClipRecord:
    base = root / clip_id
    rec = ClipRecord(clip_id, clip.spec.seed, split, [], [], [], [], [], [])
    for t, (c, g) in enumerate(zip(clip.color, clip.gray)):
        name = FRAME_PATTERN.format(t)
        save_png(c, base / "color" / name)
        save_png(g, base / "gray" / name)
        rec.frames_color.append(f"{clip_id}/color/{name}")
        rec.frames_gray.append(f"{clip_id}/gray/{name}")
    for t in range(len(clip.flows_fwd)):
        stem = f"{t:06d}"
        write_flo(clip.flows_fwd[t], base / "flow_fwd" / f"{stem}.flo")
        write_flo(clip.flows_bwd[t], base / "flow_bwd" / f"{stem}.flo")
        save_png(clip.occ_fwd[t].astype(np.float32), base / "occ_fwd" / f"{stem}.png")
        save_png(clip.occ_bwd[t].astype(np.float32), base / "occ_bwd" / f"{stem}.png")
        rec.flows_fwd.append(f"{clip_id}/flow_fwd/{stem}.flo")
        rec.flows_bwd.append(f"{clip_id}/flow_bwd/{stem}.flo")
        rec.occlusion_fwd.append(f"{clip_id}/occ_fwd/{stem}.png")
        rec.occlusion_bwd.append(f"{clip_id}/occ_bwd/{stem}.png")
    return rec


def make_dataset(n_clips: int, base_seed: int, out_dir, height: int = 64, width: int = 64,
                 frames: int = 8, texture_noise: float = 0.05, config: Optional[Dict] = None) -> Manifest:
    """Write ``n_clips`` clips plus ``manifest.json`` under ``out_dir``."""
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_clips):
        seed = clip_seed(base_seed, i)
        spec = random_scene(seed, height, width, frames, texture_noise=texture_noise)
        records.append(save_clip(generate_clip(spec), root, f"clip_{i:04d}", split_for(i, n_clips)))
        log.debug("wrote clip %d/%d", i + 1, n_clips)
    cfg = dict(config or {})
    cfg.update(height=height, width=width, frames=frames, texture_noise=texture_noise)
    manifest = Manifest(root, int(base_seed), records, cfg)
    (root / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True) + "\n")
    return manifest


def load_manifest(path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text())
    clips = [ClipRecord(**c) for c in doc["clips"]]
    return Manifest(path.parent, int(doc["base_seed"]), clips, doc.get("config", {}))


@dataclass
class LoadedClip:
    record: ClipRecord
    color: VideoClip
    gray: VideoClip
    flows_fwd: List[np.ndarray]
    flows_bwd: List[np.ndarray]
    occ_fwd: List[np.ndarray]
    occ_bwd: List[np.ndarray]

    def flow_between(self, s: int, t: int) -> Tuple[np.ndarray, np.ndarray]:
        """Flow on frame ``s``'s grid into adjacent frame ``t`` and its mask."""
        if t == s + 1:
            return self.flows_fwd[s], self.occ_fwd[s]
        if t == s - 1:
            return self.flows_bwd[t], self.occ_bwd[t]
        raise ValueError(f"ground-truth flow only links adjacent frames, got {s}->{t}")


def load_clip(manifest: Manifest, record: ClipRecord) -> LoadedClip:
    root = manifest.root

    def mask(p):
        return load_png(root / p)[:, :, 0] > 0.5

    return LoadedClip(
        record,
        VideoClip([load_png(root / p) for p in record.frames_color]),
        VideoClip([load_png(root / p) for p in record.frames_gray]),
        [read_flo(root / p) for p in record.flows_fwd],
        [read_flo(root / p) for p in record.flows_bwd],
        [mask(p) for p in record.occlusion_fwd],
        [mask(p) for p in record.occlusion_bwd],
    )

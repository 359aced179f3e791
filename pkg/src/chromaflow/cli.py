"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O or file-format
error, 3 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from . import __version__, evalkit, imagecore, synthdata
from .bilateral import KnnParams, build_knn_graph
from .config import RunConfig, load_config
from .errors import ConfigError, FormatError, NumericError
from .flow import estimate_flow, read_flo, write_flo
from .imagecore import VideoClip
from .neural.weights import load_weights, save_weights
from .pipeline import (InferConfig, Models, TrainingData, build_models, colorize_video, flows_to_operators,
                       train_colorizer, train_joint)

log = logging.getLogger("chromaflow")

WEIGHT_FILES = {"f": "colorizer.cwf", "g": "refiner.cwf", "phi": "phi.cwf"}
LOSS_FILE = "losses.jsonl"
CONFIG_ECHO = "config.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _provenance(cfg: RunConfig) -> Dict:
    return {"config": cfg.to_dict(), "seed": cfg.train.seed, "version": __version__}


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(models: Models, cfg: RunConfig, out: Path, trained: Sequence[str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    meta = {**_provenance(cfg), "trained": list(trained)}
    for key, name in WEIGHT_FILES.items():
        save_weights(getattr(models, key).state(meta), out / name)
    (out / CONFIG_ECHO).write_text(_dump(_provenance(cfg)))


def load_checkpoint(path, cfg: Optional[RunConfig] = None,
                    sections: Sequence[str] = ("model", "train")) -> (Models, RunConfig):
    """Rebuild models from a checkpoint directory; stored ``sections`` replace those of ``cfg``."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"checkpoint directory not found: {path}")
    cfg = cfg or RunConfig()
    echo = path / CONFIG_ECHO
    if echo.exists():
        stored = RunConfig.from_dict(json.loads(echo.read_text())["config"]).to_dict()
        doc = cfg.to_dict()
        doc.update({name: stored[name] for name in sections})
        cfg = RunConfig.from_dict(doc)
    models = build_models(cfg.model)
    for key, name in WEIGHT_FILES.items():
        net = getattr(models, key)
        file = path / name
        if key == "g" and not file.exists():
            continue
        net.load_state(load_weights(file, fingerprint=net.fingerprint))
    return models, cfg


# ---------------------------------------------------------------- subcommands

def cmd_synth_gen(args, cfg: RunConfig) -> int:
    cfg = cfg.override("data", clips=args.clips, seed=args.seed, height=args.height, width=args.width,
                       frames=args.frames)
    d = cfg.data
    manifest = synthdata.make_dataset(d.clips, d.seed, args.out, d.height, d.width, d.frames, d.texture_noise,
                                      config=_provenance(cfg))
    counts = {s: len(manifest.split(s)) for s in synthdata.SPLITS}
    log.info("wrote %d clips to %s (%s)", len(manifest.clips), args.out, counts)
    return 0


def cmd_flow_estimate(args, cfg: RunConfig) -> int:
    a = imagecore.load_png(args.frame_a)
    b = imagecore.load_png(args.frame_b)
    if a.shape[:2] != b.shape[:2]:
        raise UsageError(f"frames differ in size: {a.shape[:2]} vs {b.shape[:2]}")
    flow = estimate_flow(a, b, cfg.flow)
    write_flo(flow, args.out)
    mag = np.hypot(flow[..., 0], flow[..., 1])
    log.info("wrote %s (mean |flow| %.3f px)", args.out, float(mag.mean()))
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    cfg = cfg.override("train", epochs=args.epochs, joint_epochs=args.joint_epochs, seed=args.seed, lr=args.lr)
    manifest = synthdata.load_manifest(args.data)
    out = Path(args.out)
    if args.phase == "joint":
        if args.init is None:
            raise UsageError("--phase joint needs --init with a trained colorizer checkpoint")
        models, cfg = load_checkpoint(args.init, cfg, sections=("model",))
    else:
        models = build_models(cfg.model)
    tc = cfg.train
    data = TrainingData(manifest, "train", knn=tc.knn, flow_cfg=cfg.flow)
    val = TrainingData(manifest, "val", knn=tc.knn, flow_cfg=cfg.flow) if manifest.split("val") else None
    out.mkdir(parents=True, exist_ok=True)
    trained = []
    with open(out / LOSS_FILE, "w") as fh:
        fh.write(json.dumps({"event": "config", **_provenance(cfg)}, sort_keys=True) + "\n")

        def record(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            if tc.checkpoint_every and rec.get("epoch", 0) and rec["epoch"] % tc.checkpoint_every == 0:
                save_checkpoint(models, cfg, out / f"epoch_{rec['phase']}_{rec['epoch']:04d}", trained)

        if args.phase in ("f", "both"):
            train_colorizer(data, tc, models, on_epoch=record)
            trained.append("f")
        if args.phase in ("joint", "both"):
            train_joint(data, tc, models, on_epoch=record, val=val)
            trained.append("g")
    save_checkpoint(models, cfg, out, trained)
    log.info("saved checkpoint to %s", out)
    return 0


def _read_input_frames(directory) -> VideoClip:
    clip = imagecore.load_video(directory)
    if clip.channels == 3:
        clip = VideoClip([imagecore.to_grayscale(f) for f in clip.frames], clip.frame_rate)
    return clip


def _read_flow_dir(directory, n_frames: int):
    """Flows laid out like a generated clip: ``flow_fwd/``, ``flow_bwd/`` and optional ``occ_*``."""
    directory = Path(directory)
    flows, masks = {}, {}
    for t in range(n_frames - 1):
        stem = imagecore.FRAME_PATTERN.format(t)[:-4]
        flows[(t, t + 1)] = read_flo(directory / "flow_fwd" / f"{stem}.flo")
        flows[(t + 1, t)] = read_flo(directory / "flow_bwd" / f"{stem}.flo")
        for sub, key in (("occ_fwd", (t, t + 1)), ("occ_bwd", (t + 1, t))):
            p = directory / sub / f"{stem}.png"
            if p.exists():
                masks[key] = imagecore.load_png(p)[:, :, 0] > 0.5
    return flows, masks


def cmd_colorize(args, cfg: RunConfig) -> int:
    models, cfg = load_checkpoint(args.weights, cfg)
    cfg = cfg.override("infer", passes=args.passes, lambda_t=args.lambda_t, select_mode=args.select_mode,
                       index_k=args.index_k)
    gray = _read_input_frames(args.input)
    operators = None
    if args.flows is not None:
        if cfg.infer.lambda_t > 1:
            raise UsageError("--flows provides adjacent-frame flows only; use lambda_t = 1")
        flows, masks = _read_flow_dir(args.flows, len(gray))
        operators = flows_to_operators(flows, masks)
    result = colorize_video(gray, models, cfg.infer, cfg.flow, operators)
    out = Path(args.out)
    write_all = args.all_candidates or cfg.infer.select_mode == "all"
    written = []
    for k, stream in enumerate(result.streams):
        if write_all or k == result.selected:
            imagecore.save_video(stream, out / f"candidate_{k}")
            written.append(k)
    doc = {"selected": result.selected, "saturations": result.saturations, "written": written,
           "frames": len(gray), **_provenance(cfg)}
    (out / "selection.json").write_text(_dump(doc))
    log.info("selected candidate %d of %d", result.selected, len(result.streams))
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    models, cfg = load_checkpoint(args.weights, cfg)
    cfg = cfg.override("eval", split=args.split).override("infer", passes=args.passes)
    manifest = synthdata.load_manifest(args.data)
    records = manifest.split(cfg.eval.split)
    if not records:
        raise UsageError(f"split {cfg.eval.split!r} is empty")
    results, truths = [], []
    for rec in records:
        clip = synthdata.load_clip(manifest, rec)
        results.append((rec.clip_id, colorize_video(clip.gray, models, cfg.infer, cfg.flow, keep_history=True)))
        truths.append(clip)
    report = evalkit.evaluate(results, truths, models.phi, _provenance(cfg))
    report.write(args.out)
    agg = report.aggregate()
    log.info("psnr %.2f dB (gray %.2f), warp error %.4f (unrefined %.4f)", agg["psnr_mean"],
             agg["gray_psnr_mean"], agg["warp_error"], agg["warp_error_unrefined"])
    return 0


def _knn_overlay(frame: np.ndarray, points_p, points_q, scale: int = 4) -> Image.Image:
    rgb = imagecore.to_bytes(frame if frame.shape[2] == 3 else imagecore.gray_to_rgb(frame))
    img = Image.fromarray(rgb).resize((rgb.shape[1] * scale, rgb.shape[0] * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    half = scale // 2
    for (py, px), (qy, qx) in zip(points_p, points_q):
        draw.line([(px * scale + half, py * scale + half), (qx * scale + half, qy * scale + half)],
                  fill=(255, 255, 0), width=1)
    for py, px in points_p:
        draw.point((px * scale + half, py * scale + half), fill=(255, 0, 0))
    return img


def cmd_inspect_knn(args, cfg: RunConfig) -> int:
    tc = cfg.train
    params = KnnParams(k=args.k if args.k is not None else tc.knn_k,
                       lambda_b=args.lambda_b if args.lambda_b is not None else tc.knn_lambda,
                       sample_size=args.sample_size if args.sample_size is not None else tc.knn_sample_size,
                       seed=args.seed if args.seed is not None else 0)
    frame = imagecore.load_png(args.frame)
    if frame.shape[2] == 1:
        frame = imagecore.gray_to_rgb(frame)
    graph = build_knn_graph(frame, params)
    p, q = graph.edges()
    w = frame.shape[1]
    py, px, qy, qx = p // w, p % w, q // w, q % w
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "edges.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["p_y", "p_x", "q_y", "q_x", "sq_distance"])
        pts = graph.points
        node_of = {int(n): i for i, n in enumerate(graph.nodes)}
        for a, b, c, e in zip(py, px, qy, qx):
            i, j = node_of[int(a * w + b)], node_of[int(c * w + e)]
            writer.writerow([int(a), int(b), int(c), int(e), f"{float(np.sum((pts[i] - pts[j]) ** 2)):.8g}"])
    _knn_overlay(frame, list(zip(py, px)), list(zip(qy, qx))).save(out / "overlay.png")
    (out / "graph.json").write_text(_dump({"nodes": int(len(graph.nodes)), "edges": int(graph.num_edges),
                                           "k": params.k, "lambda_b": params.lambda_b,
                                           "sample_size": params.sample_size, "seed": params.seed}))
    log.info("%d nodes, %d edges -> %s", len(graph.nodes), graph.num_edges, out)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="chromaflow", description="Video colorization with self-regularization and diversity.")
    p.add_argument("--version", action="version", version=f"chromaflow {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("--workers", type=int, default=1, help="upper bound on worker processes (runs are serial)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="run configuration JSON")
        return sp

    sp = common(sub.add_parser("synth-gen", help="generate a synthetic clip dataset"))
    sp.add_argument("--clips", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--height", type=int)
    sp.add_argument("--width", type=int)
    sp.add_argument("--frames", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth_gen)

    sp = common(sub.add_parser("flow-estimate", help="estimate optical flow between two frames"))
    sp.add_argument("frame_a")
    sp.add_argument("frame_b")
    sp.add_argument("out")
    sp.set_defaults(func=cmd_flow_estimate)

    sp = common(sub.add_parser("train", help="train the colorizer and/or the refiner"))
    sp.add_argument("--data", required=True, help="dataset directory or manifest.json")
    sp.add_argument("--out", required=True, help="checkpoint directory")
    sp.add_argument("--phase", choices=("f", "joint", "both"), default="both")
    sp.add_argument("--init", help="checkpoint to start the joint phase from")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--joint-epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("colorize", help="colorize a directory of grayscale frames"))
    sp.add_argument("--weights", required=True, help="checkpoint directory")
    sp.add_argument("--input", required=True, help="directory of frames named 000000.png, ...")
    sp.add_argument("--out", required=True)
    sp.add_argument("--all-candidates", action="store_true", help="write every candidate stream")
    sp.add_argument("--flows", help="directory with flow_fwd/ and flow_bwd/ .flo files")
    sp.add_argument("--passes", type=int)
    sp.add_argument("--lambda-t", type=int)
    sp.add_argument("--select-mode", choices=("max_saturation", "index_k", "all"))
    sp.add_argument("--index-k", type=int)
    sp.set_defaults(func=cmd_colorize)

    sp = common(sub.add_parser("eval", help="evaluate a checkpoint on a dataset split"))
    sp.add_argument("--weights", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="report JSON path")
    sp.add_argument("--split", choices=synthdata.SPLITS)
    sp.add_argument("--passes", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("inspect-knn", help="dump the bilateral KNN graph of a frame"))
    sp.add_argument("--frame", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--k", type=int)
    sp.add_argument("--lambda-b", type=float)
    sp.add_argument("--sample-size", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_inspect_knn)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (ConfigError, UsageError) as exc:
        log.error("%s", exc)
        return 1
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return 3
    except (OSError, FormatError) as exc:
        log.error("I/O error: %s", exc)
        return 2
    except ValueError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())

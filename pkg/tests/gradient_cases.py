"""Seeded gradient-check cases for every autodiff primitive and every loss.

Inputs keep away from the kinks of abs, leaky ReLU, ReLU, clip and min by a
margin far larger than the finite-difference step.
"""

import numpy as np

from chromaflow import bilateral as bl
from chromaflow import losses
from chromaflow.flow import WarpOperator
from chromaflow.neural import autodiff as ad
from chromaflow.neural.nets import FeatureExtractor


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _cases():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((1, 3, 8, 8))
    y = rng.standard_normal((1, 3, 8, 8))
    kinky = _away_from_zero(rng, (2, 3, 4, 4))
    cases = {
        "add": (lambda a, b: ad.add(a, b), [x, rng.standard_normal((1, 3, 1, 8))]),
        "sub": (lambda a, b: ad.sub(a, b), [x, y]),
        "mul": (lambda a, b: ad.mul(a, b), [x, rng.standard_normal((1, 1, 8, 8))]),
        "mul_scalar": (lambda a: ad.mul_scalar(a, -2.5), [x]),
        "abs": (ad.abs, [kinky]),
        "leaky_relu": (ad.leaky_relu, [kinky]),
        "relu": (ad.relu, [kinky]),
        "clamp01": (ad.clamp01, [x]),
        "clip": (lambda a: ad.clip(a, -0.5, 0.5), [np.where(np.abs(kinky) > 0.5, kinky * 1.2, kinky * 0.8)]),
        "sum": (lambda a: ad.sum(a, axis=(1, 3)), [x]),
        "sum_all": (ad.sum, [x]),
        "mean": (lambda a: ad.mean(a, axis=1, keepdims=True), [x]),
        "amin": (lambda a: ad.amin(a, axis=-1), [np.array([[0.1, 0.5, 0.9], [1.0, 0.3, 0.6]])]),
        "reshape": (lambda a: ad.reshape(a, (3, 64)), [x]),
        "getitem": (lambda a: a[:, 1:, 2:6], [x]),
        "concat": (lambda a, b: ad.concat([a, b], axis=1), [x, y[:, :2]]),
        "take": (lambda a: ad.take(a, np.array([0, 5, 5, 63, 17])), [x]),
        "l2_normalize": (lambda a: ad.l2_normalize(a, axis=1), [x]),
        "conv2d": (ad.conv2d, [x, rng.standard_normal((4, 3, 3, 3)) * 0.3, rng.standard_normal(4)]),
        "conv1x1": (ad.conv1x1, [x, rng.standard_normal((5, 3)), rng.standard_normal(5)]),
        "downsample": (ad.downsample, [x]),
        "upsample": (lambda a: ad.upsample(a, 2), [x]),
        "upsample4": (lambda a: ad.upsample(a, 4), [x[:, :, :4, :4]]),
    }
    flow = rng.uniform(-1.5, 1.5, size=(8, 8, 2))
    op = WarpOperator.from_flow(flow)
    cases["warp"] = (lambda a: ad.warp(a, op), [x])

    # ---- losses
    frame = rng.random((8, 8, 3))
    graph = bl.build_knn_graph(frame, bl.KnnParams(k=3, sample_size=24, seed=2))
    base = rng.random((2, 3, 8, 8))
    offsets = _away_from_zero(rng, (2, 3, 8, 8), 0.02) * 0.2
    cases["loss_bilateral"] = (lambda c: bl.bilateral_loss(c, graph), [base + offsets])

    mask = rng.random((8, 8)) > 0.3
    cand_t1 = rng.random((2, 3, 8, 8))
    warped_t1 = op.apply(cand_t1.reshape(6, 64).T.reshape(8, 8, 6)).reshape(64, 6).T.reshape(2, 3, 8, 8)
    cand_t = warped_t1 + _away_from_zero(rng, (2, 3, 8, 8), 0.02) * 0.3
    cases["loss_temporal_f"] = (
        lambda a, b: losses.temporal_loss_f(a, ad.warp(b, op), mask & op.valid).value, [cand_t, cand_t1])

    c_s = rng.uniform(0.2, 0.8, size=(2, 3, 8, 8))
    # per-pixel channel-mean differences well inside (0, 1/alpha)
    diff = rng.uniform(0.01, 0.05, size=(2, 1, 8, 8)) * rng.choice([-1, 1], size=(2, 1, 8, 8))
    warped_c = c_s + diff + rng.uniform(-0.003, 0.003, size=(2, 3, 8, 8))
    conf = losses.ConfidenceParams(15.0, True)
    cases["loss_confidence"] = (lambda a, b: losses.confidence_map(a, b, mask, conf), [c_s, warped_c])
    cases["loss_confidence_composed"] = (
        lambda a, b: losses.temporal_loss_g(ad.mul(a, losses.confidence_map(a, b, mask, conf)), b),
        [c_s, warped_c])

    y_s = rng.random((2, 3, 8, 8))
    cases["loss_temporal_g"] = (lambda a: losses.temporal_loss_g(a, y_s),
                                [y_s + _away_from_zero(rng, (2, 3, 8, 8), 0.02) * 0.2])

    # a narrow bank keeps the number of leaky-ReLU kinks near any probe small
    phi = FeatureExtractor(seed=5, widths=(4, 4, 4))
    target = rng.random((3, 8, 8))
    cands = np.stack([target + 0.2 * rng.standard_normal((3, 8, 8)) * (i + 1) for i in range(3)])
    params = losses.DiversityParams(3, (0.3, 0.15, 0.075))
    cases["loss_diversity"] = (lambda c: losses.diversity_loss(c, target, phi, params), [cands])
    cases["loss_diversity_rank_sorted"] = (
        lambda c: losses.diversity_loss(c, target, phi, losses.DiversityParams(3, (0.3, 0.15, 0.075), True)),
        [cands])
    cases["loss_self_reg_total"] = (
        lambda a, b: losses.self_reg_total(ad.mean(ad.mul(a, a)), ad.sum(b), ad.mean(ad.abs(b)), (2.0, 0.5, 1.0)),
        [x, kinky])
    return cases


CASES = _cases()

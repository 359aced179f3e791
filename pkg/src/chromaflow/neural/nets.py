"""The colorizer f, the refiner g and the frozen feature bank phi.

All three share the same building blocks: 3x3 convolutions with leaky ReLU,
2x average-pool downsampling and bilinear 2x upsampling. Tensors are
``(N, C, H, W)``; images passed in from :mod:`chromaflow.imagecore` are
``(H, W, C)`` and converted with :func:`image_to_tensor`.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .weights import NetworkWeights

WIDTHS = (16, 32, 64)


def image_to_tensor(img) -> np.ndarray:
    """``(H, W, C)`` or a stack ``(N, H, W, C)`` to channel-first float32."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim == 3:
        return np.ascontiguousarray(arr.transpose(2, 0, 1))
    if arr.ndim == 4:
        return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))
    raise ValueError(f"cannot convert array of shape {arr.shape} to a tensor")


def tensor_to_image(t) -> np.ndarray:
    arr = t.data if isinstance(t, ad.Tensor) else np.asarray(t)
    if arr.ndim == 3:
        return np.ascontiguousarray(arr.transpose(1, 2, 0))
    if arr.ndim == 4:
        return np.ascontiguousarray(arr.transpose(0, 2, 3, 1))
    raise ValueError(f"cannot convert tensor of shape {arr.shape} to an image")


class Module:
    """Named parameters plus persistence; subclasses set ``fingerprint``."""

    fingerprint = ""

    def __init__(self):
        self.params: "OrderedDict[str, ad.Tensor]" = OrderedDict()

    def _param(self, name, arr, trainable=True):
        self.params[name] = ad.Tensor(np.asarray(arr, dtype=np.float32), requires_grad=trainable)

    def _conv(self, rng, name, cin, cout, ksize=3, zero=False):
        fan_in = cin * ksize * ksize
        shape = (cout, cin, ksize, ksize) if ksize == 3 else (cout, cin)
        w = np.zeros(shape) if zero else rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        self._param(f"{name}.w", w)
        self._param(f"{name}.b", np.zeros(cout))

    def conv(self, name, x):
        w, b = self.params[f"{name}.w"], self.params[f"{name}.b"]
        if w.ndim == 4:
            return ad.conv2d(x, w, b)
        return ad.conv1x1(x, w, b)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def grads(self) -> Dict[str, np.ndarray]:
        return {k: p.grad for k, p in self.params.items() if p.grad is not None}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.params.values()]))

    def state(self, meta=None) -> NetworkWeights:
        return NetworkWeights(OrderedDict((k, p.data.copy()) for k, p in self.params.items()),
                              self.fingerprint, dict(meta or {}))

    def load_state(self, weights: NetworkWeights):
        if weights.fingerprint != self.fingerprint:
            raise ValueError(f"fingerprint {weights.fingerprint!r} does not match {self.fingerprint!r}")
        if list(weights.params) != list(self.params):
            raise ValueError("parameter names differ from the architecture")
        for name, arr in weights.params.items():
            if arr.shape != self.params[name].shape:
                raise ValueError(f"{name}: shape {arr.shape} vs {self.params[name].shape}")
            self.params[name].data = arr.astype(np.float32).copy()
        return self


class _UNet(Module):
    """Three-level encoder/decoder with skip concatenation."""

    def _build_trunk(self, rng, cin, widths):
        w1, w2, w3 = widths
        self._conv(rng, "enc1.a", cin, w1)
        self._conv(rng, "enc1.b", w1, w1)
        self._conv(rng, "enc2.a", w1, w2)
        self._conv(rng, "enc2.b", w2, w2)
        self._conv(rng, "mid.a", w2, w3)
        self._conv(rng, "mid.b", w3, w3)
        self._conv(rng, "dec2.a", w3 + w2, w2)
        self._conv(rng, "dec2.b", w2, w2)
        self._conv(rng, "dec1.a", w2 + w1, w1)
        self._conv(rng, "dec1.b", w1, w1)

    def _block(self, name, x):
        x = ad.leaky_relu(self.conv(f"{name}.a", x))
        return ad.leaky_relu(self.conv(f"{name}.b", x))

    def trunk(self, x):
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"frame size {h}x{w} must be divisible by 4")
        e1 = self._block("enc1", x)
        e2 = self._block("enc2", ad.downsample(e1))
        m = self._block("mid", ad.downsample(e2))
        d2 = self._block("dec2", ad.concat([ad.upsample(m), e2], axis=1))
        return self._block("dec1", ad.concat([ad.upsample(d2), e1], axis=1))


class FeatureExtractor(Module):
    """Frozen random convolutional bank used as the perceptual feature map.

    Three stages (16/32/64 channels, stride 2 between stages). Each stage is
    L2-normalised across channels per pixel, upsampled to input size and
    concatenated into a 112-channel hypercolumn.
    """

    def __init__(self, seed: int = 1234, widths: Sequence[int] = WIDTHS):
        super().__init__()
        self.widths = tuple(widths)
        self.seed = seed
        self.fingerprint = f"phi/v1:widths={','.join(map(str, self.widths))}"
        rng = np.random.default_rng(seed)
        cin = 3
        for i, cout in enumerate(self.widths):
            self._param(f"s{i + 1}.w", rng.normal(0.0, np.sqrt(2.0 / (9 * cin)), size=(cout, cin, 3, 3)), False)
            self._param(f"s{i + 1}.b", rng.normal(0.0, 0.1, size=cout), False)
            cin = cout

    @property
    def channels(self) -> int:
        return int(np.sum(self.widths))

    def load_state(self, weights):
        super().load_state(weights)
        for p in self.params.values():
            p.requires_grad = False
        return self

    def stages(self, x) -> List[ad.Tensor]:
        x = ad.tensor(x)
        if x.shape[1] == 1:
            x = ad.concat([x, x, x], axis=1)
        h = ad.tensor(x) - 0.5
        out = []
        for i in range(len(self.widths)):
            if i:
                h = ad.downsample(h)
            h = ad.leaky_relu(self.conv(f"s{i + 1}", h))
            out.append(h)
        return out

    def hypercolumn_tensor(self, x) -> ad.Tensor:
        """``(N, 1|3, H, W)`` input to ``(N, 112, H, W)`` features."""
        maps = []
        for i, s in enumerate(self.stages(x)):
            s = ad.l2_normalize(s, axis=1)
            if i:
                s = ad.upsample(s, 2 ** i)
            maps.append(s)
        return ad.concat(maps, axis=1)

    def __call__(self, x) -> ad.Tensor:
        return self.hypercolumn_tensor(x)


def hypercolumn(phi: FeatureExtractor, gray) -> ad.Tensor:
    """Hypercolumn of a single ``(H, W, 1)`` grayscale image, shape ``(112, H, W)``."""
    arr = np.asarray(gray, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] != 1:
        raise ValueError(f"hypercolumn expects a grayscale image, got {arr.shape}")
    with ad.no_grad():
        return ad.Tensor(phi(image_to_tensor(arr)[None]).data[0])


class ColorizerNet(_UNet):
    """Gray frame plus reduced hypercolumn in, ``d`` RGB candidates out."""

    def __init__(self, d: int = 4, reduced_channels: int = 32, feature_channels: int = 112,
                 widths: Sequence[int] = WIDTHS, seed: int = 0):
        super().__init__()
        self.d = d
        self.feature_channels = feature_channels
        self.reduced_channels = reduced_channels
        self.widths = tuple(widths)
        self.fingerprint = (f"colorizer/v1:d={d};features={feature_channels}->{reduced_channels};"
                            f"widths={','.join(map(str, self.widths))}")
        rng = np.random.default_rng(seed)
        self._conv(rng, "reduce", feature_channels, reduced_channels, ksize=1)
        self._build_trunk(rng, 1 + reduced_channels, self.widths)
        self._conv(rng, "head", self.widths[0], 3 * d, ksize=1)

    def forward(self, gray, features) -> ad.Tensor:
        """``gray`` (N,1,H,W), ``features`` (N,F,H,W) -> candidates (N,d,3,H,W)."""
        gray, features = ad.tensor(gray), ad.tensor(features)
        n, _, h, w = gray.shape
        x = ad.concat([gray, self.conv("reduce", features)], axis=1)
        out = ad.clamp01(self.conv("head", self.trunk(x)))
        return ad.reshape(out, (n, self.d, 3, h, w))

    def __call__(self, gray, phi: FeatureExtractor) -> ad.Tensor:
        gray = ad.tensor(gray)
        with ad.no_grad():
            feats = phi(gray)
        return self.forward(gray, feats)


def colorize_forward(net: ColorizerNet, phi: FeatureExtractor, gray) -> List[np.ndarray]:
    """Run f on one ``(H, W, 1)`` frame; returns ``d`` ``(H, W, 3)`` images."""
    arr = np.asarray(gray, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[0] % 4 or arr.shape[1] % 4:
        raise ValueError(f"frame size {arr.shape[:2]} must be divisible by 4")
    with ad.no_grad():
        out = net(image_to_tensor(arr)[None], phi).data[0]
    return [tensor_to_image(c) for c in out]


class RefinerNet(_UNet):
    """Residual temporal refiner.

    Input channels: the frame to refine (3), the warped neighbour (3), the
    colour confidence map (1) and the gray confidence map (1). The correction
    head starts at zero so a fresh refiner is the identity.

    With ``gated`` the head emits four channels: an additive colour term ``b``
    and a per-pixel gate ``a`` that pulls the frame towards the warped
    neighbour where the colour confidence allows it::

        out = clip(C_s + a * W_color * (warp(C_t) - C_s) + b, 0, 1)
    """

    in_channels = 8

    def __init__(self, widths: Sequence[int] = WIDTHS, seed: int = 1, gated: bool = True):
        super().__init__()
        self.widths = tuple(widths)
        self.gated = gated
        self.fingerprint = (f"refiner/v1:in=8;widths={','.join(map(str, self.widths))}"
                            + (";gated" if gated else ""))
        rng = np.random.default_rng(seed)
        self._build_trunk(rng, self.in_channels, self.widths)
        self._conv(rng, "head", self.widths[0], 4 if gated else 3, ksize=1, zero=True)

    def forward(self, c_s, warped, w_color, w_gray) -> ad.Tensor:
        parts = [ad.tensor(t) for t in (c_s, warped, w_color, w_gray)]
        sizes = {tuple(p.shape[-2:]) for p in parts}
        if len(sizes) != 1:
            raise ValueError(f"refiner inputs differ in size: {sizes}")
        x = ad.concat(parts, axis=1)
        head = self.conv("head", self.trunk(x))
        if not self.gated:
            return ad.clip(parts[0] + head, 0.0, 1.0)
        b, a = head[:, :3], head[:, 3:]
        pull = ad.mul(ad.mul(a, parts[2]), parts[1] - parts[0])
        return ad.clip(parts[0] + pull + b, 0.0, 1.0)

    __call__ = forward


def refine_forward(net: RefinerNet, c_s, warped_c_t, w_color, w_gray) -> np.ndarray:
    """Image-level wrapper: ``(H, W, 3)`` frames and ``(H, W[, 1])`` maps."""
    def prep(a):
        return image_to_tensor(np.asarray(a, dtype=np.float32))[None]
    with ad.no_grad():
        out = net(prep(c_s), prep(warped_c_t), prep(w_color), prep(w_gray))
    return tensor_to_image(out.data[0])

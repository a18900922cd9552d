"""Sphere-U-Net generator and convolutional discriminator."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import ops
from .autodiff import Tensor
from .geometry import build_conv_grid, build_pool_grid


class ConfigError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    height: int = 64
    width: int = 128
    channels: tuple = (16, 32, 64, 128)
    conv_mode: str = "spherical"
    in_channels: int = 4

    def validate(self):
        if self.width != 2 * self.height:
            raise ConfigError(f"width must be 2 * height, got {self.height}x{self.width}")
        if self.height % 8:
            raise ConfigError(f"height must be divisible by 8, got {self.height}")
        if self.height // 8 < 4 and self.conv_mode == "spherical":
            raise ConfigError("spherical mode needs height >= 32 (bottleneck grids need >= 4 rows)")
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise ConfigError(f"need 4 positive encoder widths, got {self.channels}")
        if self.conv_mode not in ("spherical", "planar"):
            raise ConfigError(f"conv_mode must be 'spherical' or 'planar', got {self.conv_mode!r}")
        if self.in_channels != 4:
            raise ConfigError("generator input is RGB frame + previous saliency map (4 channels)")


@dataclass
class DiscriminatorConfig:
    height: int = 64
    width: int = 128
    channels: tuple = (16, 32, 64, 64)
    dropout: float = 0.5

    def validate(self):
        if self.height % 8 or self.width % 8:
            raise ConfigError(f"discriminator input must be divisible by 8, got {self.height}x{self.width}")
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise ConfigError(f"need 4 positive conv widths, got {self.channels}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def feature_length(self):
        return self.channels[3] * (self.height // 8) * (self.width // 8)


def he_init(shape, fan_in, rng, dtype=np.float32):
    """Zero-mean normal weights with std sqrt(2 / fan_in)."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


@lru_cache(maxsize=None)
def _conv_grid(height):
    return build_conv_grid(height, 2 * height)


@lru_cache(maxsize=None)
def _pool_grid(height):
    return build_pool_grid(height, 2 * height)


class Network:
    """Named parameter tensors plus batch-norm running statistics."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def _conv(self, name, cin, cout, rng, taps=9, bn=True):
        self.params[f"{name}.weight"] = Tensor(he_init((cout, cin, taps), cin * taps, rng), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout, np.float32), requires_grad=True)
        if bn:
            self.params[f"{name}.bn.scale"] = Tensor(np.ones(cout, np.float32), requires_grad=True)
            self.params[f"{name}.bn.shift"] = Tensor(np.zeros(cout, np.float32), requires_grad=True)
            self.buffers[f"{name}.bn.running_mean"] = np.zeros(cout, np.float32)
            self.buffers[f"{name}.bn.running_var"] = np.ones(cout, np.float32)

    def _bn(self, name, x, train):
        return ops.batchnorm(
            x, self.params[f"{name}.bn.scale"], self.params[f"{name}.bn.shift"],
            self.buffers[f"{name}.bn.running_mean"], self.buffers[f"{name}.bn.running_var"], train,
        )

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self):
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}

    def num_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    def describe(self):
        """Rows of (layer, parameter shapes, count) in construction order."""
        rows = {}
        for name, p in self.params.items():
            layer = name.split(".")[0]
            shapes, count = rows.get(layer, ([], 0))
            shapes.append(f"{name[len(layer) + 1:]}{list(p.data.shape)}")
            rows[layer] = (shapes, count + p.data.size)
        return [(layer, " ".join(shapes), count) for layer, (shapes, count) in rows.items()]


class Generator(Network):
    """U-Net with 4 encoder convs, 3 max-pools, 3 upsamplings and 3 decoder convs."""

    ENCODER = ("enc1", "enc2", "enc3", "enc4")
    DECODER = ("dec1", "dec2", "dec3")

    def __init__(self, config: GeneratorConfig, rng):
        super().__init__()
        config.validate()
        self.config = config
        c1, c2, c3, c4 = config.channels
        self._conv("enc1", config.in_channels, c1, rng)
        self._conv("enc2", c1, c2, rng)
        self._conv("enc3", c2, c3, rng)
        self._conv("enc4", c3, c4, rng)
        self._conv("dec1", c4 + c3, c3, rng)
        self._conv("dec2", c3 + c2, c2, rng)
        self._conv("dec3", c2 + c1, 1, rng, bn=False)

    def _apply_conv(self, name, x):
        w, b = self.params[f"{name}.weight"], self.params[f"{name}.bias"]
        if self.config.conv_mode == "planar":
            cout, cin, _ = w.data.shape
            return ops.conv2d(x, ops.reshape(w, (cout, cin, 3, 3)), b, stride=1, padding=1)
        return ops.sphere_conv2d(x, w, b, _conv_grid(x.data.shape[2]))

    def _pool(self, x):
        if self.config.conv_mode == "planar":
            return ops.maxpool2d(x)
        return ops.sphere_maxpool(x, _pool_grid(x.data.shape[2]))

    def _block(self, name, x, train):
        return ops.relu(self._bn(name, self._apply_conv(name, x), train))

    def forward(self, frame, sal_prev, train=False):
        """Predict the saliency map at t from the frame at t and a map at t - k.

        Accepts single items (3xHxW, 1xHxW) or batches (Nx3xHxW, Nx1xHxW).
        """
        frame = frame if isinstance(frame, Tensor) else Tensor(np.asarray(frame, np.float32))
        sal_prev = sal_prev if isinstance(sal_prev, Tensor) else Tensor(np.asarray(sal_prev, np.float32))
        single = frame.data.ndim == 3
        if single:
            frame = ops.reshape(frame, (1, *frame.data.shape))
            sal_prev = ops.reshape(sal_prev, (1, *sal_prev.data.shape))
        n, cf, h, w = frame.data.shape
        if (h, w) != (self.config.height, self.config.width) or cf + sal_prev.data.shape[1] != self.config.in_channels:
            raise ConfigError(
                f"generator built for 4x{self.config.height}x{self.config.width}, "
                f"got frame {frame.data.shape} and map {sal_prev.data.shape}"
            )
        z = ops.concat([frame, sal_prev], axis=1)

        e1 = self._block("enc1", z, train)
        e2 = self._block("enc2", self._pool(e1), train)
        e3 = self._block("enc3", self._pool(e2), train)
        e4 = self._block("enc4", self._pool(e3), train)
        d1 = self._block("dec1", ops.concat([ops.upsample_bilinear_x2(e4), e3]), train)
        d2 = self._block("dec2", ops.concat([ops.upsample_bilinear_x2(d1), e2]), train)
        out = ops.sigmoid(self._apply_conv("dec3", ops.concat([ops.upsample_bilinear_x2(d2), e1])))
        if single:
            out = ops.reshape(out, out.data.shape[1:])
        return out

    __call__ = forward


class Discriminator(Network):
    """Three stride-2 convs with ReLU and dropout, a stride-1 conv, then a dense sigmoid unit."""

    def __init__(self, config: DiscriminatorConfig, rng):
        super().__init__()
        config.validate()
        self.config = config
        d1, d2, d3, d4 = config.channels
        self._conv("conv1", 1, d1, rng)
        self._conv("conv2", d1, d2, rng)
        self._conv("conv3", d2, d3, rng)
        self._conv("conv4", d3, d4, rng)
        f = config.feature_length
        self.params["fc.weight"] = Tensor(he_init((f, 1), f, rng), requires_grad=True)
        self.params["fc.bias"] = Tensor(np.zeros(1, np.float32), requires_grad=True)

    def _conv_bn(self, name, x, stride, train):
        w = self.params[f"{name}.weight"]
        cout, cin, _ = w.data.shape
        y = ops.conv2d(x, ops.reshape(w, (cout, cin, 3, 3)), self.params[f"{name}.bias"], stride=stride)
        return self._bn(name, y, train)

    def forward(self, sal_map, rng=None, train=False):
        """Probability that each map is a ground-truth map; returns shape (N,) (scalar for one map)."""
        x = sal_map if isinstance(sal_map, Tensor) else Tensor(np.asarray(sal_map, np.float32))
        single = x.data.ndim == 3
        if single:
            x = ops.reshape(x, (1, *x.data.shape))
        if x.data.ndim != 4 or x.data.shape[1] != 1:
            raise ConfigError(f"discriminator takes 1-channel saliency maps, got shape {x.data.shape}")
        if x.data.shape[2:] != (self.config.height, self.config.width):
            raise ConfigError(f"discriminator built for {self.config.height}x{self.config.width}")
        if train and rng is None:
            raise ValueError("train mode needs an rng for dropout")
        p = self.config.dropout
        for name in ("conv1", "conv2", "conv3"):
            x = ops.dropout(ops.relu(self._conv_bn(name, x, 2, train)), p, rng, train)
        x = self._conv_bn("conv4", x, 1, train)
        n = x.data.shape[0]
        x = ops.reshape(x, (n, -1))
        score = ops.sigmoid(ops.linear(x, self.params["fc.weight"], self.params["fc.bias"]))
        score = ops.reshape(score, (n,))
        if single:
            score = ops.reshape(score, ())
        return score

    __call__ = forward


def config_dict(config):
    d = asdict(config)
    d["channels"] = list(d["channels"])
    return d

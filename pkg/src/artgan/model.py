"""Generator and discriminator wiring.

Layer rows (filters, kernel, stride, pad, batchnorm, activation)::

    Generator                       Discriminator
    deconv1 1024 4 1 0 yes relu     conv1  128 4 2 1 no  leaky_relu
    deconv2  512 4 2 1 yes relu     conv2  128 3 1 1 yes leaky_relu
    deconv3  256 4 2 1 yes relu     conv3  256 4 2 1 yes leaky_relu
    deconv4  128 4 2 1 yes relu     conv4  512 4 2 1 yes leaky_relu
    deconv5  128 3 1 1 yes relu     conv5 1024 4 2 1 yes leaky_relu
    deconv6    3 4 2 1 no  sigmoid  fc6   K+1 logits (sigmoid applied outside)

The generator splits into zNet (deconv1-2) and Dec (deconv3-6); the
discriminator into Enc (conv1-4) and clsNet (conv5, fc6). The reconstruction
path Dec(Enc(x)) runs those very layer objects, so the parameters are shared
by reference rather than copied.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as T
from .nn import FC, Activation, BatchNorm, Conv, Deconv, ParamStore, Sequential

GENERATOR_ROWS = [
    # name, filters, k, stride, pad, batchnorm, activation
    ("deconv1", 1024, 4, 1, 0, True, "relu"),
    ("deconv2", 512, 4, 2, 1, True, "relu"),
    ("deconv3", 256, 4, 2, 1, True, "relu"),
    ("deconv4", 128, 4, 2, 1, True, "relu"),
    ("deconv5", 128, 3, 1, 1, True, "relu"),
    ("deconv6", 3, 4, 2, 1, False, "sigmoid"),
]
DISCRIMINATOR_ROWS = [
    ("conv1", 128, 4, 2, 1, False, "leaky_relu"),
    ("conv2", 128, 3, 1, 1, True, "leaky_relu"),
    ("conv3", 256, 4, 2, 1, True, "leaky_relu"),
    ("conv4", 512, 4, 2, 1, True, "leaky_relu"),
    ("conv5", 1024, 4, 2, 1, True, "leaky_relu"),
]
ZNET_DEPTH = 2
ENC_DEPTH = 4
IMAGE_CHANNELS = 3
INIT_STD = 0.02


class ConfigError(ValueError):
    pass


def parse_width(value) -> Fraction:
    """Accepts 1, 0.125, "1/8" or a Fraction."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value.strip())
    if isinstance(value, float):
        return Fraction(value).limit_denominator(1 << 16)
    return Fraction(value)


@dataclass
class ModelConfig:
    K: int
    d: int = 100
    width_mult: Fraction = field(default_factory=lambda: Fraction(1))
    image_size: int = 64
    leaky_alpha: float = T.LEAKY_ALPHA

    def __post_init__(self):
        self.width_mult = parse_width(self.width_mult)
        if self.K < 2:
            raise ConfigError(f"K must be >= 2, got {self.K}")
        if self.d < 1:
            raise ConfigError(f"noise dimension d must be >= 1, got {self.d}")
        if self.width_mult <= 0:
            raise ConfigError(f"width_mult must be positive, got {self.width_mult}")
        if self.image_size != 64:
            raise ConfigError("the layer tables fix image_size at 64")
        for row in GENERATOR_ROWS[:-1] + DISCRIMINATOR_ROWS:
            if self.channels(row[1]) < 1:
                raise ConfigError(f"width_mult {self.width_mult} leaves {row[0]} with no channels")

    def channels(self, filters: int) -> int:
        return math.ceil(filters * self.width_mult)


def _row(prefix, store, cls, spec, in_ch, out_ch, alpha):
    name, _, k, stride, pad, bn, act = spec
    full = f"{prefix}.{name}"
    layers = [cls(full, store, in_ch, out_ch, k, stride, pad, bias=not bn)]
    if bn:
        layers.append(BatchNorm(f"{full}.bn", store, out_ch))
    layers.append(Activation(f"{full}.act", act, alpha))
    return Sequential(full, layers)


class Generator:
    def __init__(self, config: ModelConfig, store: ParamStore):
        self.config, self.store = config, store
        rows, in_ch = [], config.d + config.K
        for i, spec in enumerate(GENERATOR_ROWS):
            out_ch = IMAGE_CHANNELS if i == len(GENERATOR_ROWS) - 1 else config.channels(spec[1])
            rows.append(_row("G", store, Deconv, spec, in_ch, out_ch, config.leaky_alpha))
            in_ch = out_ch
        self.znet = Sequential("G.zNet", rows[:ZNET_DEPTH])
        self.dec = Sequential("G.Dec", rows[ZNET_DEPTH:])

    @property
    def dec_param_names(self):
        return [n for n in self.store if any(n.startswith(r.name + ".") for r in self.dec)]

    def forward(self, zy, mode="train"):
        h, c1 = self.znet.forward(zy, mode)
        x, c2 = self.dec.forward(h, mode)
        return x, (c1, c2)

    def backward(self, dx, cache, param_grads=True):
        c1, c2 = cache
        dh = self.dec.backward(dx, c2, param_grads)
        return self.znet.backward(dh, c1, param_grads)


class Discriminator:
    def __init__(self, config: ModelConfig, store: ParamStore):
        self.config, self.store = config, store
        rows, in_ch = [], IMAGE_CHANNELS
        for spec in DISCRIMINATOR_ROWS:
            out_ch = config.channels(spec[1])
            rows.append(_row("D", store, Conv, spec, in_ch, out_ch, config.leaky_alpha))
            in_ch = out_ch
        self.fc6 = FC("D.fc6", store, in_ch * 4 * 4, config.K + 1)
        self.enc = Sequential("D.Enc", rows[:ENC_DEPTH])
        self.cls = Sequential("D.clsNet", rows[ENC_DEPTH:] + [self.fc6])

    @property
    def enc_param_names(self):
        return [n for n in self.store if any(n.startswith(r.name + ".") for r in self.enc)]

    def forward(self, x, mode="train"):
        """Returns (logits, cache)."""
        z, c1 = self.enc.forward(x, mode)
        logits, c2 = self.cls.forward(z, mode)
        return logits, (c1, c2)

    def backward(self, dlogits, cache, param_grads=True):
        c1, c2 = cache
        dz = self.cls.backward(dlogits, c2, param_grads)
        return self.enc.backward(dz, c1, param_grads)


class ArtGAN:
    """Both networks, their parameter stores and batchnorm running statistics."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.theta_G = ParamStore()
        self.theta_D = ParamStore()
        self.G = Generator(config, self.theta_G)
        self.D = Discriminator(config, self.theta_D)
        enc_out = config.channels(DISCRIMINATOR_ROWS[ENC_DEPTH - 1][1])
        dec_in = self.G.dec[0][0].in_ch
        if enc_out != dec_in:
            raise ConfigError(f"Enc emits {enc_out} channels but Dec expects {dec_in}")

    def initialize(self, rng: T.Rng):
        """Gaussian init (std 0.02) for weights, gamma ~ N(1, 0.02), zero biases and beta."""
        for store in (self.theta_G, self.theta_D):
            for name, p, _ in store.items():
                if name.endswith(".w"):
                    p[...] = INIT_STD * rng.normal(p.shape)
                elif name.endswith(".gamma"):
                    p[...] = 1.0 + INIT_STD * rng.normal(p.shape)
                else:
                    p.fill(0.0)
        return self

    def batchnorm_layers(self):
        """Ordered (name, BatchNorm) pairs across G then D."""
        for net in (self.G.znet, self.G.dec, self.D.enc, self.D.cls):
            for bn in net.batchnorms():
                yield bn.name, bn

    def buffers(self):
        """Running statistics as ordered name -> array (views, writable)."""
        out = {}
        for name, bn in self.batchnorm_layers():
            out[f"{name}.running_mean"] = bn.state.mean
            out[f"{name}.running_var"] = bn.state.var
            out[f"{name}.count"] = bn.state.count
        return out

    # -- public forward paths -------------------------------------------------

    def generator_input(self, z, y_hat):
        z = np.asarray(z, dtype=T.DTYPE)
        y_hat = np.asarray(y_hat, dtype=T.DTYPE)
        N = z.shape[0]
        if z.shape != (N, self.config.d):
            raise T.ShapeError(f"noise must have shape (N, {self.config.d}), got {z.shape}")
        check_one_hot(y_hat, self.config.K, N)
        return np.concatenate([z, y_hat], axis=1).reshape(N, -1, 1, 1)

    def generate(self, z, y_hat, mode="eval"):
        return self.G.forward(self.generator_input(z, y_hat), mode)[0]

    def discriminate(self, x, mode="eval"):
        """Returns (probs, logits), both of shape (N, K+1)."""
        self._check_image(x)
        logits, _ = self.D.forward(x, mode)
        return T.sigmoid(logits), logits

    def encode(self, x, mode="eval"):
        self._check_image(x)
        return self.D.enc.forward(x, mode)[0]

    def reconstruct(self, x, mode="eval"):
        return self.G.dec.forward(self.encode(x, mode), mode)[0]

    def _check_image(self, x):
        s = self.config.image_size
        if x.ndim != 4 or x.shape[1:] != (IMAGE_CHANNELS, s, s):
            raise T.ShapeError(f"expected images of shape (N, 3, {s}, {s}), got {x.shape}")


def check_one_hot(y, width, n=None):
    if y.ndim != 2 or y.shape[1] != width or (n is not None and y.shape[0] != n):
        raise ValueError(f"label batch must have shape ({n if n is not None else 'N'}, {width}), got {y.shape}")
    ok = np.all((y == 0) | (y == 1), axis=1) & (y.sum(axis=1) == 1)
    if not ok.all():
        raise ValueError(f"label rows {np.flatnonzero(~ok).tolist()} are not one-hot")


def one_hot(indices, K):
    """Rows one-hot at 1-based class ``indices`` (values 1..K)."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 1 or idx.max() > K):
        raise ValueError(f"class indices must lie in 1..{K}")
    y = np.zeros((idx.shape[0], K), dtype=T.DTYPE)
    y[np.arange(idx.shape[0]), idx - 1] = 1.0
    return y


def build(config: ModelConfig, rng: T.Rng | None = None) -> ArtGAN:
    model = ArtGAN(config)
    if rng is not None:
        model.initialize(rng)
    return model

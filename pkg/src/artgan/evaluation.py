"""Parzen-window log-likelihood, nearest-neighbour audit, class-fidelity probe
and image grids."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .data import write_ppm
from .model import ArtGAN, one_hot
from .tensor import DTYPE, Rng

DEFAULT_SIGMA_GRID = tuple(np.logspace(-2, 0, 20))


def _flat(x):
    x = np.asarray(x, dtype=DTYPE)
    return x.reshape(x.shape[0], -1)


@dataclass
class ParzenModel:
    samples: np.ndarray   # (M, D)
    sigma: float

    def __post_init__(self):
        self.samples = _flat(self.samples)
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.samples.shape[0] < 1:
            raise ValueError("a Parzen model needs at least one sample")

    @property
    def dim(self):
        return self.samples.shape[1]


@dataclass
class LogLikelihood:
    per_point: np.ndarray
    mean: float
    stderr: float


def parzen_ll(model: ParzenModel, x, chunk=256) -> LogLikelihood:
    """Log-density of each row of ``x`` under isotropic Gaussians of width sigma
    centred on the model's samples, with max-subtracted log-sum-exp."""
    x = _flat(x)
    S, sigma = model.samples, model.sigma
    if x.shape[1] != S.shape[1]:
        raise ValueError(f"test points have dimension {x.shape[1]}, samples {S.shape[1]}")
    M, D = S.shape
    s_sq = np.einsum("ij,ij->i", S, S)
    const = -math.log(M) - 0.5 * D * math.log(2 * math.pi * sigma * sigma)
    out = np.empty(x.shape[0], dtype=DTYPE)
    for start in range(0, x.shape[0], chunk):
        xb = x[start:start + chunk]
        d2 = np.einsum("ij,ij->i", xb, xb)[:, None] + s_sq[None, :] - 2.0 * xb @ S.T
        np.maximum(d2, 0.0, out=d2)
        a = -d2 / (2 * sigma * sigma)
        amax = a.max(axis=1, keepdims=True)
        out[start:start + chunk] = amax[:, 0] + np.log(np.exp(a - amax).sum(axis=1)) + const
    stderr = float(out.std(ddof=1) / math.sqrt(out.size)) if out.size > 1 else 0.0
    return LogLikelihood(out, float(out.mean()), stderr)


def select_sigma(samples, validation, grid=DEFAULT_SIGMA_GRID):
    """Grid value with the highest mean validation log-likelihood; ties go to the smaller sigma."""
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ValueError("empty sigma grid")
    if any(g <= 0 for g in grid):
        raise ValueError("sigma grid values must be positive")
    validation = _flat(validation)
    if validation.shape[0] == 0:
        raise ValueError("empty validation set")
    best, best_ll = None, -math.inf
    for sigma in grid:
        ll = parzen_ll(ParzenModel(samples, sigma), validation).mean
        if ll > best_ll:
            best, best_ll = sigma, ll
    return best


def nearest_neighbour(queries, corpus):
    """Exhaustive squared-L2 search. Returns (indices, squared distances); ties -> smallest index."""
    Q, C = _flat(queries), _flat(corpus)
    if C.shape[0] == 0:
        raise ValueError("empty corpus")
    if Q.shape[1] != C.shape[1]:
        raise ValueError("query and corpus images differ in shape")
    idx = np.empty(Q.shape[0], dtype=np.int64)
    dist = np.empty(Q.shape[0], dtype=DTYPE)
    for i, q in enumerate(Q):
        # plain row sums of squares, so distances are reproducible term by term
        diff = C - q
        d = np.sum(diff * diff, axis=1)
        j = int(np.argmin(d))
        idx[i], dist[i] = j, d[j]
    return idx, dist


class LinearProbe:
    """Multinomial logistic regression on raw pixels, fitted with L-BFGS."""

    def __init__(self, K, l2=1e-3, maxiter=300):
        self.K, self.l2, self.maxiter = K, l2, maxiter
        self.W = None
        self.b = None

    def _unpack(self, theta, D):
        return theta[:D * self.K].reshape(D, self.K), theta[D * self.K:]

    def fit(self, images, labels):
        X = _flat(images)
        N, D = X.shape
        Y = one_hot(labels, self.K)

        def objective(theta):
            W, b = self._unpack(theta, D)
            z = X @ W + b
            z -= z.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            loss = -np.sum(Y * logp) / N + 0.5 * self.l2 * np.sum(W * W)
            g = (np.exp(logp) - Y) / N
            return loss, np.concatenate([(X.T @ g + self.l2 * W).ravel(), g.sum(axis=0)])

        res = minimize(objective, np.zeros(D * self.K + self.K), jac=True, method="L-BFGS-B",
                       options={"maxiter": self.maxiter})
        self.W, self.b = self._unpack(res.x, D)
        return self

    def predict(self, images):
        if self.W is None:
            raise RuntimeError("probe has not been fitted")
        return np.argmax(_flat(images) @ self.W + self.b, axis=1) + 1

    def accuracy(self, images, labels):
        return float(np.mean(self.predict(images) == np.asarray(labels)))


@dataclass
class FidelityReport:
    fidelity: float
    per_class: list[float]
    samples: int
    probe_accuracy: float | None = None

    def rows(self):
        n = self.samples
        yield "class_fidelity", self.fidelity, math.sqrt(self.fidelity * (1 - self.fidelity) / n)
        for k, f in enumerate(self.per_class, start=1):
            yield f"class_fidelity[{k}]", f, math.nan
        if self.probe_accuracy is not None:
            yield "probe_accuracy", self.probe_accuracy, math.nan


def generate_images(model: ArtGAN, classes, rng: Rng, batch=100):
    """Eval-mode samples for 1-based ``classes``, noise drawn from ``rng``."""
    classes = np.asarray(classes)
    out = []
    for start in range(0, classes.size, batch):
        ks = classes[start:start + batch]
        z = rng.normal((ks.size, model.config.d))
        out.append(model.generate(z, one_hot(ks, model.config.K), mode="eval"))
    return np.concatenate(out) if out else np.zeros((0, 3, 64, 64))


def class_fidelity(model: ArtGAN, probe: LinearProbe, samples_per_class: int, rng: Rng) -> FidelityReport:
    """Fraction of generated images that the probe assigns to the class they were generated for."""
    if probe.W is None:
        raise RuntimeError("class fidelity needs a fitted probe")
    K = model.config.K
    classes = np.repeat(np.arange(1, K + 1), samples_per_class)
    pred = probe.predict(generate_images(model, classes, rng))
    hit = pred == classes
    per_class = [float(hit[classes == k].mean()) for k in range(1, K + 1)]
    return FidelityReport(float(hit.mean()), per_class, int(classes.size))


def make_grid(images, cols, gutter=2):
    images = np.asarray(images, dtype=DTYPE)
    n, c, h, w = images.shape
    if n == 0:
        raise ValueError("no images to tile")
    rows = math.ceil(n / cols)
    grid = np.zeros((c, rows * h + (rows - 1) * gutter, cols * w + (cols - 1) * gutter), dtype=DTYPE)
    for i, img in enumerate(images):
        r, q = divmod(i, cols)
        grid[:, r * (h + gutter):r * (h + gutter) + h, q * (w + gutter):q * (w + gutter) + w] = img
    return grid


def write_grid(images, cols, path, gutter=2):
    """Row-major tiling with black gutters, written as 8-bit PPM (P6)."""
    grid = make_grid(images, cols, gutter)
    write_ppm(path, grid)
    return grid


def format_report(rows) -> str:
    """Tab-separated ``metric value stderr`` lines."""
    return "".join(f"{name}\t{value!r}\t{err!r}\n" for name, value, err in rows)

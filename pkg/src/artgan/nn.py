"""Layers with hand-written backward passes, a parameter registry and a
finite-difference gradient checker.

Every layer follows the same protocol::

    out, cache = layer.forward(x, mode)
    dx = layer.backward(dout, cache)

``backward`` accumulates (``+=``) parameter gradients into the owning
``ParamStore``; pass ``param_grads=False`` to only propagate to the input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T


class ParamStore:
    """Ordered name -> (parameter, gradient) registry."""

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=T.DTYPE, copy=True)
        self._params[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def __iter__(self):
        return iter(self._params)

    def names(self):
        return list(self._params)

    def grad(self, name):
        return self._grads[name]

    def items(self):
        for name, p in self._params.items():
            yield name, p, self._grads[name]

    def zero_grads(self):
        for g in self._grads.values():
            g.fill(0.0)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.copy() for name, p in self._params.items()}

    def restore(self, snap):
        for name, value in snap.items():
            np.copyto(self._params[name], value)

    def num_elements(self):
        return sum(p.size for p in self._params.values())


class Layer:
    kind = "layer"

    def __init__(self, name):
        self.name = name

    def forward(self, x, mode="train"):
        raise NotImplementedError

    def backward(self, dout, cache, param_grads=True):
        raise NotImplementedError

    def _check_grad_shape(self, dout, shape):
        if dout.shape != shape:
            raise T.ShapeError(f"{self.name}: gradient shape {dout.shape} does not match output {shape}")


class Conv(Layer):
    kind = "conv"

    def __init__(self, name, store, in_ch, out_ch, k, stride, pad, bias=True):
        super().__init__(name)
        self.store, self.k, self.stride, self.pad = store, k, stride, pad
        self.in_ch, self.out_ch = in_ch, out_ch
        self.w_name = f"{name}.w"
        self.b_name = f"{name}.b" if bias else None
        store.add(self.w_name, np.zeros((out_ch, in_ch, k, k)))
        if bias:
            store.add(self.b_name, np.zeros(out_ch))

    def out_shape(self, H, W):
        return (self.out_ch, T.conv_out_size(H, self.k, self.stride, self.pad),
                T.conv_out_size(W, self.k, self.stride, self.pad))

    def forward(self, x, mode="train"):
        w = self.store[self.w_name]
        b = self.store[self.b_name] if self.b_name else None
        try:
            out, cols = T.conv2d_forward(x, w, b, self.stride, self.pad)
        except T.ShapeError as e:
            raise T.ShapeError(f"{self.name}: {e}") from None
        return out, (x.shape, cols, out.shape)

    def backward(self, dout, cache, param_grads=True):
        x_shape, cols, out_shape = cache
        self._check_grad_shape(dout, out_shape)
        w = self.store[self.w_name]
        dx, dw, db = T.conv2d_backward(dout, x_shape, cols, w, self.stride, self.pad)
        if param_grads:
            self.store.grad(self.w_name)[...] += dw
            if self.b_name:
                self.store.grad(self.b_name)[...] += db
        return dx


class Deconv(Layer):
    kind = "deconv"

    def __init__(self, name, store, in_ch, out_ch, k, stride, pad, bias=True):
        super().__init__(name)
        self.store, self.k, self.stride, self.pad = store, k, stride, pad
        self.in_ch, self.out_ch = in_ch, out_ch
        self.w_name = f"{name}.w"
        self.b_name = f"{name}.b" if bias else None
        store.add(self.w_name, np.zeros((in_ch, out_ch, k, k)))
        if bias:
            store.add(self.b_name, np.zeros(out_ch))

    def out_shape(self, H, W):
        return (self.out_ch, T.deconv_out_size(H, self.k, self.stride, self.pad),
                T.deconv_out_size(W, self.k, self.stride, self.pad))

    def forward(self, x, mode="train"):
        w = self.store[self.w_name]
        b = self.store[self.b_name] if self.b_name else None
        try:
            out, xmat = T.deconv2d_forward(x, w, b, self.stride, self.pad)
        except T.ShapeError as e:
            raise T.ShapeError(f"{self.name}: {e}") from None
        return out, (x.shape, xmat, out.shape)

    def backward(self, dout, cache, param_grads=True):
        x_shape, xmat, out_shape = cache
        self._check_grad_shape(dout, out_shape)
        w = self.store[self.w_name]
        dx, dw, db = T.deconv2d_backward(dout, xmat, x_shape, w, self.stride, self.pad)
        if param_grads:
            self.store.grad(self.w_name)[...] += dw
            if self.b_name:
                self.store.grad(self.b_name)[...] += db
        return dx


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, name, store, channels):
        super().__init__(name)
        self.store, self.channels = store, channels
        self.gamma_name, self.beta_name = f"{name}.gamma", f"{name}.beta"
        store.add(self.gamma_name, np.ones(channels))
        store.add(self.beta_name, np.zeros(channels))
        self.state = T.BatchNormState(channels)

    def forward(self, x, mode="train"):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise T.ShapeError(f"{self.name}: expected {self.channels} channels, got shape {x.shape}")
        out, cache = T.batchnorm_forward(x, self.store[self.gamma_name], self.store[self.beta_name],
                                         mode, self.state)
        return out, (cache, out.shape)

    def backward(self, dout, cache, param_grads=True):
        bn_cache, out_shape = cache
        self._check_grad_shape(dout, out_shape)
        dx, dgamma, dbeta = T.batchnorm_backward(dout, bn_cache)
        if param_grads:
            self.store.grad(self.gamma_name)[...] += dgamma
            self.store.grad(self.beta_name)[...] += dbeta
        return dx


class FC(Layer):
    """Fully connected layer on the flattened input; weight shape (out, in)."""

    kind = "fc"

    def __init__(self, name, store, in_features, out_features, bias=True):
        super().__init__(name)
        self.store, self.in_features, self.out_features = store, in_features, out_features
        self.w_name = f"{name}.w"
        self.b_name = f"{name}.b" if bias else None
        store.add(self.w_name, np.zeros((out_features, in_features)))
        if bias:
            store.add(self.b_name, np.zeros(out_features))

    def forward(self, x, mode="train"):
        X = x.reshape(x.shape[0], -1)
        if X.shape[1] != self.in_features:
            raise T.ShapeError(f"{self.name}: expected {self.in_features} input features, got {X.shape[1]}")
        out = X @ self.store[self.w_name].T
        if self.b_name:
            out = out + self.store[self.b_name]
        return out, (x.shape, X, out.shape)

    def backward(self, dout, cache, param_grads=True):
        x_shape, X, out_shape = cache
        self._check_grad_shape(dout, out_shape)
        if param_grads:
            self.store.grad(self.w_name)[...] += dout.T @ X
            if self.b_name:
                self.store.grad(self.b_name)[...] += dout.sum(axis=0)
        return (dout @ self.store[self.w_name]).reshape(x_shape)


class Activation(Layer):
    kind = "activation"
    # when set to a list, rectifiers append their sign pattern on every forward
    # call; the gradient checker uses this to spot stencils that cross a kink
    record = None

    def __init__(self, name, fn, alpha=T.LEAKY_ALPHA):
        super().__init__(name)
        if fn not in ("relu", "leaky_relu", "sigmoid"):
            raise ValueError(f"unknown activation {fn!r}")
        self.fn, self.alpha = fn, alpha

    def forward(self, x, mode="train"):
        out = T.activation(x, self.fn, self.alpha)
        if Activation.record is not None and self.fn != "sigmoid":
            Activation.record.append(x > 0)
        # sigmoid backward needs the output, the rectifiers need the input sign
        return out, (out if self.fn == "sigmoid" else x > 0)

    def backward(self, dout, cache, param_grads=True):
        self._check_grad_shape(dout, cache.shape)
        if self.fn == "sigmoid":
            return dout * cache * (1.0 - cache)
        if self.fn == "relu":
            return np.where(cache, dout, 0.0)
        return np.where(cache, dout, self.alpha * dout)


class Sequential(Layer):
    """Layers run in order. One table row (linear -> batchnorm -> activation)
    is a Sequential, and so is a whole network."""

    kind = "sequential"

    def __init__(self, name, layers):
        super().__init__(name)
        self.layers = list(layers)

    def __getitem__(self, i):
        return self.layers[i]

    def __len__(self):
        return len(self.layers)

    def forward(self, x, mode="train"):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, mode)
            caches.append(c)
        return x, caches

    def backward(self, dout, cache, param_grads=True):
        for layer, c in zip(reversed(self.layers), reversed(cache)):
            dout = layer.backward(dout, c, param_grads)
        return dout

    def batchnorms(self):
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                yield layer
            elif isinstance(layer, Sequential):
                yield from layer.batchnorms()


class GradCheckError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float] = field(default_factory=dict)
    coords_checked: dict[str, int] = field(default_factory=dict)
    worst: tuple[str, int] | None = None
    kinks_skipped: int = 0

    def passed(self, tol):
        return self.max_rel_error < tol

    def lines(self):
        for name, err in self.per_tensor.items():
            yield f"{name}\t{self.coords_checked[name]}\t{err:.3e}"


def relative_error(analytic, numeric, floor=1e-8):
    """|a - n| / max(|a|, |n|, floor); the floor keeps round-off on vanishing
    gradients from reading as a large relative error."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _evaluate(loss_fn, kink_guard):
    """Loss components as a float array, plus the rectifier sign patterns."""
    if not kink_guard:
        return np.atleast_1d(np.asarray(loss_fn(), dtype=T.DTYPE)), None
    Activation.record = []
    try:
        return np.atleast_1d(np.asarray(loss_fn(), dtype=T.DTYPE)), Activation.record
    finally:
        Activation.record = None


def _same_signs(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _central_difference(flat, i, loss_fn, h, kink_guard):
    """Five-point difference at flat[i], accurate to O(h^4).

    With ``kink_guard``, a stencil across which some rectifier flips sign is
    replaced by a one-sided five-point stencil on a side where none does; if
    both sides see a flip the step shrinks (down to 1e-7). Returns None if a
    kink remains at the smallest step.

    A loss given as several components is differenced per component, so a
    large term that does not depend on flat[i] adds no round-off.
    """
    old = flat[i]
    cache = {}

    def at(off):
        if off not in cache:
            flat[i] = old + off
            try:
                cache[off] = _evaluate(loss_fn, kink_guard)
            finally:
                flat[i] = old
            if not np.all(np.isfinite(cache[off][0])):
                raise GradCheckError(f"loss is not finite when perturbing coordinate {i}")
        return cache[off]

    def clean(offs):
        return all(_same_signs(at(0.0)[1], at(o)[1]) for o in offs)

    while True:
        f = {k: at(k * h)[0] for k in (-2, -1, 1, 2)}
        if not kink_guard or clean([-2 * h, -h, h, 2 * h]):
            return float(np.sum((8 * (f[1] - f[-1]) - (f[2] - f[-2])) / (12 * h)))
        for side in (1, -1):
            offs = [side * k * h for k in (1, 2, 3, 4)]
            if clean(offs):
                f0 = at(0.0)[0]
                f1, f2, f3, f4 = (at(o)[0] for o in offs)
                return side * float(np.sum((-25 * f0 + 48 * f1 - 36 * f2 + 16 * f3 - 3 * f4) / (12 * h)))
        if h <= 1e-7:
            return None
        h = max(h / 10, 1e-7)


def check_gradients(tensors: dict[str, np.ndarray], analytic: dict[str, np.ndarray],
                    loss_fn: Callable[[], float], h=1e-6, max_coords=200, seed=0,
                    floor=1e-8, kink_guard=True) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``tensors`` are perturbed in place (and restored) while ``loss_fn`` is
    re-evaluated; it may return a scalar or a sequence of loss components whose
    sum is the loss. Up to ``max_coords`` coordinates per tensor are checked;
    coordinates whose stencil straddles a rectifier kink are replaced by
    fresh ones where the tensor has any left.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-7, 1e-4]")
    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0)
    for name, arr in tensors.items():
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"{name}: tensor must be contiguous to be perturbed in place")
        a_flat = analytic[name].reshape(-1)
        order = rng.permutation(flat.size)
        worst, checked = 0.0, 0
        for i in order:
            if checked == max_coords:
                break
            try:
                num = _central_difference(flat, i, loss_fn, h, kink_guard)
            except GradCheckError as e:
                raise GradCheckError(f"{name}: {e}") from None
            if num is None:
                report.kinks_skipped += 1
                continue
            checked += 1
            err = relative_error(a_flat[i], num, floor)
            worst = max(worst, err)
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst = (name, int(i))
        report.per_tensor[name] = worst
        report.coords_checked[name] = checked
    return report


def grad_check(store: ParamStore, loss_and_grads: Callable[[], float], loss_fn: Callable[[], float] | None = None,
               h=1e-6, max_coords=200, seed=0, floor=1e-8, names=None, kink_guard=True) -> GradCheckReport:
    """Gradient-check every parameter of ``store`` (or the subset ``names``).

    ``loss_and_grads`` must return the loss and accumulate its gradient into
    ``store``; ``loss_fn`` (defaults to ``loss_and_grads``) is only used for
    the finite differences.
    """
    store.zero_grads()
    loss = loss_and_grads()
    if not np.all(np.isfinite(loss)):
        raise GradCheckError("loss is not finite at the unperturbed point")
    names = store.names() if names is None else list(names)
    analytic = {n: store.grad(n).copy() for n in names}
    tensors = {n: store[n] for n in names}
    return check_gradients(tensors, analytic, loss_fn or loss_and_grads, h, max_coords, seed, floor, kink_guard)

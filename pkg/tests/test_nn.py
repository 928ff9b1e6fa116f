import numpy as np
import pytest

from artgan import nn
from artgan import tensor as T


def filled(store, rng, scale=0.5):
    for _, p, _ in store.items():
        p[...] = scale * rng.standard_normal(p.shape)
    return store


def make_layer(kind, store):
    if kind == "conv":
        return nn.Conv("L", store, 2, 3, 3, 2, 1), (2, 2, 5, 5)
    if kind == "conv_nobias":
        return nn.Conv("L", store, 2, 3, 4, 2, 1, bias=False), (2, 2, 6, 6)
    if kind == "deconv":
        return nn.Deconv("L", store, 2, 3, 4, 2, 1), (2, 2, 3, 3)
    if kind == "deconv_bn":
        return nn.Sequential("row", [nn.Deconv("L", store, 2, 3, 4, 2, 1, bias=False),
                                     nn.BatchNorm("L.bn", store, 3), nn.Activation("L.act", "relu")]), (3, 2, 2, 2)
    if kind == "fc":
        return nn.FC("L", store, 12, 4), (3, 3, 2, 2)
    if kind == "batchnorm":
        return nn.BatchNorm("L", store, 3), (4, 3, 2, 2)
    if kind in ("relu", "leaky_relu", "sigmoid"):
        return nn.Activation("L", kind), (2, 3, 2, 2)
    raise ValueError(kind)


ALL_KINDS = ["conv", "conv_nobias", "deconv", "deconv_bn", "fc", "batchnorm", "relu", "leaky_relu", "sigmoid"]


def test_store_names_unique_and_ordered():
    s = nn.ParamStore()
    s.add("a", np.zeros(2))
    s.add("b", np.zeros((2, 2)))
    assert s.names() == ["a", "b"] and len(s) == 2 and "a" in s
    with pytest.raises(KeyError):
        s.add("a", np.zeros(1))
    assert s.grad("b").shape == s["b"].shape
    assert s.num_elements() == 6


def test_zero_grads_exact():
    s = nn.ParamStore()
    s.add("a", np.ones(3))
    s.grad("a")[...] = 5.0
    s.zero_grads()
    assert np.all(s.grad("a") == 0.0)


def test_snapshot_restore():
    s = nn.ParamStore()
    s.add("a", np.arange(3.0))
    snap = s.snapshot()
    s["a"][...] = -1
    s.restore(snap)
    np.testing.assert_array_equal(s["a"], [0.0, 1.0, 2.0])


def test_fc_zero_weight_gives_bias():
    s = nn.ParamStore()
    fc = nn.FC("fc", s, 5, 3)
    s["fc.b"][...] = [1.0, -2.0, 0.5]
    out, _ = fc.forward(np.random.default_rng(0).standard_normal((4, 5)))
    np.testing.assert_array_equal(out, np.tile([1.0, -2.0, 0.5], (4, 1)))


def test_conv1_shape_at_full_width():
    s = nn.ParamStore()
    conv1 = nn.Conv("conv1", s, 3, 128, 4, 2, 1)
    out, _ = conv1.forward(np.zeros((2, 3, 64, 64)))
    assert out.shape == (2, 128, 32, 32)


def test_sigmoid_layer_range_and_backward():
    a = nn.Activation("s", "sigmoid")
    out, cache = a.forward(np.array([[-50.0, 0.0, 50.0]]))
    assert np.all((out >= 0) & (out <= 1))
    dx = a.backward(np.ones((1, 3)), cache)
    assert dx[0, 1] == 0.25


def test_leaky_relu_backward_negative():
    a = nn.Activation("l", "leaky_relu")
    _, cache = a.forward(np.array([-3.0]))
    assert a.backward(np.array([2.0]), cache)[0] == pytest.approx(0.4)


def test_unknown_activation():
    with pytest.raises(ValueError):
        nn.Activation("x", "tanh")


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_zero_upstream_gradient(kind):
    s = nn.ParamStore()
    layer, shape = make_layer(kind, s)
    filled(s, np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal(shape)
    out, cache = layer.forward(x, "batch")
    params_before = s.snapshot()
    dx = layer.backward(np.zeros_like(out), cache)
    assert np.all(dx == 0)
    for name, p, g in s.items():
        assert np.all(g == 0)
        np.testing.assert_array_equal(p, params_before[name])


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_gradients_accumulate(kind):
    s = nn.ParamStore()
    layer, shape = make_layer(kind, s)
    rng = np.random.default_rng(2)
    filled(s, rng)
    x = rng.standard_normal(shape)
    out, cache = layer.forward(x, "batch")
    g1, g2 = rng.standard_normal(out.shape), rng.standard_normal(out.shape)
    singles = []
    for g in (g1, g2):
        s.zero_grads()
        layer.backward(g, cache)
        singles.append({n: gr.copy() for n, _, gr in s.items()})
    s.zero_grads()
    layer.backward(g1, cache)
    layer.backward(g2, cache)
    for name, _, gr in s.items():
        np.testing.assert_allclose(gr, singles[0][name] + singles[1][name], rtol=1e-14, atol=1e-14)


@pytest.mark.parametrize("kind", ["conv", "conv_nobias", "deconv", "fc"])
def test_linear_layer_adjoint(kind):
    s = nn.ParamStore()
    layer, shape = make_layer(kind, s)
    rng = np.random.default_rng(3)
    filled(s, rng)
    for name in s.names():
        if name.endswith(".b"):
            s[name][...] = 0.0
    dx = rng.standard_normal(shape)
    ydx, cache = layer.forward(dx)
    dy = rng.standard_normal(ydx.shape)
    lhs = np.sum(ydx * dy)
    rhs = np.sum(dx * layer.backward(dy, cache, param_grads=False))
    assert abs(lhs - rhs) <= 1e-8 * max(1.0, abs(lhs))


def test_backward_rejects_wrong_gradient_shape():
    s = nn.ParamStore()
    layer, shape = make_layer("conv", s)
    out, cache = layer.forward(np.zeros(shape))
    with pytest.raises(T.ShapeError):
        layer.backward(np.zeros((1,) + out.shape[1:]), cache)


def test_forward_backward_leaves_parameters():
    s = nn.ParamStore()
    layer, shape = make_layer("deconv_bn", s)
    filled(s, np.random.default_rng(4))
    before = s.snapshot()
    out, cache = layer.forward(np.random.default_rng(5).standard_normal(shape), "train")
    layer.backward(np.ones_like(out), cache)
    for name, p, _ in s.items():
        np.testing.assert_array_equal(p, before[name])


def _layer_loss(layer, x, target, mode="batch"):
    def loss_and_grads(grads=True):
        out, cache = layer.forward(x, mode)
        diff = out - target
        if grads:
            layer.backward(2 * diff, cache)
        return float(np.sum(diff * diff))
    return loss_and_grads


def test_gradcheck_single_fc_l2():
    rng = np.random.default_rng(6)
    s = nn.ParamStore()
    fc = nn.FC("fc", s, 16, 5)
    filled(s, rng)
    x, target = rng.standard_normal((3, 4, 4)), rng.standard_normal((3, 5))
    f = _layer_loss(fc, x, target)
    report = nn.grad_check(s, f, lambda: f(False))
    assert report.max_rel_error < 1e-6


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_gradcheck_every_layer_kind(kind):
    rng = np.random.default_rng(7)
    s = nn.ParamStore()
    layer, shape = make_layer(kind, s)
    filled(s, rng)
    if kind == "batchnorm":
        s["L.gamma"][...] += 1.0
    x = rng.standard_normal(shape)
    target = rng.standard_normal(layer.forward(x, "batch")[0].shape)
    f = _layer_loss(layer, x, target)
    # parameters and input both
    if len(s):
        assert nn.grad_check(s, f, lambda: f(False)).max_rel_error < 1e-4
    out, cache = layer.forward(x, "batch")
    dx = layer.backward(2 * (out - target), cache, param_grads=False)
    rep = nn.check_gradients({"x": x}, {"x": dx}, lambda: f(False))
    assert rep.max_rel_error < 1e-4


def test_gradcheck_zero_loss():
    s = nn.ParamStore()
    s.add("w", np.ones(4))
    report = nn.grad_check(s, lambda: 0.0)
    assert report.max_rel_error == 0.0
    assert np.all(s.grad("w") == 0)


def test_gradcheck_samples_at_most_max_coords():
    s = nn.ParamStore()
    s.add("w", np.random.default_rng(0).standard_normal(500))

    def f():
        s.grad("w")[...] += 2 * s["w"]
        return float(np.sum(s["w"] ** 2))

    report = nn.grad_check(s, f, lambda: s["w"] ** 2, max_coords=200)
    assert report.coords_checked["w"] == 200 and report.max_rel_error < 1e-6


def test_gradcheck_detects_wrong_gradient():
    s = nn.ParamStore()
    s.add("w", np.ones(3))

    def f():
        s.grad("w")[...] += 3 * s["w"]  # true gradient is 2w
        return float(np.sum(s["w"] ** 2))

    report = nn.grad_check(s, f, lambda: float(np.sum(s["w"] ** 2)))
    assert not report.passed(1e-4)
    assert report.worst[0] == "w"


def test_gradcheck_nan_loss_names_coordinate():
    s = nn.ParamStore()
    s.add("w", np.array([0.0, 1e-7]))

    def f():
        w = s["w"]
        return float(np.log(w[1]))

    with pytest.raises(nn.GradCheckError, match="w"):
        nn.grad_check(s, lambda: 1.0, f, h=1e-6)


def test_gradcheck_rejects_step_outside_range():
    s = nn.ParamStore()
    s.add("w", np.ones(1))
    with pytest.raises(ValueError):
        nn.grad_check(s, lambda: 0.0, h=1e-3)


def test_relative_error_definition():
    assert nn.relative_error(1.0, 1.0) == 0.0
    assert nn.relative_error(2.0, 1.0) == 0.5
    assert nn.relative_error(0.0, 0.0) == 0.0
    assert nn.relative_error(1e-12, 0.0) == pytest.approx(1e-4)

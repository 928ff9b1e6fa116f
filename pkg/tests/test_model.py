from fractions import Fraction

import numpy as np
import pytest

from artgan import model as M
from artgan.nn import BatchNorm, Conv, Deconv
from artgan.tensor import Rng, ShapeError


@pytest.fixture(scope="module")
def tiny():
    return M.build(M.ModelConfig(K=3, d=8, width_mult="1/32"), Rng(0))


def warm(model, n=4, seed=0):
    """Populate batchnorm running statistics with one train-mode pass of each path."""
    rng = Rng(seed)
    K, d = model.config.K, model.config.d
    zy = model.generator_input(rng.normal((n, d)), M.one_hot((np.arange(n) % K) + 1, K))
    x, _ = model.G.forward(zy, "train")
    model.D.forward(x, "train")
    return model


def test_full_width_shapes():
    cfg = M.ModelConfig(K=10, d=100, width_mult=1)
    m = M.ArtGAN(cfg)
    x = np.zeros((2, 110, 1, 1))
    spatial, channels = [], []
    for row in list(m.G.znet) + list(m.G.dec):
        x, _ = row[0].forward(x)
        spatial.append(x.shape[2])
        channels.append(x.shape[1])
    assert spatial == [4, 8, 16, 32, 32, 64]
    assert channels == [1024, 512, 256, 128, 128, 3]
    assert m.G.znet[0][0].in_ch == 110

    x = np.zeros((2, 3, 64, 64))
    spatial = [64]
    for row in list(m.D.enc) + list(m.D.cls)[:-1]:
        x, _ = row[0].forward(x)
        spatial.append(x.shape[2])
    assert spatial == [64, 32, 32, 16, 8, 4]
    logits, _ = m.D.cls[-1].forward(x)
    assert logits.shape == (2, 11)


def test_enc_output_matches_dec_input(tiny):
    warm(tiny)
    z = tiny.encode(np.full((2, 3, 64, 64), 0.5))
    assert z.shape == (2, tiny.G.dec[0][0].in_ch, 8, 8)
    full = M.ArtGAN(M.ModelConfig(K=3, width_mult=1))
    assert full.D.enc[-1][0].out_ch == full.G.dec[0][0].in_ch == 512


def test_width_scaling():
    cfg = M.ModelConfig(K=3, width_mult="1/32")
    assert cfg.width_mult == Fraction(1, 32)
    assert cfg.channels(128) == 4
    m = M.ArtGAN(cfg)
    assert m.D.enc[0][0].out_ch == 4
    assert M.ModelConfig(K=3, width_mult=0.125).width_mult == Fraction(1, 8)


def test_channels_round_up():
    assert M.ModelConfig(K=3, width_mult="1/3").channels(128) == 43


def test_config_validation():
    with pytest.raises(M.ConfigError):
        M.ModelConfig(K=1)
    with pytest.raises(M.ConfigError):
        M.ModelConfig(K=3, width_mult=0)
    with pytest.raises(M.ConfigError):
        M.ModelConfig(K=3, d=0)


def test_bias_only_without_batchnorm():
    m = M.ArtGAN(M.ModelConfig(K=3, width_mult="1/32"))
    biases = sorted(n for n in list(m.theta_G) + list(m.theta_D) if n.endswith(".b"))
    assert biases == ["D.conv1.b", "D.fc6.b", "G.deconv6.b"]


def test_initialization_statistics():
    m = M.build(M.ModelConfig(K=3, width_mult="1/4"), Rng(1))
    w = np.concatenate([p.ravel() for n, p, _ in m.theta_D.items() if n.endswith(".w")])
    assert abs(w.mean()) < 1e-3 and abs(w.std() - 0.02) < 1e-3
    gammas = np.concatenate([p.ravel() for n, p, _ in m.theta_G.items() if n.endswith(".gamma")])
    assert abs(gammas.mean() - 1.0) < 0.01
    for store in (m.theta_G, m.theta_D):
        for n, p, _ in store.items():
            if n.endswith(".b") or n.endswith(".beta"):
                assert np.all(p == 0)


def test_generate_range_and_determinism(tiny):
    warm(tiny)
    rng = Rng(3)
    z = rng.normal((5, 8))
    y = M.one_hot([1, 2, 3, 1, 2], 3)
    a = tiny.generate(z, y)
    b = tiny.generate(z, y)
    assert a.shape == (5, 3, 64, 64)
    assert a.min() > 0 and a.max() < 1
    np.testing.assert_array_equal(a, b)


def test_label_reaches_output(tiny):
    warm(tiny)
    z = Rng(4).normal((1, 8))
    a = tiny.generate(z, M.one_hot([1], 3))
    b = tiny.generate(z, M.one_hot([2], 3))
    assert not np.array_equal(a, b)


def test_generator_input_validation(tiny):
    with pytest.raises(ValueError):
        tiny.generator_input(np.zeros((2, 8)), np.array([[1.0, 1.0, 0.0], [0.0, 1.0, 0.0]]))
    with pytest.raises(ShapeError):
        tiny.generator_input(np.zeros((2, 7)), M.one_hot([1, 2], 3))
    with pytest.raises(ValueError):
        M.one_hot([0], 3)


def test_discriminate_probabilities(tiny):
    warm(tiny)
    x = np.random.default_rng(0).uniform(size=(4, 3, 64, 64))
    probs, logits = tiny.discriminate(x)
    assert probs.shape == (4, 4) and logits.shape == (4, 4)
    assert np.all((probs > 0) & (probs < 1))
    assert not np.allclose(probs.sum(axis=1), 1.0)


def test_zero_fc6_gives_one_half():
    m = warm(M.build(M.ModelConfig(K=3, d=8, width_mult="1/32"), Rng(5)))
    m.theta_D["D.fc6.w"][...] = 0
    m.theta_D["D.fc6.b"][...] = 0
    probs, _ = m.discriminate(np.random.default_rng(1).uniform(size=(2, 3, 64, 64)))
    assert np.all(probs == 0.5)


def test_encoder_parameters_are_shared():
    m = warm(M.build(M.ModelConfig(K=3, d=8, width_mult="1/32"), Rng(6)))
    x = np.random.default_rng(2).uniform(size=(2, 3, 64, 64))
    p0, z0 = m.discriminate(x)[0], m.encode(x)
    m.theta_D["D.conv3.w"][...] *= 1.5
    assert not np.array_equal(p0, m.discriminate(x)[0])
    assert not np.array_equal(z0, m.encode(x))
    enc_conv = [row[0] for row in m.D.enc]
    assert all(isinstance(c, Conv) for c in enc_conv)
    assert isinstance(m.G.dec[0][0], Deconv)


def test_reconstruct_shape_and_range(tiny):
    warm(tiny)
    x = np.random.default_rng(3).uniform(size=(2, 3, 64, 64))
    r = tiny.reconstruct(x)
    assert r.shape == x.shape and r.min() > 0 and r.max() < 1


def test_eval_before_statistics_raises():
    m = M.build(M.ModelConfig(K=3, d=8, width_mult="1/32"), Rng(7))
    with pytest.raises(RuntimeError):
        m.generate(np.zeros((1, 8)), M.one_hot([1], 3))


def test_image_shape_checked(tiny):
    with pytest.raises(ShapeError):
        tiny.discriminate(np.zeros((1, 3, 32, 32)))


def test_buffers_cover_every_batchnorm(tiny):
    bufs = tiny.buffers()
    n_bn = sum(1 for _ in tiny.batchnorm_layers())
    assert len(bufs) == 3 * n_bn
    assert all(isinstance(bn, BatchNorm) for _, bn in tiny.batchnorm_layers())

"""Finite-difference checks of the full adversarial and reconstruction gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import bce_terms, fake_targets, l2_terms, loss_adv, loss_d, loss_l2, real_targets
from .model import ArtGAN, ModelConfig, build, one_hot
from .nn import GradCheckReport, grad_check
from .tensor import Rng

# batch statistics without touching the running averages, so repeated
# loss evaluations see an unchanged model
MODE = "batch"

# Large enough that forward-pass round-off (~1e-15 on O(1) logits) stays well
# below small derivatives; the O(h^4) stencil keeps truncation error negligible.
STEP = 1e-5

# The loss functions return their per-element terms when no gradient is
# requested. The checker differences each term on its own, so the O(1e3)
# reconstruction total adds no cancellation error to small derivatives.


@dataclass
class GradCheckCase:
    model: ArtGAN
    x_real: np.ndarray
    k_real: np.ndarray
    zy: np.ndarray
    k_hat: np.ndarray
    x_fake: np.ndarray
    lambda_rec: float = 1.0


def make_case(seed=7, width="1/32", d=8, K=3, batch=4) -> GradCheckCase:
    rng = Rng(seed)
    model = build(ModelConfig(K=K, d=d, width_mult=width), rng)
    # a sharper init than training uses, so no gradient is vanishingly small
    for store in (model.theta_G, model.theta_D):
        for name, p, _ in store.items():
            if name.endswith(".b") or name.endswith(".beta"):
                p[...] = 0.1 * rng.normal(p.shape)
    x_real = rng.uniform(0.0, 1.0, size=(batch, 3, 64, 64))
    k_real = rng.integers(1, K + 1, size=batch)
    k_hat = rng.integers(1, K + 1, size=batch)
    zy = model.generator_input(rng.normal((batch, d)), one_hot(k_hat, K))
    x_fake = model.G.forward(zy, MODE)[0]
    return GradCheckCase(model, x_real, k_real, zy, k_hat, x_fake)


def discriminator_loss(case: GradCheckCase, grads=False):
    D = case.model.D
    real_logits, c_real = D.forward(case.x_real, MODE)
    fake_logits, c_fake = D.forward(case.x_fake, MODE)
    if not grads:
        K = case.model.config.K
        return np.concatenate([bce_terms(real_logits, real_targets(case.k_real, K)).ravel(),
                               bce_terms(fake_logits, fake_targets(len(fake_logits), K)).ravel()])
    loss, g_real, g_fake, _, _ = loss_d(real_logits, case.k_real, fake_logits)
    D.backward(g_real, c_real)
    D.backward(g_fake, c_fake)
    return loss


def generator_loss(case: GradCheckCase, grads=False):
    """L_adv through D into G plus L_L2 through Dec(Enc(x_real)), as a function
    of theta_G."""
    m = case.model
    x_fake, c_gen = m.G.forward(case.zy, MODE)
    fake_logits, c_fake = m.D.forward(x_fake, MODE)
    z, _ = m.D.enc.forward(case.x_real, MODE)
    x_rec, c_dec = m.G.dec.forward(z, MODE)
    if not grads:
        return np.concatenate([bce_terms(fake_logits, real_targets(case.k_hat, m.config.K)).ravel(),
                               case.lambda_rec * l2_terms(x_rec, case.x_real).ravel()])
    adv, g_adv = loss_adv(fake_logits, case.k_hat)
    l2, g_l2 = loss_l2(x_rec, case.x_real)
    m.G.backward(m.D.backward(g_adv, c_fake, param_grads=False), c_gen)
    m.G.dec.backward(case.lambda_rec * g_l2, c_dec)
    return adv + case.lambda_rec * l2


def check_discriminator(case, h=STEP, max_coords=200, seed=0) -> GradCheckReport:
    return grad_check(case.model.theta_D, lambda: discriminator_loss(case, True),
                      lambda: discriminator_loss(case), h=h, max_coords=max_coords, seed=seed)


def check_generator(case, h=STEP, max_coords=200, seed=0) -> GradCheckReport:
    return grad_check(case.model.theta_G, lambda: generator_loss(case, True),
                      lambda: generator_loss(case), h=h, max_coords=max_coords, seed=seed)


def run_suite(seed=7, width="1/32", d=8, K=3, batch=4, h=STEP, max_coords=200):
    """Both network-level checks; returns [(label, report)]."""
    case = make_case(seed, width, d, K, batch)
    return [("L_D wrt theta_D", check_discriminator(case, h, max_coords, seed)),
            ("L_adv + L_L2 wrt theta_G", check_generator(case, h, max_coords, seed))]

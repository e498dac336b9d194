import math
from fractions import Fraction

import numpy as np
import pytest

from diffseg import diffusion as dm
from diffseg.errors import UsageError
from diffseg.gradcore import Adam, Tensor
from diffseg.schedule import build_linear_schedule, posterior_mean_coeffs, schedule_from_betas
from diffseg.unet import UNetModel, preset_config


class OracleEps:
    """Stub noise predictor that knows the clean image x0 (in [-1, 1] space)."""

    mode = "pretrain"

    def __init__(self, x0, s, channels=1):
        self.x0, self.s = x0, s
        self.config = type("cfg", (), {"in_channels": channels})()

    def __call__(self, xt, t):
        ab = self.s.alpha_bar[np.asarray(t)].reshape(-1, 1, 1, 1)
        return Tensor((xt.data - np.sqrt(ab) * self.x0) / np.sqrt(1.0 - ab))


def dyadic_betas(rng, T):
    # exactly representable in binary so Fraction(beta) is the true value
    return sorted(int(v) / 1024 for v in rng.integers(1, 200, size=T))


# -- forward process --------------------------------------------------------

def test_step_forward_limits(rng):
    x, e = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    s = schedule_from_betas([0.0, 1.0], validate=False)
    np.testing.assert_array_equal(dm.step_forward(x, 1, e, s), x)
    np.testing.assert_array_equal(dm.step_forward(x, 2, e, s), e)


def test_step_forward_monte_carlo_variance(rng):
    s = build_linear_schedule(10, 0.05, 0.3)
    x_prev = np.full(100_000, 0.8)
    out = dm.step_forward(x_prev, 4, rng.standard_normal(100_000), s)
    assert out.var() == pytest.approx(s.beta[4], rel=0.01)


def test_forward_sample_identity_and_noiseless(rng):
    x0, e = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    s0 = schedule_from_betas([0.0, 0.0, 0.5], validate=False)
    np.testing.assert_array_equal(dm.forward_sample(x0, 2, e, s0), x0)
    s = build_linear_schedule(100)
    np.testing.assert_array_equal(dm.forward_sample(x0, 37, np.zeros_like(x0), s),
                                  math.sqrt(s.alpha_bar[37]) * x0)


def test_forward_sample_per_sample_t(rng):
    s = build_linear_schedule(100)
    x0, e = rng.normal(size=(3, 1, 2, 2)), rng.normal(size=(3, 1, 2, 2))
    t = np.array([1, 50, 100])
    out = dm.forward_sample(x0, t, e, s)
    for i in range(3):
        np.testing.assert_array_equal(out[i], dm.forward_sample(x0[i], int(t[i]), e[i], s))


def test_coefficient_accumulation_oracle(rng):
    """Composing single steps symbolically gives the closed-form coefficients exactly."""
    betas = dyadic_betas(rng, 40)
    s = schedule_from_betas(betas)
    # x_t = c_t x0 + noise with variance v_t; track c_t^2 and v_t as exact rationals
    c_sq, v = Fraction(1), Fraction(0)
    for t, b in enumerate(betas, start=1):
        a = 1 - Fraction(b)
        c_sq, v = a * c_sq, a * v + Fraction(b)
        abar = Fraction(1)
        for bb in betas[:t]:
            abar *= 1 - Fraction(bb)
        assert c_sq == abar and v == 1 - abar
        coef_x0 = dm.forward_sample(1.0, t, 0.0, s)
        coef_eps = dm.forward_sample(0.0, t, 1.0, s)
        assert coef_x0**2 == pytest.approx(float(abar), rel=1e-13)
        assert coef_eps**2 == pytest.approx(float(1 - abar), rel=1e-13)


def test_forward_errors():
    s = build_linear_schedule(5)
    with pytest.raises(IndexError):
        dm.forward_sample(np.zeros(2), 6, np.zeros(2), s)
    with pytest.raises(IndexError):
        dm.step_forward(np.zeros(2), 0, np.zeros(2), s)


# -- losses -------------------------------------------------------------------

def mse_oracle(a, b):
    total = 0.0
    for n in range(a.shape[0]):
        flat_a, flat_b = a[n].ravel(), b[n].ravel()
        total += sum((x - y) ** 2 for x, y in zip(flat_a, flat_b)) / flat_a.size
    return total / a.shape[0]


def test_simple_loss_examples(rng):
    e = rng.normal(size=(2, 1, 3, 3))
    assert dm.simple_loss(e, Tensor(e)).item() == 0.0
    assert dm.simple_loss(np.ones((2, 3)), Tensor(np.zeros((2, 3)))).item() == 1.0
    p = rng.normal(size=e.shape)
    assert dm.simple_loss(e, Tensor(p)).item() == pytest.approx(mse_oracle(e, p), abs=1e-12)


def test_p2_loss_hand_value():
    s = schedule_from_betas([0.5], k=1, gamma_p2=1)
    eps = np.zeros((1, 1, 1, 5))
    pred = np.full((1, 1, 1, 5), math.sqrt(0.4))
    assert dm.p2_loss(eps, Tensor(pred), [1], s).item() == pytest.approx(0.2, abs=1e-15)


def test_p2_zero_residual(rng):
    s = build_linear_schedule(100)
    e = rng.normal(size=(3, 2, 2, 2))
    assert dm.p2_loss(e, Tensor(e), [1, 5, 100], s).item() == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_p2_gamma_zero_equals_simple(seed):
    rng = np.random.default_rng(seed)
    s = build_linear_schedule(1000, k=1.0, gamma_p2=0.0)
    e, p = rng.normal(size=(4, 3, 5, 5)), rng.normal(size=(4, 3, 5, 5))
    t = rng.integers(1, 1001, size=4)
    assert abs(dm.p2_loss(e, Tensor(p), t, s).item() - dm.simple_loss(e, Tensor(p)).item()) < 1e-12


def test_p2_loss_weights_per_sample(rng):
    s = build_linear_schedule(1000)
    e, p = rng.normal(size=(3, 1, 4, 4)), rng.normal(size=(3, 1, 4, 4))
    t = np.array([3, 400, 999])
    expected = np.mean([s.p2_weight[t[i]] * mse_oracle(e[i:i + 1], p[i:i + 1]) for i in range(3)])
    assert dm.p2_loss(e, Tensor(p), t, s).item() == pytest.approx(expected, rel=1e-12)


def test_vlb_weight_hand_value():
    assert dm.vlb_term_weight(schedule_from_betas([0.1, 0.2]), 2) == pytest.approx(1.25, rel=1e-14)
    s = build_linear_schedule(1000)
    assert all(dm.vlb_term_weight(s, t) > 0 for t in range(2, 1001))
    with pytest.raises(IndexError):
        dm.vlb_term_weight(s, 1)


def gaussian_kl_oracle(x0, xt, eps_pred, t, betas):
    """KL(q(x_{t-1}|x_t,x_0) || p(x_{t-1}|x_t)) with shared variance, from first principles."""
    b = betas[t - 1]
    a = 1.0 - b
    abar_prev = float(np.prod(1.0 - np.asarray(betas[: t - 1])))
    abar = abar_prev * a
    var = 1.0 / (a / b + 1.0 / (1.0 - abar_prev))        # product of two Gaussians

    def mean(x0_value):
        return var * (math.sqrt(a) * xt / b + math.sqrt(abar_prev) * x0_value / (1.0 - abar_prev))

    x0_hat = (xt - math.sqrt(1.0 - abar) * eps_pred) / math.sqrt(abar)
    return (mean(x0) - mean(x0_hat)) ** 2 / (2.0 * var)


def test_vlb_weight_reproduces_gaussian_kl(rng):
    betas = list(np.linspace(0.01, 0.3, 12))
    s = schedule_from_betas(betas)
    for _ in range(30):
        t = int(rng.integers(2, 13))
        x0, eps, eps_pred = rng.normal(size=3)
        xt = math.sqrt(s.alpha_bar[t]) * x0 + math.sqrt(1 - s.alpha_bar[t]) * eps
        kl = gaussian_kl_oracle(x0, xt, eps_pred, t, betas)
        assert dm.vlb_term_weight(s, t) * (eps - eps_pred) ** 2 == pytest.approx(kl, rel=1e-6, abs=1e-12)


# -- reverse process ------------------------------------------------------------

def test_reverse_mean_matches_posterior_mean(rng):
    s = build_linear_schedule(1000)
    for t in (2, 10, 500, 1000):
        x0, eps = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
        xt = dm.forward_sample(x0, t, eps, s)
        cx, c0 = posterior_mean_coeffs(s, t)
        mu_q = cx * xt + c0 * x0
        out = dm.reverse_step(xt, t, eps, np.zeros_like(xt), s)
        assert np.max(np.abs(out - mu_q)) < 1e-10


def test_reverse_step_noise_term(rng):
    s = build_linear_schedule(100)
    x, e, z = (rng.normal(size=(2, 2)) for _ in range(3))
    base = dm.reverse_step(x, 50, e, np.zeros_like(z), s)
    np.testing.assert_allclose(dm.reverse_step(x, 50, e, z, s) - base,
                               math.sqrt(s.posterior_var[50]) * z, atol=1e-15)
    # t = 1 never adds noise
    np.testing.assert_array_equal(dm.reverse_step(x, 1, e, z, s),
                                  dm.reverse_step(x, 1, e, np.zeros_like(z), s))


def test_round_trip_at_t1(rng):
    s = build_linear_schedule(1000)
    x0, eps = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
    x1 = dm.step_forward(x0, 1, eps, s)
    assert np.max(np.abs(dm.reverse_step(x1, 1, eps, np.zeros_like(x0), s) - x0)) < 1e-10


def test_pretrain_step_with_oracle_stub_is_zero(rng):
    s = build_linear_schedule(1000)
    x01 = rng.uniform(size=(4, 1, 4, 4))
    loss = dm.pretrain_step(OracleEps(dm.to_model_space(x01), s), x01, s, rng)
    assert loss < 1e-20


def test_pretrain_step_requires_pretrain_mode(rng):
    model = UNetModel(preset_config("tiny", in_channels=1), rng)
    model.swap_to_segmentation_head(3, rng)
    with pytest.raises(UsageError):
        dm.pretrain_step(model, np.zeros((1, 1, 16, 16)), build_linear_schedule(10), rng)
    with pytest.raises(UsageError):
        dm.sample(model, 1, build_linear_schedule(10), rng, size=16)


def test_pretrain_step_random_model_positive(rng):
    s = build_linear_schedule(1000)
    model = UNetModel(preset_config("tiny"), rng)
    loss = dm.pretrain_step(model, rng.uniform(size=(2, 3, 16, 16)), s, rng)
    assert np.isfinite(loss) and loss > 0
    assert any(np.any(p.grad != 0) for p in model.parameters())


def test_training_on_constant_images_reduces_loss():
    rng = np.random.default_rng(5)
    s = build_linear_schedule(1000)
    model = UNetModel(preset_config("tiny", in_channels=1), np.random.default_rng(0))
    opt = Adam(model.parameters(), lr=2e-3)
    x0 = np.full((8, 1, 8, 8), 0.5)     # maps to zeros in [-1, 1]
    losses = []
    for _ in range(200):
        losses.append(dm.pretrain_step(model, x0, s, rng))
        opt.step()
    assert np.mean(losses[-50:]) < np.mean(losses[:50])


def test_sample_with_perfect_stub_on_zero_data(rng):
    s = build_linear_schedule(50, 1e-3, 0.2)
    stub = OracleEps(0.0, s, channels=2)
    out = dm.sample(stub, 5, s, rng, size=(4, 6))
    assert out.shape == (5, 2, 4, 6)
    assert np.all((out >= 0) & (out <= 1))
    assert np.max(np.abs(2 * out - 1)) < 1e-9


def test_sample_output_range_random_model(rng):
    s = build_linear_schedule(20)
    model = UNetModel(preset_config("tiny"), rng)
    out = dm.sample(model, 3, s, rng, size=16, batch_size=2)
    assert out.shape == (3, 3, 16, 16)
    assert np.all(np.isfinite(out)) and out.min() >= 0 and out.max() <= 1


def test_space_mapping_round_trip(rng):
    x = rng.uniform(size=(3, 3))
    np.testing.assert_allclose(dm.from_model_space(dm.to_model_space(x)), x, atol=1e-15)
    np.testing.assert_array_equal(dm.from_model_space(np.array([-5.0, 5.0])), [0.0, 1.0])

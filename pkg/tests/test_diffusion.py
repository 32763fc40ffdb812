import math

import mpmath
import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_model
from gidm.diffusion import (
    Denoiser,
    alpha_bar_at,
    ddpm_loss,
    forward_noising,
    load_checkpoint,
    loss_gradient,
    make_noise_schedule,
    sample,
    sampler_steps,
    save_checkpoint,
    scaled_linear_schedule,
    to_normalized,
    to_uint8,
)


class ScaleModel(nn.Module):
    """eps_hat = w * x_t with a single scalar parameter."""

    def __init__(self, w=0.3):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(w, dtype=torch.float64))

    def forward(self, x, t):
        return self.w * x


class LinearModel(nn.Module):
    def __init__(self):
        super().__init__()
        self.a = nn.Parameter(torch.tensor(0.7, dtype=torch.float64))
        self.b = nn.Parameter(torch.tensor(-0.2, dtype=torch.float64))

    def forward(self, x, t):
        return self.a * x + self.b


class Oracle(nn.Module):
    """Predicts a fixed tensor regardless of input or parameters."""

    def __init__(self, out):
        super().__init__()
        self.out = out
        self.unused = nn.Parameter(torch.zeros(3, dtype=torch.float64))

    def forward(self, x, t):
        return self.out + 0.0 * self.unused.sum()


# ---------------------------------------------------------------- schedule


def test_schedule_first_alpha_bar(sched_standard):
    assert float(sched_standard.alpha_bars[0]) == 1.0 - 1e-4
    assert sched_standard.T == 1000


def test_constant_beta_product():
    s = make_noise_schedule(2, 0.5, 0.5)
    assert s.alpha_bars.tolist() == [0.5, 0.25]


def test_alpha_bar_T_matches_extended_precision(sched_standard):
    mpmath.mp.dps = 50
    T = 1000
    start, end = mpmath.mpf("1e-4"), mpmath.mpf("0.02")
    prod = mpmath.mpf(1)
    for i in range(T):
        prod *= 1 - (start + (end - start) * i / (T - 1))
    got = float(sched_standard.alpha_bars[-1])
    assert abs(got - float(prod)) / float(prod) < 1e-12
    assert got < 1e-3


@pytest.mark.parametrize("T,lo,hi", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.1, 0.05), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_inputs(T, lo, hi):
    with pytest.raises(ValueError):
        make_noise_schedule(T, lo, hi)


@settings(max_examples=60, deadline=None)
@given(
    T=st.integers(1, 300),
    lo=st.floats(1e-6, 0.5),
    span=st.floats(0.0, 0.49),
)
def test_schedule_invariants(T, lo, span):
    s = make_noise_schedule(T, lo, lo + span)
    b, a = s.betas, s.alpha_bars
    assert bool(((b > 0) & (b < 1)).all())
    assert bool(((a > 0) & (a < 1)).all())
    assert bool((a[1:] < a[:-1]).all())
    assert float(a[0]) == 1.0 - float(b[0])


def test_scaled_schedule_ends_near_zero():
    s = scaled_linear_schedule(100)
    assert math.isclose(s.beta_start, 1e-3) and math.isclose(s.beta_end, 0.2)
    assert float(s.alpha_bars[-1]) < 1e-3


# ---------------------------------------------------------------- forward noising


def test_forward_noising_edge_cases(sched10):
    x0 = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(x0)
    a = float(sched10.alpha_bars[3])
    assert torch.allclose(forward_noising(x0, torch.zeros_like(x0), 4, sched10), math.sqrt(a) * x0)
    assert torch.allclose(forward_noising(torch.zeros_like(x0), eps, 4, sched10), math.sqrt(1 - a) * eps)


def test_forward_noising_matches_scalar_loop(sched10):
    g = torch.Generator().manual_seed(3)
    x0 = torch.rand(2, 2, 3, 3, generator=g) * 2 - 1
    eps = torch.randn(2, 2, 3, 3, generator=g)
    t = 7
    got = forward_noising(x0, eps, t, sched10)
    a = float(sched10.alpha_bars[t - 1])
    for idx in np.ndindex(*x0.shape):
        want = math.sqrt(a) * float(x0[idx]) + math.sqrt(1 - a) * float(eps[idx])
        assert abs(float(got[idx]) - want) < 1e-6


def test_forward_noising_errors(sched10):
    x0 = torch.zeros(1, 1, 4, 4)
    with pytest.raises(ValueError):
        forward_noising(x0, torch.zeros(1, 1, 4, 5), 1, sched10)
    for bad in (0, 11, 2.5):
        with pytest.raises(ValueError):
            forward_noising(x0, x0, bad, sched10)


def test_soft_step_one_hot_equals_hard_step(sched10):
    w = torch.zeros(10)
    w[4] = 1.0
    assert torch.allclose(alpha_bar_at(sched10, w, 2), alpha_bar_at(sched10, 5, 2))
    model = Denoiser(1, 4, 1, 4, 10)
    x = torch.randn(1, 1, 8, 8)
    assert torch.allclose(model(x, w), model(x, 5), atol=1e-6)


def test_forward_noising_statistics(sched10):
    x0 = torch.full((1, 1, 2, 2), 0.4, dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    eps = torch.randn(20000, 1, 2, 2, generator=g, dtype=torch.float64)
    for t in (1, 5, 10):
        xt = forward_noising(x0.expand_as(eps), eps, t, sched10)
        a = float(sched10.alpha_bars[t - 1])
        se = math.sqrt((1 - a) / eps.shape[0])
        assert abs(float(xt.mean()) - math.sqrt(a) * 0.4) < 4 * se
        assert abs(float(xt.var()) / (1 - a) - 1) < 0.05


# ---------------------------------------------------------------- loss and gradient


def test_loss_zero_for_perfect_and_mean_square_for_zero(sched10):
    x0 = torch.randn(3, 1, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(x0)
    assert float(ddpm_loss(Oracle(eps), x0, eps, 3, sched10).detach()) == 0.0
    zero = Oracle(torch.zeros_like(eps))
    assert math.isclose(float(ddpm_loss(zero, x0, eps, 3, sched10).detach()), float((eps**2).mean()), rel_tol=1e-12)


def test_loss_matches_hand_rolled_linear_model(sched10):
    g = torch.Generator().manual_seed(1)
    x0 = torch.rand(2, 1, 3, 3, generator=g, dtype=torch.float64) * 2 - 1
    eps = torch.randn(2, 1, 3, 3, generator=g, dtype=torch.float64)
    t = 6
    a = float(sched10.alpha_bars[t - 1])
    x0n, en = x0.numpy(), eps.numpy()
    pred = 0.7 * (math.sqrt(a) * x0n + math.sqrt(1 - a) * en) - 0.2
    want = float(np.mean((en - pred) ** 2))
    assert abs(float(ddpm_loss(LinearModel(), x0, eps, t, sched10).detach()) - want) < 1e-6


def test_loss_nonnegative(sched10, small_model):
    x0 = torch.rand(2, 1, 8, 8) * 2 - 1
    assert float(ddpm_loss(small_model, x0, torch.randn_like(x0), 4, sched10).detach()) >= 0


def test_gradient_zero_when_loss_flat(sched10):
    x0 = torch.randn(1, 1, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(x0)
    g = loss_gradient(Oracle(eps), x0, eps, 2, sched10)
    assert g.shape == (3,) and float(g.abs().max()) == 0.0


def test_gradient_batch_of_copies_equals_single(sched10, small_model):
    x0 = torch.rand(1, 1, 8, 8) * 2 - 1
    eps = torch.randn_like(x0)
    one = loss_gradient(small_model, x0, eps, 5, sched10)
    four = loss_gradient(small_model, x0.repeat(4, 1, 1, 1), eps.repeat(4, 1, 1, 1), 5, sched10)
    assert torch.allclose(one, four, rtol=1e-5, atol=1e-7)


def test_gradient_scalar_model_finite_difference(sched10):
    model = ScaleModel()
    x0 = torch.rand(1, 1, 3, 3, dtype=torch.float64) * 2 - 1
    eps = torch.randn_like(x0)
    g = float(loss_gradient(model, x0, eps, 4, sched10)[0])
    h = 1e-4

    def loss_at(w):
        return float(ddpm_loss(ScaleModel(w), x0, eps, 4, sched10).detach())

    fd = (loss_at(0.3 + h) - loss_at(0.3 - h)) / (2 * h)
    assert abs(g - fd) / abs(fd) < 1e-3


def test_gradient_order_is_registration_order(sched10):
    model = tiny_model()
    x0 = torch.rand(1, 1, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(x0)
    flat = loss_gradient(model, x0, eps, 3, sched10)
    # same double-backward kernels as the library, so equality is exact
    grads = torch.autograd.grad(ddpm_loss(model, x0, eps, 3, sched10), list(model.parameters()), create_graph=True)
    manual = torch.cat([g.detach().reshape(-1) for g in grads])
    assert torch.equal(flat, manual)
    model.zero_grad()
    ddpm_loss(model, x0, eps, 3, sched10).backward()
    plain = torch.cat([p.grad.reshape(-1) for p in model.parameters()])
    torch.testing.assert_close(flat, plain, rtol=1e-12, atol=1e-14)
    assert flat.numel() == model.num_parameters() <= 100


def test_gradient_rejects_frozen_model(sched10):
    model = tiny_model()
    for p in model.parameters():
        p.requires_grad_(False)
    x0 = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    with pytest.raises(ValueError):
        loss_gradient(model, x0, x0, 1, sched10)


def test_model_output_shape_and_determinism():
    model = Denoiser(3, 8, 1, 8, 10, levels=2)
    x = torch.randn(2, 3, 16, 16)
    for t in (1, 5, 10):
        out = model(x, t)
        assert out.shape == x.shape
        assert torch.equal(out, model(x, t))


# ---------------------------------------------------------------- sampler


def test_sample_zero_steps_is_identity(sched10, small_model):
    z = torch.randn(1, 1, 8, 8)
    assert sample(small_model, z, sched10, 0) is z


def test_sample_deterministic_and_differentiable(sched10, small_model):
    z = torch.randn(2, 1, 8, 8, requires_grad=True)
    a = sample(small_model, z, sched10, 5, rng_seed=9)
    b = sample(small_model, z, sched10, 5, rng_seed=9)
    assert torch.equal(a, b)
    assert not torch.equal(a, sample(small_model, z, sched10, 5, rng_seed=10))
    (grad,) = torch.autograd.grad(a.sum(), z)
    assert float(grad.abs().sum()) > 0


def test_sample_rejects_too_many_steps(sched10, small_model):
    with pytest.raises(ValueError):
        sample(small_model, torch.zeros(1, 1, 8, 8), sched10, 11)


def test_sampler_steps_cover_horizon():
    assert sampler_steps(100, 25)[0] == 1 and sampler_steps(100, 25)[-1] == 100
    assert sampler_steps(10, 10) == list(range(1, 11))


def test_sampler_matches_training_statistics():
    """A briefly trained model's samples land near the corpus mean and variance."""
    from gidm.corpus import make_synthetic_corpus

    sched = scaled_linear_schedule(50)
    data = make_synthetic_corpus(256, 8, seed=4).tensor()
    torch.manual_seed(0)
    model = Denoiser(1, 16, 1, 16, 50, levels=1)
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    g = torch.Generator().manual_seed(0)
    for _ in range(600):
        idx = torch.randint(len(data), (32,), generator=g)
        t = torch.randint(1, 51, (32,), generator=g)
        eps = torch.randn(32, 1, 8, 8, generator=g)
        opt.zero_grad()
        ddpm_loss(model, data[idx], eps, t, sched).backward()
        opt.step()
    z = torch.randn(64, 1, 8, 8, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        x = sample(model, z, sched, 50, rng_seed=2)
    # statistics of the image-average pixel: 64 samples, 3 standard errors
    train_px = data.mean(dim=(1, 2, 3))
    se = float(train_px.std()) / math.sqrt(64)
    assert abs(float(x.mean()) - float(train_px.mean())) < 3 * se
    v_train, v_samp = float(data.var(dim=0).mean()), float(x.var(dim=0).mean())
    # sample variance of 64 draws has relative standard error ~ sqrt(2 / 63)
    assert abs(v_samp / v_train - 1) < 3 * math.sqrt(2 / 63)


# ---------------------------------------------------------------- normalization and checkpoints


def test_normalization_round_trip():
    imgs = np.random.default_rng(0).integers(0, 256, (3, 8, 8, 3), dtype=np.uint8)
    x = to_normalized(imgs)
    assert x.shape == (3, 3, 8, 8)
    assert float(x.min()) >= -1 and float(x.max()) <= 1
    assert np.array_equal(to_uint8(x), imgs)


def test_normalization_rejects_out_of_range():
    with pytest.raises(ValueError):
        to_normalized(np.full((1, 4, 4, 1), 300))


def test_checkpoint_round_trip_bit_exact(tmp_path, sched10):
    model = Denoiser(3, 8, 2, 8, 10, levels=2)
    path = save_checkpoint(tmp_path / "m.pt", model, sched10, {"round": 3})
    loaded, sched, extra = load_checkpoint(path)
    assert extra == {"round": 3}
    assert torch.equal(sched.betas, sched10.betas) and torch.equal(sched.alpha_bars, sched10.alpha_bars)
    assert loaded.parameter_order() == model.parameter_order()
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and torch.equal(p1, p2)


def test_checkpoint_rejects_unknown_version(tmp_path, sched10):
    path = save_checkpoint(tmp_path / "m.pt", Denoiser(1, 4, 1, 4, 10), sched10)
    blob = torch.load(path, weights_only=True)
    blob["format_version"] = 99
    torch.save(blob, path)
    with pytest.raises(ValueError):
        load_checkpoint(path)

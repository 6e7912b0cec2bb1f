import math

import pytest
import torch

from latact.expert import (ActionExpert, ActionNormalizer, DiffusionConfig,
                           ExpertContext, alpha_bar_schedule, denoise_step,
                           expert_loss, forward_diffuse, sample_chunk)

WIDTH, DEPTH, H, ADIM = 16, 2, 6, 3


def tiny_expert() -> ActionExpert:
    torch.manual_seed(0)
    return ActionExpert(WIDTH, DEPTH, H, ADIM, heads=2, mlp_ratio=2)


def make_context(b: int, seed: int = 1) -> ExpertContext:
    gen = torch.Generator().manual_seed(seed)
    return ExpertContext(
        backbone_states=[torch.randn(b, 5, WIDTH, generator=gen) for _ in range(DEPTH)],
        planner_states=[torch.randn(b, 4, WIDTH, generator=gen) for _ in range(DEPTH)],
        latent_embed=torch.randn(b, 4, WIDTH, generator=gen),
        proprio=torch.randn(b, 3, generator=gen),
    )


# ---------------------------------------------------------------------------
# Schedule


def test_schedule_endpoints_and_monotonicity():
    abar = alpha_bar_schedule(50)
    assert abar.shape == (51,)
    assert float(abar[0]) == 1.0  # exact
    assert (abar[1:] < abar[:-1]).all()
    assert (abar > 0).all() and (abar <= 1).all()


def test_schedule_matches_cosine_formula():
    abar = alpha_bar_schedule(50, dtype=torch.float64)
    s = 0.008
    for t in (1, 10, 25, 49):
        f = math.cos(((t / 50 + s) / (1 + s)) * math.pi / 2) ** 2
        f0 = math.cos((s / (1 + s)) * math.pi / 2) ** 2
        assert float(abar[t]) == pytest.approx(f / f0, rel=1e-12)
    assert float(abar[50]) == 1e-8  # terminal value clamped away from zero


def test_forward_diffuse_bounds():
    abar = alpha_bar_schedule(10)
    x = torch.randn(2, H, ADIM)
    assert torch.equal(forward_diffuse(x, 0, torch.zeros_like(x), abar), x)
    with pytest.raises(ValueError):
        forward_diffuse(x, 11, torch.zeros_like(x), abar)


def test_forward_marginal_monte_carlo():
    """E[x_t] = sqrt(abar_t) x0 and Var[x_t] = 1 - abar_t, within 3 standard
    errors over 10^4 draws."""
    abar = alpha_bar_schedule(50, dtype=torch.float64)
    gen = torch.Generator().manual_seed(7)
    n = 10_000
    x0 = torch.tensor(0.8, dtype=torch.float64)
    for t in (5, 25, 49):
        eps = torch.randn(n, dtype=torch.float64, generator=gen)
        xt = forward_diffuse(x0.expand(n), t, eps, abar)
        a = float(abar[t])
        true_mean, true_var = math.sqrt(a) * 0.8, 1.0 - a
        se_mean = math.sqrt(true_var / n)
        assert abs(float(xt.mean()) - true_mean) < 3 * se_mean
        se_var = true_var * math.sqrt(2.0 / (n - 1))
        assert abs(float(xt.var(unbiased=True)) - true_var) < 3 * se_var


# ---------------------------------------------------------------------------
# Reverse process


def test_oracle_one_step_recovery_exact():
    """Denoising a t=1-noised chunk with the true noise returns x0 up to the
    two float ops of the closed-form inversion."""
    abar = alpha_bar_schedule(50, dtype=torch.float64)
    gen = torch.Generator().manual_seed(3)
    x0 = torch.randn(4, H, ADIM, dtype=torch.float64, generator=gen)
    eps = torch.randn(4, H, ADIM, dtype=torch.float64, generator=gen)
    x1 = forward_diffuse(x0, 1, eps, abar)
    rec = denoise_step(x1, eps, 1, abar)
    assert torch.allclose(rec, x0, atol=1e-12, rtol=0)


def test_denoise_step_range_checked():
    abar = alpha_bar_schedule(10)
    x = torch.randn(1, H, ADIM)
    with pytest.raises(ValueError):
        denoise_step(x, x, 0, abar)
    with pytest.raises(ValueError):
        denoise_step(x, x, 11, abar)


def test_denoise_step_deterministic_mean_without_noise():
    abar = alpha_bar_schedule(10)
    x = torch.randn(2, H, ADIM)
    eps = torch.randn(2, H, ADIM)
    assert torch.equal(denoise_step(x, eps, 5, abar), denoise_step(x, eps, 5, abar))


# ---------------------------------------------------------------------------
# Loss


def test_padded_positions_contribute_zero_loss():
    torch.manual_seed(5)
    pred = torch.randn(3, H, ADIM)
    true = torch.randn(3, H, ADIM)
    mask = torch.ones(3, H, dtype=torch.bool)
    mask[:, 4:] = False
    base = expert_loss(pred, true, mask)
    # corrupt predictions only at padded positions: loss unchanged exactly
    pred2 = pred.clone()
    pred2[:, 4:] = 1e6
    assert torch.equal(expert_loss(pred2, true, mask), base)


def test_expert_loss_matches_mse_when_unpadded():
    torch.manual_seed(6)
    pred = torch.randn(2, H, ADIM)
    true = torch.randn(2, H, ADIM)
    mask = torch.ones(2, H, dtype=torch.bool)
    assert torch.allclose(expert_loss(pred, true, mask),
                          torch.nn.functional.mse_loss(pred, true))


def test_padded_positions_get_zero_gradient():
    pred = torch.randn(2, H, ADIM, requires_grad=True)
    true = torch.randn(2, H, ADIM)
    mask = torch.ones(2, H, dtype=torch.bool)
    mask[:, 3:] = False
    expert_loss(pred, true, mask).backward()
    assert torch.all(pred.grad[:, 3:] == 0)
    assert torch.any(pred.grad[:, :3] != 0)


# ---------------------------------------------------------------------------
# Expert model and sampling


def test_expert_forward_shape():
    model = tiny_expert()
    ctx = make_context(2)
    out = model(torch.randn(2, H, ADIM), torch.tensor([3, 7]), ctx)
    assert out.shape == (2, H, ADIM)


def test_context_validation():
    model = tiny_expert()
    ctx = make_context(1)
    ctx.planner_states = ctx.planner_states[:1]
    with pytest.raises(ValueError):
        model(torch.randn(1, H, ADIM), torch.tensor([1]), ctx)


def test_sampling_deterministic_given_seed():
    model = tiny_expert()
    model.eval()
    abar = alpha_bar_schedule(10)
    ctx = make_context(1)
    a = sample_chunk(model, ctx, abar, seed=9)
    b = sample_chunk(model, ctx, abar, seed=9)
    c = sample_chunk(model, ctx, abar, seed=10)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)
    assert a.shape == (1, H, ADIM)


def test_sampling_depends_on_context():
    model = tiny_expert()
    model.eval()
    abar = alpha_bar_schedule(10)
    a = sample_chunk(model, make_context(1, seed=1), abar, seed=9)
    b = sample_chunk(model, make_context(1, seed=2), abar, seed=9)
    assert not torch.equal(a, b)


# ---------------------------------------------------------------------------
# Normalizer


def test_normalizer_round_trip():
    norm = ActionNormalizer(3)
    gen = torch.Generator().manual_seed(8)
    actions = torch.rand(100, 3, generator=gen) * 4.0 - 1.0
    norm.fit(actions)
    z = norm.normalize(actions)
    assert float(z.min()) >= -1.0 - 1e-6 and float(z.max()) <= 1.0 + 1e-6
    assert torch.allclose(norm.denormalize(z), actions, atol=1e-6)


def test_normalizer_degenerate_dim():
    norm = ActionNormalizer(2)
    actions = torch.zeros(50, 2)
    actions[:, 0] = torch.linspace(-1, 1, 50)
    norm.fit(actions)  # dim 1 is constant: widened instead of dividing by 0
    z = norm.normalize(actions)
    assert torch.isfinite(z).all()
    assert torch.allclose(norm.denormalize(z), actions, atol=1e-6)


def test_diffusion_config_validation():
    with pytest.raises(ValueError):
        DiffusionConfig(num_steps=0)
    with pytest.raises(ValueError):
        DiffusionConfig(schedule="linear")
    with pytest.raises(ValueError):
        DiffusionConfig(prediction_target="x0")

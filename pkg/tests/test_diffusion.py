import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sprout.diffusion import (
    PARAM_MODES,
    SCHEDULE_KINDS,
    LossWeighting,
    Parameterization,
    denoising_loss,
    forward_diffuse,
    make_schedule,
    recover_x0,
    regression_target,
    sample_timesteps,
)
from sprout.errors import ArgumentError, ConfigurationError, NumericError, ShapeError, SingularityError

GRID = torch.linspace(0, 1, 1001, dtype=torch.float64)


@pytest.mark.parametrize("kind", SCHEDULE_KINDS)
def test_schedule_invariants(kind):
    s = make_schedule(kind)
    tol = 1e-3 if kind == "vp-ddpm" else 1e-6
    assert abs(s.a(0.0) - 1.0) <= tol and abs(s.b(0.0)) <= tol
    a, b = s.a(GRID), s.b(GRID)
    assert (a[1:] <= a[:-1]).all()
    assert (b[1:] >= b[:-1]).all()
    assert s.a(1.0) <= 1e-3 and s.b(1.0) >= 1 - 1e-3


def test_schedule_formulas():
    lin, cos = make_schedule("linear-interp"), make_schedule("cosine")
    assert torch.equal(lin.a(GRID), 1 - GRID) and torch.equal(lin.b(GRID), GRID)
    assert torch.allclose(cos.a(GRID) ** 2 + cos.b(GRID) ** 2, torch.ones_like(GRID), atol=1e-6)
    assert lin.a(0.25) == 0.75 and lin.b(0.25) == 0.25
    assert cos.a(0.0) == 1.0 and cos.b(0.0) == 0.0
    assert cos.a(0.5) == pytest.approx(math.cos(math.pi / 4), abs=1e-12)
    assert cos.b(0.5) == pytest.approx(0.70711, abs=1e-5)


def test_vp_schedule_matches_discrete_ddpm_interior():
    # away from the terminal rescale, sqrt(alpha_bar) at integer steps follows the
    # product of (1 - beta_i) for the linear beta ramp
    betas = np.linspace(1e-4, 0.02, 1000)
    ab = np.cumprod(1 - betas)
    end = math.sqrt(ab[-1])
    s = make_schedule("vp-ddpm")
    for k in (1, 100, 500, 900):
        expected = (math.sqrt(ab[k - 1]) - end) / (1 - end)
        assert s.a(k / 1000) == pytest.approx(expected, rel=1e-9)
    assert s.a(0.5) ** 2 + s.b(0.5) ** 2 == pytest.approx(1.0)


def test_unknown_kinds_raise():
    with pytest.raises(ConfigurationError):
        make_schedule("sigmoid")
    with pytest.raises(ConfigurationError):
        Parameterization("score")
    with pytest.raises(ConfigurationError):
        LossWeighting("p2")


@pytest.mark.parametrize("mode,cd", [("epsilon", (0, 1)), ("x0", (1, 0)), ("velocity", (-1, 1))])
def test_parameterization_table(mode, cd):
    p = Parameterization(mode)
    for t in (0.0, 0.3, 1.0):
        assert (p.c(t), p.d(t)) == cd


def test_forward_diffuse_examples():
    lin = make_schedule("linear-interp")
    x0 = torch.randn(2, 3, 4, 4)
    eps = torch.randn(2, 3, 4, 4)
    assert torch.equal(forward_diffuse(x0, eps, torch.zeros(2), lin).xt, x0)
    assert torch.equal(forward_diffuse(x0, eps, torch.ones(2), lin).xt, eps)
    nb = forward_diffuse(torch.tensor(0.4, dtype=torch.float64), torch.tensor(-0.8, dtype=torch.float64), 0.25, lin)
    assert float(nb.xt) == pytest.approx(0.1, abs=1e-15)


def test_forward_diffuse_per_sample_times():
    s = make_schedule("cosine")
    x0, eps = torch.randn(3, 2, 2, 2, dtype=torch.float64), torch.randn(3, 2, 2, 2, dtype=torch.float64)
    t = torch.tensor([0.1, 0.5, 0.9], dtype=torch.float64)
    nb = forward_diffuse(x0, eps, t, s)
    for i in range(3):
        ref = s.a(float(t[i])) * x0[i] + s.b(float(t[i])) * eps[i]
        assert torch.allclose(nb.xt[i], ref, atol=1e-12)
    assert nb.x0 is x0 and nb.eps is eps


def test_forward_diffuse_errors():
    s = make_schedule()
    with pytest.raises(ShapeError):
        forward_diffuse(torch.zeros(2, 3), torch.zeros(2, 4), torch.zeros(2), s)
    with pytest.raises(ArgumentError):
        forward_diffuse(torch.zeros(2, 3), torch.zeros(2, 3), torch.tensor([0.5, 1.5]), s)
    with pytest.raises(ArgumentError):
        forward_diffuse(torch.zeros(2, 3), torch.zeros(2, 3), torch.tensor([-0.1, 0.5]), s)


def test_regression_targets():
    x0, eps = torch.tensor(0.4), torch.tensor(-0.8)
    assert float(regression_target(x0, eps, 0.3, Parameterization("epsilon"))) == pytest.approx(-0.8)
    assert float(regression_target(x0, eps, 0.3, Parameterization("x0"))) == pytest.approx(0.4)
    assert float(regression_target(x0, eps, 0.3, Parameterization("velocity"))) == pytest.approx(-1.2)


@pytest.mark.parametrize("mode", PARAM_MODES)
def test_target_matches_coefficient_table(mode):
    p = Parameterization(mode)
    x0, eps = torch.randn(4, 8, dtype=torch.float64), torch.randn(4, 8, dtype=torch.float64)
    r = regression_target(x0, eps, torch.rand(4, dtype=torch.float64), p)
    assert torch.equal(r, p.c() * x0 + p.d() * eps)


def test_recover_x0_examples():
    lin = make_schedule()
    xt, pred = torch.tensor(0.1, dtype=torch.float64), torch.tensor(-0.8, dtype=torch.float64)
    out = recover_x0(xt, pred, 0.25, lin, Parameterization("epsilon"))
    assert float(out) == pytest.approx(0.4, abs=1e-15)
    assert float(recover_x0(xt, pred, 0.25, lin, Parameterization("x0"))) == -0.8


def test_recover_x0_singularity():
    lin = make_schedule()
    with pytest.raises(SingularityError):
        recover_x0(torch.zeros(2, 3), torch.zeros(2, 3), torch.tensor([0.5, 1.0]), lin, Parameterization("epsilon"))
    # x0 mode never divides; velocity mode divides by a + b >= 1 here
    recover_x0(torch.zeros(1, 3), torch.zeros(1, 3), torch.tensor([1.0]), lin, Parameterization("x0"))
    recover_x0(torch.zeros(1, 3), torch.zeros(1, 3), torch.tensor([1.0]), lin, Parameterization("velocity"))


@pytest.mark.parametrize("kind", SCHEDULE_KINDS)
@pytest.mark.parametrize("mode", PARAM_MODES)
def test_round_trip(kind, mode):
    s, p = make_schedule(kind), Parameterization(mode)
    gen = torch.Generator().manual_seed(0)
    t = torch.linspace(0, 0.95, 20, dtype=torch.float64)
    x0 = torch.rand(20, 3, 4, 4, generator=gen, dtype=torch.float64) * 2 - 1
    eps = torch.randn(20, 3, 4, 4, generator=gen, dtype=torch.float64)
    if mode == "epsilon":
        t = t[s.a(t) >= 1e-3]
        x0, eps = x0[: len(t)], eps[: len(t)]
    nb = forward_diffuse(x0, eps, t, s)
    back = recover_x0(nb.xt, regression_target(x0, eps, t, p), t, s, p)
    assert torch.allclose(back, x0, atol=1e-6, rtol=0)


def test_loss_examples():
    r = torch.randn(3, 2, 4, 4)
    assert float(denoising_loss(r, r, torch.rand(3))) == 0.0
    assert float(denoising_loss(torch.tensor(1.0), torch.tensor(0.0), 0.3)) == 1.0
    pred = torch.tensor([[0.0, 0.0], [1.0, 1.0]])
    target = torch.tensor([[0.0, 0.0], [0.0, 2.0]])
    # per-sample MSE {0, 1}; squared-error sums {0, 2}
    assert float(denoising_loss(pred, target, torch.tensor([0.2, 0.7]))) == pytest.approx(0.5)
    pred1 = torch.tensor([[0.0], [2.0 ** 0.5]])
    assert float(denoising_loss(pred1, torch.zeros(2, 1), torch.tensor([0.2, 0.7]))) == pytest.approx(1.0)


def test_loss_rejects_non_finite():
    with pytest.raises(NumericError):
        denoising_loss(torch.tensor([float("nan")]), torch.zeros(1), torch.zeros(1))
    with pytest.raises(ShapeError):
        denoising_loss(torch.zeros(2, 3), torch.zeros(3, 2), torch.zeros(2))


def test_snr_weighting():
    s = make_schedule("cosine")
    w = LossWeighting("snr", s)
    t = torch.linspace(0, 0.999, 200, dtype=torch.float64)
    lam = w(t)
    assert (lam > 0).all() and (lam <= 5.0).all()
    assert w(0.5) == pytest.approx(1.0)
    assert LossWeighting("uniform")(0.7) == 1.0


@given(st.permutations(list(range(6))))
@settings(max_examples=25, deadline=None)
def test_loss_permutation_invariant(perm):
    gen = torch.Generator().manual_seed(1)
    pred = torch.randn(6, 5, generator=gen, dtype=torch.float64)
    target = torch.randn(6, 5, generator=gen, dtype=torch.float64)
    t = torch.rand(6, generator=gen, dtype=torch.float64)
    w = LossWeighting("snr", make_schedule("cosine"))
    idx = torch.tensor(perm)
    assert float(denoising_loss(pred[idx], target[idx], t[idx], w)) == pytest.approx(float(denoising_loss(pred, target, t, w)), rel=1e-12)


def test_sample_timesteps():
    a, b = sample_timesteps(1000, 7), sample_timesteps(1000, 7)
    assert torch.equal(a, b)
    assert not torch.equal(a, sample_timesteps(1000, 8))
    big = sample_timesteps(100_000, 3, dtype=torch.float64)
    assert (big >= 0).all() and (big < 1).all()
    assert abs(float(big.mean()) - 0.5) < 0.01
    with pytest.raises(ArgumentError):
        sample_timesteps(0, 0)


def test_epsilon_targets_full_rank():
    eps = torch.randn(64, 16, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    assert torch.linalg.matrix_rank(eps).item() == 16

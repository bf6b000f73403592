import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from concept_inversion.schedule import forward_diffuse, make_schedule


def test_single_step_schedule():
    s = make_schedule(1, "linear", 0.5, 0.5)
    assert s.betas.tolist() == [0.5]
    assert s.alpha_bars.tolist() == [0.5]


def test_three_step_hand_product():
    # oracle: exact rational product (1 - 0.1)(1 - 0.2)(1 - 0.3)
    s = make_schedule(3, "linear", 0.1, 0.3)
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.72, 0.504], rtol=1e-12)


def test_thousand_step_schedule_ends_near_zero():
    # oracle: an independent float loop gives 4.0358e-05
    s = make_schedule(1000, "linear", 1e-4, 0.02)
    assert s.alpha_bars[-1] < 0.01
    assert s.alpha_bars[-1] == pytest.approx(4.0358297653756754e-05, rel=1e-9)


@pytest.mark.parametrize("args", [(0, "linear", 0.1, 0.2), (-3, "linear", 0.1, 0.2), (5, "linear", 0.0, 0.2),
                                  (5, "linear", 0.1, 1.0), (5, "linear", 0.3, 0.2), (5, "bogus", 0.1, 0.2)])
def test_make_schedule_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


@settings(max_examples=60, deadline=None)
@given(T=st.integers(1, 400), kind=st.sampled_from(["linear", "cosine"]),
       lo=st.floats(1e-5, 0.5), width=st.floats(0.0, 0.49))
def test_schedule_invariants(T, kind, lo, width):
    hi = min(lo + width, 0.999)
    s = make_schedule(T, kind, lo, hi)
    assert len(s.betas) == T
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all((s.alpha_bars > 0) & (s.alpha_bars < 1))
    assert np.all(np.diff(s.alpha_bars) < 0)
    running = 1.0
    for beta, ab in zip(s.betas, s.alpha_bars):
        running *= 1 - beta
        assert abs(ab - running) <= 1e-12 * running


def test_forward_diffuse_special_cases():
    s = make_schedule(10, "linear", 0.01, 0.2)
    x0 = torch.randn(2, 1, 4, 4)
    eps = torch.randn(2, 1, 4, 4)
    ab = torch.tensor(s.alpha_bars[4], dtype=torch.float32)
    torch.testing.assert_close(forward_diffuse(x0, 5, torch.zeros_like(x0), s), ab.sqrt() * x0)
    torch.testing.assert_close(forward_diffuse(torch.zeros_like(x0), 5, eps, s), (1 - ab).sqrt() * eps)


def test_forward_diffuse_hand_value():
    # a schedule whose first step has abar = 0.64: 0.8 * 1 + 0.6 * 1 = 1.4
    s = make_schedule(1, "linear", 0.36, 0.36)
    out = forward_diffuse(torch.tensor([1.0], dtype=torch.float64), 1, torch.tensor([1.0], dtype=torch.float64), s)
    assert out.item() == pytest.approx(1.4, abs=1e-12)


def test_forward_diffuse_errors():
    s = make_schedule(10)
    x0 = torch.zeros(1, 1, 4, 4)
    with pytest.raises(ValueError):
        forward_diffuse(x0, 1, torch.zeros(1, 1, 4, 5), s)
    for t in (0, 11):
        with pytest.raises(ValueError):
            forward_diffuse(x0, t, x0, s)


@settings(max_examples=40, deadline=None)
@given(a=st.floats(-5, 5), t=st.integers(1, 50), seed=st.integers(0, 1000))
def test_forward_diffuse_is_linear(a, t, seed):
    s = make_schedule(50)
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(3, 1, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(3, 1, 4, 4, generator=g, dtype=torch.float64)
    torch.testing.assert_close(forward_diffuse(a * x0, t, a * eps, s), a * forward_diffuse(x0, t, eps, s),
                               rtol=1e-12, atol=1e-12)


def test_per_row_steps():
    s = make_schedule(10)
    x0 = torch.ones(3, 1, 2, 2, dtype=torch.float64)
    out = forward_diffuse(x0, torch.tensor([1, 5, 10]), torch.zeros_like(x0), s)
    np.testing.assert_allclose(out[:, 0, 0, 0].numpy(), np.sqrt(s.alpha_bars[[0, 4, 9]]))

"""
Tests for Gaussian topics, KL divergence and cyclical annealing
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vti.core.errors import ContractViolation
from vti.engine import Tensor, grad_check_many, precision
from vti.services.latent_service import (
    LOG_SIGMA_MAX,
    LOG_SIGMA_MIN,
    AnnealSchedule,
    DiagonalGaussian,
    beta_at,
    kl_diag_gauss,
    kl_monte_carlo,
    reparameterize,
)


def gauss(mu, log_sigma) -> DiagonalGaussian:
    return DiagonalGaussian(mu=Tensor(mu), log_sigma=Tensor(log_sigma))


def test_reparameterize_examples():
    """Test zero noise, vanishing sigma and a unit example"""
    g = gauss([0.3, -1.2], [0.1, 0.5])
    assert np.allclose(reparameterize(g, np.zeros(2)).data, g.mu.data)

    narrow = gauss([1.0, 2.0], [-8.0, -8.0])
    assert np.allclose(reparameterize(narrow, np.array([5.0, -5.0])).data, [1.0, 2.0], atol=2e-3)

    assert np.allclose(reparameterize(gauss([0.0], [0.0]), np.array([0.5])).data, [0.5])
    with pytest.raises(ContractViolation):
        reparameterize(g, np.zeros(3))


def test_from_raw_clamps_log_sigma():
    """Test log_sigma is clamped to [-8, 4]"""
    g = DiagonalGaussian.from_raw(Tensor([0.0, 0.0, 0.0]), Tensor([-20.0, 0.5, 9.0]))
    assert np.allclose(g.log_sigma.data, [LOG_SIGMA_MIN, 0.5, LOG_SIGMA_MAX])
    assert np.all(g.sigma > 0)


def test_kl_examples():
    """Test KL identity and two closed forms"""
    with precision(np.float64):
        p = gauss([0.2, -0.4], [0.3, -0.1])
        assert kl_diag_gauss(p, p).item() == pytest.approx(0.0, abs=1e-12)
        assert kl_diag_gauss(gauss([1.0], [0.0]), gauss([0.0], [0.0])).item() == pytest.approx(0.5)
        expected = 0.5 * (4.0 - 1.0 - math.log(4.0))
        assert kl_diag_gauss(gauss([0.0], [math.log(2.0)]), gauss([0.0], [0.0])).item() == pytest.approx(expected)
        assert expected == pytest.approx(0.8069, abs=1e-4)
    with pytest.raises(ContractViolation):
        kl_diag_gauss(gauss([0.0], [0.0]), gauss([0.0, 0.0], [0.0, 0.0]))


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(min_value=-3, max_value=3), min_size=4, max_size=4),
    st.lists(st.floats(min_value=-2, max_value=2), min_size=4, max_size=4),
)
def test_kl_non_negative(mus, log_sigmas):
    """Test KL(q || p) >= 0 for arbitrary diagonal Gaussians"""
    with precision(np.float64):
        q = gauss(mus[:2], log_sigmas[:2])
        p = gauss(mus[2:], log_sigmas[2:])
        assert kl_diag_gauss(q, p).item() >= -1e-12


def test_kl_matches_monte_carlo():
    """Test closed form against 1e5 reparameterized samples for 20 random pairs"""
    rng = np.random.default_rng(2024)
    deviations = []
    with precision(np.float64):
        for _ in range(20):
            q = gauss(rng.normal(size=3), rng.uniform(-1.0, 0.5, size=3))
            p = gauss(rng.normal(size=3), rng.uniform(-0.5, 1.0, size=3))
            estimate, stderr = kl_monte_carlo(q, p, 100_000, rng)
            deviations.append(abs(kl_diag_gauss(q, p).item() - estimate) / stderr)
    assert max(deviations) <= 4.0
    assert sum(d > 3.0 for d in deviations) <= 1


def test_kl_gradient():
    """Test KL gradients with respect to both distributions"""
    rng = np.random.default_rng(5)
    with precision(np.float64):
        q = gauss(rng.normal(size=3), rng.normal(size=3) * 0.3)
        p = gauss(rng.normal(size=3), rng.normal(size=3) * 0.3)
        report = grad_check_many(lambda: kl_diag_gauss(q, p), [q.mu, q.log_sigma, p.mu, p.log_sigma])
        assert report.max_rel_err <= 1e-6


def test_log_density_standard_normal():
    """Test log N(0; 0, 1) per dimension"""
    g = DiagonalGaussian.standard(2)
    assert g.log_density(np.zeros(2)) == pytest.approx(-math.log(2 * math.pi))


def test_beta_examples():
    """Test cycle start, ramp end and linearity"""
    s = AnnealSchedule(beta_max=2.0, total_steps=800, cycles=4, ramp_ratio=0.5)
    c = s.cycle_length
    assert beta_at(s, 0) == 0.0
    assert beta_at(s, int(0.5 * c)) == pytest.approx(2.0)
    assert beta_at(s, int(0.25 * 0.5 * c)) == pytest.approx(0.5)
    assert beta_at(s, int(c)) == 0.0
    with pytest.raises(ContractViolation):
        beta_at(s, -1)


def test_beta_periodic_and_bounded():
    """Test beta repeats every cycle and stays in [0, beta_max]"""
    s = AnnealSchedule(beta_max=1.0, total_steps=120, cycles=3, ramp_ratio=0.25)
    values = [beta_at(s, step) for step in range(240)]
    assert all(0.0 <= b <= 1.0 for b in values)
    period = int(s.cycle_length)
    assert values[:period] == values[period:2 * period]


def test_anneal_schedule_validation():
    """Test schedule contracts"""
    with pytest.raises(ContractViolation):
        AnnealSchedule(total_steps=2, cycles=4)
    with pytest.raises(ContractViolation):
        AnnealSchedule(ramp_ratio=0.0)
    with pytest.raises(ContractViolation):
        AnnealSchedule(cycles=0)

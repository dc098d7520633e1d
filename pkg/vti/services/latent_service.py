# vti/services/latent_service.py
"""
Latent Topic Machinery

- DiagonalGaussian: fully factorized Gaussian with clamped log standard deviation
- reparameterize: mu + sigma * epsilon with caller-supplied epsilon
- kl_diag_gauss: closed-form KL between diagonal Gaussians
- AnnealSchedule / beta_at: cyclical linear-ramp weighting of the KL term
"""

import math
from dataclasses import dataclass

import numpy as np

from vti.core.errors import ContractViolation
from vti.engine import Tensor, add, clamp, exp, mul, scale, sub, tensor_sum

LOG_SIGMA_MIN = -8.0
LOG_SIGMA_MAX = 4.0


@dataclass
class DiagonalGaussian:
    """mu and log_sigma, both shape (d_z,)"""
    mu: Tensor
    log_sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_sigma.shape:
            raise ContractViolation(f"mu {self.mu.shape} and log_sigma {self.log_sigma.shape} differ")

    @classmethod
    def from_raw(cls, mu: Tensor, raw_log_sigma: Tensor) -> "DiagonalGaussian":
        """Build from unconstrained network outputs; log_sigma is clamped to [-8, 4]"""
        return cls(mu=mu, log_sigma=clamp(raw_log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX))

    @classmethod
    def standard(cls, dim: int) -> "DiagonalGaussian":
        return cls(mu=Tensor(np.zeros(dim)), log_sigma=Tensor(np.zeros(dim)))

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.data)

    def log_density(self, z: np.ndarray) -> float:
        """log N(z; mu, sigma^2) summed over dimensions (numpy, no tape)"""
        sigma = self.sigma
        return float(np.sum(
            -0.5 * np.log(2.0 * np.pi) - np.log(sigma) - 0.5 * ((z - self.mu.data) / sigma) ** 2
        ))


def reparameterize(g: DiagonalGaussian, epsilon) -> Tensor:
    """
    Differentiable sample mu + sigma * epsilon

    Args:
        g: distribution
        epsilon: standard-normal draws of shape (d_z,), supplied by the caller's seeded RNG
    """
    eps = np.asarray(epsilon)
    if eps.shape != g.mu.shape:
        raise ContractViolation(f"epsilon shape {eps.shape} != distribution shape {g.mu.shape}")
    return add(g.mu, mul(exp(g.log_sigma), Tensor(eps)))


def kl_diag_gauss(q: DiagonalGaussian, p: DiagonalGaussian) -> Tensor:
    """
    KL(q || p) = sum_d [log(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2]

    Always >= 0; differentiable with respect to both distributions.
    """
    if q.mu.shape != p.mu.shape:
        raise ContractViolation(f"KL between dimensions {q.mu.shape} and {p.mu.shape}")
    log_ratio = sub(p.log_sigma, q.log_sigma)
    var_ratio = exp(scale(sub(q.log_sigma, p.log_sigma), 2.0))
    diff = sub(q.mu, p.mu)
    mahalanobis = mul(mul(diff, diff), exp(scale(p.log_sigma, -2.0)))
    per_dim = add(log_ratio, scale(add(var_ratio, mahalanobis), 0.5))
    return add(tensor_sum(per_dim), -0.5 * q.dim)


def kl_monte_carlo(q: DiagonalGaussian, p: DiagonalGaussian, samples: int,
                   rng: np.random.Generator) -> tuple[float, float]:
    """
    Monte-Carlo estimate of KL(q || p) = E_q[log q - log p]

    Returns:
        (estimate, standard error)
    """
    mq, sq = q.mu.data.astype(np.float64), q.sigma.astype(np.float64)
    mp, sp = p.mu.data.astype(np.float64), p.sigma.astype(np.float64)
    z = mq + sq * rng.standard_normal((samples, mq.size))
    log_q = -np.log(sq) - 0.5 * ((z - mq) / sq) ** 2
    log_p = -np.log(sp) - 0.5 * ((z - mp) / sp) ** 2
    diff = (log_q - log_p).sum(axis=1)
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(samples))


# ============================================================================
# Cyclical annealing
# ============================================================================

@dataclass(frozen=True)
class AnnealSchedule:
    """
    Cyclical beta schedule: linear ramp over ramp_ratio of each cycle, then plateau

    Defaults follow the common cyclical recipe (4 cycles, ramp over half a cycle).
    """
    beta_max: float = 1.0
    total_steps: int = 1000
    cycles: int = 4
    ramp_ratio: float = 0.5

    def __post_init__(self):
        if self.cycles < 1:
            raise ContractViolation("cycles must be >= 1")
        if not 0.0 < self.ramp_ratio <= 1.0:
            raise ContractViolation(f"ramp_ratio must be in (0, 1], got {self.ramp_ratio}")
        if self.cycle_length < 1.0:
            raise ContractViolation(
                f"cycle length total_steps/cycles = {self.cycle_length:g} must be >= 1"
            )

    @property
    def cycle_length(self) -> float:
        return self.total_steps / self.cycles


def beta_at(s: AnnealSchedule, step: int) -> float:
    """KL weight at a global step"""
    if step < 0:
        raise ContractViolation("step must be >= 0")
    c = s.cycle_length
    t = math.fmod(step, c)
    return s.beta_max * min(1.0, t / (s.ramp_ratio * c))

"""Convergence-bound evaluation: variance bound, per-round descent, average-gradient bound.

``omega`` is the resource-allocation objective and follows the printed form,
where (sigma^2 + G1^2 Psi^2) multiplies the aggregation MSE and the device
count enters through both c1 and an extra (K + 1).  ``lemma1_variance_bound``
and ``per_round_descent_bound`` use the additive form that the variance
argument actually yields: sigma^2 / b + G1^2 Psi^2 MSE / b.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .aircomp import mse_bound_terms
from .model import AllocationPlan, ChannelState, SystemConfig


@dataclass(frozen=True)
class ConvergenceConstants:
    lipschitz_L: float = 1.0
    learning_rate_mu: float = 0.1
    grad_variance_sigma2: float = 1.0
    embed_param_grad_G1: float = 1.0
    embed_input_grad_G2: float = 1.0
    hessian_bound_Psi: float = 1.0
    num_devices_K: int = 3
    num_rounds_T: int = 200

    def __post_init__(self):
        if not self.lipschitz_L > 0:
            raise ValueError("lipschitz_L must be positive")
        if not 0 <= self.learning_rate_mu < 2.0 / self.lipschitz_L:
            raise ValueError("learning rate must satisfy 0 <= mu < 2/L")
        for n in ("grad_variance_sigma2", "embed_param_grad_G1", "embed_input_grad_G2", "hessian_bound_Psi"):
            if not getattr(self, n) >= 0:
                raise ValueError(f"{n} must be nonnegative")
        if self.num_devices_K < 1 or self.num_rounds_T < 1:
            raise ValueError("num_devices_K and num_rounds_T must be >= 1")

    @classmethod
    def for_config(cls, config: SystemConfig, **overrides) -> "ConvergenceConstants":
        return cls(num_devices_K=config.K, num_rounds_T=config.T, **overrides)

    def replace(self, **kw) -> "ConvergenceConstants":
        return ConvergenceConstants(**{**asdict(self), **kw})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BoundReport:
    c1: float
    omega: float
    omega_per_round: np.ndarray
    per_round_descent: np.ndarray
    avg_grad_bound: float
    optimization_gap_term: float

    def to_dict(self) -> dict:
        return {"c1": self.c1, "omega": self.omega, "omega_per_round": self.omega_per_round.tolist(),
                "per_round_descent": self.per_round_descent.tolist(),
                "avg_grad_bound": self.avg_grad_bound, "optimization_gap_term": self.optimization_gap_term}


def c1(constants: ConvergenceConstants) -> float:
    L, mu = constants.lipschitz_L, constants.learning_rate_mu
    if mu >= 2.0 / L:
        raise ValueError("learning rate must satisfy mu < 2/L")
    K, T = constants.num_devices_K, constants.num_rounds_T
    noise = constants.grad_variance_sigma2 + constants.embed_param_grad_G1**2 * constants.hessian_bound_Psi**2
    return L * mu * (K + 1) * noise / ((2.0 - L * mu) * T)


def mse_totals(plan: AllocationPlan, channel: ChannelState, constants: ConvergenceConstants,
               config: SystemConfig) -> np.ndarray:
    mis, sens, chan = mse_bound_terms(channel.magnitudes, plan.tx_power, plan.sense_power, plan.denoise,
                                      constants.embed_input_grad_G2, config.network, config.devices)
    return mis + sens + chan


def omega_per_round(plan: AllocationPlan, channel: ChannelState, constants: ConvergenceConstants,
                    config: SystemConfig) -> np.ndarray:
    """Per-round contributions c1 (K+1) / b_t * MSE-bound_t."""
    weight = c1(constants) * (constants.num_devices_K + 1)
    return weight / plan.batch_size.astype(float) * mse_totals(plan, channel, constants, config)


def omega(plan: AllocationPlan, channel: ChannelState, constants: ConvergenceConstants,
          config: SystemConfig) -> float:
    return float(np.sum(omega_per_round(plan, channel, constants, config)))


def lemma1_variance_bound(b, mse_bound_total, constants: ConvergenceConstants):
    b = np.asarray(b, dtype=float)
    if np.any(b < 1):
        raise ValueError("batch size must be >= 1")
    g1psi = constants.embed_param_grad_G1**2 * constants.hessian_bound_Psi**2
    return constants.grad_variance_sigma2 / b + g1psi / b * np.asarray(mse_bound_total, dtype=float)


def per_round_descent_bound(grad_norm_sq, b, mse_bound_total, constants: ConvergenceConstants):
    """Upper bound on E[F(next) - F(now)] after one update with batch b."""
    L, mu, K = constants.lipschitz_L, constants.learning_rate_mu, constants.num_devices_K
    b = np.asarray(b, dtype=float)
    if np.any(b < 1):
        raise ValueError("batch size must be >= 1")
    descent = -mu * (1.0 - L * mu / 2.0) * np.asarray(grad_norm_sq, dtype=float)
    g1psi = constants.embed_param_grad_G1**2 * constants.hessian_bound_Psi**2
    error = L * mu**2 * (K + 1) / (2.0 * b) * (constants.grad_variance_sigma2 + g1psi * np.asarray(mse_bound_total))
    return descent + error


def avg_grad_bound(initial_loss_gap: float, plan: AllocationPlan, channel: ChannelState,
                   constants: ConvergenceConstants, config: SystemConfig) -> BoundReport:
    """Bound on the average squared gradient norm over T rounds: gap term + omega."""
    if initial_loss_gap < 0:
        raise ValueError("initial loss gap must be nonnegative")
    L, mu, T = constants.lipschitz_L, constants.learning_rate_mu, constants.num_rounds_T
    cc = c1(constants)
    if mu == 0:
        raise ValueError("the average-gradient bound needs a positive learning rate")
    gap = 2.0 * initial_loss_gap / (mu * (2.0 - L * mu) * T)
    mse = mse_totals(plan, channel, constants, config)
    contrib = cc * (constants.num_devices_K + 1) / plan.batch_size.astype(float) * mse
    om = float(np.sum(contrib))
    descent = per_round_descent_bound(0.0, plan.batch_size, mse, constants)
    return BoundReport(cc, om, contrib, np.asarray(descent, dtype=float), gap + om, gap)

import math

import numpy as np
import pytest

from iscc_vfeel.convergence import (ConvergenceConstants, avg_grad_bound, c1, lemma1_variance_bound, mse_totals,
                                    omega, omega_per_round, per_round_descent_bound)
from iscc_vfeel.model import AllocationPlan, ChannelState, DeviceParams, NetworkParams, SystemConfig


def _system(K, T, sz2=1e-3, ds2=1e-3, clutter=1e-3):
    net = NetworkParams(num_devices=K, num_rounds=T, channel_noise_variance=sz2, sensing_noise_variance=ds2)
    return SystemConfig(net, tuple(DeviceParams(clutter_variance=clutter) for _ in range(K)))


def test_c1_direct_substitution():
    k = ConvergenceConstants(lipschitz_L=1, learning_rate_mu=1, grad_variance_sigma2=0, embed_param_grad_G1=1,
                             hessian_bound_Psi=1, num_devices_K=1, num_rounds_T=1)
    assert c1(k) == pytest.approx(2.0)


def test_c1_defaults_hand_value():
    # L=1, mu=0.1, K=3, T=200, sigma^2=G1=Psi=1: 1*0.1*4*(1+1) / (1.9*200)
    assert c1(ConvergenceConstants()) == pytest.approx(0.8 / 380, rel=1e-14)


def test_c1_vanishes_with_learning_rate():
    assert c1(ConvergenceConstants(learning_rate_mu=0.0)) == 0.0
    assert c1(ConvergenceConstants(learning_rate_mu=1e-9)) < 1e-10


def test_constants_validation():
    with pytest.raises(ValueError, match="2/L"):
        ConvergenceConstants(lipschitz_L=2.0, learning_rate_mu=1.0)
    with pytest.raises(ValueError):
        ConvergenceConstants(grad_variance_sigma2=-1.0)
    assert ConvergenceConstants().replace(lipschitz_L=3.0).lipschitz_L == 3.0


def test_omega_zero_for_aligned_noiseless_plan():
    cfg = _system(2, 3, 0.0, 0.0, 0.0)
    h = np.array([[0.5, 1.0, 2.0], [1.5, 0.7, 0.9]])
    eta = np.array([1.0, 2.0, 0.5])
    plan = AllocationPlan(eta / h**2, np.ones((2, 3)), np.array([5, 5, 5]), eta)
    k = ConvergenceConstants.for_config(cfg)
    assert omega(plan, ChannelState(h), k, cfg) == pytest.approx(0.0, abs=1e-28)


def test_omega_brute_force_small_instance():
    cfg = _system(2, 2, sz2=0.01, ds2=0.02, clutter=0.03)
    h = np.array([[0.9, 1.2], [0.4, 1.1]])
    p = np.array([[0.5, 0.2], [1.0, 0.3]])
    ps = np.array([[0.04, 0.05], [0.01, 0.02]])
    b = np.array([10, 20])
    eta = np.array([0.3, 0.25])
    k = ConvergenceConstants(lipschitz_L=2.0, learning_rate_mu=0.2, grad_variance_sigma2=0.5,
                             embed_param_grad_G1=1.5, embed_input_grad_G2=0.8, hessian_bound_Psi=0.6,
                             num_devices_K=2, num_rounds_T=2)
    coeff = 2.0 * 0.2 * 3 * (0.5 + 1.5**2 * 0.6**2) / ((2 - 0.4) * 2)
    total = 0.0
    for t in range(2):
        mse = 0.01 / eta[t]
        for j in range(2):
            g = h[j, t] * math.sqrt(p[j, t]) / math.sqrt(eta[t])
            mse += (g - 1) ** 2 + g * g * (0.03 + 0.02 / ps[j, t]) * 0.8**2
        total += coeff * 3 / b[t] * mse
    plan = AllocationPlan(p, ps, b, eta)
    assert omega(plan, ChannelState(h), k, cfg) == pytest.approx(total, rel=1e-13)
    assert omega_per_round(plan, ChannelState(h), k, cfg).sum() == pytest.approx(total, rel=1e-13)


def test_per_round_descent_bound_signs():
    k = ConvergenceConstants(grad_variance_sigma2=0.0)
    assert per_round_descent_bound(0.0, 10, 0.0, k) == 0.0
    assert per_round_descent_bound(1.0, 10, 0.0, ConvergenceConstants(learning_rate_mu=0.01)) < 0
    with pytest.raises(ValueError):
        per_round_descent_bound(1.0, 0, 0.0, k)


def test_lemma1_variance_bound():
    k = ConvergenceConstants(grad_variance_sigma2=2.0)
    assert lemma1_variance_bound(4, 0.0, k) == pytest.approx(0.5)
    assert lemma1_variance_bound(1e12, 5.0, k) < 1e-11
    assert lemma1_variance_bound(2, 3.0, k) == pytest.approx(2.0 / 2 + 1.0 * 3.0 / 2)


def _random_plan(rng, cfg):
    K, T = cfg.K, cfg.T
    h = rng.rayleigh(1.0, (K, T))
    plan = AllocationPlan(rng.uniform(0.1, 1, (K, T)), rng.uniform(0.01, 0.05, (K, T)),
                          rng.integers(1, 50, T), rng.uniform(0.2, 2, T))
    return plan, ChannelState(h)


def test_zero_gap_zero_omega_bound_is_zero():
    cfg = _system(2, 3, 0.0, 0.0, 0.0)
    h = np.ones((2, 3))
    plan = AllocationPlan(np.ones((2, 3)), np.ones((2, 3)), np.ones(3, dtype=int), np.ones(3))
    rep = avg_grad_bound(0.0, plan, ChannelState(h), ConvergenceConstants.for_config(cfg), cfg)
    assert rep.avg_grad_bound == 0.0


def test_bound_is_gap_plus_omega_and_gap_scales_with_T():
    rng = np.random.default_rng(0)
    cfg = _system(3, 4)
    plan, ch = _random_plan(rng, cfg)
    k = ConvergenceConstants.for_config(cfg, lipschitz_L=2.0, learning_rate_mu=0.3)
    rep = avg_grad_bound(1.7, plan, ch, k, cfg)
    assert rep.avg_grad_bound == pytest.approx(rep.optimization_gap_term + rep.omega, rel=1e-14)
    assert rep.omega == pytest.approx(omega(plan, ch, k, cfg), rel=1e-14)
    rep2 = avg_grad_bound(1.7, plan, ch, k.replace(num_rounds_T=8), cfg)
    assert rep2.optimization_gap_term == pytest.approx(rep.optimization_gap_term / 2, rel=1e-14)
    with pytest.raises(ValueError):
        avg_grad_bound(-1.0, plan, ch, k, cfg)


def test_telescoped_descent_matches_bound():
    # Summing the per-round descent inequality over T rounds and dividing by
    # mu (1 - L mu / 2) T gives gap + sum_t (error_t) / (mu (1 - L mu/2) T).
    # With sigma^2 = 0 this equals gap + omega / (K + 1): the objective carries
    # the extra (K + 1) of its printed form.
    rng = np.random.default_rng(1)
    for _ in range(5):
        K, T = int(rng.integers(1, 5)), int(rng.integers(1, 8))
        cfg = _system(K, T)
        plan, ch = _random_plan(rng, cfg)
        L = float(rng.uniform(0.5, 3))
        k = ConvergenceConstants.for_config(cfg, lipschitz_L=L, learning_rate_mu=float(rng.uniform(0.1, 1.5)) / L,
                                            grad_variance_sigma2=0.0, embed_param_grad_G1=float(rng.uniform(0.5, 2)),
                                            hessian_bound_Psi=float(rng.uniform(0.5, 2)))
        gap0 = float(rng.uniform(0.1, 3))
        mse = mse_totals(plan, ch, k, cfg)
        errors = per_round_descent_bound(0.0, plan.batch_size, mse, k)
        mu = k.learning_rate_mu
        scale = mu * (1 - L * mu / 2) * T
        telescoped = gap0 / scale + errors.sum() / scale
        rep = avg_grad_bound(gap0, plan, ch, k, cfg)
        assert telescoped == pytest.approx(rep.optimization_gap_term + rep.omega / (K + 1), rel=1e-12)

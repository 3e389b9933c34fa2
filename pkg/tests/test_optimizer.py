import math
import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iscc_vfeel.aircomp import DomainError
from iscc_vfeel.convergence import ConvergenceConstants, omega
from iscc_vfeel.model import (AllocationPlan, ChannelState, DeviceParams, NetworkParams, SystemConfig,
                              check_feasibility, sample_channels)
from iscc_vfeel.optimizer import (BASELINES, FIXED_BATCH, FIXED_ETA, InfeasibleError, P11Solution, DualState,
                                  SolveOptions, a1_coefficient, algorithm1, algorithm2, baseline_plan,
                                  optimal_eta, optimal_tx_power, plan_objective, round_batch_and_recover_sensing,
                                  solve_all, solve_p11_continuous)


def _cfg(K=2, T=3, *, E=5.0, delta=1.0, pmax=0.05, sz2=1e-2, ds2=1e-2, clutter=1e-2, seed=0, path_loss=1.0):
    net = NetworkParams(num_devices=K, num_rounds=T, embedding_dim=10, symbols_per_block=5,
                        channel_noise_variance=sz2, sensing_noise_variance=ds2, path_loss=path_loss)
    dev = DeviceParams(energy_budget_joules=E, per_round_latency_budget_s=delta, max_power_watts=pmax,
                       clutter_variance=clutter)
    return SystemConfig(net, (dev,) * K, seed)


def _consts(cfg, **kw):
    return ConvergenceConstants.for_config(cfg, **kw)


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------


def test_a1_examples():
    net = NetworkParams(num_devices=1, num_rounds=1, channel_noise_variance=1.0)
    assert a1_coefficient(np.ones(1), 1.0, np.ones(1), 1.0, net, [DeviceParams(clutter_variance=1.0)]) == \
        pytest.approx(2.0)
    quiet = NetworkParams(num_devices=2, num_rounds=1, channel_noise_variance=0.0)
    h = np.array([0.5, 2.0])
    dev = DeviceParams(clutter_variance=0.0)
    assert a1_coefficient(3.0 / h**2, 3.0, h, 1.0, quiet, [dev, dev]) == pytest.approx(0.0, abs=1e-15)


def test_a1_random_matches_direct_formula():
    rng = np.random.default_rng(0)
    cfg = _cfg(K=3, T=4)
    h, p, eta = rng.rayleigh(1, (3, 4)), rng.uniform(0.1, 2, (3, 4)), rng.uniform(0.1, 2, 4)
    got = a1_coefficient(p, eta, h, 1.3, cfg.network, cfg.devices)
    g = h * np.sqrt(p) / np.sqrt(eta)
    ref = ((g - 1) ** 2).sum(0) + (1.3**2 * g**2 * 1e-2).sum(0) + 1e-2 / eta
    np.testing.assert_allclose(got, ref, rtol=1e-13)


def test_optimal_eta_examples():
    dev = DeviceParams(clutter_variance=0.0)
    quiet = NetworkParams(num_devices=1, num_rounds=1, channel_noise_variance=0.0, sensing_noise_variance=0.0)
    assert optimal_eta(np.ones(1), np.ones(1), np.ones(1), 1.0, quiet, [dev]) == pytest.approx(1.0)
    noisy = replace(quiet, channel_noise_variance=1.0)
    assert optimal_eta(np.ones(1), np.ones(1), np.ones(1), 1.0, noisy, [dev]) == pytest.approx(4.0)


def test_optimal_eta_minimises_mse_bound():
    rng = np.random.default_rng(1)
    cfg = _cfg(K=3, T=1)
    h, p, ps = rng.rayleigh(1, 3), rng.uniform(0.1, 2, 3), rng.uniform(0.01, 0.05, 3)
    eta = optimal_eta(p, ps, h, 1.2, cfg.network, cfg.devices)

    def f(e):
        g = h * np.sqrt(p) / math.sqrt(e)
        return np.sum((g - 1) ** 2 + g**2 * (1e-2 + 1e-2 / ps) * 1.44) + 1e-2 / e

    for s in (0.9, 0.99, 1.01, 1.1):
        assert f(eta) <= f(eta * s)


def test_optimal_eta_domain_errors():
    cfg = _cfg(K=2, T=1)
    with pytest.raises(DomainError):
        optimal_eta(np.zeros(2), np.ones(2), np.ones(2), 1.0, cfg.network, cfg.devices)
    with pytest.raises(DomainError):
        optimal_eta(np.ones(2), np.zeros(2), np.ones(2), 1.0, cfg.network, cfg.devices)


def test_tx_power_is_channel_inversion_without_sensing_distortion():
    cfg = _cfg(K=1, T=1, E=100.0, pmax=1.0, ds2=0.0, clutter=0.0)
    p, alpha = optimal_tx_power(np.array([4.0]), np.array([10.0]), np.full((1, 1), 0.01),
                                ChannelState(np.array([[2.0]])), cfg, _consts(cfg))
    assert p[0, 0] == pytest.approx(1.0, rel=1e-12)
    assert alpha[0] == 0.0


def test_tx_power_exhausts_binding_budget():
    cfg = _cfg(K=2, T=4, E=1.0)
    b = np.full(4, 50.0)
    ps = np.full((2, 4), 0.02)
    used = 50 * 4 * (0.02 * 1e-3 + cfg.devices[0].energy_per_sample_compute)
    cfg = _cfg(K=2, T=4, E=float(used + 2e-4))
    h = np.random.default_rng(2).rayleigh(1, (2, 4)) * 0.1
    p, alpha = optimal_tx_power(np.full(4, 1.0), b, ps, ChannelState(h), cfg, _consts(cfg))
    assert np.all(alpha > 0)
    spent = p.sum(axis=1) * cfg.network.slot_duration_s
    np.testing.assert_allclose(spent, 2e-4, rtol=1e-8)


def test_tx_power_zero_channel_gets_zero_power():
    cfg = _cfg(K=2, T=2)
    h = np.array([[0.0, 1.0], [1.0, 1.0]])
    p, _ = optimal_tx_power(np.ones(2), np.full(2, 10.0), np.full((2, 2), 0.02), ChannelState(h), cfg, _consts(cfg))
    assert p[0, 0] == 0.0 and np.all(p[:, 1] > 0)


def test_tx_power_infeasible_when_budget_spent():
    cfg = _cfg(K=1, T=1, E=1e-6)
    with pytest.raises(InfeasibleError):
        optimal_tx_power(np.ones(1), np.full(1, 100.0), np.full((1, 1), 0.05), ChannelState(np.ones((1, 1))), cfg,
                         _consts(cfg))


# ---------------------------------------------------------------------------
# batch block
# ---------------------------------------------------------------------------


def _p11(cfg, p=0.1, eta=1.0, opts=None, h=None):
    h = np.ones((cfg.K, cfg.T)) if h is None else h
    return solve_p11_continuous(np.full((cfg.K, cfg.T), p), np.full(cfg.T, eta), cfg, ChannelState(h),
                                _consts(cfg), opts)


def test_p11_energy_binds_and_kkt_residual_small():
    cfg = _cfg(K=1, T=1, E=2.0, delta=100.0)
    sol = _p11(cfg)
    dev = cfg.devices[0]
    used = sol.sense_energy[0, 0] * dev.sense_latency_per_sample_s + dev.energy_per_sample_compute * sol.batch[0] \
        + 0.1 * 1e-3
    assert used == pytest.approx(2.0, rel=1e-8)
    assert sol.dual.lambda_[0] > 0
    assert sol.dual.kkt_residual <= SolveOptions().dual_tol and sol.dual.converged


def test_p11_latency_cap_binds_exactly():
    cfg = _cfg(K=1, T=2, E=1e4, delta=0.05)
    sol = _p11(cfg)
    dev, net = cfg.devices[0], cfg.network
    b_hi = 0.05 / (dev.sense_latency_per_sample_s + dev.cycles_per_sample / dev.cpu_freq_hz
                   + net.embedding_dim * net.slot_duration_s / net.symbols_per_block)
    np.testing.assert_allclose(sol.batch, b_hi, rtol=1e-11)
    # halving the latency budget halves the cap
    sol2 = _p11(_cfg(K=1, T=2, E=1e4, delta=0.025))
    np.testing.assert_allclose(sol2.batch, b_hi / 2, rtol=1e-11)


def test_p11_lower_bound_from_power_cap():
    cfg = _cfg(K=1, T=1, E=1e-3 * 1.2 + 5.0, delta=10.0, pmax=0.01)
    sol = _p11(cfg, p=1.2)
    assert sol.batch[0] >= 1.2 / (10 * 0.01) * (1 - 1e-12)


def test_p11_infeasible_box():
    cfg = _cfg(K=1, T=1, delta=0.01, pmax=1e-3)
    with pytest.raises(InfeasibleError, match="empty batch box"):
        _p11(cfg, p=1.0)


@pytest.mark.parametrize("method", ["subgradient", "ellipsoid"])
def test_dual_methods_agree_with_exact_bisection(method):
    rng = np.random.default_rng(3)
    for _ in range(5):
        cfg = _cfg(K=3, T=4, E=float(rng.uniform(1, 10)), delta=float(rng.uniform(0.2, 2)))
        h = rng.rayleigh(1, (3, 4))
        ref = _p11(cfg, h=h)
        got = _p11(cfg, h=h, opts=SolveOptions(dual_method=method))
        assert got.objective >= ref.objective * (1 - 1e-9)
        assert got.objective == pytest.approx(ref.objective, rel=1e-3)


@settings(max_examples=40, deadline=None)
@given(E=st.floats(0.5, 50), delta=st.floats(0.05, 5), p=st.floats(1e-3, 1.0), eta=st.floats(0.05, 5),
       seed=st.integers(0, 10_000))
def test_p11_kkt_properties(E, delta, p, eta, seed):
    cfg = _cfg(K=2, T=3, E=E, delta=delta)
    h = np.random.default_rng(seed).rayleigh(1, (2, 3)) + 0.05
    try:
        sol = _p11(cfg, p=p, eta=eta, h=h)
    except InfeasibleError:
        return
    tau = cfg.device_array("sense_latency_per_sample_s")
    a = np.array([d.energy_per_sample_compute for d in cfg.devices])
    used = (sol.sense_energy * tau[:, None]).sum(1) + a * sol.batch.sum() + p * 1e-3 * 3
    assert np.all(used <= E * (1 + 1e-12))
    # positive price <=> tight budget
    tight = sol.dual.lambda_ > 0
    np.testing.assert_allclose(used[tight], E, rtol=1e-6)
    assert np.all(sol.sense_energy > 0)


# ---------------------------------------------------------------------------
# rounding
# ---------------------------------------------------------------------------


def _sol(e, b):
    e = np.atleast_2d(np.asarray(e, dtype=float))
    return P11Solution(e, np.atleast_1d(np.asarray(b, dtype=float)), DualState(np.zeros(e.shape[0]), np.zeros(e.shape[0])), 0.0)


def test_rounding_examples():
    cfg = _cfg(K=1, T=1, delta=300.0)
    b, ps = round_batch_and_recover_sensing(_sol([[0.03]], [150.7]), cfg)
    assert b[0] == 150 and b.dtype == np.int64
    b, ps = round_batch_and_recover_sensing(_sol([[0.03]], [150.0]), cfg)
    assert ps[0, 0] == pytest.approx(2e-4)
    b, ps = round_batch_and_recover_sensing(_sol([[100.0]], [150.0]), cfg)
    assert ps[0, 0] == 0.05


def test_rounding_respects_ceiling_latency_and_reports_infeasible():
    cfg = _cfg(K=1, T=1, delta=1.0)
    dev, net = cfg.devices[0], cfg.network
    per = dev.sense_latency_per_sample_s + dev.cycles_per_sample / dev.cpu_freq_hz
    relaxed_cap = 1.0 / (per + net.embedding_dim * net.slot_duration_s / net.symbols_per_block)
    b, ps = round_batch_and_recover_sensing(_sol([[0.1]], [relaxed_cap]), cfg, SolveOptions(rounding="nearest-feasible"))
    plan = AllocationPlan(np.zeros((1, 1)), ps, b, np.ones(1))
    assert check_feasibility(plan, cfg).feasible
    tiny = _cfg(K=1, T=1, delta=1e-4)
    with pytest.raises(InfeasibleError, match="one sample"):
        round_batch_and_recover_sensing(_sol([[0.1]], [1.0]), tiny)


# ---------------------------------------------------------------------------
# power block
# ---------------------------------------------------------------------------


def test_algorithm1_fixed_point_and_monotone():
    cfg = _cfg(K=3, T=4)
    ch = sample_channels(cfg)
    k = _consts(cfg)
    b, ps = np.full(4, 20.0), np.full((3, 4), 0.02)
    first = algorithm1(b, ps, np.full((3, 4), 0.01), ch, cfg, k)
    assert np.all(np.diff(first.objective_trace) <= 0)
    again = algorithm1(b, ps, first.tx_power, ch, cfg, k)
    assert again.iterations <= 2
    assert again.objective_trace[-1] <= first.objective_trace[-1]


def test_algorithm1_close_to_best_of_random_restarts():
    cfg = _cfg(K=2, T=3)
    ch = sample_channels(cfg)
    k = _consts(cfg)
    b, ps = np.full(3, 20.0), np.full((2, 3), 0.02)
    rng = np.random.default_rng(4)
    finals = [algorithm1(b, ps, rng.uniform(0, 5, (2, 3)), ch, cfg, k).objective_trace[-1] for _ in range(20)]
    best = min(finals)
    base = algorithm1(b, ps, np.full((2, 3), 0.5), ch, cfg, k).objective_trace[-1]
    assert base <= best * (1 + 1e-3)


def test_algorithm1_zero_noise_reaches_zero():
    cfg = _cfg(K=2, T=2, E=100.0, pmax=1.0, sz2=0.0, ds2=0.0, clutter=0.0)
    ch = ChannelState(np.array([[0.5, 1.0], [1.5, 0.8]]))
    res = algorithm1(np.full(2, 10.0), np.full((2, 2), 0.02), np.full((2, 2), 0.3), ch, cfg, _consts(cfg))
    assert res.objective_trace[-1] <= 1e-20


# ---------------------------------------------------------------------------
# full solver and baselines
# ---------------------------------------------------------------------------


def test_algorithm2_defaults_runtime_feasibility_and_trace():
    cfg = SystemConfig(rng_seed=0)
    t0 = time.perf_counter()
    tr = algorithm2(cfg, sample_channels(cfg), _consts(cfg))
    assert time.perf_counter() - t0 < 60
    assert tr.feasibility.feasible and check_feasibility(tr.final_plan, cfg).feasible
    assert np.all(np.diff(tr.objective_per_iteration) <= 0)
    assert tr.final_objective == pytest.approx(omega(tr.final_plan, sample_channels(cfg), _consts(cfg), cfg),
                                               rel=1e-12)
    d = tr.to_dict()
    assert d["scheme"] == "proposed" and len(d["subproblem_tags"]) == len(d["objective_per_iteration"])


def test_algorithm2_tighter_latency_respects_cap():
    base = SystemConfig(NetworkParams(num_rounds=10), rng_seed=1)
    for delta in (2.0, 1.0):
        dev = replace(base.devices[0], per_round_latency_budget_s=delta)
        cfg = SystemConfig(base.network, (dev,) * 3, 1)
        tr = algorithm2(cfg, sample_channels(cfg), _consts(cfg))
        assert tr.feasibility.feasible
        per = dev.sense_latency_per_sample_s + dev.cycles_per_sample / dev.cpu_freq_hz \
            + 100 * 1e-3 / 14
        assert np.all(tr.final_plan.batch_size <= delta / per)


def test_baseline_rules():
    cfg = SystemConfig(NetworkParams(num_rounds=8), rng_seed=2)
    ch = sample_channels(cfg)
    k = _consts(cfg)
    plans = {kind: baseline_plan(kind, cfg, ch, k) for kind in BASELINES}
    fp = plans["fixed_tx_power"]
    np.testing.assert_allclose(fp.tx_power, np.broadcast_to(0.5 * 0.05 * 100 * fp.batch_size, (3, 8)), rtol=1e-11)
    assert np.all(plans["fixed_batch"].batch_size == FIXED_BATCH)
    assert np.all(plans["fixed_eta"].denoise == FIXED_ETA)
    ci = plans["channel_inversion"]
    h = ch.magnitudes
    gains = h * np.sqrt(ci.tx_power) / np.sqrt(ci.denoise)
    np.testing.assert_allclose(gains, 1.0, rtol=1e-9)
    for plan in plans.values():
        assert check_feasibility(plan, cfg).feasible
    raw = baseline_plan("fixed_tx_power", cfg, ch, k, SolveOptions(fixed_power_reading="raw"))
    np.testing.assert_allclose(raw.tx_power, 0.025)
    with pytest.raises(ValueError):
        baseline_plan("nope", cfg, ch, k)


def test_fixed_batch_infeasible_under_tight_latency():
    cfg = SystemConfig(NetworkParams(num_rounds=4), (DeviceParams(per_round_latency_budget_s=1.0),) * 3)
    with pytest.raises(InfeasibleError):
        algorithm2(cfg, sample_channels(cfg), _consts(cfg), scheme="fixed_batch")


def test_proposed_not_worse_than_baselines_small():
    cfg = SystemConfig(NetworkParams(num_rounds=10), rng_seed=5)
    ch = sample_channels(cfg)
    res = solve_all(cfg, ch, _consts(cfg))
    for s in BASELINES:
        assert res["proposed"].final_objective <= res[s].final_objective
    assert plan_objective(res["proposed"].final_plan, cfg, ch, _consts(cfg)) == \
        pytest.approx(res["proposed"].final_objective, rel=1e-12)


def test_solve_options_validation():
    with pytest.raises(ValueError):
        SolveOptions(dual_method="newton")
    with pytest.raises(ValueError):
        SolveOptions(start_tx_shares=(1.0,))
    with pytest.raises(ValueError):
        SolveOptions(outer_tol=0)
    with pytest.raises(ValueError):
        DualState(np.array([-1.0]), np.zeros(1))

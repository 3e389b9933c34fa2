import json
import os
import subprocess
import sys

import numpy as np
import pytest

from iscc_vfeel import _kernels

pytestmark = pytest.mark.skipif("numba" not in _kernels.KERNELS, reason="numba not installed")

NB, NP = _kernels.KERNELS.get("numba"), _kernels.KERNELS["numpy"]


def test_mse_terms_backends_agree():
    rng = np.random.default_rng(0)
    K, T = 4, 30
    args = (rng.rayleigh(1.0, (K, T)), rng.uniform(0, 2, (K, T)), rng.uniform(0.01, 0.1, (K, T)),
            rng.uniform(0.1, 3, T), rng.uniform(0, 0.1, K), 0.01, 0.02, 1.7)
    for a, b in zip(NB.mse_terms(*args), NP.mse_terms(*args)):
        np.testing.assert_allclose(a, b, rtol=1e-13)


def test_mse_terms_zero_sensing_noise_has_no_nan():
    h = np.ones((2, 1))
    p = np.ones((2, 1))
    for be in (NB, NP):
        mis, sens, chan = be.mse_terms(h, p, np.zeros((2, 1)), np.ones(1), np.zeros(2), 0.0, 0.0, 1.0)
        assert np.isfinite(sens).all() and sens[0] == 0.0


@pytest.mark.parametrize("budget_scale", [1e-4, 1e-2, 10.0])
def test_tx_power_backends_agree(budget_scale):
    rng = np.random.default_rng(1)
    K, T = 3, 20
    num = rng.uniform(0.1, 2, (K, T))
    den0 = rng.uniform(0.1, 2, (K, T))
    slope = rng.uniform(0.01, 1, (K, T))
    cap = rng.uniform(0.5, 3, (K, T))
    budget = np.full(K, budget_scale)
    p1, a1 = NB.tx_power(num, den0, slope, cap, budget, 1e-3)
    p2, a2 = NP.tx_power(num, den0, slope, cap, budget, 1e-3)
    np.testing.assert_allclose(p1, p2, rtol=1e-12)
    np.testing.assert_allclose(a1, a2, rtol=1e-9, atol=0)
    used = (p1**2).sum(axis=1) * 1e-3
    assert np.all(used <= budget * (1 + 1e-12))
    binding = a1 > 0
    np.testing.assert_allclose(used[binding], budget[binding], rtol=1e-10)


def test_p11_dual_backends_agree():
    rng = np.random.default_rng(2)
    K, T = 3, 10
    args = (rng.uniform(0.1, 1, T), np.ones(T), np.full(T, 500.0), rng.uniform(0.01, 0.1, K),
            np.full(K, 4e-3), rng.uniform(0, 0.1, K), np.full(K, 5.0))
    S1, l1, s1 = NB.p11_dual(*args)
    S2, l2, s2 = NP.p11_dual(*args)
    assert s1 == s2 == 0
    assert S1 == pytest.approx(S2, rel=1e-10)
    np.testing.assert_allclose(l1, l2, rtol=1e-9)


def test_p11_dual_reports_infeasible_box():
    T = 3
    args = (np.ones(T), np.full(T, 100.0), np.full(T, 200.0), np.ones(1), np.ones(1), np.zeros(1), np.ones(1))
    for be in (NB, NP):
        assert be.p11_dual(*args)[2] != 0


_SNIPPET = """
import json
from iscc_vfeel import _kernels
from iscc_vfeel.convergence import ConvergenceConstants
from iscc_vfeel.model import NetworkParams, SystemConfig, sample_channels
from iscc_vfeel.optimizer import algorithm2
cfg = SystemConfig(NetworkParams(num_devices=2, num_rounds=6), rng_seed=3)
tr = algorithm2(cfg, sample_channels(cfg), ConvergenceConstants.for_config(cfg))
print(json.dumps({"backend": _kernels.BACKEND, "omega": tr.final_objective,
                  "b": tr.final_plan.batch_size.tolist()}))
"""


def _run(flag):
    env = dict(os.environ, ISCC_VFEEL_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", _SNIPPET], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def test_env_flag_selects_backend_and_results_match():
    fast, slow = _run("1"), _run("0")
    assert fast["backend"] == "numba" and slow["backend"] == "numpy"
    assert fast["b"] == slow["b"]
    assert fast["omega"] == pytest.approx(slow["omega"], rel=1e-9)

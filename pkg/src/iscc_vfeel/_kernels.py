"""Hot numeric kernels with a numba path and a pure-numpy path.

Every kernel exists twice: a scalar-loop version compiled with ``numba.njit``
and a vectorised numpy version.  Both run the same algorithm with the same
termination rules, so results agree to rounding.  The active backend is
chosen once at import time:

    ISCC_VFEEL_NUMBA=0   force the numpy path
    ISCC_VFEEL_NUMBA=1   use numba (default when numba imports)

Both backends stay reachable through ``KERNELS["numba"]`` and
``KERNELS["numpy"]`` for tests and the benchmark script.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_flag = os.environ.get("ISCC_VFEEL_NUMBA", "1").strip().lower()
USE_NUMBA = HAVE_NUMBA and _flag not in ("0", "false", "no", "off")
BACKEND = "numba" if USE_NUMBA else "numpy"

# bisection stopping rule shared by both backends
_REL_TOL = 1e-15
_MAX_BISECT = 400


# ---------------------------------------------------------------------------
# per-round MSE-bound components
# ---------------------------------------------------------------------------


def _mse_terms_loop(h, p, ps, eta, clutter, ds2, sz2, g2sq):
    K, T = h.shape
    mis = np.zeros(T)
    sens = np.zeros(T)
    chan = np.zeros(T)
    for t in range(T):
        inv_sqrt_eta = 1.0 / math.sqrt(eta[t])
        m = 0.0
        s = 0.0
        for k in range(K):
            gain = h[k, t] * math.sqrt(p[k, t])
            r = gain * inv_sqrt_eta - 1.0
            m += r * r
            g2 = gain * gain
            if g2 > 0.0:
                noise = clutter[k]
                if ds2 > 0.0:
                    noise += ds2 / ps[k, t]
                s += g2 / eta[t] * noise * g2sq
        mis[t] = m
        sens[t] = s
        chan[t] = sz2 / eta[t]
    return mis, sens, chan


def _mse_terms_np(h, p, ps, eta, clutter, ds2, sz2, g2sq):
    gain = h * np.sqrt(p)
    mis = ((gain / np.sqrt(eta) - 1.0) ** 2).sum(axis=0)
    g2 = gain * gain
    with np.errstate(divide="ignore", invalid="ignore"):
        noise = clutter[:, None] + (ds2 / ps if ds2 > 0.0 else 0.0)
    sens = np.where(g2 > 0.0, g2 / eta * noise * g2sq, 0.0).sum(axis=0)
    chan = sz2 / eta
    return mis, sens, chan


# ---------------------------------------------------------------------------
# transmit power with per-device energy dual (bisection on alpha)
# ---------------------------------------------------------------------------


def _tx_energy_loop(k, alpha, num, den0, slope, cap_hat, tau_slot, out_row):
    T = num.shape[1]
    total = 0.0
    for t in range(T):
        if num[k, t] <= 0.0:
            v = 0.0
        else:
            v = num[k, t] / (den0[k, t] + alpha * slope[k, t])
            if v > cap_hat[k, t]:
                v = cap_hat[k, t]
        out_row[t] = v
        total += v * v * tau_slot
    return total


def _tx_power_loop(num, den0, slope, cap_hat, budget, tau_slot):
    K, T = num.shape
    p_hat = np.zeros((K, T))
    alpha = np.zeros(K)
    row = np.zeros(T)
    for k in range(K):
        if _tx_energy_loop(k, 0.0, num, den0, slope, cap_hat, tau_slot, row) <= budget[k]:
            for t in range(T):
                p_hat[k, t] = row[t]
            continue
        # bracket: hi makes every round's denominator at least double its alpha=0 value
        hi = 0.0
        for t in range(T):
            if slope[k, t] > 0.0 and den0[k, t] / slope[k, t] > hi:
                hi = den0[k, t] / slope[k, t]
        if hi <= 0.0:
            hi = 1.0
        while _tx_energy_loop(k, hi, num, den0, slope, cap_hat, tau_slot, row) > budget[k]:
            hi *= 2.0
        lo = 0.0
        for _ in range(_MAX_BISECT):
            mid = 0.5 * (lo + hi)
            if _tx_energy_loop(k, mid, num, den0, slope, cap_hat, tau_slot, row) > budget[k]:
                lo = mid
            else:
                hi = mid
            if hi - lo <= _REL_TOL * hi:
                break
        _tx_energy_loop(k, hi, num, den0, slope, cap_hat, tau_slot, row)
        for t in range(T):
            p_hat[k, t] = row[t]
        alpha[k] = hi
    return p_hat, alpha


def _tx_hat_np(alpha, num, den0, slope, cap_hat):
    with np.errstate(divide="ignore", invalid="ignore"):
        v = num / (den0 + alpha[:, None] * slope)
    v = np.where(num > 0.0, np.minimum(v, cap_hat), 0.0)
    return v


def _tx_power_np(num, den0, slope, cap_hat, budget, tau_slot):
    K = num.shape[0]
    alpha = np.zeros(K)
    p_hat = _tx_hat_np(alpha, num, den0, slope, cap_hat)
    energy = (p_hat * p_hat * tau_slot).sum(axis=1)
    need = energy > budget
    if not need.any():
        return p_hat, alpha
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(slope > 0.0, den0 / slope, 0.0)
    hi = ratio.max(axis=1)
    hi = np.where(hi <= 0.0, 1.0, hi)
    lo = np.zeros(K)

    def energy_at(a):
        v = _tx_hat_np(a, num, den0, slope, cap_hat)
        return (v * v * tau_slot).sum(axis=1)

    grow = need & (energy_at(hi) > budget)
    while grow.any():
        hi = np.where(grow, hi * 2.0, hi)
        grow = need & (energy_at(hi) > budget)
    active = need.copy()
    for _ in range(_MAX_BISECT):
        if not active.any():
            break
        mid = 0.5 * (lo + hi)
        over = energy_at(mid) > budget
        lo = np.where(active & over, mid, lo)
        hi = np.where(active & ~over, mid, hi)
        active = active & ~(hi - lo <= _REL_TOL * hi)
    alpha = np.where(need, hi, 0.0)
    return _tx_hat_np(alpha, num, den0, slope, cap_hat), alpha


# ---------------------------------------------------------------------------
# batch / sensing-energy subproblem: exact dual via bisection on S = sum a_k lambda_k
# ---------------------------------------------------------------------------
#
# Given S, every round's batch is clip(sqrt(c A1_t / S), lo_t, hi_t); given the
# batches, each device's multiplier follows from its tight energy constraint.
# phi(S) = sum_k a_k lambda_k(S) - S is strictly decreasing, root = optimum.


def _batch_sum_loop(S, ca1, b_lo, b_hi):
    total = 0.0
    for t in range(ca1.shape[0]):
        if S <= 0.0:
            b = b_hi[t] if ca1[t] > 0.0 else b_lo[t]
        else:
            b = math.sqrt(ca1[t] / S)
            if b < b_lo[t]:
                b = b_lo[t]
            if b > b_hi[t]:
                b = b_hi[t]
        total += b
    return total


def _lambda_loop(S, ca1, b_lo, b_hi, R, a, fixed, E, lam):
    """Fill ``lam`` for the given S; return sum a_k lam_k (inf when infeasible)."""
    B = _batch_sum_loop(S, ca1, b_lo, b_hi)
    acc = 0.0
    for k in range(R.shape[0]):
        H = E[k] - a[k] * B - fixed[k]
        if R[k] > 0.0:
            if H <= 0.0:
                lam[k] = np.inf
                return np.inf
            lam[k] = (R[k] / H) ** 2
        else:
            if H < 0.0:
                lam[k] = np.inf
                return np.inf
            lam[k] = 0.0
        acc += a[k] * lam[k]
    return acc


def _p11_dual_loop(ca1, b_lo, b_hi, R, a, fixed, E):
    """Return (S, lam, status); status 0 ok, 1 infeasible."""
    K = R.shape[0]
    lam = np.zeros(K)
    # feasibility at the smallest batches (S -> infinity)
    B_min = 0.0
    for t in range(ca1.shape[0]):
        B_min += b_lo[t]
    for k in range(K):
        H = E[k] - a[k] * B_min - fixed[k]
        if (R[k] > 0.0 and H <= 0.0) or H < 0.0:
            return 0.0, lam, 1
    acc0 = _lambda_loop(0.0, ca1, b_lo, b_hi, R, a, fixed, E, lam)
    if acc0 <= 0.0:
        return 0.0, lam, 0
    hi = 1.0
    lo = 1.0
    if _lambda_loop(1.0, ca1, b_lo, b_hi, R, a, fixed, E, lam) - 1.0 > 0.0:
        while _lambda_loop(hi, ca1, b_lo, b_hi, R, a, fixed, E, lam) - hi > 0.0:
            lo = hi
            hi *= 4.0
    else:
        while lo > 1e-300 and _lambda_loop(lo, ca1, b_lo, b_hi, R, a, fixed, E, lam) - lo <= 0.0:
            hi = lo
            lo *= 0.25
    for _ in range(_MAX_BISECT):
        if hi <= lo * (1.0 + 4.0 * _REL_TOL):
            break
        mid = math.sqrt(lo * hi)
        if mid <= lo or mid >= hi:
            break
        if _lambda_loop(mid, ca1, b_lo, b_hi, R, a, fixed, E, lam) - mid > 0.0:
            lo = mid
        else:
            hi = mid
    _lambda_loop(hi, ca1, b_lo, b_hi, R, a, fixed, E, lam)
    return hi, lam, 0


def _batch_np(S, ca1, b_lo, b_hi):
    if S <= 0.0:
        return np.where(ca1 > 0.0, b_hi, b_lo)
    return np.clip(np.sqrt(ca1 / S), b_lo, b_hi)


def _lambda_np(S, ca1, b_lo, b_hi, R, a, fixed, E):
    B = _batch_np(S, ca1, b_lo, b_hi).sum()
    H = E - a * B - fixed
    bad = ((R > 0.0) & (H <= 0.0)) | (H < 0.0)
    if bad.any():
        return np.full(R.shape, np.inf), np.inf
    with np.errstate(divide="ignore"):
        lam = np.where(R > 0.0, (R / H) ** 2, 0.0)
    return lam, float((a * lam).sum())


def _p11_dual_np(ca1, b_lo, b_hi, R, a, fixed, E):
    H = E - a * b_lo.sum() - fixed
    if (((R > 0.0) & (H <= 0.0)) | (H < 0.0)).any():
        return 0.0, np.zeros(R.shape), 1

    def phi(S):
        return _lambda_np(S, ca1, b_lo, b_hi, R, a, fixed, E)[1] - S

    lam, acc0 = _lambda_np(0.0, ca1, b_lo, b_hi, R, a, fixed, E)
    if acc0 <= 0.0:
        return 0.0, lam, 0
    hi = lo = 1.0
    if phi(1.0) > 0.0:
        while phi(hi) > 0.0:
            lo = hi
            hi *= 4.0
    else:
        while lo > 1e-300 and phi(lo) <= 0.0:
            hi = lo
            lo *= 0.25
    for _ in range(_MAX_BISECT):
        if hi <= lo * (1.0 + 4.0 * _REL_TOL):
            break
        mid = math.sqrt(lo * hi)
        if mid <= lo or mid >= hi:
            break
        if phi(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    lam, _ = _lambda_np(hi, ca1, b_lo, b_hi, R, a, fixed, E)
    return hi, lam, 0


if HAVE_NUMBA:
    _mse_terms_nb = njit(cache=True)(_mse_terms_loop)
    _tx_energy_loop = njit(cache=True)(_tx_energy_loop)
    _tx_power_nb = njit(cache=True)(_tx_power_loop)
    _batch_sum_loop = njit(cache=True)(_batch_sum_loop)
    _lambda_loop = njit(cache=True)(_lambda_loop)
    _p11_dual_nb = njit(cache=True)(_p11_dual_loop)
else:  # pragma: no cover
    _mse_terms_nb = _mse_terms_loop
    _tx_power_nb = _tx_power_loop
    _p11_dual_nb = _p11_dual_loop


def _as_f64(*arrays):
    return tuple(np.ascontiguousarray(x, dtype=np.float64) for x in arrays)


class _Backend:
    def __init__(self, name, mse, tx, p11):
        self.name = name
        self._mse = mse
        self._tx = tx
        self._p11 = p11

    def mse_terms(self, h, p, ps, eta, clutter, ds2, sz2, g2sq):
        """Misalignment, sensing and channel-noise components per round, each shape (T,)."""
        h, p, ps, eta, clutter = _as_f64(h, p, ps, eta, clutter)
        return self._mse(h, p, ps, eta, clutter, float(ds2), float(sz2), float(g2sq))

    def tx_power(self, num, den0, slope, cap_hat, budget, tau_slot):
        """Square-root transmit powers and energy duals, one bisection per device."""
        num, den0, slope, cap_hat, budget = _as_f64(num, den0, slope, cap_hat, budget)
        return self._tx(num, den0, slope, cap_hat, budget, float(tau_slot))

    def p11_dual(self, ca1, b_lo, b_hi, R, a, fixed, E):
        S, lam, status = self._p11(*_as_f64(ca1, b_lo, b_hi, R, a, fixed, E))
        return float(S), np.asarray(lam, dtype=np.float64), int(status)


KERNELS = {"numpy": _Backend("numpy", _mse_terms_np, _tx_power_np, _p11_dual_np)}
if HAVE_NUMBA:
    KERNELS["numba"] = _Backend("numba", _mse_terms_nb, _tx_power_nb, _p11_dual_nb)

active = KERNELS[BACKEND]
mse_terms = active.mse_terms
tx_power = active.tx_power
p11_dual = active.p11_dual

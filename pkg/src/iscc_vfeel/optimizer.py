"""Joint batch-size / sensing-power / transmit-power / denoising-factor allocation.

The allocation problem is split in two blocks that are solved alternately:

* the *batch block*: per-round batch sizes b and per-sample sensing energies
  e = p_s * b, for fixed transmit powers and denoising factors.  It is convex;
  its dual has one multiplier per device energy budget.
* the *power block*: denoising factors eta and transmit powers p, for fixed
  b and p_s.  eta has a closed form given p; p has a regularised
  channel-inversion form given eta, with one energy multiplier per device.

The outer loop alternates the two blocks until the objective (``omega``, the
convergence-bound term) stops improving, then rounds b down to integers and
re-optimises the power block once on the rounded plan.

Variable conventions: ``p`` is the transmit energy per uplink slot used by
one round's embedding batch (so the power-cap constraint is p <= d * b * Pmax),
``p_hat = sqrt(p)`` is the amplitude the power step actually optimises.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .aircomp import DomainError
from .convergence import ConvergenceConstants, c1
from .model import AllocationPlan, ChannelState, FeasibilityReport, SystemConfig, check_feasibility

BASELINES = ("fixed_tx_power", "fixed_batch", "fixed_eta", "channel_inversion")
SCHEMES = ("proposed",) + BASELINES

# baseline settings
FIXED_BATCH = 400
FIXED_ETA = 0.5
FIXED_POWER_FRACTION = 0.5

# solvers aim slightly inside budgets/caps so exact re-evaluation never reports
# a violation produced by the last bit of rounding
_BUDGET_MARGIN = 1e-10
_CAP_MARGIN = 1e-12


class InfeasibleError(RuntimeError):
    """No allocation satisfies the constraints for the requested setting."""


@dataclass
class SolveOptions:
    outer_tol: float = 1e-6
    inner_tol: float = 1e-9
    dual_tol: float = 1e-6
    max_outer_iters: int = 50
    max_inner_iters: int = 200
    max_dual_iters: int = 20000
    # "bisection" solves the batch-block dual exactly through its scalar
    # reduction; "subgradient" and "ellipsoid" iterate on the multipliers.
    dual_method: str = "bisection"
    rounding: str = "floor"
    # fixed-power baseline: "per_symbol" -> p = 0.5*d*b*Pmax, "raw" -> p = 0.5*Pmax
    fixed_power_reading: str = "per_symbol"
    subgradient_step: float = 1.0
    # initial fractions of each energy budget given to transmission (multi-start)
    start_tx_shares: tuple = (0.0, 0.05, 0.2, 0.5)

    def __post_init__(self):
        for n in ("outer_tol", "inner_tol", "dual_tol", "subgradient_step"):
            if not getattr(self, n) > 0:
                raise ValueError(f"{n} must be positive")
        for n in ("max_outer_iters", "max_inner_iters", "max_dual_iters"):
            if getattr(self, n) < 1:
                raise ValueError(f"{n} must be >= 1")
        if self.dual_method not in ("bisection", "subgradient", "ellipsoid"):
            raise ValueError(f"unknown dual_method {self.dual_method!r}")
        if self.rounding not in ("floor", "nearest-feasible"):
            raise ValueError(f"unknown rounding {self.rounding!r}")
        self.start_tx_shares = tuple(float(v) for v in self.start_tx_shares)
        if not self.start_tx_shares or any(not 0 <= v < 1 for v in self.start_tx_shares):
            raise ValueError("start_tx_shares must be a non-empty list of values in [0, 1)")
        if self.fixed_power_reading not in ("per_symbol", "raw"):
            raise ValueError(f"unknown fixed_power_reading {self.fixed_power_reading!r}")

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["start_tx_shares"] = list(self.start_tx_shares)
        return out


@dataclass
class DualState:
    lambda_: np.ndarray
    alpha: np.ndarray
    iterations: int = 0
    converged: bool = False
    kkt_residual: float = 0.0

    def __post_init__(self):
        self.lambda_ = np.asarray(self.lambda_, dtype=float)
        self.alpha = np.asarray(self.alpha, dtype=float)
        if np.any(self.lambda_ < 0) or np.any(self.alpha < 0):
            raise ValueError("dual variables must be nonnegative")

    def to_dict(self) -> dict:
        return {"lambda": self.lambda_.tolist(), "alpha": self.alpha.tolist(),
                "iterations": int(self.iterations), "converged": bool(self.converged),
                "kkt_residual": float(self.kkt_residual)}


@dataclass
class P11Solution:
    """Continuous optimum of the batch block."""
    sense_energy: np.ndarray  # (K, T), e = p_s * b
    batch: np.ndarray  # (T,) reals
    dual: DualState
    objective: float


@dataclass
class PowerSolution:
    tx_power: np.ndarray
    denoise: np.ndarray
    alpha: np.ndarray
    objective_trace: list
    iterations: int
    converged: bool


@dataclass
class SolveTrace:
    objective_per_iteration: list
    subproblem_tags: list
    final_plan: AllocationPlan
    dual_state: DualState
    scheme: str = "proposed"
    continuous_plan: AllocationPlan | None = None
    final_objective: float = math.nan
    outer_iterations: int = 0
    converged: bool = False
    inner_traces: list = field(default_factory=list)
    feasibility: FeasibilityReport | None = None

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "objective_per_iteration": [float(v) for v in self.objective_per_iteration],
            "subproblem_tags": list(self.subproblem_tags),
            "final_objective": float(self.final_objective),
            "outer_iterations": int(self.outer_iterations),
            "converged": bool(self.converged),
            "inner_traces": [[float(v) for v in tr] for tr in self.inner_traces],
            "dual_state": self.dual_state.to_dict(),
            "final_plan": self.final_plan.to_dict(),
            "continuous_plan": None if self.continuous_plan is None else self.continuous_plan.to_dict(),
            "feasibility": None if self.feasibility is None else self.feasibility.to_dict(),
        }


# ---------------------------------------------------------------------------
# problem data
# ---------------------------------------------------------------------------


@dataclass
class _Ctx:
    h: np.ndarray
    E: np.ndarray  # budgets with the safety margin applied
    E_raw: np.ndarray  # budgets as configured
    Pmax: np.ndarray
    a: np.ndarray  # compute energy per sample
    tau_s: np.ndarray
    clutter: np.ndarray
    ds2: float
    sz2: float
    d: int
    M: int
    tau_slot: float
    ct: float  # c1 * (K + 1)
    g2: float
    b_hi: np.ndarray  # (T,) relaxed latency cap

    @property
    def K(self):
        return self.h.shape[0]

    @property
    def T(self):
        return self.h.shape[1]


def _context(config: SystemConfig, channel: ChannelState, constants: ConvergenceConstants) -> _Ctx:
    h = channel.magnitudes
    if h.shape != (config.K, config.T):
        raise ValueError(f"channel shape {h.shape} does not match config ({config.K}, {config.T})")
    net = config.network
    tau_s = config.device_array("sense_latency_per_sample_s")
    per_sample = (tau_s + config.device_array("cycles_per_sample") / config.device_array("cpu_freq_hz")
                  + net.embedding_dim * net.slot_duration_s / net.symbols_per_block)
    b_hi = (config.latency_budgets() / per_sample[:, None]).min(axis=0) * (1.0 - _CAP_MARGIN)
    return _Ctx(
        h=h,
        E=config.device_array("energy_budget_joules") * (1.0 - _BUDGET_MARGIN),
        E_raw=config.device_array("energy_budget_joules"),
        Pmax=config.device_array("max_power_watts"),
        a=np.array([d.energy_per_sample_compute for d in config.devices]),
        tau_s=tau_s,
        clutter=config.device_array("clutter_variance"),
        ds2=net.sensing_noise_variance,
        sz2=net.channel_noise_variance,
        d=net.embedding_dim,
        M=net.symbols_per_block,
        tau_slot=net.slot_duration_s,
        ct=c1(constants) * (config.K + 1),
        g2=constants.embed_input_grad_G2,
        b_hi=b_hi,
    )


def _omega(ctx: _Ctx, p, ps, b, eta) -> float:
    mis, sens, chan = _kernels.mse_terms(ctx.h, p, ps, eta, ctx.clutter, ctx.ds2, ctx.sz2, ctx.g2**2)
    return float(np.sum(ctx.ct / np.asarray(b, dtype=float) * (mis + sens + chan)))


def plan_objective(plan: AllocationPlan, config: SystemConfig, channel: ChannelState,
                   constants: ConvergenceConstants) -> float:
    """Omega of a plan (same value as ``convergence.omega``)."""
    ctx = _context(config, channel, constants)
    return _omega(ctx, plan.tx_power, plan.sense_power, plan.batch_size, plan.denoise)


def _effective_sensing_noise(ctx: _Ctx, ps):
    """delta-tilde: (clutter + ds2/p_s) * G2^2, per (k, t)."""
    ps = np.asarray(ps, dtype=float)
    if ctx.ds2 > 0:
        with np.errstate(divide="ignore"):
            extra = np.where(ps > 0, ctx.ds2 / np.where(ps > 0, ps, 1.0), np.inf)
    else:
        extra = np.zeros_like(ps)
    return (ctx.clutter.reshape((-1,) + (1,) * (ps.ndim - 1)) + extra) * ctx.g2**2


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------


def a1_coefficient(tx_power, denoise, channel, g2: float, net, devices):
    """Batch-independent part of the per-round MSE bound, times eta-scaling.

    sum_k (h sqrt(p)/sqrt(eta) - 1)^2 + G2^2 sum_k h^2 p clutter_k / eta + sigma_z^2 / eta.
    Accepts one round (vectors of length K and scalar eta) or all rounds ((K, T) and (T,)).
    """
    eta = np.asarray(denoise, dtype=float)
    if np.any(eta <= 0):
        raise DomainError("denoising factor must be positive")
    scalar = eta.ndim == 0
    h = np.asarray(channel, dtype=float)
    p = np.asarray(tx_power, dtype=float)
    if scalar:
        h, p, eta = h.reshape(-1, 1), p.reshape(-1, 1), eta.reshape(1)
    clutter = np.array([d.clutter_variance for d in devices], dtype=float)
    mis, sens, chan = _kernels.mse_terms(h, p, np.ones_like(p), eta, clutter, 0.0,
                                         net.channel_noise_variance, g2 * g2)
    out = mis + sens + chan
    return float(out[0]) if scalar else out


def optimal_eta(tx_power, sense_power, channel, g2: float, net, devices):
    """Closed-form denoising factor for fixed powers.

    eta* = [(sum_k h^2 p (dtilde_k + 1) + sigma_z^2) / sum_k h sqrt(p)]^2, which is
    the minimiser of the per-round MSE bound over eta.  Vectors give a scalar;
    (K, T) matrices give one factor per round.
    """
    h = np.asarray(channel, dtype=float)
    p = np.asarray(tx_power, dtype=float)
    ps = np.asarray(sense_power, dtype=float)
    scalar = h.ndim == 1
    if scalar:
        h, p, ps = h[:, None], p[:, None], ps[:, None]
    clutter = np.array([d.clutter_variance for d in devices], dtype=float)
    ds2 = net.sensing_noise_variance
    gain = h * np.sqrt(p)
    live = gain > 0
    if ds2 > 0 and np.any(live & (ps <= 0)):
        raise DomainError("sensing power must be positive wherever a device transmits")
    den = gain.sum(axis=0)
    if np.any(den <= 0):
        raise DomainError("all transmit powers (or channels) are zero in some round")
    with np.errstate(divide="ignore", invalid="ignore"):
        dt = (clutter[:, None] + (ds2 / ps if ds2 > 0 else 0.0)) * g2 * g2
    num = np.where(live, gain**2 * (dt + 1.0), 0.0).sum(axis=0) + net.channel_noise_variance
    eta = (num / den) ** 2
    return float(eta[0]) if scalar else eta


def _residual_energy(ctx: _Ctx, ps, b):
    b = np.asarray(b, dtype=float)
    used = (np.asarray(ps) * b * ctx.tau_s[:, None] + ctx.a[:, None] * b).sum(axis=1)
    # the margin scales the residual, not the total, so a nearly exhausted
    # budget keeps the same relative slack
    return (ctx.E_raw - used) * (1.0 - _BUDGET_MARGIN)


def _tx_cap(ctx: _Ctx, b):
    return ctx.d * np.asarray(b, dtype=float)[None, :] * ctx.Pmax[:, None] * (1.0 - _CAP_MARGIN)


def optimal_tx_power(denoise, batch, sense_power, channel: ChannelState, config: SystemConfig,
                     constants: ConvergenceConstants, options: SolveOptions | None = None):
    """Transmit powers minimising omega for fixed eta, b and p_s.

    Per (k, t) the amplitude is c h sqrt(eta) / (c h^2 (dtilde + 1) + alpha_k b eta tau_slot),
    clipped to sqrt(d b Pmax); alpha_k is the device's energy multiplier, zero
    when the unconstrained powers fit the residual budget and otherwise found
    by bisection so the budget is met.  Returns (p, alpha).
    """
    return _tx_power_step(_context(config, channel, constants), denoise, batch, sense_power)


def _tx_power_step(ctx: _Ctx, denoise, batch, sense_power):
    eta = np.asarray(denoise, dtype=float)
    if np.any(eta <= 0):
        raise DomainError("denoising factor must be positive")
    b = np.asarray(batch, dtype=float)
    budget = _residual_energy(ctx, sense_power, b)
    if np.any(budget <= 0):
        bad = [int(k) for k in np.flatnonzero(budget <= 0)]
        raise InfeasibleError(f"sensing and computation exhaust the energy budget of devices {bad}")
    dt = _effective_sensing_noise(ctx, sense_power)
    h = ctx.h
    num = ctx.ct * h * np.sqrt(eta)[None, :]
    with np.errstate(invalid="ignore"):
        den0 = ctx.ct * h * h * (dt + 1.0)
    den0 = np.where(h > 0, den0, 0.0)
    num = np.where(np.isfinite(den0), num, 0.0)
    den0 = np.where(np.isfinite(den0), den0, 1.0)
    slope = np.broadcast_to(b * eta * ctx.tau_slot, h.shape)
    cap_hat = np.sqrt(_tx_cap(ctx, b))
    p_hat, alpha = _kernels.tx_power(num, den0, slope, cap_hat, budget, ctx.tau_slot)
    return p_hat * p_hat, alpha


# ---------------------------------------------------------------------------
# batch block
# ---------------------------------------------------------------------------


def _p11_pieces(ctx: _Ctx, p, eta):
    """Per-round c*A1, per-(k, t) sensing coefficient, and R_k = sum_t sqrt(coef*tau)."""
    mis, sens, chan = _kernels.mse_terms(ctx.h, p, np.ones_like(p), eta, ctx.clutter, 0.0, ctx.sz2,
                                         ctx.g2**2)
    ca1 = ctx.ct * (mis + sens + chan)
    coef = ctx.ct * ctx.g2**2 * ctx.h**2 * p * ctx.ds2 / eta[None, :]
    R = np.sqrt(coef * ctx.tau_s[:, None]).sum(axis=1)
    return ca1, coef, R


def _sense_from_lambda(ctx: _Ctx, coef, lam):
    with np.errstate(divide="ignore", invalid="ignore"):
        e = np.sqrt(coef / (lam[:, None] * ctx.tau_s[:, None]))
    return np.where(coef > 0, e, 0.0)


def _batch_from_S(ca1, b_lo, b_hi, S):
    if S <= 0:
        return np.where(ca1 > 0, b_hi, b_lo).astype(float)
    return np.clip(np.sqrt(ca1 / S), b_lo, b_hi)


def _p11_value(ca1, coef, e, b):
    with np.errstate(divide="ignore", invalid="ignore"):
        sense = np.where(coef > 0, coef / e, 0.0)
    return float(np.sum(ca1 / b) + np.sum(sense))


def _p11_usage(ctx: _Ctx, e, b, a, fixed):
    return (e * ctx.tau_s[:, None]).sum(axis=1) + a * b.sum() + fixed


def solve_p11_continuous(tx_power, denoise, config: SystemConfig, channel: ChannelState,
                         constants: ConvergenceConstants, options: SolveOptions | None = None, *,
                         fixed_batch=None, per_sample_tx_energy=None) -> P11Solution:
    """Optimal continuous batch sizes and sensing energies for fixed p and eta.

    The sensing energy is e = sqrt(c G2^2 h^2 p ds2 / (lambda_k tau_s eta)) and the
    batch is clip(sqrt(c A1 / sum_k a_k lambda_k), b_lo, b_hi) with
    b_lo = max(1, max_k p / (d Pmax)) and b_hi from the latency budgets.

    ``per_sample_tx_energy`` (length K) makes transmit energy proportional to b
    instead of fixed (fixed-power baseline); ``fixed_batch`` pins b and only
    optimises e.
    """
    options = options or SolveOptions()
    ctx = _context(config, channel, constants)
    p = np.asarray(tx_power, dtype=float)
    eta = np.asarray(denoise, dtype=float)
    if np.any(eta <= 0):
        raise DomainError("denoising factor must be positive")
    ca1, coef, R = _p11_pieces(ctx, p, eta)
    if per_sample_tx_energy is None:
        a = ctx.a
        fixed = (p * ctx.tau_slot).sum(axis=1)
        b_lo = np.maximum(1.0, (p / (ctx.d * ctx.Pmax[:, None])).max(axis=0))
    else:
        a = ctx.a + np.asarray(per_sample_tx_energy, dtype=float)
        fixed = np.zeros(ctx.K)
        b_lo = np.ones(ctx.T)
    b_hi = ctx.b_hi
    if fixed_batch is not None:
        b = np.broadcast_to(np.asarray(fixed_batch, dtype=float), (ctx.T,)).copy()
        if np.any(b > b_hi / (1.0 - _CAP_MARGIN)) or np.any(b < b_lo):
            raise InfeasibleError("the fixed batch size violates the latency or power-cap box")
        H = ctx.E - a * b.sum() - fixed
        if np.any(((R > 0) & (H <= 0)) | (H < 0)):
            raise InfeasibleError("the fixed batch size leaves no energy for sensing")
        lam = np.where(R > 0, (R / np.where(H > 0, H, 1.0)) ** 2, 0.0)
        e = _sense_from_lambda(ctx, coef, lam)
        usage = _p11_usage(ctx, e, b, a, fixed)
        res = _kkt_residual(lam, usage, ctx.E)
        dual = DualState(lam, np.zeros(ctx.K), 1, res <= options.dual_tol, res)
        return P11Solution(e, b, dual, _p11_value(ca1, coef, e, b))

    if np.any(b_lo > b_hi):
        t = int(np.argmax(b_lo - b_hi))
        raise InfeasibleError(f"empty batch box in round {t}: lower {b_lo[t]:.6g} > upper {b_hi[t]:.6g}")
    if options.dual_method == "bisection":
        S, lam, status = _kernels.p11_dual(ca1, b_lo, b_hi, R, a, fixed, ctx.E)
        if status:
            raise InfeasibleError("energy budgets cannot cover the smallest admissible batches")
        b = _batch_from_S(ca1, b_lo, b_hi, S)
        e = _sense_from_lambda(ctx, coef, lam)
        iters = 1
    else:
        solver = _dual_subgradient if options.dual_method == "subgradient" else _dual_ellipsoid
        lam, iters = solver(ctx, ca1, coef, R, a, fixed, b_lo, b_hi, options)
        b = _batch_from_S(ca1, b_lo, b_hi, float(a @ lam))
        e = _sense_from_lambda(ctx, coef, lam)
        e, b = _restore_feasibility(ctx, e, b, a, fixed, b_lo)
    usage = _p11_usage(ctx, e, b, a, fixed)
    res = _kkt_residual(lam, usage, ctx.E)
    dual = DualState(lam, np.zeros(ctx.K), iters, res <= options.dual_tol, res)
    return P11Solution(e, b, dual, _p11_value(ca1, coef, e, b))


def _kkt_residual(lam, usage, E) -> float:
    """Relative primal infeasibility plus complementary slackness, worst device."""
    gap = (usage - E) / E
    viol = np.maximum(gap, 0.0)
    comp = np.where(lam > 0, np.abs(gap), 0.0)
    return float(np.max(np.maximum(viol, comp)))


def _restore_feasibility(ctx, e, b, a, fixed, b_lo):
    """Shrink an approximate dual iterate's primal point onto the energy budgets."""
    usage = _p11_usage(ctx, e, b, a, fixed)
    over = usage > ctx.E
    if not np.any(over):
        return e, b
    scale = np.ones(ctx.K)
    sense_used = (e * ctx.tau_s[:, None]).sum(axis=1)
    room = ctx.E - a * b.sum() - fixed
    while np.any(room < 0) and np.any(b > b_lo):
        # batches alone overshoot: shrink them towards the lower box edge
        b = np.maximum(b_lo, b * 0.999)
        room = ctx.E - a * b.sum() - fixed
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(sense_used > room, np.maximum(room, 0.0) / sense_used, 1.0)
    return e * scale[:, None], b


def _dual_terms(ctx, ca1, coef, a, fixed, b_lo, b_hi, lam):
    b = _batch_from_S(ca1, b_lo, b_hi, float(a @ lam))
    e = _sense_from_lambda(ctx, coef, lam)
    usage = _p11_usage(ctx, e, b, a, fixed)
    value = _p11_value(ca1, coef, e, b) + float(lam @ (usage - ctx.E))
    return value, usage - ctx.E


def _dual_bounds(ctx, R, a, fixed, b_lo):
    """Multipliers below (R/E)^2 are never optimal; a crude starting guess."""
    lb = np.where(R > 0, (R / ctx.E) ** 2, 0.0)
    H0 = ctx.E - a * b_lo.sum() - fixed
    if np.any(((R > 0) & (H0 <= 0)) | (H0 < 0)):
        raise InfeasibleError("energy budgets cannot cover the smallest admissible batches")
    start = np.where(R > 0, (R / np.where(H0 > 0, H0, 1.0)) ** 2, 0.0)
    pos = start[start > 0]
    scale = np.where(start > 0, start, pos.mean() if pos.size else 1.0)
    return lb, start, scale


def _dual_subgradient(ctx, ca1, coef, R, a, fixed, b_lo, b_hi, options):
    """Projected subgradient ascent on the multipliers, steps c/sqrt(i) in log space.

    Coordinates with R_k = 0 move additively in units of the mean scale so they
    can reach zero.  After a stall the step switches to a Polyak step towards
    the best primal value seen.
    """
    lb, lam, scale = _dual_bounds(ctx, R, a, fixed, b_lo)
    lam = np.maximum(lam, lb)
    best_val, best_lam, best_res = -math.inf, lam.copy(), math.inf
    stall = 0
    upper = math.inf
    c = options.subgradient_step
    for i in range(1, options.max_dual_iters + 1):
        val, g = _dual_terms(ctx, ca1, coef, a, fixed, b_lo, b_hi, lam)
        rel = g / ctx.E
        res = _kkt_residual(lam, g + ctx.E, ctx.E)
        if res < best_res or (res == best_res and val > best_val):
            best_res, best_lam = res, lam.copy()
        if val > best_val + 1e-15 * abs(val):
            best_val, stall = val, 0
        else:
            stall += 1
        if res <= options.dual_tol:
            return lam, i
        if np.all(rel <= 0):
            upper = min(upper, val - float(lam @ g))
        norm2 = float(rel @ rel)
        if stall > 50 and math.isfinite(upper) and norm2 > 0:
            step = max((upper - val) / (abs(val) * norm2 + 1e-300), 0.0)
            step = min(step, c)
        else:
            step = c / math.sqrt(i)
        pos = R > 0
        lam = np.where(pos, lam * np.exp(np.clip(step * rel, -5.0, 5.0)), lam + step * scale * rel)
        lam = np.maximum(lam, lb)
    return best_lam, options.max_dual_iters


def _dual_upper_bounds(ctx, ca1, R, a, fixed, b_lo, b_hi):
    """Upper bounds on the optimal multipliers.

    A binding budget needs some batch above its lower edge, so
    a_k lambda_k <= S < max_t ca1_t / b_lo_t^2.  When the batches at their
    upper caps still leave room H_k > 0 for sensing, lambda_k <= (R_k / H_k)^2.
    """
    with np.errstate(divide="ignore"):
        ub = np.where(a > 0, float(np.max(ca1 / b_lo**2)) / a, math.inf)
    room = ctx.E - a * b_hi.sum() - fixed
    pos = room > 0
    ub = np.where(pos, np.minimum(ub, (R / np.where(pos, room, 1.0)) ** 2), ub)
    if not np.all(np.isfinite(ub)):
        raise ValueError("ellipsoid dual needs positive per-sample compute energy")
    return ub


def _dual_ellipsoid(ctx, ca1, coef, R, a, fixed, b_lo, b_hi, options):
    """Central-cut ellipsoid method on the scaled multipliers x = lambda / ub.

    The starting ball encloses the box [lb, ub] of provable multiplier bounds,
    so the optimum is never cut away.
    """
    lb, start, _ = _dual_bounds(ctx, R, a, fixed, b_lo)
    lb = np.maximum(lb, start)
    scale = np.maximum(_dual_upper_bounds(ctx, ca1, R, a, fixed, b_lo, b_hi), lb)
    scale = np.where(scale > 0, scale, 1.0)
    K = ctx.K
    lbx = lb / scale
    x = (lbx + 1.0) / 2.0
    radius = 1.01 * math.sqrt(float(np.sum(((1.0 - lbx) / 2.0) ** 2))) + 1e-12
    P = np.eye(K) * radius**2
    best_lam, best_res = lb.copy(), math.inf
    for i in range(1, options.max_dual_iters + 1):
        if np.any(x < lbx) or np.any(x > 1.0):
            # feasibility cut towards the bound box
            k = int(np.argmax(np.maximum(lbx - x, x - 1.0)))
            g = np.zeros(K)
            g[k] = 1.0 if x[k] < lbx[k] else -1.0
        else:
            lam = x * scale
            _, sub = _dual_terms(ctx, ca1, coef, a, fixed, b_lo, b_hi, lam)
            res = _kkt_residual(lam, sub + ctx.E, ctx.E)
            if res < best_res:
                best_res, best_lam = res, lam.copy()
            if res <= options.dual_tol:
                return lam, i
            g = sub * scale / ctx.E
        # keep the half-space {y : g^T (y - x) >= 0}
        Pg = P @ g
        gPg = float(g @ Pg)
        if not gPg > 0:
            break
        step = Pg / math.sqrt(gPg)
        if K == 1:
            x = x + step / 2.0
            P = P / 4.0
        else:
            x = x + step / (K + 1)
            P = K * K / (K * K - 1.0) * (P - 2.0 / (K + 1) * np.outer(step, step))
    return best_lam, options.max_dual_iters


def round_batch_and_recover_sensing(solution: P11Solution, config: SystemConfig,
                                    options: SolveOptions | None = None):
    """Integer batches and sensing powers p_s = min(e / b, Pmax).

    Rounds down (or to nearest when that still meets latency), never below 1,
    and steps b down further while the exact (ceiling) latency is violated.
    """
    options = options or SolveOptions()
    b_star = np.asarray(solution.batch, dtype=float)
    if options.rounding == "floor":
        b = np.floor(b_star + 1e-9)
    else:
        b = np.floor(b_star + 0.5)
    b = np.maximum(b, 1.0).astype(np.int64)
    net = config.network
    budgets = config.latency_budgets()
    tau_s = config.device_array("sense_latency_per_sample_s")
    comp = config.device_array("cycles_per_sample") / config.device_array("cpu_freq_hz")

    def late(bb):
        blocks = -(-(net.embedding_dim * bb) // net.symbols_per_block)
        lat = bb[None, :] * (tau_s + comp)[:, None] + blocks[None, :] * net.slot_duration_s
        return np.any(lat > budgets, axis=0)

    bad = late(b)
    while np.any(bad):
        if np.any(bad & (b <= 1)):
            t = int(np.flatnonzero(bad & (b <= 1))[0])
            raise InfeasibleError(f"round {t} violates the latency budget even with one sample")
        b = np.where(bad, b - 1, b)
        bad = late(b)
    Pmax = config.device_array("max_power_watts")
    ps = np.minimum(solution.sense_energy / b[None, :], Pmax[:, None])
    return b, ps


# ---------------------------------------------------------------------------
# power block
# ---------------------------------------------------------------------------


def _fixed_power(ctx: _Ctx, b, options: SolveOptions):
    if options.fixed_power_reading == "per_symbol":
        return FIXED_POWER_FRACTION * _tx_cap(ctx, b)
    return np.broadcast_to(FIXED_POWER_FRACTION * ctx.Pmax[:, None], ctx.h.shape).copy()


def _inversion_power(ctx: _Ctx, b, ps):
    """Channel inversion: the weakest device at full admissible power sets eta."""
    budget = _residual_energy(ctx, ps, b)
    if np.any(budget <= 0):
        raise InfeasibleError("sensing and computation exhaust the energy budget")
    cap = np.minimum(_tx_cap(ctx, b), (budget / (ctx.T * ctx.tau_slot))[:, None])
    h2 = ctx.h**2
    reach = np.where(h2 > 0, h2 * cap, np.inf)
    eta = reach.min(axis=0)
    eta = np.where(np.isfinite(eta), eta, 1.0)
    with np.errstate(divide="ignore"):
        p = np.where(h2 > 0, eta[None, :] / np.where(h2 > 0, h2, 1.0), 0.0)
    return np.minimum(p, cap), eta


def _project_power(ctx: _Ctx, p, ps, b):
    """Clip p to the caps and scale it into the residual energy budget."""
    p = np.minimum(np.asarray(p, dtype=float), _tx_cap(ctx, b))
    budget = _residual_energy(ctx, ps, b)
    if np.any(budget <= 0):
        raise InfeasibleError("sensing and computation exhaust the energy budget")
    used = (p * ctx.tau_slot).sum(axis=1)
    scale = np.where(used > budget, budget / np.where(used > 0, used, 1.0) * (1.0 - 1e-12), 1.0)
    return p * scale[:, None]


def algorithm1(batch, sense_power, initial_tx_power, channel: ChannelState, config: SystemConfig,
               constants: ConvergenceConstants, options: SolveOptions | None = None, *,
               scheme: str = "proposed", fixed_eta: float | None = None) -> PowerSolution:
    """Alternate the eta closed form and the transmit-power step for fixed b and p_s.

    A step is kept only if it does not raise the objective, so the returned
    trace is non-increasing.  ``scheme`` selects the baseline restrictions:
    ``fixed_eta`` keeps eta at the given value, ``fixed_tx_power`` and
    ``channel_inversion`` fix p by rule and only pick eta.
    """
    options = options or SolveOptions()
    ctx = _context(config, channel, constants)
    net, devs, g2 = config.network, config.devices, ctx.g2
    b = np.asarray(batch, dtype=float)
    ps = np.asarray(sense_power, dtype=float)
    alpha = np.zeros(ctx.K)

    if scheme == "fixed_tx_power":
        p = _fixed_power(ctx, b, options)
        eta = optimal_eta(p, ps, ctx.h, g2, net, devs)
        obj = _omega(ctx, p, ps, b, eta)
        return PowerSolution(p, eta, alpha, [obj], 1, True)
    if scheme == "channel_inversion":
        p, eta = _inversion_power(ctx, b, ps)
        obj = _omega(ctx, p, ps, b, eta)
        return PowerSolution(p, eta, alpha, [obj], 1, True)

    p = _project_power(ctx, initial_tx_power, ps, b)
    if scheme == "fixed_eta":
        eta = np.full(ctx.T, FIXED_ETA if fixed_eta is None else float(fixed_eta))
    else:
        eta = optimal_eta(p, ps, ctx.h, g2, net, devs)
        # the alternation creeps when started at low power; also try the
        # full-power point and start from whichever is better
        p_full = _project_power(ctx, np.where(ctx.h > 0, np.inf, 0.0), ps, b)
        if np.all((ctx.h * np.sqrt(p_full)).sum(axis=0) > 0):
            eta_full = optimal_eta(p_full, ps, ctx.h, g2, net, devs)
            if _omega(ctx, p_full, ps, b, eta_full) < _omega(ctx, p, ps, b, eta):
                p, eta = p_full, eta_full
    obj = _omega(ctx, p, ps, b, eta)
    trace = [obj]
    converged = False
    it = 0
    for it in range(1, options.max_inner_iters + 1):
        p_new, a_new = _tx_power_step(ctx, eta, b, ps)
        if scheme != "fixed_eta":
            eta_new = optimal_eta(p_new, ps, ctx.h, g2, net, devs)
        else:
            eta_new = eta
        new = _omega(ctx, p_new, ps, b, eta_new)
        if new <= obj:
            p, eta, alpha = p_new, eta_new, a_new
            change = obj - new
            obj = new
            trace.append(obj)
        else:
            change = 0.0
        if change <= options.inner_tol * max(abs(obj), 1e-300):
            converged = True
            break
    return PowerSolution(p, eta, alpha, trace, it, converged)


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------


def _start_points(ctx: _Ctx, scheme: str, options: SolveOptions, config):
    """Feasible starting points, one per initial transmit-energy share.

    Each block of the alternation spends whatever energy the other leaves, so
    the initial split between transmission and sensing/computation decides
    which stationary point is reached.  Share 0 is the minimal start (b = 1,
    p = half the cap); positive shares put that fraction of each budget into
    transmission and half of the rest into computation.
    """
    net, devs = config.network, config.devices
    ps = np.broadcast_to(ctx.Pmax[:, None], ctx.h.shape).copy()
    points = []
    for share in options.start_tx_shares:
        if scheme == "fixed_batch":
            b = np.full(ctx.T, float(FIXED_BATCH))
        elif share == 0:
            b = np.ones(ctx.T)
        else:
            b0 = float(np.min(0.5 * (1.0 - share) * ctx.E / (ctx.T * ctx.a)))
            b = np.clip(np.full(ctx.T, np.floor(b0)), 1.0, np.floor(ctx.b_hi))
        if scheme == "fixed_tx_power":
            p = _fixed_power(ctx, b, options)
        elif scheme == "channel_inversion":
            p, eta = _inversion_power(ctx, b, ps)
        elif share == 0:
            p = _project_power(ctx, FIXED_POWER_FRACTION * _tx_cap(ctx, b), ps, b)
        else:
            per_round = share * ctx.E / (ctx.T * ctx.tau_slot)
            p = _project_power(ctx, np.where(ctx.h > 0, per_round[:, None], 0.0), ps, b)
        if scheme == "fixed_eta":
            eta = np.full(ctx.T, FIXED_ETA)
        elif scheme != "channel_inversion":
            eta = optimal_eta(p, ps, ctx.h, ctx.g2, net, devs)
        plan = AllocationPlan(p, ps, b, eta, relaxed=True)
        if check_feasibility(plan, config, use_relaxed_latency=True).feasible:
            points.append((p, ps, b, eta))
        if scheme in ("fixed_tx_power", "channel_inversion", "fixed_batch") and share == 0:
            # the start is fully determined by the rule; other shares add nothing new
            continue
    if not points:
        raise InfeasibleError(f"no feasible starting point for scheme {scheme!r}")
    return points


def _alternate(ctx, scheme, start, config, channel, constants, options):
    """One run of the outer alternation from ``start``; returns a result dict."""
    p, ps, b, eta = start
    obj = _omega(ctx, p, ps, b, eta)
    trace, tags, inner = [obj], ["init"], []
    lam = np.zeros(ctx.K)
    alpha = np.zeros(ctx.K)
    dual_iters, dual_ok, dual_res = 0, True, 0.0
    converged = False
    outer = 0
    per_sample_tx = None
    if scheme == "fixed_tx_power" and options.fixed_power_reading == "per_symbol":
        per_sample_tx = FIXED_POWER_FRACTION * ctx.d * ctx.Pmax * ctx.tau_slot * (1.0 - _CAP_MARGIN)
    net, devs = config.network, config.devices

    for outer in range(1, options.max_outer_iters + 1):
        before = obj
        # batch block
        sol = solve_p11_continuous(p, eta, config, channel, constants, options,
                                   fixed_batch=FIXED_BATCH if scheme == "fixed_batch" else None,
                                   per_sample_tx_energy=per_sample_tx)
        b_new = sol.batch
        ps_new = np.minimum(sol.sense_energy / b_new[None, :], ctx.Pmax[:, None])
        p_new, eta_new = p, eta
        if scheme == "fixed_tx_power":
            # p follows b by rule; eta is free and re-picked for the new powers
            p_new = _fixed_power(ctx, b_new, options)
            eta_new = optimal_eta(p_new, ps_new, ctx.h, ctx.g2, net, devs)
        new = _omega(ctx, p_new, ps_new, b_new, eta_new)
        if new <= obj:
            b, ps, p, eta, obj = b_new, ps_new, p_new, eta_new, new
            lam, dual_iters, dual_ok, dual_res = (sol.dual.lambda_, sol.dual.iterations,
                                                   sol.dual.converged, sol.dual.kkt_residual)
        trace.append(obj)
        tags.append("batch_block")
        # power block
        res = algorithm1(b, ps, p, channel, config, constants, options, scheme=scheme)
        inner.append(res.objective_trace)
        if res.objective_trace[-1] <= obj:
            p, eta, alpha, obj = res.tx_power, res.denoise, res.alpha, res.objective_trace[-1]
        trace.append(obj)
        tags.append("power_block")
        if before - obj <= options.outer_tol * max(abs(obj), 1e-300):
            converged = True
            break

    continuous = AllocationPlan(p, ps, b, eta, relaxed=True)
    # round the batch, recover sensing power, re-run the power block once
    if scheme == "fixed_batch":
        b_int = np.full(ctx.T, FIXED_BATCH, dtype=np.int64)
        ps_int = ps.copy()
    else:
        rounded = P11Solution(ps * b[None, :], b, DualState(lam, alpha), obj)
        b_int, ps_int = round_batch_and_recover_sensing(rounded, config, options)
    res = algorithm1(b_int, ps_int, p, channel, config, constants, options, scheme=scheme,
                     fixed_eta=FIXED_ETA if scheme == "fixed_eta" else None)
    inner.append(res.objective_trace)
    final = AllocationPlan(res.tx_power, ps_int, b_int, res.denoise)
    return {
        "trace": trace, "tags": tags, "inner": inner, "continuous": continuous, "final": final,
        "objective": _omega(ctx, final.tx_power, ps_int, b_int, final.denoise),
        "dual": DualState(lam, res.alpha, dual_iters, dual_ok, dual_res),
        "outer": outer, "converged": converged,
    }


def algorithm2(config: SystemConfig, channel: ChannelState, constants: ConvergenceConstants,
               options: SolveOptions | None = None, scheme: str = "proposed") -> SolveTrace:
    """Alternate the batch block and the power block, then round and polish.

    ``scheme`` is ``"proposed"`` or one of the baselines, which run the same
    loop with their fixed component held at its prescribed value.  The loop
    is run from every starting point of ``_start_points`` and the rounded plan
    with the smallest objective is returned together with its own trace.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    options = options or SolveOptions()
    ctx = _context(config, channel, constants)
    best = None
    for start in _start_points(ctx, scheme, options, config):
        run = _alternate(ctx, scheme, start, config, channel, constants, options)
        if not check_feasibility(run["final"], config).feasible:
            continue
        if best is None or run["objective"] < best["objective"]:
            best = run
    if best is None:
        raise InfeasibleError(f"scheme {scheme!r}: every rounded plan violates the constraints")
    report = check_feasibility(best["final"], config)
    return SolveTrace(best["trace"], best["tags"], best["final"], best["dual"], scheme, best["continuous"],
                      best["objective"], best["outer"], best["converged"], best["inner"], report)


def baseline_plan(kind: str, config: SystemConfig, channel: ChannelState, constants: ConvergenceConstants,
                  options: SolveOptions | None = None) -> AllocationPlan:
    """Plan for one of the baselines: the named component fixed, the rest optimised."""
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    return algorithm2(config, channel, constants, options, scheme=kind).final_plan


def solve_all(config: SystemConfig, channel: ChannelState, constants: ConvergenceConstants,
              options: SolveOptions | None = None, schemes=SCHEMES) -> dict:
    """Run the proposed optimiser and every baseline on the same channel draw."""
    return {s: algorithm2(config, channel, constants, options, scheme=s) for s in schemes}


__all__ = [
    "BASELINES", "SCHEMES", "InfeasibleError", "SolveOptions", "DualState", "P11Solution",
    "PowerSolution", "SolveTrace", "a1_coefficient", "optimal_eta", "optimal_tx_power",
    "solve_p11_continuous", "round_batch_and_recover_sensing", "algorithm1", "algorithm2",
    "baseline_plan", "plan_objective", "solve_all",
]

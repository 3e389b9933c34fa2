"""Over-the-air embedding aggregation and its error statistics.

Signals are real-valued: with perfect phase pre-compensation only the channel
magnitudes matter.  Noise powers follow a per-sample total convention: the
channel noise added to one received d-dimensional embedding has expected
squared norm ``channel_noise_variance`` (per-entry variance sigma_z^2 / d),
matching how the sensing noise is specified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .model import DeviceParams, NetworkParams


class DomainError(ValueError):
    """Input outside the domain of a closed-form expression."""


@dataclass
class AggregationErrorStats:
    bound_misalignment: float
    bound_sensing: float
    bound_channel_noise: float
    empirical_bias: np.ndarray | None = None
    empirical_mse: float | None = None

    @property
    def bound_total(self) -> float:
        return self.bound_misalignment + self.bound_sensing + self.bound_channel_noise

    def to_dict(self) -> dict:
        return {
            "empirical_bias": None if self.empirical_bias is None else np.asarray(self.empirical_bias).tolist(),
            "empirical_mse": self.empirical_mse,
            "bound_misalignment": self.bound_misalignment,
            "bound_sensing": self.bound_sensing,
            "bound_channel_noise": self.bound_channel_noise,
            "bound_total": self.bound_total,
        }


def aggregate(embeddings: Sequence[np.ndarray], channel, tx_power, denoise: float,
              noise_variance: float, rng: np.random.Generator) -> np.ndarray:
    """Server-side estimate (sum_k h_k sqrt(p_k) Psi_k + Z) / sqrt(eta) for one round."""
    if not denoise > 0:
        raise ValueError("denoising factor must be positive")
    embs = [np.asarray(e, dtype=float) for e in embeddings]
    h = np.asarray(channel, dtype=float)
    p = np.asarray(tx_power, dtype=float)
    if len(embs) != h.shape[0] or p.shape != h.shape:
        raise ValueError("need one embedding block, channel gain and power per device")
    shape = embs[0].shape
    if any(e.shape != shape for e in embs):
        raise ValueError("all devices must share the same (b, d) embedding shape")
    y = np.zeros(shape)
    for hk, pk, e in zip(h, p, embs):
        y += hk * math.sqrt(pk) * e
    if noise_variance > 0:
        d = shape[-1]
        y += rng.standard_normal(shape) * math.sqrt(noise_variance / d)
    return y / math.sqrt(denoise)


def error_realization(estimate, truth) -> np.ndarray:
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise ValueError(f"shape mismatch: {estimate.shape} vs {truth.shape}")
    return estimate - truth


def empirical_stats(errors: np.ndarray, bound: AggregationErrorStats | None = None) -> AggregationErrorStats:
    """Attach Monte-Carlo bias (per coordinate) and MSE of error rows to a bound record."""
    errors = np.atleast_2d(np.asarray(errors, dtype=float))
    bias = errors.mean(axis=0)
    mse = float(np.mean(np.sum(errors**2, axis=1)))
    if bound is None:
        bound = AggregationErrorStats(math.nan, math.nan, math.nan)
    return AggregationErrorStats(bound.bound_misalignment, bound.bound_sensing,
                                 bound.bound_channel_noise, bias, mse)


def _check_domain(h, p, ps, eta):
    if np.any(np.asarray(eta) <= 0):
        raise DomainError("denoising factor must be positive")
    live = (h * h * p) > 0
    if np.any(live & (ps <= 0)):
        raise DomainError("sensing power must be positive wherever a device transmits")


def mse_bound_terms(h, p, ps, eta, g2: float, net: NetworkParams,
                    devices: Sequence[DeviceParams]):
    """Vectorised bound components over rounds; h, p, ps are (K, T), eta is (T,)."""
    h = np.atleast_2d(np.asarray(h, dtype=float))
    p = np.atleast_2d(np.asarray(p, dtype=float))
    ps = np.atleast_2d(np.asarray(ps, dtype=float))
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    _check_domain(h, p, ps, eta)
    clutter = np.array([d.clutter_variance for d in devices], dtype=float)
    return _kernels.mse_terms(h, p, ps, eta, clutter, net.sensing_noise_variance,
                              net.channel_noise_variance, g2 * g2)


def mse_bound(tx_power, sense_power, denoise: float, channel, g2: float,
              net: NetworkParams, devices: Sequence[DeviceParams]) -> AggregationErrorStats:
    """Upper bound on E||eps||^2 for one round (misalignment + sensing + channel noise)."""
    h = np.asarray(channel, dtype=float).reshape(-1, 1)
    mis, sens, chan = mse_bound_terms(h, np.asarray(tx_power, dtype=float).reshape(-1, 1),
                                      np.asarray(sense_power, dtype=float).reshape(-1, 1),
                                      np.array([denoise], dtype=float), g2, net, devices)
    return AggregationErrorStats(float(mis[0]), float(sens[0]), float(chan[0]))

"""System parameters, channel sampling and the per-round latency/energy model."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

# Independent RNG stream ids; every random draw in the package goes through one.
STREAMS = {"channel": 0, "data": 1, "sensing": 2, "aircomp": 3, "init": 4, "batch": 5}


def make_rng(seed: int, stream: str) -> np.random.Generator:
    """Generator for a named stream; distinct streams never share state."""
    if stream not in STREAMS:
        raise ValueError(f"unknown RNG stream {stream!r}; expected one of {sorted(STREAMS)}")
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(STREAMS[stream],)))


_NONNEGATIVE = ("clutter_variance",)


@dataclass(frozen=True)
class DeviceParams:
    energy_budget_joules: float = 1000.0
    # scalar, or one value per round
    per_round_latency_budget_s: float | tuple[float, ...] = 300.0
    max_power_watts: float = 0.05
    cycles_per_sample: float = 1e7
    cpu_freq_hz: float = 2e9
    capacitance_coeff: float = 1e-28
    sense_latency_per_sample_s: float = 1e-3
    clutter_variance: float = 1e-9

    def __post_init__(self):
        bad = []
        for f in fields(self):
            v = getattr(self, f.name)
            vals = v if isinstance(v, (tuple, list)) else (v,)
            ok = (lambda x: x >= 0) if f.name in _NONNEGATIVE else (lambda x: x > 0)
            if not all(np.isfinite(x) and ok(x) for x in vals):
                bad.append(f.name)
        if isinstance(self.per_round_latency_budget_s, list):
            object.__setattr__(self, "per_round_latency_budget_s", tuple(self.per_round_latency_budget_s))
        if bad:
            raise ValueError(f"DeviceParams fields must be positive (clutter may be zero): {', '.join(bad)}")

    def latency_budget(self, num_rounds: int) -> np.ndarray:
        v = self.per_round_latency_budget_s
        if isinstance(v, tuple):
            if len(v) != num_rounds:
                raise ValueError(f"per-round latency budget has {len(v)} entries, expected {num_rounds}")
            return np.asarray(v, dtype=float)
        return np.full(num_rounds, float(v))

    @property
    def energy_per_sample_compute(self) -> float:
        return self.capacitance_coeff * self.cycles_per_sample * self.cpu_freq_hz**2


@dataclass(frozen=True)
class NetworkParams:
    num_devices: int = 3
    num_rounds: int = 200
    embedding_dim: int = 100
    symbols_per_block: int = 14
    slot_duration_s: float = 1e-3
    channel_noise_variance: float = 1e-9
    sensing_noise_variance: float = 1e-9
    path_loss: float = 1e-3

    def __post_init__(self):
        bad = [n for n in ("num_devices", "num_rounds", "embedding_dim", "symbols_per_block")
               if int(getattr(self, n)) < 1 or int(getattr(self, n)) != getattr(self, n)]
        if not self.slot_duration_s > 0:
            bad.append("slot_duration_s")
        for n in ("channel_noise_variance", "sensing_noise_variance"):
            if not getattr(self, n) >= 0:
                bad.append(n)
        if not (self.path_loss > 0 and math.isfinite(self.path_loss)):
            bad.append("path_loss")
        if bad:
            raise ValueError(f"invalid NetworkParams fields: {', '.join(bad)}")


@dataclass(frozen=True)
class SystemConfig:
    network: NetworkParams = field(default_factory=NetworkParams)
    devices: tuple[DeviceParams, ...] = ()
    rng_seed: int = 0

    def __post_init__(self):
        devs = tuple(self.devices) if self.devices else tuple(
            DeviceParams() for _ in range(self.network.num_devices))
        object.__setattr__(self, "devices", devs)
        if len(devs) != self.network.num_devices:
            raise ValueError(
                f"num_devices is {self.network.num_devices} but {len(devs)} device blocks were given")
        if int(self.rng_seed) < 0:
            raise ValueError("rng_seed must be a nonnegative integer")

    @property
    def K(self) -> int:
        return self.network.num_devices

    @property
    def T(self) -> int:
        return self.network.num_rounds

    def device_array(self, name: str) -> np.ndarray:
        return np.array([getattr(d, name) for d in self.devices], dtype=float)

    def latency_budgets(self) -> np.ndarray:
        """Per-device, per-round latency budgets, shape (K, T)."""
        return np.stack([d.latency_budget(self.T) for d in self.devices])

    def with_seed(self, seed: int) -> "SystemConfig":
        return SystemConfig(self.network, self.devices, int(seed))

    def to_dict(self) -> dict:
        out = {"rng_seed": int(self.rng_seed), "network": asdict(self.network),
               "devices": [asdict(d) for d in self.devices]}
        for d in out["devices"]:
            if isinstance(d["per_round_latency_budget_s"], tuple):
                d["per_round_latency_budget_s"] = list(d["per_round_latency_budget_s"])
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SystemConfig":
        net = NetworkParams(**data.get("network", {}))
        devs = tuple(DeviceParams(**d) for d in data.get("devices", []))
        return cls(net, devs, int(data.get("rng_seed", 0)))


@dataclass(frozen=True)
class ChannelState:
    magnitudes: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.magnitudes, dtype=float)
        if h.ndim != 2:
            raise ValueError("channel magnitudes must be a (K, T) matrix")
        if not np.all(np.isfinite(h)) or np.any(h < 0):
            raise ValueError("channel magnitudes must be finite and nonnegative")
        object.__setattr__(self, "magnitudes", h)

    @property
    def shape(self):
        return self.magnitudes.shape

    def column(self, t: int) -> np.ndarray:
        return self.magnitudes[:, t]


def sample_channels(config: SystemConfig) -> ChannelState:
    """I.i.d. Rayleigh magnitudes sqrt(path_loss)*|g|, g ~ CN(0, 1)."""
    rng = make_rng(config.rng_seed, "channel")
    re = rng.standard_normal((config.K, config.T))
    im = rng.standard_normal((config.K, config.T))
    g = np.hypot(re, im) / math.sqrt(2.0)
    return ChannelState(math.sqrt(config.network.path_loss) * g)


@dataclass
class AllocationPlan:
    tx_power: np.ndarray
    sense_power: np.ndarray
    batch_size: np.ndarray
    denoise: np.ndarray
    relaxed: bool = False

    def __post_init__(self):
        self.tx_power = np.asarray(self.tx_power, dtype=float)
        self.sense_power = np.asarray(self.sense_power, dtype=float)
        self.denoise = np.asarray(self.denoise, dtype=float)
        b = np.asarray(self.batch_size, dtype=float)
        if self.tx_power.ndim != 2 or self.sense_power.shape != self.tx_power.shape:
            raise ValueError("tx_power and sense_power must share a (K, T) shape")
        T = self.tx_power.shape[1]
        if b.shape != (T,) or self.denoise.shape != (T,):
            raise ValueError(f"batch_size and denoise must have shape ({T},)")
        if np.any(self.tx_power < 0) or np.any(self.sense_power < 0):
            raise ValueError("powers must be nonnegative")
        if np.any(self.denoise <= 0):
            raise ValueError("denoising factors must be positive")
        if not self.relaxed:
            if np.any(b < 1) or np.any(b != np.round(b)):
                raise ValueError("a finalized plan needs integer batch sizes >= 1")
            b = b.astype(np.int64)
        elif np.any(b <= 0):
            raise ValueError("relaxed batch sizes must be positive")
        self.batch_size = b

    @property
    def shape(self):
        return self.tx_power.shape

    def copy(self) -> "AllocationPlan":
        return AllocationPlan(self.tx_power.copy(), self.sense_power.copy(),
                              self.batch_size.copy(), self.denoise.copy(), self.relaxed)

    def to_dict(self) -> dict:
        return {"tx_power": self.tx_power.tolist(), "sense_power": self.sense_power.tolist(),
                "batch_size": self.batch_size.tolist(), "denoise": self.denoise.tolist(),
                "relaxed": bool(self.relaxed)}

    @classmethod
    def from_dict(cls, data: dict) -> "AllocationPlan":
        return cls(np.array(data["tx_power"]), np.array(data["sense_power"]),
                   np.array(data["batch_size"]), np.array(data["denoise"]),
                   bool(data.get("relaxed", False)))


def sensed_sample(clean, device: DeviceParams, net: NetworkParams, p_sense: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Noisy observation clean + clutter + noise/sqrt(p_sense).

    ``clean`` may be one feature vector or a (b, m) batch of them; the clutter
    and sensing-noise vectors are drawn per sample with per-coordinate variance
    total/m, so their expected squared norms are the configured totals.
    """
    if not p_sense > 0:
        raise ValueError("sensing power must be positive")
    x = np.asarray(clean, dtype=float)
    m = x.shape[-1]
    clutter = rng.standard_normal(x.shape) * math.sqrt(device.clutter_variance / m)
    noise = rng.standard_normal(x.shape) * math.sqrt(net.sensing_noise_variance / m)
    return x + clutter + noise / math.sqrt(p_sense)


def sensing_latency(b, device: DeviceParams):
    return np.asarray(b, dtype=float) * device.sense_latency_per_sample_s


def sensing_energy(p_sense, b, device: DeviceParams):
    return np.asarray(p_sense, dtype=float) * np.asarray(b, dtype=float) * device.sense_latency_per_sample_s


def compute_latency(b, device: DeviceParams):
    return device.cycles_per_sample * np.asarray(b, dtype=float) / device.cpu_freq_hz


def compute_energy(b, device: DeviceParams):
    return device.energy_per_sample_compute * np.asarray(b, dtype=float)


def comm_latency(b, net: NetworkParams, relaxed: bool = False):
    """Uplink time: ceil(d*b/M) resource blocks of one slot each (no ceiling if relaxed)."""
    b = np.asarray(b)
    d, M = net.embedding_dim, net.symbols_per_block
    if relaxed:
        return d * b.astype(float) / M * net.slot_duration_s
    if np.all(b == np.round(b)):
        q = d * np.round(b).astype(np.int64)
        blocks = -(-q // M)
    else:
        blocks = np.ceil(d * b.astype(float) / M)
    return blocks * net.slot_duration_s


def tx_energy(p_tx, net: NetworkParams):
    return np.asarray(p_tx, dtype=float) * net.slot_duration_s


@dataclass
class FeasibilityReport:
    per_device_energy_used: np.ndarray
    per_device_per_round_latency: np.ndarray
    violations: list = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "feasible": self.feasible,
            "per_device_energy_used": self.per_device_energy_used.tolist(),
            "per_device_per_round_latency": self.per_device_per_round_latency.tolist(),
            "violations": [{"constraint": c, "device": k, "round": t, "slack": s}
                           for c, k, t, s in self.violations],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def check_feasibility(plan: AllocationPlan, config: SystemConfig,
                      use_relaxed_latency: bool = False) -> FeasibilityReport:
    """Evaluate the latency, power and energy constraints of a plan.

    Constraint ids: ``latency`` (per device/round), ``tx_power`` (average
    per-symbol power p/(d*b)), ``sense_power`` and ``energy`` (per device,
    round is None).  Slack is budget minus usage; negative slack is a violation.
    """
    K, T = config.K, config.T
    if plan.shape != (K, T):
        raise ValueError(f"plan shape {plan.shape} does not match config ({K}, {T})")
    net = config.network
    b = plan.batch_size
    latency = np.zeros((K, T))
    energy = np.zeros(K)
    violations = []
    comm = comm_latency(b, net, relaxed=use_relaxed_latency)
    budgets = config.latency_budgets()
    for k, dev in enumerate(config.devices):
        latency[k] = sensing_latency(b, dev) + compute_latency(b, dev) + comm
        energy[k] = float(np.sum(sensing_energy(plan.sense_power[k], b, dev) + compute_energy(b, dev)
                                 + tx_energy(plan.tx_power[k], net)))
        lat_slack = budgets[k] - latency[k]
        per_symbol = plan.tx_power[k] / (net.embedding_dim * b.astype(float))
        tx_slack = dev.max_power_watts - per_symbol
        ps_slack = dev.max_power_watts - plan.sense_power[k]
        for t in range(T):
            if lat_slack[t] < 0:
                violations.append(("latency", k, t, float(lat_slack[t])))
            if tx_slack[t] < 0:
                violations.append(("tx_power", k, t, float(tx_slack[t])))
            if ps_slack[t] < 0:
                violations.append(("sense_power", k, t, float(ps_slack[t])))
        e_slack = dev.energy_budget_joules - energy[k]
        if e_slack < 0:
            violations.append(("energy", k, None, float(e_slack)))
    return FeasibilityReport(energy, latency, violations)

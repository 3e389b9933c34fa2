"""Configuration loading, experiment orchestration and result files.

Config file (TOML), every key optional::

    seed = 0                         # base seed, also used when --seeds is absent

    [network]                        # NetworkParams
    num_devices = 3
    num_rounds = 200
    embedding_dim = 100
    symbols_per_block = 14
    slot_duration_s = 1e-3
    channel_noise_variance = 1e-9    # sigma_z^2, total per received embedding
    sensing_noise_variance = 1e-9    # delta_s^2
    path_loss = 1e-3

    [device_defaults]                # DeviceParams applied to every device
    energy_budget_joules = 1000.0
    per_round_latency_budget_s = 300.0
    max_power_watts = 0.05
    cycles_per_sample = 1e7
    cpu_freq_hz = 2e9
    capacitance_coeff = 1e-28
    sense_latency_per_sample_s = 1e-3
    clutter_variance = 1e-9          # delta_{k,s}^2

    [[devices]]                      # optional, exactly num_devices blocks;
    energy_budget_joules = 3000.0    # each overrides device_defaults

    [constants]                      # ConvergenceConstants (K and T come from [network])
    lipschitz_L = 1.0
    learning_rate_mu = 0.1
    grad_variance_sigma2 = 1.0
    embed_param_grad_G1 = 1.0
    embed_input_grad_G2 = 1.0
    hessian_bound_Psi = 1.0

    [solver]                         # SolveOptions
    [task]                           # synthetic task / training, see TaskSettings

Sweep axes are dotted keys (``device_defaults.energy_budget_joules``) or the
aliases in ``SWEEP_ALIASES`` (``E``, ``Delta``, ``Pmax``, ``sigma_z2``).

Output files::

    config.toml, config_hash.txt       exact resolved config and its sha256
    seed_<s>/plan.json, trace.json     optimize / simulate / bound
    seed_<s>/history.csv               simulate: round, loss, test_accuracy, omega_contribution
    seed_<s>/bound.json                bound
    sweep.csv                          axis_value, seed, scheme, final_loss, final_accuracy, omega, wall_s
    record.json                        ResultRecord
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .convergence import ConvergenceConstants, avg_grad_bound, omega_per_round
from .model import DeviceParams, NetworkParams, SystemConfig, sample_channels
from .optimizer import SCHEMES, InfeasibleError, SolveOptions, algorithm2
from .sim import SAMPLING_MODES, clean_loss, estimate_constants, init_model, make_task, train

log = logging.getLogger("iscc_vfeel")

COMMANDS = ("optimize", "simulate", "bound", "sweep")
HISTORY_COLUMNS = ("round", "loss", "test_accuracy", "omega_contribution")
SWEEP_COLUMNS = ("axis_value", "seed", "scheme", "final_loss", "final_accuracy", "omega", "wall_s")
SWEEP_ALIASES = {
    "E": "device_defaults.energy_budget_joules",
    "Delta": "device_defaults.per_round_latency_budget_s",
    "Pmax": "device_defaults.max_power_watts",
    "sigma_z2": "network.channel_noise_variance",
}


@dataclass
class TaskSettings:
    num_classes: int = 7
    feature_dim: int = 10  # per device
    num_samples: int = 14000
    separation: float = 0.5
    hidden: int = 0
    # "cycled": stored scenes re-sensed with fresh noise; "fresh": new i.i.d. scenes
    sampling: str = "cycled"
    # replace [constants] with estimates from the untrained model
    estimate_constants: bool = False

    def __post_init__(self):
        bad = [n for n in ("num_classes", "feature_dim", "num_samples") if int(getattr(self, n)) < 1]
        if self.num_classes < 2:
            bad.append("num_classes")
        if not self.separation >= 0:
            bad.append("separation")
        if self.hidden < 0:
            bad.append("hidden")
        if self.sampling not in SAMPLING_MODES:
            bad.append("sampling")
        if bad:
            raise ValueError(f"invalid task fields: {', '.join(sorted(set(bad)))}")


_CONSTANT_KEYS = tuple(f.name for f in fields(ConvergenceConstants) if f.name not in ("num_devices_K", "num_rounds_T"))
_SECTIONS = {
    "network": NetworkParams,
    "device_defaults": DeviceParams,
    "solver": SolveOptions,
    "task": TaskSettings,
}


class ConfigError(ValueError):
    """Config problems; ``problems`` lists one message per offending key."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


@dataclass
class LoadedConfig:
    system: SystemConfig
    constants: ConvergenceConstants
    options: SolveOptions
    task: TaskSettings
    resolved: dict

    @property
    def config_hash(self) -> str:
        return config_hash(self.resolved)


def _defaults() -> dict:
    out = {"seed": 0}
    for name, cls in _SECTIONS.items():
        out[name] = {k: _plain(v) for k, v in asdict(cls()).items()}
    out["constants"] = {k: getattr(ConvergenceConstants(), k) for k in _CONSTANT_KEYS}
    out["devices"] = []
    return out


def _plain(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(resolved: dict) -> str:
    return hashlib.sha256(canonical_json(resolved).encode()).hexdigest()


def _check_keys(section: str, given: dict, allowed, problems: list):
    for k in given:
        if k not in allowed:
            problems.append(f"{section}.{k}: unknown key")


def _build(cls, section: str, values: dict, problems: list):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        problems.append(f"{section}: {exc}")
        return None


def resolve(data: dict) -> dict:
    """Merge a parsed config over the defaults (no validation)."""
    out = _defaults()
    for k, v in data.items():
        if isinstance(v, dict) and k in out and isinstance(out[k], dict):
            out[k].update(v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def build(resolved: dict) -> LoadedConfig:
    """Validate a resolved config dict; raise ``ConfigError`` listing every problem."""
    problems = []
    original = resolved
    allowed_top = {"seed", "devices", "constants", *_SECTIONS}
    _check_keys("<top>", resolved, allowed_top, problems)
    for name, cls in _SECTIONS.items():
        _check_keys(name, resolved.get(name, {}), {f.name for f in fields(cls)}, problems)
    _check_keys("constants", resolved.get("constants", {}), set(_CONSTANT_KEYS), problems)
    dev_keys = {f.name for f in fields(DeviceParams)}
    devices_raw = resolved.get("devices", [])
    if not isinstance(devices_raw, list):
        problems.append("devices: must be an array of tables")
        devices_raw = []
    for i, d in enumerate(devices_raw):
        _check_keys(f"devices[{i}]", d, dev_keys, problems)
    seed = resolved.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        problems.append("seed: must be a nonnegative integer")
        seed = 0
    # keep validating the known keys so one pass reports everything
    known = {name: {k: v for k, v in resolved[name].items() if k in {f.name for f in fields(cls)}}
             for name, cls in _SECTIONS.items()}
    known["constants"] = {k: v for k, v in resolved["constants"].items() if k in _CONSTANT_KEYS}
    devices_raw = [{k: v for k, v in d.items() if k in dev_keys} for d in devices_raw]
    resolved = {**resolved, **known}

    net = _build(NetworkParams, "network", resolved["network"], problems)
    base = resolved["device_defaults"]
    _build(DeviceParams, "device_defaults", base, problems)
    devices = []
    for i, d in enumerate(devices_raw):
        devices.append(_build(DeviceParams, f"devices[{i}]", {**base, **d}, problems))
    options = _build(SolveOptions, "solver", resolved["solver"], problems)
    task = _build(TaskSettings, "task", resolved["task"], problems)
    system = constants = None
    if net is not None:
        if devices_raw and len(devices_raw) != net.num_devices:
            problems.append(f"devices: network.num_devices is {net.num_devices} but "
                            f"{len(devices_raw)} [[devices]] blocks were given")
        elif all(d is not None for d in devices):
            if not devices:
                devices = [DeviceParams(**base)] * net.num_devices if not any(
                    p.startswith("device_defaults") for p in problems) else []
            if devices:
                try:
                    system = SystemConfig(net, tuple(devices), int(seed))
                    if net.num_rounds is not None:
                        for d in devices:
                            d.latency_budget(net.num_rounds)
                except ValueError as exc:
                    problems.append(f"devices: {exc}")
        constants = _build(ConvergenceConstants, "constants",
                           {**resolved["constants"], "num_devices_K": net.num_devices,
                            "num_rounds_T": net.num_rounds}, problems)
    if problems:
        raise ConfigError(problems)
    return LoadedConfig(system, constants, options, task, original)


def load_config(path=None) -> LoadedConfig:
    """Read a TOML config (None means all defaults), fill defaults, validate."""
    data = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError([f"{path}: parse error: {exc}"]) from exc
    return build(resolve(data))


def dump_config(resolved: dict) -> str:
    return tomli_w.dumps(resolved)


def axis_key(name: str) -> str:
    key = SWEEP_ALIASES.get(name, name)
    parts = key.split(".")
    defaults = _defaults()
    if len(parts) != 2 or parts[0] not in defaults or not isinstance(defaults[parts[0]], dict) \
            or parts[1] not in defaults[parts[0]]:
        raise ConfigError([f"sweep axis {name!r}: not a documented config key"])
    return key


def with_override(resolved: dict, key: str, value) -> dict:
    """Copy of ``resolved`` with one dotted key set; device keys also reach every [[devices]] block."""
    out = copy.deepcopy(resolved)
    section, name = axis_key(key).split(".")
    out[section][name] = value
    if section == "device_defaults":
        for d in out.get("devices", []):
            d[name] = value
    return out


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


@dataclass
class ExperimentSpec:
    config_path: str | None
    command: str
    out_dir: str
    seeds: tuple = (0,)
    sweep_axis: tuple | None = None  # (key, [values])
    workers: int = 1
    schemes: tuple = SCHEMES

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValueError(f"unknown command {self.command!r}; expected one of {COMMANDS}")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds or any(s < 0 for s in self.seeds):
            raise ValueError("seeds must be a non-empty list of nonnegative integers")
        if self.command == "sweep":
            if self.sweep_axis is None or not list(self.sweep_axis[1]):
                raise ValueError("sweep needs an axis with at least one value")
            axis_key(self.sweep_axis[0])
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad:
            raise ValueError(f"unknown schemes {bad}")


@dataclass
class ResultRecord:
    config_hash: str
    command: str
    outputs: dict = field(default_factory=dict)
    wall_s: float = 0.0

    def payload(self) -> dict:
        """Everything except timing, for reproducibility comparisons."""
        return {"config_hash": self.config_hash, "command": self.command, "outputs": self.outputs}

    def to_dict(self) -> dict:
        return {**self.payload(), "wall_s": self.wall_s}


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def _constants_for(cfg: LoadedConfig, task, seed: int) -> ConvergenceConstants:
    if not cfg.task.estimate_constants:
        return cfg.constants
    model = init_model(task, seed, cfg.task.hidden)
    return estimate_constants(task, model, 500, mu=cfg.constants.learning_rate_mu,
                              num_rounds=cfg.system.T, seed=seed)


def _task_for(cfg: LoadedConfig, seed: int):
    t = cfg.task
    return make_task(cfg.system.K, t.feature_dim, cfg.system.network.embedding_dim, t.num_classes,
                     t.num_samples, seed, t.separation)


def _solve(cfg: LoadedConfig, seed: int, schemes, constants=None):
    system = cfg.system.with_seed(seed)
    channel = sample_channels(system)
    out = {}
    for s in schemes:
        try:
            out[s] = algorithm2(system, channel, constants or cfg.constants, cfg.options, scheme=s)
        except InfeasibleError as exc:
            log.warning("seed %d scheme %s infeasible: %s", seed, s, exc)
            out[s] = None
    return system, channel, out


def _run_seed(cfg: LoadedConfig, command: str, seed: int, out_dir: Path, schemes) -> dict:
    task = _task_for(cfg, seed) if command in ("simulate", "bound") or cfg.task.estimate_constants else None
    constants = _constants_for(cfg, task, seed) if task is not None else cfg.constants
    system, channel, traces = _solve(cfg, seed, schemes, constants)
    sd = out_dir / f"seed_{seed}"
    plans = {s: (tr.final_plan.to_dict() if tr else None) for s, tr in traces.items()}
    _atomic_write(sd / "plan.json", json.dumps(plans, sort_keys=True))
    _atomic_write(sd / "trace.json", json.dumps({s: (tr.to_dict() if tr else None) for s, tr in traces.items()},
                                                sort_keys=True))
    result = {"omega": {s: (tr.final_objective if tr else None) for s, tr in traces.items()}}
    main = traces.get("proposed") or next((t for t in traces.values() if t), None)
    if main is None:
        return result
    if command == "simulate":
        state = train(system, main.final_plan, task, channel, mu=cfg.constants.learning_rate_mu, seed=seed,
                      hidden=cfg.task.hidden, sampling=cfg.task.sampling)
        contrib = omega_per_round(main.final_plan, channel, constants, system)
        acc = dict(state.accuracy_history)
        rows = [{"round": t + 1, "loss": state.loss_history[t], "test_accuracy": acc.get(t + 1, math.nan),
                 "omega_contribution": float(contrib[t])} for t in range(len(state.loss_history))]
        _atomic_write(sd / "history.csv", _csv_text(HISTORY_COLUMNS, rows))
        result.update(final_loss=state.final_loss, final_accuracy=state.final_accuracy)
    elif command == "bound":
        gap = clean_loss(init_model(task, seed, cfg.task.hidden), task)
        report = avg_grad_bound(gap, main.final_plan, channel, constants, system)
        _atomic_write(sd / "bound.json", json.dumps(report.to_dict(), sort_keys=True))
        result["avg_grad_bound"] = report.avg_grad_bound
    return result


def _sweep_point(args):
    """One (axis value, seed) pair: optimize every scheme, train each plan, write a part file."""
    resolved, key, value, seed, out_dir, schemes = args
    part = Path(out_dir) / "parts" / f"{_slug(value)}__seed_{seed}.csv"
    if part.exists():
        return part
    cfg = build(with_override(resolved, key, value))
    task = _task_for(cfg, seed)
    constants = _constants_for(cfg, task, seed)
    system = cfg.system.with_seed(seed)
    channel = sample_channels(system)
    rows = []
    for s in schemes:
        t0 = time.perf_counter()
        try:
            tr = algorithm2(system, channel, constants, cfg.options, scheme=s)
            state = train(system, tr.final_plan, task, channel, mu=constants.learning_rate_mu, seed=seed,
                          hidden=cfg.task.hidden, sampling=cfg.task.sampling)
            row = {"final_loss": state.final_loss, "final_accuracy": state.final_accuracy,
                   "omega": tr.final_objective}
        except InfeasibleError as exc:
            log.warning("axis %s=%s seed %d scheme %s infeasible: %s", key, value, seed, s, exc)
            row = {"final_loss": math.nan, "final_accuracy": math.nan, "omega": math.nan}
        row.update(axis_value=value, seed=seed, scheme=s, wall_s=time.perf_counter() - t0)
        rows.append(row)
    _atomic_write(part, _csv_text(SWEEP_COLUMNS, rows))
    return part


def _slug(value) -> str:
    return repr(value).replace("/", "_").replace(" ", "")


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(spec: ExperimentSpec) -> ResultRecord:
    """Execute a command for every seed and persist the results under ``spec.out_dir``."""
    t0 = time.perf_counter()
    cfg = load_config(spec.config_path)
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "config.toml", dump_config(cfg.resolved))
    _atomic_write(out / "config_hash.txt", cfg.config_hash + "\n")
    record = ResultRecord(cfg.config_hash, spec.command)
    if spec.command == "sweep":
        key, values = spec.sweep_axis
        key = axis_key(key)
        jobs = [(cfg.resolved, key, v, s, str(out), tuple(spec.schemes)) for v in values for s in spec.seeds]
        # validate every axis value before any work starts
        for v in values:
            build(with_override(cfg.resolved, key, v))
        if spec.workers > 1:
            with ProcessPoolExecutor(spec.workers) as pool:
                parts = list(pool.map(_sweep_point, jobs))
        else:
            parts = [_sweep_point(j) for j in jobs]
        rows = [r for p in parts for r in read_csv(p)]
        order = {s: i for i, s in enumerate(SCHEMES)}
        rows.sort(key=lambda r: (float(r["axis_value"]), int(r["seed"]), order[r["scheme"]]))
        _atomic_write(out / "sweep.csv", _csv_text(SWEEP_COLUMNS, rows))
        record.outputs = {"axis": key, "values": list(values), "seeds": list(spec.seeds),
                          "rows": [{c: r[c] for c in SWEEP_COLUMNS if c != "wall_s"} for r in rows]}
    else:
        for s in spec.seeds:
            record.outputs[str(s)] = _run_seed(cfg, spec.command, s, out, spec.schemes)
    record.wall_s = time.perf_counter() - t0
    _atomic_write(out / "record.json", json.dumps(record.to_dict(), sort_keys=True, default=_json_default))
    return record


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def _parse_values(text: str) -> list:
    vals = []
    for item in text.split(","):
        item = item.strip()
        try:
            v = int(item)
        except ValueError:
            v = float(item)
        vals.append(v)
    return vals


def _parse_seeds(text: str) -> tuple:
    out = []
    for part in text.split(","):
        if "-" in part.strip()[1:]:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return tuple(out)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="iscc-vfeel", description=__doc__.split("\n\n")[0])
    ap.add_argument("--config", default=None, help="TOML config file (defaults if omitted)")
    ap.add_argument("--command", choices=COMMANDS, default="optimize")
    ap.add_argument("--sweep", default=None, metavar="KEY=V1,V2,...", help="sweep axis and values")
    ap.add_argument("--seeds", default=None, help="comma list or ranges, e.g. 0-4,7")
    ap.add_argument("--out", default="results", help="output directory")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--schemes", default=",".join(SCHEMES), help="comma list of schemes")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        seeds = _parse_seeds(args.seeds) if args.seeds else (cfg.resolved["seed"],)
        axis = None
        if args.sweep:
            if "=" not in args.sweep:
                raise ConfigError([f"--sweep expects KEY=V1,V2,..., got {args.sweep!r}"])
            key, vals = args.sweep.split("=", 1)
            axis = (axis_key(key.strip()), _parse_values(vals))
        spec = ExperimentSpec(args.config, args.command, args.out, seeds, axis, args.workers,
                              tuple(s.strip() for s in args.schemes.split(",")))
        record = run(spec)
    except (ConfigError, ValueError, InfeasibleError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"config_hash": record.config_hash, "command": record.command,
                      "out": str(Path(args.out).resolve()), "wall_s": round(record.wall_s, 3)}))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

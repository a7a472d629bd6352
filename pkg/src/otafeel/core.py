"""Configuration, schedules and deterministic random streams.

Every random draw in the package comes from an :class:`RngStream`, which is
a root seed plus a path of ``(label, index)`` pairs.  A stream is turned into
a numpy ``Generator`` backed by the counter-based Philox bit generator, keyed
through ``SeedSequence(seed, spawn_key=path)``.  Because the key depends only
on the path, results do not depend on the order in which streams are used or
on how work is split across workers.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np

__all__ = [
    "ConfigError",
    "StreamLabel",
    "RngStream",
    "derive_stream",
    "PowerSchedule",
    "LearningRateSchedule",
    "SimConfig",
    "eval_alpha",
    "eval_eta",
    "complex_normal",
    "as_model_vector",
    "config_from_dict",
    "config_to_dict",
]

UINT64_MAX = 2**64 - 1


class ConfigError(ValueError):
    """Invalid configuration or schedule value."""


class StreamLabel(enum.IntEnum):
    ROUND = 1
    DEVICE = 2
    ANTENNA = 3
    CHANNEL = 4
    NOISE = 5
    CSI = 6
    TASK = 7
    PARTITION = 8
    MINIBATCH = 9
    TRIAL = 10
    SWEEP = 11
    INIT = 12


@dataclass(frozen=True)
class RngStream:
    root_seed: int
    path: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.root_seed) <= UINT64_MAX:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.root_seed}")

    def child(self, label: StreamLabel | int, index: int) -> "RngStream":
        return derive_stream(self, label, index)

    def spawn_key(self) -> tuple[int, ...]:
        return tuple(v for pair in self.path for v in pair)

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(int(self.root_seed), spawn_key=self.spawn_key())
        return np.random.Generator(np.random.Philox(seq))


def derive_stream(root: RngStream, label: StreamLabel | int, index: int) -> RngStream:
    """Child stream at ``root.path + [(label, index)]``; a pure function of its inputs."""
    index = int(index)
    if index < 0:
        raise ValueError(f"stream index must be non-negative, got {index}")
    return RngStream(root.root_seed, root.path + ((int(label), index),))


def complex_normal(rng: np.random.Generator, var: float, shape) -> np.ndarray:
    """CN(0, var) samples: real and imaginary parts are independent N(0, var/2)."""
    shape = tuple(shape) if np.iterable(shape) else (int(shape),)
    out = np.empty(shape, dtype=np.complex128)
    if var == 0:
        out[...] = 0
        return out
    scale = math.sqrt(var / 2.0)
    out.real = rng.standard_normal(shape)
    out.imag = rng.standard_normal(shape)
    out *= scale
    return out


def as_model_vector(values, d: int | None = None) -> np.ndarray:
    """Validate a real parameter/update vector and return it as float64."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"model vector must be one-dimensional, got shape {v.shape}")
    if d is not None and v.shape[0] != d:
        raise ValueError(f"model vector has length {v.shape[0]}, expected {d}")
    if not np.all(np.isfinite(v)):
        raise ValueError("model vector has non-finite entries")
    return v


@dataclass(frozen=True)
class PowerSchedule:
    """alpha_t = a0 + a1 * t (``affine``), ``a0`` (``constant``) or a per-round ``table``."""

    kind: str = "affine"
    a0: float = 1.0
    a1: float = 1e-3
    values: tuple[float, ...] = ()

    def __call__(self, t: int) -> float:
        return eval_alpha(self, t)

    @classmethod
    def constant(cls, a0: float) -> "PowerSchedule":
        return cls("constant", float(a0), 0.0)

    @classmethod
    def affine(cls, a0: float, a1: float) -> "PowerSchedule":
        return cls("affine", float(a0), float(a1))


@dataclass(frozen=True)
class LearningRateSchedule:
    """eta(t) = c0 / (c1 * t + 1) (``inverse_affine``), ``c0`` (``constant``) or a ``table``."""

    kind: str = "inverse_affine"
    c0: float = 0.2
    c1: float = 1e-4
    values: tuple[float, ...] = ()

    def __call__(self, t: int) -> float:
        return eval_eta(self, t)

    @classmethod
    def constant(cls, c0: float) -> "LearningRateSchedule":
        return cls("constant", float(c0), 0.0)

    @classmethod
    def inverse_affine(cls, c0: float, c1: float) -> "LearningRateSchedule":
        return cls("inverse_affine", float(c0), float(c1))


def _table_value(values: Sequence[float], t: int, name: str) -> float:
    if t >= len(values):
        raise ConfigError(f"{name} table has {len(values)} entries, no value for t={t}")
    return float(values[t])


def eval_alpha(sched: PowerSchedule, t: int) -> float:
    if t < 0:
        raise ValueError(f"t must be non-negative, got {t}")
    if sched.kind == "affine":
        value = sched.a0 + sched.a1 * t
    elif sched.kind == "constant":
        value = sched.a0
    elif sched.kind == "table":
        value = _table_value(sched.values, t, "alpha")
    else:
        raise ConfigError(f"unknown power schedule kind {sched.kind!r}")
    if not value > 0:
        raise ConfigError(f"power scaling alpha_{t} = {value} is not positive")
    return float(value)


def eval_eta(sched: LearningRateSchedule, t: int) -> float:
    if t < 0:
        raise ValueError(f"t must be non-negative, got {t}")
    if sched.kind == "inverse_affine":
        value = sched.c0 / (sched.c1 * t + 1.0)
    elif sched.kind == "constant":
        value = sched.c0
    elif sched.kind == "table":
        value = _table_value(sched.values, t, "eta")
    else:
        raise ConfigError(f"unknown learning-rate schedule kind {sched.kind!r}")
    if not value > 0:
        raise ConfigError(f"learning rate eta({t}) = {value} is not positive")
    return float(value)


@dataclass(frozen=True)
class SimConfig:
    M: int = 20
    K: int = 40
    d: int = 50
    s: int = 25
    sigma_h2: float = 1.0
    sigma_z2: float = 1.0
    sigma_ht2: float = 0.0
    tau: int = 3
    T: int = 400
    alpha_schedule: PowerSchedule = field(default_factory=PowerSchedule)
    eta_schedule: LearningRateSchedule = field(default_factory=LearningRateSchedule)
    seed: int = 0
    partition_mode: str = "iid"
    batch_size: int = 250
    # "deterministic" sets every gain to sqrt(sigma_h2); exact-arithmetic tests only
    channel_mode: str = "rayleigh"

    def __post_init__(self):
        for name in ("M", "K", "d", "s", "tau", "T", "batch_size"):
            value = getattr(self, name)
            # T = 0 is allowed: a run with only the initial state
            if int(value) != value or value < (0 if name == "T" else 1):
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.s > self.d:
            raise ConfigError(f"s={self.s} exceeds d={self.d}")
        if not self.sigma_h2 > 0:
            raise ConfigError(f"sigma_h2 must be positive, got {self.sigma_h2}")
        for name in ("sigma_z2", "sigma_ht2"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.partition_mode not in ("iid", "non_iid"):
            raise ConfigError(f"partition_mode must be 'iid' or 'non_iid', got {self.partition_mode!r}")
        if self.channel_mode not in ("rayleigh", "deterministic"):
            raise ConfigError(f"channel_mode must be 'rayleigh' or 'deterministic', got {self.channel_mode!r}")
        if not 0 <= int(self.seed) <= UINT64_MAX:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @property
    def N(self) -> int:
        return math.ceil(self.d / (2 * self.s))

    def stream(self) -> RngStream:
        return RngStream(int(self.seed))

    def alpha(self, t: int) -> float:
        return eval_alpha(self.alpha_schedule, t)

    def eta(self, t: int) -> float:
        return eval_eta(self.eta_schedule, t)

    def check_eta(self, mu: float, t_max: int | None = None) -> None:
        """Raise unless 0 < eta(t) <= min(1, 1/(mu*tau)) for t = 0..t_max-1."""
        check_eta_schedule(self.eta_schedule, mu, self.tau, self.T if t_max is None else t_max)

    def with_updates(self, **kwargs) -> "SimConfig":
        return replace(self, **kwargs)


def check_eta_schedule(sched: LearningRateSchedule, mu: float, tau: int, t_max: int) -> None:
    cap = min(1.0, 1.0 / (mu * tau))
    for t in range(t_max):
        eta = eval_eta(sched, t)
        if eta > cap * (1 + 1e-12):
            raise ConfigError(
                f"learning rate eta({t}) = {eta:.6g} exceeds min(1, 1/(mu*tau)) = {cap:.6g}"
            )


# config file key -> SimConfig field
_KEYMAP = {
    "m": "M",
    "k": "K",
    "d": "d",
    "s": "s",
    "tau": "tau",
    "t_rounds": "T",
    "sigma_h2": "sigma_h2",
    "sigma_z2": "sigma_z2",
    "sigma_ht2": "sigma_ht2",
    "seed": "seed",
    "partition_mode": "partition_mode",
    "batch_size": "batch_size",
    "channel_mode": "channel_mode",
}
_INT_FIELDS = {"M", "K", "d", "s", "tau", "T", "seed", "batch_size"}


def _schedule_from(section: Any, cls, name: str, keys: tuple[str, str]):
    if section is None:
        return cls()
    if not isinstance(section, Mapping):
        raise ConfigError(f"{name}: expected a table with keys kind/{keys[0]}/{keys[1]}")
    unknown = set(section) - {"kind", *keys, "values"}
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")
    kind = section.get("kind", cls.kind)
    try:
        kwargs = {k: float(section[k]) for k in keys if k in section}
        values = tuple(float(v) for v in section.get("values", ()))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None
    if kind == "constant":
        kwargs.setdefault(keys[1], 0.0)
    if kind == "table" and not values:
        raise ConfigError(f"{name}: kind 'table' needs a non-empty 'values' list")
    return cls(kind=kind, values=values, **kwargs)


def config_from_dict(raw: Mapping[str, Any], *, ignore: Sequence[str] = ()) -> SimConfig:
    """Build a :class:`SimConfig` from config-file keys (``m``, ``k``, ``alpha.kind``, ...)."""
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key in ("alpha", "eta") or key in ignore:
            continue
        if key not in _KEYMAP:
            raise ConfigError(f"unknown config key {key!r}")
        fname = _KEYMAP[key]
        try:
            if fname in _INT_FIELDS:
                if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                    raise ValueError(f"expected an integer, got {value!r}")
                value = int(value)
            elif fname.startswith("sigma"):
                value = float(value)
            else:
                value = str(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from None
        kwargs[fname] = value
    kwargs["alpha_schedule"] = _schedule_from(raw.get("alpha"), PowerSchedule, "alpha", ("a0", "a1"))
    kwargs["eta_schedule"] = _schedule_from(raw.get("eta"), LearningRateSchedule, "eta", ("c0", "c1"))
    cfg = SimConfig(**kwargs)
    # surface schedule errors at load time rather than mid-run
    for t in (0, cfg.T):
        try:
            cfg.alpha(t)
        except ConfigError:
            if cfg.alpha_schedule.kind != "table":
                raise
        try:
            cfg.eta(t)
        except ConfigError:
            if cfg.eta_schedule.kind != "table":
                raise
    return cfg


def config_to_dict(cfg: SimConfig) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, fname in _KEYMAP.items():
        out[key] = getattr(cfg, fname)
    for key, sched in (("alpha", cfg.alpha_schedule), ("eta", cfg.eta_schedule)):
        d = asdict(sched)
        if not d["values"]:
            d.pop("values")
        else:
            d["values"] = list(d["values"])
        out[key] = d
    return out

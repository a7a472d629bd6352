"""Convergence-bound evaluators and Monte Carlo checks of the estimator statistics."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from .channel import propagate, sample_channel, sample_csi, sample_noise
from .core import (
    ConfigError,
    LearningRateSchedule,
    PowerSchedule,
    SimConfig,
    StreamLabel,
    check_eta_schedule,
    eval_alpha,
    eval_eta,
)
from .packing import pack_update
from .transceiver import (
    combine,
    decompose_received,
    estimate_average_update,
    interference_coefficients,
    transmit,
)

__all__ = [
    "BoundParams",
    "BoundTrace",
    "coeff_A",
    "coeff_B",
    "coeff_B_error_free",
    "bound_theorem1",
    "bound_product_sum",
    "bound_loss_gap",
    "bound_simplified",
    "bound_error_free",
    "VerificationEntry",
    "VerificationReport",
    "lemma_closed_forms",
    "mc_verify_unbiased",
    "mc_verify_term_moments",
    "mc_verify_interference",
    "mc_estimate_mse",
]


# -- convergence bounds -------------------------------------------------------------


@dataclass(frozen=True)
class BoundParams:
    mu: float
    L: float
    G2: float
    Gamma: float
    tau: int
    M: int
    K: int
    d: int
    sigma_h2: float
    sigma_z2: float
    sigma_ht2: float
    alpha_schedule: PowerSchedule
    eta_schedule: LearningRateSchedule
    init_gap: float

    def __post_init__(self):
        if not self.mu > 0 or not self.L >= self.mu:
            raise ConfigError(f"need 0 < mu <= L, got mu={self.mu}, L={self.L}")
        if self.tau < 1 or self.M < 1 or self.K < 1 or self.d < 1:
            raise ConfigError("tau, M, K and d must be positive")
        if not self.sigma_h2 > 0:
            raise ConfigError("sigma_h2 must be positive")
        for name in ("G2", "Gamma", "sigma_z2", "sigma_ht2", "init_gap"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")

    def replace(self, **kwargs) -> "BoundParams":
        return BoundParams(**{**self.__dict__, **kwargs})

    @property
    def csi_factor(self) -> float:
        return 1.0 + self.sigma_ht2 / (self.M * self.sigma_h2)

    def check(self, T: int) -> None:
        check_eta_schedule(self.eta_schedule, self.mu, self.tau, T)


def coeff_A(eta_i: float, mu: float, tau: int) -> float:
    """Per-round contraction ``1 - mu * eta * (tau - eta * (tau - 1))``."""
    cap = min(1.0, 1.0 / (mu * tau))
    if not 0 < eta_i <= cap * (1 + 1e-12):
        raise ValueError(f"eta={eta_i} outside (0, min(1, 1/(mu*tau))] = (0, {cap}]")
    return 1.0 - mu * eta_i * (tau - eta_i * (tau - 1))


def _channel_terms(p: BoundParams, eta: float, alpha: float) -> float:
    """The two K-dependent terms: aggregation error from interference and from noise."""
    c = p.csi_factor
    return c * eta**2 * p.tau**2 * p.G2 / p.K + c * p.sigma_z2 * p.d / (
        2.0 * alpha**2 * p.K * p.M * p.sigma_h2
    )


def _local_terms(p: BoundParams, eta: float) -> float:
    tau = p.tau
    drift = (1.0 + p.mu * (1.0 - eta)) * eta**2 * p.G2 * tau * (tau - 1) * (2 * tau - 1) / 6.0
    return drift + (tau**2 + tau - 1) * eta**2 * p.G2 + 2.0 * eta * (tau - 1) * p.Gamma


def coeff_B(params: BoundParams, i: int) -> float:
    # alpha is evaluated at the same index i as eta
    eta = eval_eta(params.eta_schedule, i)
    coeff_A(eta, params.mu, params.tau)
    alpha = eval_alpha(params.alpha_schedule, i)
    return _channel_terms(params, eta, alpha) + _local_terms(params, eta)


def coeff_B_error_free(params: BoundParams, i: int) -> float:
    eta = eval_eta(params.eta_schedule, i)
    coeff_A(eta, params.mu, params.tau)
    return _local_terms(params, eta)


@dataclass(frozen=True)
class BoundTrace:
    A: np.ndarray  # A(i), i = 0..T-1
    B: np.ndarray  # B(i), i = 0..T-1
    bound: np.ndarray  # bound on E||theta(t) - theta*||^2, t = 0..T
    L: float

    @property
    def loss_gap(self) -> np.ndarray:
        return 0.5 * self.L * self.bound

    @property
    def final(self) -> float:
        return float(self.bound[-1])

    @property
    def loss_gap_bound(self) -> float:
        return float(self.loss_gap[-1])


def _trace(params: BoundParams, T: int, b_fn) -> BoundTrace:
    if T < 0:
        raise ValueError("T must be non-negative")
    params.check(T)
    A = np.array([coeff_A(eval_eta(params.eta_schedule, i), params.mu, params.tau) for i in range(T)])
    B = np.array([b_fn(params, i) for i in range(T)])
    bound = np.empty(T + 1)
    bound[0] = params.init_gap
    # forward recursion; never forms the product of A(i), so no underflow
    for t in range(T):
        bound[t + 1] = A[t] * bound[t] + B[t]
    return BoundTrace(A, B, bound, params.L)


def bound_theorem1(params: BoundParams, T: int) -> BoundTrace:
    """Bound on E||theta(t) - theta*||^2 for t = 0..T under aggregation error, by forward recursion."""
    return _trace(params, T, coeff_B)


def bound_error_free(params: BoundParams, T: int) -> BoundTrace:
    return _trace(params, T, coeff_B_error_free)


def bound_product_sum(params: BoundParams, T: int, error_free: bool = False) -> float:
    """Literal product-sum form of the distance bound at round ``T`` (O(T^2))."""
    params.check(T)
    b_fn = coeff_B_error_free if error_free else coeff_B
    A = [coeff_A(eval_eta(params.eta_schedule, i), params.mu, params.tau) for i in range(T)]
    total = math.prod(A) * params.init_gap
    for j in range(T):
        total += b_fn(params, j) * math.prod(A[j + 1 :])
    return total


def bound_loss_gap(params: BoundParams, T: int, L: float | None = None) -> float:
    L = params.L if L is None else L
    return 0.5 * L * bound_theorem1(params, T).final


def _is_constant(sched, name: str) -> float:
    if sched.kind == "constant":
        return sched.c0 if name == "eta" else sched.a0
    if sched.kind == "table" and len(set(sched.values)) == 1:
        return sched.values[0]
    raise ValueError(f"the simplified bound needs a constant {name} schedule")


def bound_simplified(params: BoundParams, T: int) -> float:
    """Closed-form loss-gap bound for ``tau = 1`` with constant eta and alpha."""
    if params.tau != 1:
        raise ValueError(f"the simplified bound needs tau = 1, got tau={params.tau}")
    eta = _is_constant(params.eta_schedule, "eta")
    alpha = _is_constant(params.alpha_schedule, "alpha")
    coeff_A(eta, params.mu, 1)
    p = params
    rho = 1.0 - p.mu * eta
    bracket = p.csi_factor * (
        eta**2 * p.G2 / p.K + p.sigma_z2 * p.d / (2.0 * alpha**2 * p.M * p.K * p.sigma_h2)
    ) + eta**2 * p.G2
    return 0.5 * p.L * rho**T * p.init_gap + p.L / (2.0 * p.mu * eta) * bracket * (1.0 - rho**T)


# -- Monte Carlo verification ----------------------------------------------------------


@dataclass
class VerificationEntry:
    name: str
    closed_form: Any
    estimate: Any
    std_error: Any
    trials: int
    tolerance: str
    status: str  # "pass", "fail" or "insufficient_trials"

    @property
    def passed(self) -> bool:
        return self.status != "fail"

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("closed_form", "estimate", "std_error"):
            v = out[key]
            out[key] = np.asarray(v).tolist() if v is not None else None
        return out


@dataclass
class VerificationReport:
    entries: list[VerificationEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def extend(self, other: "VerificationReport") -> None:
        self.entries.extend(other.entries)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "entries": [e.to_dict() for e in self.entries]}


MIN_TRIALS_UNBIASED = 10_000
MIN_TRIALS_MOMENTS = 100_000


def lemma_closed_forms(cfg: SimConfig, updates: np.ndarray, alpha: float) -> dict[str, float]:
    """Per-term expected squared errors of the estimate (sums over all d entries)."""
    M, K, d = cfg.M, cfg.K, cfg.d
    sh2, sz2, st2 = cfg.sigma_h2, cfg.sigma_z2, cfg.sigma_ht2
    energy = float(np.sum(np.asarray(updates) ** 2))
    forms = {
        "signal": energy / (K * M**2),
        "interference": (M - 1) * energy / (K * M**2),
        "channel_noise": sz2 * d / (2 * alpha**2 * K * M * sh2),
        "csi_interference": st2 * energy / (K * M**2 * sh2),
        "csi_noise": st2 * sz2 * d / (2 * alpha**2 * K * M**2 * sh2**2),
    }
    forms["total"] = (1 + st2 / (M * sh2)) * (
        energy / (K * M) + sz2 * d / (2 * alpha**2 * K * M * sh2)
    )
    return forms


def _chunking(cfg: SimConfig, trials: int) -> list[int]:
    per_trial = cfg.M * cfg.K * cfg.s * cfg.N
    size = int(max(1, min(100_000, 4_000_000 // per_trial)))
    sizes = [size] * (trials // size)
    if trials % size:
        sizes.append(trials % size)
    return sizes


def _run_chunks(cfg: SimConfig, trials: int, fn, workers: int):
    """Evaluate ``fn(cfg, stream, n)`` per chunk; results come back in chunk order."""
    root = cfg.stream()
    jobs = [(root.child(StreamLabel.TRIAL, j), n) for j, n in enumerate(_chunking(cfg, trials))]
    if workers <= 1:
        return [fn(cfg, s, n) for s, n in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: fn(cfg, *job), jobs))


def _draw(cfg: SimConfig, stream, n: int):
    channel = sample_channel(cfg, stream.child(StreamLabel.CHANNEL, 0), batch=n)
    noise = sample_noise(cfg, stream.child(StreamLabel.NOISE, 0), batch=n)
    csi = sample_csi(channel, cfg, stream.child(StreamLabel.CSI, 0))
    return channel, noise, csi


def _pipeline_estimate(cfg: SimConfig, updates: np.ndarray, alpha: float, channel, noise, csi):
    tx = [transmit(pack_update(u, cfg.s), alpha) for u in updates]
    received = propagate(tx, channel, noise)
    return estimate_average_update(combine(received, csi, cfg.K), alpha, cfg.M, cfg.sigma_h2, cfg.d)


def _check_updates(cfg: SimConfig, updates) -> np.ndarray:
    updates = np.asarray(updates, dtype=float)
    if updates.shape != (cfg.M, cfg.d):
        raise ValueError(f"fixed updates must have shape (M, d) = {(cfg.M, cfg.d)}, got {updates.shape}")
    return updates


def _merge_moments(parts):
    """Fixed-order merge of per-chunk (count, sum, sum of squares)."""
    n = sum(p[0] for p in parts)
    s = np.sum(np.stack([p[1] for p in parts]), axis=0)
    ss = np.sum(np.stack([p[2] for p in parts]), axis=0)
    mean = s / n
    var = np.maximum(ss / n - mean**2, 0.0) * n / max(n - 1, 1)
    return n, mean, np.sqrt(var / n)


def mc_verify_unbiased(
    cfg: SimConfig, fixed_updates, trials: int, workers: int = 1, n_se: float = 4.0
) -> VerificationEntry:
    """Monte Carlo mean of the PS estimate against the true mean update."""
    updates = _check_updates(cfg, fixed_updates)
    alpha = cfg.alpha(0)
    target = updates.mean(axis=0)

    def chunk(cfg, stream, n):
        est = _pipeline_estimate(cfg, updates, alpha, *_draw(cfg, stream, n))
        return n, est.sum(axis=0), (est**2).sum(axis=0)

    _, mean, se = _merge_moments(_run_chunks(cfg, trials, chunk, workers))
    if trials < MIN_TRIALS_UNBIASED:
        status = "insufficient_trials"
    elif np.all(target == 0):
        status = "pass" if np.all(mean == 0) else "fail"
    else:
        status = "pass" if np.all(np.abs(mean - target) <= n_se * se) else "fail"
    return VerificationEntry("unbiased_mean", target, mean, se, trials, f"{n_se:g} standard errors", status)


def _per_trial_terms(cfg: SimConfig, updates: np.ndarray, alpha: float, stream, n: int):
    channel, noise, csi = _draw(cfg, stream, n)
    target = updates.mean(axis=0)
    blocks = [pack_update(u, cfg.s) for u in updates]
    dec = decompose_received(blocks, channel, csi, noise, alpha, cfg.M, cfg.sigma_h2)
    est = dec.estimates.copy()  # (5, n, d)
    est[0] -= target
    direct = _pipeline_estimate(cfg, updates, alpha, channel, noise, csi) - target
    return est, direct


TERM_NAMES = ("signal", "interference", "channel_noise", "csi_interference", "csi_noise")


def mc_verify_term_moments(
    cfg: SimConfig, fixed_updates, trials: int, workers: int = 1, rel_tol: float = 0.02
) -> VerificationReport:
    """Per-term and total squared-error sums against their closed forms."""
    updates = _check_updates(cfg, fixed_updates)
    alpha = cfg.alpha(0)
    forms = lemma_closed_forms(cfg, updates, alpha)
    pairs = [(a, b) for a in range(5) for b in range(a + 1, 5)]

    def chunk(cfg, stream, n):
        est, direct = _per_trial_terms(cfg, updates, alpha, stream, n)
        sq = np.concatenate([(est**2).sum(axis=-1), (direct**2).sum(axis=-1)[None]])  # (6, n)
        cross = np.stack([(est[a] * est[b]).sum(axis=-1) for a, b in pairs])  # (10, n)
        q = np.concatenate([sq, cross])
        return n, q.sum(axis=1), (q**2).sum(axis=1)

    _, mean, se = _merge_moments(_run_chunks(cfg, trials, chunk, workers))
    report = VerificationReport()
    names = list(TERM_NAMES) + ["total"]
    for idx, name in enumerate(names):
        expected = forms[name]
        value = float(mean[idx])
        if trials < MIN_TRIALS_MOMENTS:
            status, tol = "insufficient_trials", f"{rel_tol:.0%} relative"
        elif expected == 0:
            status, tol = ("pass" if value == 0 else "fail"), "exact zero"
        else:
            status = "pass" if abs(value - expected) <= rel_tol * expected else "fail"
            tol = f"{rel_tol:.0%} relative"
        report.entries.append(
            VerificationEntry(f"moment_{name}", expected, value, float(se[idx]), trials, tol, status)
        )
    for k, (a, b) in enumerate(pairs):
        value, err = float(mean[6 + k]), float(se[6 + k])
        if trials < MIN_TRIALS_MOMENTS:
            status = "insufficient_trials"
        elif err == 0:
            status = "pass" if value == 0 else "fail"
        else:
            status = "pass" if abs(value) <= 4.0 * err else "fail"
        report.entries.append(
            VerificationEntry(
                f"cross_{TERM_NAMES[a]}_{TERM_NAMES[b]}", 0.0, value, err, trials, "4 standard errors", status
            )
        )
    return report


def mc_verify_interference(
    cfg: SimConfig, trials: int, workers: int = 1, rel_tol: float = 0.02
) -> VerificationReport:
    """Moments of the per-device interference coefficients.

    Mean zero and ``E|itf|^2 = (M-1) sigma_h^4 / K``; with CSI error, mean zero and
    ``E|csi_itf|^2 = sigma_ht2 * sigma_h2 / K``.
    """

    def chunk(cfg, stream, n):
        channel, _, csi = _draw(cfg, stream, n)
        itf, csi_itf = interference_coefficients(channel, csi)
        vals = []
        for c in (itf, csi_itf):
            flat = c.reshape(-1)
            vals.append(np.stack([flat.real, flat.imag, flat.real**2 + flat.imag**2]))
        q = np.concatenate(vals, axis=0)  # (6, n*M*s*N)
        return q.shape[1], q.sum(axis=1), (q**2).sum(axis=1)

    n, mean, se = _merge_moments(_run_chunks(cfg, trials, chunk, workers))
    expected = [
        (cfg.M - 1) * cfg.sigma_h2**2 / cfg.K,
        cfg.sigma_ht2 * cfg.sigma_h2 / cfg.K,
    ]
    report = VerificationReport()
    for j, name in enumerate(("interference_coeff", "csi_interference_coeff")):
        m_re, m_im, m_sq = mean[3 * j : 3 * j + 3]
        s_re, s_im, _ = se[3 * j : 3 * j + 3]
        exp = expected[j]
        if exp == 0:
            ok = m_sq == 0
        else:
            ok = abs(m_re) <= 4 * s_re and abs(m_im) <= 4 * s_im and abs(m_sq - exp) <= rel_tol * exp
        status = "insufficient_trials" if trials < MIN_TRIALS_UNBIASED else ("pass" if ok else "fail")
        report.entries.append(
            VerificationEntry(
                name, [0.0, 0.0, exp], [m_re, m_im, m_sq], list(se[3 * j : 3 * j + 3]), trials,
                f"mean within 4 SE, second moment {rel_tol:.0%} relative", status,
            )
        )
    return report


def mc_estimate_mse(cfg: SimConfig, fixed_updates, trials: int, workers: int = 1) -> tuple[float, float]:
    """Monte Carlo ``E||estimate - mean update||^2`` and its standard error."""
    updates = _check_updates(cfg, fixed_updates)
    alpha = cfg.alpha(0)
    target = updates.mean(axis=0)

    def chunk(cfg, stream, n):
        err = _pipeline_estimate(cfg, updates, alpha, *_draw(cfg, stream, n)) - target
        q = (err**2).sum(axis=-1)
        return n, q.sum(keepdims=True), (q**2).sum(keepdims=True)

    _, mean, se = _merge_moments(_run_chunks(cfg, trials, chunk, workers))
    return float(mean[0]), float(se[0])

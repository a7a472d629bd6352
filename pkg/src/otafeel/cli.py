"""Experiment runner: config loading, simulate / bound / verify / sweep, CSV and JSON output.

Output schemas (``SCHEMA_VERSION`` in every manifest):

``metrics.csv``
    ``t, loss, loss_gap, dist_sq, est_mse, avg_power, alpha, eta`` with one row
    per completed round ``t = 1..T``.  ``loss``, ``loss_gap`` and ``dist_sq``
    describe the global model after round ``t``; ``est_mse``, ``alpha`` and
    ``eta`` belong to the round that produced it; ``avg_power`` is the largest
    per-device cumulative average transmit power so far.
``bounds.csv``
    ``t, A, B, bound_theorem1, bound_error_free, loss_gap_bound`` for
    ``t = 0..T``.  ``A`` and ``B`` are the coefficients taking ``t`` to
    ``t + 1`` and are empty on the last row.  With several antenna counts a
    leading ``k`` column is added.
``sweep`` writes ``metrics.csv`` with a leading ``sweep_value`` column.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import math
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import yaml

from . import __version__
from .analysis import (
    BoundParams,
    VerificationReport,
    bound_error_free,
    bound_theorem1,
    mc_verify_interference,
    mc_verify_term_moments,
    mc_verify_unbiased,
)
from .channel import propagate, sample_channel, sample_csi, sample_noise
from .core import ConfigError, SimConfig, StreamLabel, config_from_dict, config_to_dict
from .learner import (
    FederatedTask,
    TaskSpec,
    aggregate_error_free,
    global_step,
    load_delimited,
    local_sgd,
    loss_and_grad,
    make_task,
    task_from_dataset,
)
from .packing import pack_update
from .transceiver import PowerLedger, combine, estimate_average_update, record_power, transmit

log = logging.getLogger("otafeel")

SCHEMA_VERSION = 1
METRIC_COLUMNS = ("t", "loss", "loss_gap", "dist_sq", "est_mse", "avg_power", "alpha", "eta")
BOUND_COLUMNS = ("t", "A", "B", "bound_theorem1", "bound_error_free", "loss_gap_bound")
SWEEP_KEYS = {"k": "K", "sigma_z2": "sigma_z2", "sigma_ht2": "sigma_ht2", "tau": "tau"}
OUT_ENV = "OTAFEEL_OUT"

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_NUMERIC = 0, 1, 2, 3

# config sections beyond the core keys
_SECTIONS = ("task", "bound", "verify", "simulate", "sweep")


class NumericalAbort(RuntimeError):
    def __init__(self, t: int, message: str):
        super().__init__(f"non-finite model at row t={t}: {message}")
        self.t = t


# -- simulation ---------------------------------------------------------------------


@dataclass
class SimulationResult:
    rows: list[dict]
    theta: np.ndarray
    ledger: PowerLedger
    g2_hat: float  # largest squared stochastic-gradient norm seen (empirical G^2)
    error_free_rows: list[dict] | None = None
    updates: list[np.ndarray] | None = None  # per round (M, d), when kept
    alphas: list[float] = field(default_factory=list)

    @property
    def final_loss_gap(self) -> float:
        return self.rows[-1]["loss_gap"] if self.rows else math.nan


def _metrics_row(task: FederatedTask, theta, t, est_mse, avg_power, alpha, eta) -> dict:
    loss, _ = loss_and_grad(task, theta)
    diff = theta - task.theta_star
    return {
        "t": t,
        "loss": loss,
        "loss_gap": loss - task.F_star,
        "dist_sq": float(diff @ diff),
        "est_mse": est_mse,
        "avg_power": avg_power,
        "alpha": alpha,
        "eta": eta,
    }


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    """Ordered map, optionally over a thread pool."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _local_round(task: FederatedTask, cfg: SimConfig, theta, t: int, eta: float, workers: int):
    round_stream = cfg.stream().child(StreamLabel.ROUND, t)

    def one(m):
        rng = round_stream.child(StreamLabel.DEVICE, m).child(StreamLabel.MINIBATCH, 0)
        return local_sgd(theta, task, m, cfg.tau, eta, cfg.batch_size, rng)

    return _map(one, range(cfg.M), workers)


def over_the_air(cfg: SimConfig, deltas: np.ndarray, t: int, alpha: float):
    """One aggregation round over the channel; returns (estimate, per-device blocks)."""
    round_stream = cfg.stream().child(StreamLabel.ROUND, t)
    channel = sample_channel(cfg, round_stream.child(StreamLabel.CHANNEL, 0))
    noise = sample_noise(cfg, round_stream.child(StreamLabel.NOISE, 0))
    csi = sample_csi(channel, cfg, round_stream.child(StreamLabel.CSI, 0))
    blocks = [pack_update(u, cfg.s) for u in deltas]
    received = propagate([transmit(b, alpha) for b in blocks], channel, noise)
    combined = combine(received, csi, cfg.K)
    return estimate_average_update(combined, alpha, cfg.M, cfg.sigma_h2, cfg.d), blocks


def simulate(
    cfg: SimConfig,
    task: FederatedTask,
    *,
    workers: int = 1,
    error_free: bool = False,
    theta0=None,
    keep_updates: bool = False,
) -> SimulationResult:
    """Run ``cfg.T`` rounds of local SGD with over-the-air aggregation.

    With ``error_free`` a second model is trained alongside using exact
    averaging and the same mini-batch streams, so the two runs are paired.
    """
    # divergence is caught by explicit finiteness checks, so overflow warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        return _simulate(cfg, task, workers, error_free, theta0, keep_updates)


def _check_row(row: dict, which: str) -> dict:
    if not all(np.isfinite(v) for v in row.values()):
        raise NumericalAbort(row["t"], f"{which} metrics are not finite")
    return row


def _simulate(cfg, task, workers, error_free, theta0, keep_updates) -> SimulationResult:
    if task.M != cfg.M or task.d != cfg.d:
        raise ConfigError(f"task has M={task.M}, d={task.d}; config has M={cfg.M}, d={cfg.d}")
    theta = np.zeros(cfg.d) if theta0 is None else np.array(theta0, dtype=float)
    theta_ef = theta.copy()
    ledger = PowerLedger.empty(cfg.M, cfg.N)
    rows, ef_rows = [], [] if error_free else None
    kept = [] if keep_updates else None
    alphas = []
    g2 = 0.0
    for t in range(cfg.T):
        alpha, eta = cfg.alpha(t), cfg.eta(t)
        updates = _local_round(task, cfg, theta, t, eta, workers)
        deltas = np.stack([u.delta for u in updates])
        g2 = max(g2, max(u.grad_sq_max for u in updates))
        estimate, blocks = over_the_air(cfg, deltas, t, alpha)
        for m, b in enumerate(blocks):
            ledger = record_power(ledger, m, alpha, b)
        exact = aggregate_error_free(updates, cfg.M)
        err = estimate - exact
        theta = global_step(theta, estimate)
        if not np.all(np.isfinite(theta)):
            raise NumericalAbort(t + 1, "over-the-air model diverged")
        row = _metrics_row(task, theta, t + 1, float(err @ err), float(ledger.average_power().max()), alpha, eta)
        rows.append(_check_row(row, "over-the-air"))
        alphas.append(alpha)
        if keep_updates:
            kept.append(deltas)
        if error_free:
            ef_updates = _local_round(task, cfg, theta_ef, t, eta, workers)
            theta_ef = global_step(theta_ef, aggregate_error_free(ef_updates, cfg.M))
            if not np.all(np.isfinite(theta_ef)):
                raise NumericalAbort(t + 1, "error-free model diverged")
            ef_rows.append(_check_row(_metrics_row(task, theta_ef, t + 1, 0.0, 0.0, alpha, eta), "error-free"))
    return SimulationResult(rows, theta, ledger, g2, ef_rows, kept, alphas)


# -- configuration ----------------------------------------------------------------------


@dataclass
class RunConfig:
    """Parsed config file: core simulation settings plus the optional sections."""

    sim: SimConfig
    raw: dict
    source: str = "<dict>"

    def section(self, name: str) -> dict:
        value = self.raw.get(name) or {}
        if not isinstance(value, Mapping):
            raise ConfigError(f"section {name!r} must be a table")
        return dict(value)


def _locate(text: str, message: str) -> str:
    """Best-effort line number for the key named in an error message."""
    keys = re.findall(r"'([A-Za-z_][\w]*)'", message) or re.findall(r"^([A-Za-z_]\w*)", message)
    for key in keys:
        for lineno, line in enumerate(text.splitlines(), 1):
            if re.match(rf"\s*\"?{re.escape(key)}\"?\s*:", line):
                return f"line {lineno}: "
    return ""


def parse_config(raw: Mapping[str, Any], source: str = "<dict>", text: str = "") -> RunConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{source}: top level must be a table of keys")
    raw = dict(raw)
    # a manifest carries the resolved config under "config"
    if "schema_version" in raw and "config" in raw:
        raw = dict(raw["config"])
    try:
        sim = config_from_dict(raw, ignore=_SECTIONS)
        for name in _SECTIONS:
            if raw.get(name) is not None and not isinstance(raw[name], Mapping):
                raise ConfigError(f"section {name!r} must be a table")
        task_keys = {f.name for f in fields(TaskSpec)} | {"data_path", "delimiter"}
        unknown = set(raw.get("task") or {}) - task_keys
        if unknown:
            raise ConfigError(f"task: unknown key {sorted(unknown)[0]!r}")
    except ConfigError as exc:
        raise ConfigError(f"{source}: {_locate(text, str(exc))}{exc}") from None
    return RunConfig(sim, raw, source)


def load_config(path: str | Path) -> RunConfig:
    """Read a YAML or JSON config file (a manifest.json from an earlier run also works)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw or {}, str(path), text)


def build_task(run: RunConfig) -> FederatedTask:
    sec = run.section("task")
    data_path = sec.pop("data_path", None)
    delimiter = sec.pop("delimiter", None)
    cfg = run.sim
    try:
        if data_path is not None:
            family = sec.get("family", "logistic")
            data = load_delimited(Path(data_path), delimiter)
            if data.X.shape[1] != cfg.d:
                raise ConfigError(f"data file has {data.X.shape[1]} features, config has d={cfg.d}")
            return task_from_dataset(
                data, cfg.M, cfg.partition_mode, cfg.stream(), family, float(sec.get("reg", 1e-2))
            )
        spec = TaskSpec(**{**sec, "d": cfg.d})
        return make_task(spec, cfg.M, cfg.stream(), cfg.partition_mode)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"task: {exc}") from None


def bound_params(run: RunConfig, task: FederatedTask | None = None, g2: float | None = None) -> BoundParams:
    """Bound constants from the ``bound`` section, falling back to the task's own constants."""
    sec = run.section("bound")
    cfg = run.sim
    known = {"mu", "L", "G2", "Gamma", "init_gap"}
    unknown = set(sec) - known
    if unknown:
        raise ConfigError(f"bound: unknown key {sorted(unknown)[0]!r}")
    values = {}
    for key in known:
        if key in sec and sec[key] != "task":
            try:
                values[key] = float(sec[key])
            except (TypeError, ValueError):
                raise ConfigError(f"bound: {key} must be a number") from None
    if task is not None:
        values.setdefault("mu", task.mu)
        values.setdefault("L", task.L)
        values.setdefault("Gamma", task.Gamma)
        values.setdefault("init_gap", float(task.theta_star @ task.theta_star))  # theta(0) = 0
    if g2 is not None:
        values.setdefault("G2", g2)
    missing = known - set(values)
    if missing:
        raise ConfigError(f"bound: missing {sorted(missing)}")
    return BoundParams(
        tau=cfg.tau, M=cfg.M, K=cfg.K, d=cfg.d,
        sigma_h2=cfg.sigma_h2, sigma_z2=cfg.sigma_z2, sigma_ht2=cfg.sigma_ht2,
        alpha_schedule=cfg.alpha_schedule, eta_schedule=cfg.eta_schedule, **values,
    )


def _needs_task(run: RunConfig) -> bool:
    sec = run.section("bound")
    return any(k not in sec or sec[k] == "task" for k in ("mu", "L", "Gamma", "init_gap", "G2"))


# -- output -----------------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))  # shortest round-trip representation


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[Mapping]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def config_hash(raw: Mapping) -> str:
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def resolved_config(run: RunConfig) -> dict:
    out = config_to_dict(run.sim)
    for name in _SECTIONS:
        if run.raw.get(name) is not None:
            out[name] = run.raw[name]
    return out


def write_manifest(out: Path, run: RunConfig, command: str, outputs: Sequence[Path], started, extra=None):
    resolved = resolved_config(run)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "tool": "otafeel",
        "version": __version__,
        "command": command,
        "config_source": run.source,
        "config_hash": config_hash(resolved),
        "config": resolved,
        "started": started,
        "finished": _now(),
        "outputs": [str(p) for p in outputs],
        "numpy_version": np.__version__,
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# -- workflows -------------------------------------------------------------------------


def run_simulate(run: RunConfig, out: Path, workers: int = 1) -> list[Path]:
    started = _now()
    task = build_task(run)
    sec = run.section("simulate")
    want_ef = bool(sec.get("error_free", False))
    result = simulate(run.sim, task, workers=workers, error_free=want_ef)
    paths = [out / "metrics.csv"]
    write_csv(paths[0], METRIC_COLUMNS, result.rows)
    if want_ef:
        paths.append(out / "metrics_error_free.csv")
        write_csv(paths[1], METRIC_COLUMNS, result.error_free_rows)
    extra = {
        "task": {"mu": task.mu, "L": task.L, "Gamma": task.Gamma, "F_star": task.F_star,
                 "equal_shards": task.equal_shards},
        "G2_empirical": result.g2_hat,
        "power_violations": {},
    }
    p_bar = sec.get("p_bar")
    if p_bar is not None:
        extra["power_violations"] = {"p_bar": float(p_bar), "devices": result.ledger.violations(float(p_bar))}
    write_manifest(out, run, "simulate", paths, started, extra)
    return paths


def bound_rows(params: BoundParams, T: int) -> list[dict]:
    main = bound_theorem1(params, T)
    ef = bound_error_free(params, T)
    rows = []
    for t in range(T + 1):
        rows.append(
            {
                "t": t,
                "A": main.A[t] if t < T else None,
                "B": main.B[t] if t < T else None,
                "bound_theorem1": main.bound[t],
                "bound_error_free": ef.bound[t],
                "loss_gap_bound": main.loss_gap[t],
            }
        )
    return rows


def run_bound(run: RunConfig, out: Path, k_values: Sequence[int] | None = None, workers: int = 1) -> list[Path]:
    started = _now()
    task, g2 = None, None
    extra: dict[str, Any] = {}
    if _needs_task(run):
        task = build_task(run)
        if "G2" not in run.section("bound"):
            # G^2 is not known a priori: use the largest squared stochastic-gradient norm seen in a run
            g2 = simulate(run.sim, task, workers=workers).g2_hat
            extra["G2_source"] = "empirical maximum over a simulated run"
    params = bound_params(run, task, g2)
    extra["bound_params"] = {k: v for k, v in asdict(params).items() if not k.endswith("schedule")}
    T = run.sim.T
    if k_values:
        rows = []
        for k in k_values:
            rows.extend({"k": k, **r} for r in bound_rows(params.replace(K=int(k)), T))
        columns = ("k", *BOUND_COLUMNS)
    else:
        rows, columns = bound_rows(params, T), BOUND_COLUMNS
    path = out / "bounds.csv"
    write_csv(path, columns, rows)
    write_manifest(out, run, "bound", [path], started, extra)
    return [path]


def default_updates(M: int, d: int) -> np.ndarray:
    """Device ``m`` sends the unit vector ``e_(m mod d)``."""
    updates = np.zeros((M, d))
    updates[np.arange(M), np.arange(M) % d] = 1.0
    return updates


def run_verify(run: RunConfig, out: Path, trials: int | None = None, workers: int = 1):
    started = _now()
    sec = run.section("verify")
    cfg = run.sim
    trials = int(trials if trials is not None else sec.get("trials", 1_000_000))
    updates = np.asarray(sec["updates"], dtype=float) if "updates" in sec else default_updates(cfg.M, cfg.d)
    if updates.shape != (cfg.M, cfg.d):
        raise ConfigError(f"verify.updates must have shape (m, d) = {(cfg.M, cfg.d)}, got {updates.shape}")
    report = VerificationReport([mc_verify_unbiased(cfg, updates, trials, workers)])
    report.extend(mc_verify_term_moments(cfg, updates, trials, workers))
    report.extend(mc_verify_interference(cfg, min(trials, 100_000), workers))
    path = out / "verify.json"
    path.write_text(json.dumps(report.to_dict(), indent=2, default=_json_default) + "\n")
    write_manifest(out, run, "verify", [path], started, {"trials": trials})
    return [path], report


def sweep_configs(run: RunConfig, key: str, values: Sequence) -> list[SimConfig]:
    if key not in SWEEP_KEYS:
        raise ValueError(f"unknown sweep key {key!r}; choose from {sorted(SWEEP_KEYS)}")
    fname = SWEEP_KEYS[key]
    cast = int if fname in ("K", "tau") else float
    try:
        return [run.sim.with_updates(**{fname: cast(v)}) for v in values]
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"sweep value for {key}: {exc}") from None


def run_sweep(run: RunConfig, out: Path, key: str, values: Sequence, workers: int = 1) -> list[Path]:
    started = _now()
    configs = sweep_configs(run, key, values)
    task = build_task(run)  # the task depends on seed and M only, so every point shares it
    # sweep points run concurrently; each point is itself sequential
    results = _map(lambda c: simulate(c, task, workers=1), configs, workers)
    rows = []
    for v, res in zip(values, results):
        rows.extend({"sweep_value": v, **r} for r in res.rows)
    path = out / "metrics.csv"
    write_csv(path, ("sweep_value", *METRIC_COLUMNS), rows)
    write_manifest(out, run, "sweep", [path], started, {"sweep": {"key": key, "values": list(values)}})
    return [path]


# -- entry point -------------------------------------------------------------------------


def _parse_values(text: str) -> list:
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        num = float(item)
        out.append(int(num) if num.is_integer() and "." not in item and "e" not in item.lower() else num)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="otafeel", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML or JSON config file (or an earlier manifest.json)")
        p.add_argument("--out", default=None, help=f"output directory (default: ${OUT_ENV} or ./out)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--workers", type=int, default=1, help="worker threads; results do not depend on it")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("simulate", help="train with over-the-air aggregation, write metrics.csv"))
    b = common(sub.add_parser("bound", help="evaluate the convergence bounds, write bounds.csv"))
    b.add_argument("--k-values", default=None, help="comma-separated antenna counts to evaluate")
    v = common(sub.add_parser("verify", help="Monte Carlo check of the estimator statistics"))
    v.add_argument("--trials", type=int, default=None)
    s = common(sub.add_parser("sweep", help="paired simulations over one parameter"))
    s.add_argument("--key", default=None, help="one of: " + ", ".join(sorted(SWEEP_KEYS)))
    s.add_argument("--values", default=None, help="comma-separated sweep values")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out or os.environ.get(OUT_ENV) or "out")
    try:
        run = load_config(args.config)
        if args.seed is not None:
            run = parse_config({**run.raw, "seed": args.seed}, run.source)
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            paths = run_simulate(run, out, args.workers)
        elif args.command == "bound":
            ks = _parse_values(args.k_values) if args.k_values else None
            paths = run_bound(run, out, ks, args.workers)
        elif args.command == "verify":
            paths, report = run_verify(run, out, args.trials, args.workers)
            for e in report.entries:
                print(f"{e.status.upper():<20} {e.name}", file=sys.stderr)
            if not report.passed:
                print(f"verification failed; see {paths[0]}", file=sys.stderr)
                return EXIT_VERIFY
        else:
            sec = run.section("sweep")
            key = args.key or sec.get("key")
            values = _parse_values(args.values) if args.values else sec.get("values")
            if key is None or not values:
                raise ConfigError("sweep needs a key and values (--key/--values or a sweep section)")
            if key not in SWEEP_KEYS:
                raise ConfigError(f"unknown sweep key {key!r}; choose from {sorted(SWEEP_KEYS)}")
            paths = run_sweep(run, out, key, values, args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for p in paths:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

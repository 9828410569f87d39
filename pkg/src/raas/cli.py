"""Command-line harness: ``raas simulate``, ``raas oracle`` and ``raas estimate-demo``.

Every output is a CSV with a fixed header and floats written with 17
significant digits, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .core import (
    CustomerDistribution,
    FinancialParams,
    GroundTruth,
    LearningConfig,
    SolverConfig,
    ValidationError,
    config_from_dict,
    config_to_dict,
)
from .orchestrator import (
    RunReport,
    estimation_errors,
    rolling_profit_rate,
    run_online,
    run_oracle,
    write_history_csv,
)
from .policy import (
    MDPModel,
    value_iteration,
    write_arrival_csv,
    write_arrival_slices_csv,
    write_boundary_csv,
    write_idle_csv,
    revenue_sample,
)
from .survival import CoxDegradationEstimator, read_records_csv

log = logging.getLogger("raas")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 1


@dataclass(frozen=True)
class MetricsConfig:
    window: float = 10000.0
    time_step: float = 1000.0
    customer_step: int = 100

    def __post_init__(self):
        if not (self.window > 0 and self.time_step > 0):
            raise ValidationError("window", "window and time_step must be > 0")
        if int(self.customer_step) != self.customer_step or self.customer_step < 1:
            raise ValidationError("customer_step", "must be a positive integer")


@dataclass(frozen=True)
class ExperimentConfig:
    customers: CustomerDistribution = field(default_factory=CustomerDistribution)
    truth: GroundTruth | None = None
    financial: FinancialParams = field(default_factory=FinancialParams)
    learning: LearningConfig = field(default_factory=LearningConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    N: int = 20000
    seeds: tuple[int, ...] = tuple(range(10))
    output_dir: str = "results"

    def __post_init__(self):
        if self.truth is None:
            raise ValidationError("truth", "missing required section")
        if self.truth.d != self.customers.d:
            raise ValidationError("customers.d", "must match the dimension of truth.u")
        if int(self.N) != self.N or self.N < 1:
            raise ValidationError("N", "must be a positive integer")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValidationError("seeds", "must be a nonempty list of distinct integers")

    def to_dict(self) -> dict:
        return {
            "customers": config_to_dict(self.customers),
            "truth": self.truth.to_dict(),
            "financial": config_to_dict(self.financial),
            "learning": config_to_dict(self.learning),
            "solver": config_to_dict(self.solver),
            "metrics": config_to_dict(self.metrics),
            "N": self.N,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
        }


_SECTIONS = {
    "customers": CustomerDistribution,
    "financial": FinancialParams,
    "learning": LearningConfig,
    "solver": SolverConfig,
    "metrics": MetricsConfig,
}
_TOP = set(_SECTIONS) | {"truth", "N", "seeds", "output_dir"}


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a config document; errors name the offending field."""
    if not isinstance(data, dict):
        raise ValidationError("config", "top level must be an object")
    for key in data:
        if key not in _TOP:
            raise ValidationError(key, "unknown field")
    kwargs = {name: config_from_dict(cls, data.get(name), name) for name, cls in _SECTIONS.items()}
    if "truth" not in data:
        raise ValidationError("truth", "missing required section")
    try:
        kwargs["truth"] = GroundTruth.from_dict(data["truth"])
    except ValidationError as exc:
        raise ValidationError(f"truth.{exc.field}", str(exc).split(": ", 1)[-1]) from None
    except (TypeError, ValueError) as exc:
        raise ValidationError("truth", str(exc)) from None
    if "N" in data:
        if isinstance(data["N"], bool) or not isinstance(data["N"], int):
            raise ValidationError("N", "must be an integer")
        kwargs["N"] = data["N"]
    if "seeds" in data:
        seeds = data["seeds"]
        if not isinstance(seeds, list) or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ValidationError("seeds", "must be a list of integers")
        kwargs["seeds"] = tuple(seeds)
    if "output_dir" in data:
        if not isinstance(data["output_dir"], str):
            raise ValidationError("output_dir", "must be a string")
        kwargs["output_dir"] = data["output_dir"]
    return ExperimentConfig(**kwargs)


def default_config_dict() -> dict:
    text = resources.files("raas").joinpath("data/default_config.json").read_text()
    return json.loads(text)


def load_config(path: str | os.PathLike | None) -> ExperimentConfig:
    if path is None:
        return parse_config(default_config_dict())
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError("config", f"invalid JSON: {exc}") from None
    return parse_config(data)


def parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ValidationError("seeds", f"cannot parse {text!r}") from None
    if not seeds or len(set(seeds)) != len(seeds):
        raise ValidationError("seeds", "must be a nonempty list of distinct integers")
    return seeds


# --- aggregate outputs -------------------------------------------------------------------


def _g(v) -> str:
    return f"{float(v):.17g}"


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _mean_std(values: np.ndarray):
    values = np.asarray(values, dtype=float)
    return values.mean(axis=0), values.std(axis=0)


def profit_rate_by_time(reports: list[RunReport], metrics: MetricsConfig):
    """Rolling rate of each run on a common time grid ``window, window + step, ...``."""
    end = min(r.elapsed_time for r in reports)
    times = np.arange(metrics.window, end + 1e-9, metrics.time_step)
    rates = np.array([rolling_profit_rate(r, metrics.window, times)[1] for r in reports]).reshape(len(reports), -1)
    return times, rates


def profit_rate_by_customer(reports: list[RunReport], metrics: MetricsConfig):
    """Rolling rate of each run after every ``customer_step``-th customer, with its wall time."""
    n = min(r.u_path.shape[0] for r in reports) - 1
    ks = np.arange(metrics.customer_step, n + 1, metrics.customer_step)
    walls, rates = [], []
    for r in reports:
        last = {}
        for e in r.history:
            last[e.k] = e.wall_time
        tw = np.array([last[k] for k in ks])
        walls.append(tw)
        rates.append(rolling_profit_rate(r, metrics.window, tw)[1])
    return ks, np.array(walls).reshape(len(reports), -1), np.array(rates).reshape(len(reports), -1)


def write_aggregates(out: Path, prefix: str, cfg: ExperimentConfig, reports: list[RunReport]) -> list[Path]:
    written = []
    times, rates = profit_rate_by_time(reports, cfg.metrics)
    m, s = _mean_std(rates) if times.size else (np.zeros(0), np.zeros(0))
    p = out / f"{prefix}profit_rate.csv"
    _write_rows(p, ("time", "mean", "std", "n_runs"), ([_g(t), _g(a), _g(b), len(reports)] for t, a, b in zip(times, m, s)))
    written.append(p)

    ks, walls, rates = profit_rate_by_customer(reports, cfg.metrics)
    m, s = _mean_std(rates) if ks.size else (np.zeros(0), np.zeros(0))
    wm = walls.mean(axis=0) if ks.size else np.zeros(0)
    p = out / f"{prefix}profit_rate_by_customer.csv"
    _write_rows(p, ("k", "wall_time_mean", "mean", "std", "n_runs"),
                ([int(k), _g(w), _g(a), _g(b), len(reports)] for k, w, a, b in zip(ks, wm, m, s)))
    written.append(p)

    errs = [estimation_errors(r, cfg.truth) for r in reports]
    n = min(e[0].size for e in errs)
    eu = np.array([e[1][:n] for e in errs])
    et = np.array([e[2][:n] for e in errs])
    mu, su = _mean_std(eu)
    mt, st = _mean_std(et)
    p = out / f"{prefix}estimation_errors.csv"
    _write_rows(p, ("k", "err_u_mean", "err_u_std", "err_theta_mean", "err_theta_std", "n_runs"),
                ([k, _g(a), _g(b), _g(c), _g(d), len(reports)] for k, (a, b, c, d) in enumerate(zip(mu, su, mt, st))))
    written.append(p)
    return written


SUMMARY_COLUMNS = (
    "seed", "phase1_length", "first_fit_customer", "n_retrains", "total_profit", "elapsed_time", "profit_rate",
    "n_F", "n_R", "err_u", "err_theta", "feasibility_violations",
)


def write_summary(path: Path, seeds, reports: list[RunReport], truth: GroundTruth) -> None:
    def opt(v):
        return "" if v is None else int(v)

    rows = []
    for seed, r in zip(seeds, reports):
        rows.append([
            seed, opt(r.phase1_length), opt(r.first_fit_customer), r.n_retrains, _g(r.total_profit),
            _g(r.elapsed_time), _g(r.total_profit / r.elapsed_time if r.elapsed_time > 0 else 0.0), r.n_F, r.n_R,
            _g(np.linalg.norm(r.u_hat - truth.u)), _g(np.linalg.norm(r.theta_hat - truth.theta)),
            r.feasibility_violations,
        ])
    _write_rows(path, SUMMARY_COLUMNS, rows)


# --- commands -------------------------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig) -> list[Path]:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports, written = [], []
    for seed in cfg.seeds:
        log.info("online run, seed %d", seed)
        r = run_online(cfg.truth, cfg.customers, cfg.financial, cfg.learning, cfg.solver, cfg.N, seed)
        p = out / f"history_seed{seed}.csv"
        write_history_csv(p, r)
        written.append(p)
        reports.append(r)
        log.info("seed %d: profit %.6g over %.6g time units", seed, r.total_profit, r.elapsed_time)
    written += write_aggregates(out, "", cfg, reports)
    p = out / "run_summary.csv"
    write_summary(p, cfg.seeds, reports, cfg.truth)
    written.append(p)
    return written


def cmd_oracle(cfg: ExperimentConfig) -> list[Path]:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = MDPModel(cfg.truth, cfg.financial, cfg.customers, 0.0)
    log.info("solving the oracle policy")
    tables = value_iteration(model, cfg.solver)
    written = []
    for name, writer in (("oracle_idle_policy.csv", write_idle_csv), ("oracle_replacement_boundary.csv", write_boundary_csv),
                         ("oracle_arrival_policy.csv", write_arrival_csv)):
        writer(out / name, tables)
        written.append(out / name)
    p = out / "oracle_arrival_regions.csv"
    write_arrival_slices_csv(p, tables, revenue_sample(model, cfg.solver))
    written.append(p)
    reports = []
    for seed in cfg.seeds:
        log.info("oracle run, seed %d", seed)
        r = run_oracle(cfg.truth, cfg.customers, cfg.financial, cfg.solver, cfg.N, seed, tables=tables)
        p = out / f"oracle_history_seed{seed}.csv"
        write_history_csv(p, r)
        written.append(p)
        reports.append(r)
    written += write_aggregates(out, "oracle_", cfg, reports)
    p = out / "oracle_run_summary.csv"
    write_summary(p, cfg.seeds, reports, cfg.truth)
    written.append(p)
    return written


def cmd_estimate_demo(records_csv, out_dir, min_failures: int = 1, zero_theta: bool = False) -> list[Path]:
    records = read_records_csv(records_csv)
    if not records:
        raise ValueError(f"{records_csv}: no records")
    d = records[0].z.size
    est = CoxDegradationEstimator(min_failures=min_failures, fixed_theta=np.zeros(d) if zero_theta else None)
    est.fit(records)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    b = est.breslow_
    paths = [out / "theta.csv", out / "cumhaz.csv", out / "hazard.csv"]
    _write_rows(paths[0], ("index", "theta"), ([i + 1, _g(v)] for i, v in enumerate(est.coef_)))
    _write_rows(paths[1], ("age", "jump", "cum_hazard"),
                ([_g(a), _g(j), _g(c)] for a, j, c in zip(b.jump_ages, b.jump_sizes, b.cum_hazard_values)))
    hz = b.smoothed
    _write_rows(paths[2], ("age", "rate"), ([_g(a), _g(r)] for a, r in zip(hz.ages, hz.rates)))
    return paths


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raas", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="JSON experiment config (default: bundled reference config)")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides output_dir)")
        p.add_argument("--seeds", metavar="S1,S2,...", help="comma-separated seeds (overrides seeds)")
        p.add_argument("--quiet", action="store_true", help="only report errors")

    common(sub.add_parser("simulate", help="run the online learning loop for each seed"))
    common(sub.add_parser("oracle", help="solve and run the full-information policy"))
    p = sub.add_parser("estimate-demo", help="fit the degradation model to a rental-record CSV")
    p.add_argument("records", metavar="RECORDS_CSV")
    p.add_argument("--out", metavar="DIR", default=".", help="output directory")
    p.add_argument("--min-failures", type=int, default=1)
    p.add_argument("--zero-theta", action="store_true", help="skip the coefficient fit and use theta = 0")
    p.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(name)s: %(message)s")
    if args.command == "estimate-demo":
        try:
            paths = cmd_estimate_demo(args.records, args.out, args.min_failures, args.zero_theta)
        except (OSError, ValueError) as exc:
            print(f"raas: error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
    else:
        try:
            cfg = load_config(args.config)
            data = cfg.to_dict()
            if args.out:
                data["output_dir"] = args.out
            if args.seeds:
                data["seeds"] = list(parse_seeds(args.seeds))
            cfg = parse_config(data)
        except ValidationError as exc:
            print(f"raas: invalid config: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except OSError as exc:
            print(f"raas: error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        try:
            paths = cmd_simulate(cfg) if args.command == "simulate" else cmd_oracle(cfg)
        except (OSError, ValueError, RuntimeError) as exc:
            print(f"raas: error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
    for p in paths:
        log.info("wrote %s", p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

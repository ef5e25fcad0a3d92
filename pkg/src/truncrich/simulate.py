"""Synthetic data generation and Monte Carlo evaluation.

A design draws N species; each is rare with probability q (abundance
from the parametric family) or abundant otherwise (abundance from a
nuisance distribution supported away from zero).  Species with
abundance 0 are discarded, mirroring the observation process.  The
harness repeats generation/estimation, builds percentile bootstrap
intervals, and aggregates the usual summaries: Monte Carlo mean,
standard error over N, relative mean absolute error, mean squared
relative error (plus a x100 "table-scale" copy for side-by-side reading
with rounded published tables), and the two one-sided non-coverage
percentages.

Replicate streams are keyed by (seed, replicate index), so results are
identical whether replicates run serially or on a process pool.
"""

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .counts import CountData
from .families import Family
from .fit import FitError, FitOptions, chao as chao_estimate, fit_full, n_classical
from .selection import _BootstrapStream, _bootstrap_tau, select_tau

__all__ = [
    "UniformNuisance",
    "CustomNuisance",
    "SimDesign",
    "EstimatorMetrics",
    "SimReport",
    "generate",
    "run_monte_carlo",
    "metrics_from_values",
]

ESTIMATORS = ("n_hat", "chao", "n_classical")


@dataclass(frozen=True)
class UniformNuisance:
    """Uniform abundant-species distribution on {lo..hi}."""

    lo: int
    hi: int

    def __post_init__(self):
        if self.lo < 1 or self.hi < self.lo:
            raise ValueError(f"need 1 <= lo <= hi, got [{self.lo}, {self.hi}]")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.integers(self.lo, self.hi + 1, size=size, dtype=np.int64)

    def pmf_items(self) -> list[tuple[int, float]]:
        w = 1.0 / (self.hi - self.lo + 1)
        return [(x, w) for x in range(self.lo, self.hi + 1)]

    def describe(self) -> str:
        return f"uniform:{self.lo}:{self.hi}"


@dataclass(frozen=True)
class CustomNuisance:
    """Arbitrary abundant-species mass function on positive integers."""

    pmf: dict[int, float]

    def __post_init__(self):
        if not self.pmf:
            raise ValueError("empty nuisance mass function")
        total = 0.0
        for x, p in self.pmf.items():
            if int(x) < 1:
                raise ValueError(f"nuisance support must be >= 1, got {x}")
            if p <= 0:
                raise ValueError(f"nuisance masses must be positive, got {p} at {x}")
            total += p
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"nuisance masses must sum to 1, got {total}")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        xs = np.array(sorted(self.pmf), dtype=np.int64)
        ps = np.array([self.pmf[int(x)] for x in xs])
        ps = ps / ps.sum()
        return rng.choice(xs, size=size, p=ps)

    def pmf_items(self) -> list[tuple[int, float]]:
        return sorted((int(x), float(p)) for x, p in self.pmf.items())

    def describe(self) -> str:
        return f"custom:{len(self.pmf)}pts"


@dataclass(frozen=True)
class SimDesign:
    """One synthetic configuration: truth, nuisance, and harness sizes."""

    n_true: int
    q_true: float
    family: Family
    theta: tuple
    nuisance: UniformNuisance | CustomNuisance
    reps: int
    m_boot: int = 100
    ci_level: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.n_true < 1:
            raise ValueError("n_true must be >= 1")
        if not 0.0 < self.q_true <= 1.0:
            raise ValueError(f"q_true must be in (0, 1], got {self.q_true}")
        if not 0.0 < self.ci_level < 1.0:
            raise ValueError(f"ci_level must be in (0, 1), got {self.ci_level}")
        self.family.validate(np.asarray(self.theta, dtype=float))
        object.__setattr__(self, "theta", tuple(float(v) for v in self.theta))


def generate(design: SimDesign, replicate_index: int) -> CountData:
    """Draw one zero-truncated dataset; deterministic given (seed, index)."""
    rng = np.random.default_rng([design.seed, int(replicate_index)])
    theta = np.asarray(design.theta, dtype=float)
    m_rare = int(rng.binomial(design.n_true, design.q_true)) if design.q_true < 1.0 \
        else design.n_true
    rare = design.family.sample(theta, m_rare, rng)
    abundant = design.nuisance.sample(rng, design.n_true - m_rare)
    observed = np.concatenate([rare, abundant])
    observed = observed[observed > 0]
    return CountData.from_abundances(observed.tolist(), provenance="synthetic")


@dataclass
class EstimatorMetrics:
    """Aggregate summaries for one estimator across replicates."""

    n_used: int
    mc_mean: float
    se_over_n: float
    rmae: float
    rmse_rel: float
    rmse_table: float
    inf_pct: float | None = None
    sup_pct: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def metrics_from_values(values: np.ndarray, n_true: int,
                        ci_lo: np.ndarray | None = None,
                        ci_hi: np.ndarray | None = None) -> EstimatorMetrics:
    """Summarize replicate estimates against the true count.

    Non-coverage percentages are included when interval endpoints are
    given; replicates with NaN estimates are dropped first.
    """
    values = np.asarray(values, dtype=float)
    keep = np.isfinite(values)
    values = values[keep]
    if values.size == 0:
        raise ValueError("no successful replicates to summarize")
    rel = (values - n_true) / n_true
    metrics = EstimatorMetrics(
        n_used=int(values.size),
        mc_mean=float(values.mean()),
        se_over_n=float(values.std(ddof=1) / n_true) if values.size > 1 else 0.0,
        rmae=float(np.abs(rel).mean()),
        rmse_rel=float((rel ** 2).mean()),
        rmse_table=float(100.0 * (rel ** 2).mean()),
    )
    if ci_lo is not None and ci_hi is not None:
        lo = np.asarray(ci_lo, dtype=float)[keep]
        hi = np.asarray(ci_hi, dtype=float)[keep]
        have = np.isfinite(lo) & np.isfinite(hi)
        if have.any():
            metrics.inf_pct = float(100.0 * (n_true < lo[have]).mean())
            metrics.sup_pct = float(100.0 * (n_true > hi[have]).mean())
    return metrics


@dataclass
class SimReport:
    """Monte Carlo evaluation output for one design."""

    design: SimDesign
    tau_policy: str
    reps_completed: int
    metrics: dict[str, EstimatorMetrics]
    failures: dict[str, int]
    selected_taus: list[int] | None = None
    replicates: dict[str, list] | None = None

    def to_json_dict(self) -> dict:
        out = {
            "design": {
                "n_true": self.design.n_true,
                "q_true": self.design.q_true,
                "family": self.design.family.name,
                "theta": list(self.design.theta),
                "nuisance": self.design.nuisance.describe(),
                "reps": self.design.reps,
                "m_boot": self.design.m_boot,
                "ci_level": self.design.ci_level,
                "seed": self.design.seed,
            },
            "tau_policy": self.tau_policy,
            "reps_completed": self.reps_completed,
            "failures": dict(self.failures),
            "metrics": {k: m.to_dict() for k, m in self.metrics.items()},
        }
        if self.selected_taus is not None:
            out["selected_taus"] = list(self.selected_taus)
        if self.replicates is not None:
            out["replicates"] = self.replicates
        return out

    def table_row(self) -> dict:
        """Primary-estimator row in published-table layout."""
        m = self.metrics["n_hat"]
        return {
            "q": self.design.q_true,
            "N": self.design.n_true,
            "theta": ";".join(f"{v:g}" for v in self.design.theta),
            "mean": m.mc_mean,
            "se_over_n": m.se_over_n,
            "inf": m.inf_pct,
            "sup": m.sup_pct,
        }

    def to_csv(self) -> str:
        row = self.table_row()
        head = ",".join(row)
        vals = ",".join("" if v is None else f"{v:.6g}" if isinstance(v, float) else str(v)
                        for v in row.values())
        return head + "\n" + vals + "\n"


def _selection_seed(design: SimDesign, replicate_index: int) -> int:
    ss = np.random.SeedSequence([design.seed, int(replicate_index), 1])
    return int(ss.generate_state(1)[0])


def _run_replicate(args) -> dict:
    design, rep, tau_policy, estimators, selection_target = args
    out = {"n_hat": math.nan, "chao": math.nan, "n_classical": math.nan,
           "ci_lo": math.nan, "ci_hi": math.nan, "tau": -1, "error": None}
    data = generate(design, rep)
    theta = np.asarray(design.theta, dtype=float)
    alpha = 1.0 - design.ci_level
    try:
        if tau_policy == "auto":
            trace = select_tau(data, design.family, m_boot=design.m_boot,
                               seed=_selection_seed(design, rep),
                               target=selection_target)
            rec = trace.best
            out["tau"] = rec.tau
            out["n_hat"] = rec.n_hat
            out["ci_lo"], out["ci_hi"] = np.quantile(
                rec.boot_n, [alpha / 2, 1.0 - alpha / 2])
            if "n_classical" in estimators:
                out["n_classical"] = n_classical(data, design.family,
                                                 rec.theta_hat, rec.tau)
        else:
            tau = int(tau_policy)
            result = fit_full(data, design.family, FitOptions(tau=tau))
            out["tau"] = tau
            out["n_hat"] = result.n_hat
            if "n_classical" in estimators:
                out["n_classical"] = result.n_classical
            stream = _BootstrapStream(data, _selection_seed(design, rep))
            _, boot_n = _bootstrap_tau(stream, design.family, tau,
                                       design.m_boot, FitOptions(tau=tau),
                                       result.theta_hat)
            out["ci_lo"], out["ci_hi"] = np.quantile(
                boot_n, [alpha / 2, 1.0 - alpha / 2])
    except (ValueError, FitError) as exc:
        out["error"] = str(exc)
    if "chao" in estimators:
        try:
            out["chao"] = chao_estimate(data)
        except ValueError:
            pass
    return out


def run_monte_carlo(design: SimDesign, estimators=ESTIMATORS,
                    tau_policy: int | str = "auto",
                    selection_target: str = "P0",
                    keep_replicates: bool = False,
                    workers: int | None = None) -> SimReport:
    """Evaluate estimators over ``design.reps`` independent replicates.

    ``tau_policy`` is either a fixed threshold or "auto" for data-driven
    selection.  Replicate estimation failures are counted and reported;
    the run aborts if more than 10% of primary estimates fail.  With
    ``workers`` > 1 replicates run on a process pool (same results as
    serial).
    """
    if design.reps < 2:
        raise ValueError("reps must be >= 2")
    unknown = set(estimators) - set(ESTIMATORS)
    if unknown:
        raise ValueError(f"unknown estimators: {sorted(unknown)}")
    if tau_policy != "auto":
        int(tau_policy)

    if workers is None:
        workers = int(os.environ.get("TRUNCRICH_THREADS", "1"))
    args = [(design, rep, tau_policy, tuple(estimators), selection_target)
            for rep in range(design.reps)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_replicate, args,
                                 chunksize=max(1, design.reps // (4 * workers))))
    else:
        rows = [_run_replicate(a) for a in args]

    n_vals = np.array([r["n_hat"] for r in rows])
    primary_failures = int(np.sum(~np.isfinite(n_vals)))
    if primary_failures > 0.10 * design.reps:
        examples = [r["error"] for r in rows if r["error"]][:3]
        raise FitError(
            f"{primary_failures}/{design.reps} replicates failed; first errors: {examples}")

    metrics: dict[str, EstimatorMetrics] = {}
    failures: dict[str, int] = {}
    if "n_hat" in estimators:
        metrics["n_hat"] = metrics_from_values(
            n_vals, design.n_true,
            np.array([r["ci_lo"] for r in rows]),
            np.array([r["ci_hi"] for r in rows]))
        failures["n_hat"] = primary_failures
    for name in ("chao", "n_classical"):
        if name in estimators:
            vals = np.array([r[name] for r in rows])
            metrics[name] = metrics_from_values(vals, design.n_true)
            failures[name] = int(np.sum(~np.isfinite(vals)))

    report = SimReport(
        design=design, tau_policy=str(tau_policy), reps_completed=design.reps,
        metrics=metrics, failures=failures,
        selected_taus=[r["tau"] for r in rows] if tau_policy == "auto" else None)
    if keep_replicates:
        report.replicates = {
            "n_hat": [r["n_hat"] for r in rows],
            "chao": [r["chao"] for r in rows],
            "n_classical": [r["n_classical"] for r in rows],
            "tau": [r["tau"] for r in rows],
            "ci_lo": [r["ci_lo"] for r in rows],
            "ci_hi": [r["ci_hi"] for r in rows],
        }
    return report

"""Data-driven choice of the truncation threshold.

Thresholds trade off against each other: small ones keep the rare-range
fit uncontaminated by abundant species but use little data (high
variance), large ones use more data but pick up abundant mass (bias).
Candidates are compared Goldenshluger-Lepski style on a target statistic
(the unseen-mass estimate q R_theta(0) by default, the species count on
request): each threshold gets a bootstrap variance proxy plus a bias
proxy built from pairwise comparisons against the smaller models, and
the minimizer of their sum is selected, ties going to the smaller
threshold.

Bootstrap replicates resample the observed abundances with replacement.
Replicate datasets are keyed by (seed, replicate index) and shared
across thresholds, which removes spurious between-threshold noise from
the comparison; replicates where the fit degenerates are skipped and
the stream walked further, up to ten times the requested count.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .counts import CountData
from .families import Family, NegativeBinomial, Poisson
from .fit import (FitError, FitOptions, fit_theta, n_hat, negbin_newton_batch,
                  q_hat, tau_min as family_tau_min)

__all__ = [
    "TauRecord",
    "SelectionTrace",
    "bootstrap_variance",
    "bias_proxy",
    "select_tau",
]

_TARGETS = ("P0", "N")
_ATTEMPT_FACTOR = 10


@dataclass
class TauRecord:
    """Per-threshold entries of a selection trace."""

    tau: int
    p0_hat: float
    n_hat: float
    var_proxy: float
    bias_proxy: float
    criterion: float
    theta_hat: np.ndarray = field(repr=False, default=None)
    q_hat: float = field(repr=False, default=None)
    q_clamped: bool = field(repr=False, default=False)
    boot_p0: np.ndarray = field(repr=False, default=None)
    boot_n: np.ndarray = field(repr=False, default=None)


@dataclass
class SelectionTrace:
    """Outcome of threshold selection over a candidate range."""

    records: list[TauRecord]
    selected_tau: int
    target: str

    @property
    def best(self) -> TauRecord:
        for rec in self.records:
            if rec.tau == self.selected_tau:
                return rec
        raise LookupError(f"selected tau {self.selected_tau} not in trace")

    def to_csv(self) -> str:
        lines = ["tau,p0_hat,n_hat,var_proxy,bias_proxy,criterion"]
        for r in self.records:
            lines.append(f"{r.tau},{r.p0_hat:.12g},{r.n_hat:.12g},"
                         f"{r.var_proxy:.12g},{r.bias_proxy:.12g},{r.criterion:.12g}")
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "target": self.target,
            "selected_tau": self.selected_tau,
            "records": [
                {"tau": r.tau, "p0_hat": r.p0_hat, "n_hat": r.n_hat,
                 "var_proxy": r.var_proxy, "bias_proxy": r.bias_proxy,
                 "criterion": r.criterion}
                for r in self.records
            ],
        }


class _BootstrapStream:
    """Replicate datasets indexed by j, deterministic given (seed, j)."""

    def __init__(self, data: CountData, seed: int):
        self.xs, ns = data.to_arrays()
        self.d = int(ns.sum())
        self.p = ns / self.d
        self.seed = int(seed)
        self._rows: dict[int, np.ndarray] = {}

    def row(self, j: int) -> np.ndarray:
        if j not in self._rows:
            rng = np.random.default_rng([self.seed, j])
            self._rows[j] = rng.multinomial(self.d, self.p)
        return self._rows[j]

    def row_data(self, j: int) -> CountData:
        row = self.row(j)
        keep = row > 0
        return CountData(dict(zip(self.xs[keep].tolist(), row[keep].tolist())),
                         provenance="bootstrap")


def _poisson_batch_stats(rows: np.ndarray, xs: np.ndarray, d: int, tau: int,
                         bounds: tuple[float, float]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Plug-in (P0, N) for a batch of Poisson replicates; invalid rows masked.

    Same formulas as the scalar pipeline (truncated-mean matching, then
    the closed-form weight, clamped at 1); a replicate is invalid when
    the rare range is empty or the rate solution sits on the bounds.
    """
    from .fit import poisson_theta_from_xbar

    mask = xs <= tau
    d_tau = rows[:, mask].sum(axis=1).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        xbar = rows[:, mask] @ xs[mask].astype(float) / d_tau
    valid = (d_tau >= 1) & (xbar > 1.0)
    theta = np.full(rows.shape[0], np.nan)
    if valid.any():
        th, boundary = poisson_theta_from_xbar(xbar[valid], tau,
                                               lo=bounds[0], hi_cap=bounds[1])
        sub = np.flatnonzero(valid)
        theta[sub] = th
        valid[sub[boundary]] = False
    p0 = np.full(rows.shape[0], np.nan)
    nh = np.full(rows.shape[0], np.nan)
    if valid.any():
        th = theta[valid]
        grid = np.arange(1, tau + 1, dtype=float)
        log_mass = (grid[None, :] * np.log(th)[:, None] - th[:, None]
                    - special.gammaln(grid + 1.0)[None, :])
        s1 = np.exp(log_mass).sum(axis=1)
        r0 = np.exp(-th)
        denom = r0 + (d / d_tau[valid]) * s1
        with np.errstate(divide="ignore"):
            q = np.where(denom > 0.0, 1.0 / denom, np.inf)
        q = np.minimum(q, 1.0)
        p0_v = q * r0
        p0[valid] = p0_v
        nh[valid] = d / (1.0 - p0_v)
    return valid, p0, nh


def _negbin_batch_stats(rows: np.ndarray, xs: np.ndarray, d: int, tau: int,
                        bounds: list[tuple[float, float]],
                        warm: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Plug-in (P0, N) for a batch of negbin replicates; invalid rows masked."""
    mask = xs <= tau
    cells = xs[mask].astype(int) - 1
    d_tau = rows[:, mask].sum(axis=1).astype(float)
    valid = d_tau >= 1
    p0 = np.full(rows.shape[0], np.nan)
    nh = np.full(rows.shape[0], np.nan)
    if not valid.any():
        return valid, p0, nh
    sub = np.flatnonzero(valid)
    w = np.zeros((sub.size, tau))
    w[:, cells] = rows[np.ix_(sub, np.flatnonzero(mask))] / d_tau[sub, None]
    init = np.tile(np.asarray(warm, dtype=float), (sub.size, 1))
    theta, converged = negbin_newton_batch(w, tau, init, bounds, tol=tol)
    (r_lo, r_hi), (p_lo, p_hi) = bounds
    # r at its floor is the heavy-tail edge of the Gamma mixing and stays
    # usable; any other pinned coordinate is a degenerate replicate
    usable = ((theta[:, 0] < r_hi * (1 - 1e-9))
              & (theta[:, 1] > p_lo * (1 + 1e-9)) & (theta[:, 1] < p_hi * (1 - 1e-9)))
    good = converged & usable
    valid[sub[~good]] = False
    if not good.any():
        return valid, p0, nh
    r, p = theta[good, 0], theta[good, 1]
    grid = np.arange(1, tau + 1, dtype=float)[None, :]
    log_mass = (special.gammaln(grid + r[:, None]) - special.gammaln(r)[:, None]
                - special.gammaln(grid + 1.0) + r[:, None] * np.log(p)[:, None]
                + grid * np.log1p(-p)[:, None])
    s1 = np.exp(log_mass).sum(axis=1)
    r0 = np.exp(r * np.log(p))
    denom = r0 + (d / d_tau[sub[good]]) * s1
    with np.errstate(divide="ignore"):
        q = np.where(denom > 0.0, 1.0 / denom, np.inf)
    q = np.minimum(q, 1.0)
    p0_v = q * r0
    p0[sub[good]] = p0_v
    nh[sub[good]] = d / (1.0 - p0_v)
    return valid, p0, nh


def _bootstrap_tau(stream: _BootstrapStream, family: Family, tau: int,
                   m_boot: int, options: FitOptions,
                   warm_theta: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """First m_boot replicates of (P0, N) at one threshold.

    Walks the shared replicate stream in index order, skipping replicates
    whose fit degenerates; gives up after 10x the requested count.
    """
    budget = _ATTEMPT_FACTOR * m_boot
    p0_out: list[float] = []
    n_out: list[float] = []
    j = 0
    if isinstance(family, Poisson):
        bounds = options.bounds_for(family)[0]
        while len(p0_out) < m_boot and j < budget:
            chunk = min(max(m_boot - len(p0_out), 8), budget - j)
            rows = np.stack([stream.row(j + i) for i in range(chunk)])
            valid, p0, nh = _poisson_batch_stats(rows, stream.xs, stream.d, tau, bounds)
            for i in np.flatnonzero(valid):
                if len(p0_out) < m_boot:
                    p0_out.append(float(p0[i]))
                    n_out.append(float(nh[i]))
            j += chunk
    elif isinstance(family, NegativeBinomial) and warm_theta is not None:
        bounds = options.bounds_for(family)
        while len(p0_out) < m_boot and j < budget:
            chunk = min(max(m_boot - len(p0_out), 8), budget - j)
            rows = np.stack([stream.row(j + i) for i in range(chunk)])
            valid, p0, nh = _negbin_batch_stats(rows, stream.xs, stream.d, tau,
                                                bounds, warm_theta, options.solver_tol)
            for i in np.flatnonzero(valid):
                if len(p0_out) < m_boot:
                    p0_out.append(float(p0[i]))
                    n_out.append(float(nh[i]))
            j += chunk
    else:
        while len(p0_out) < m_boot and j < budget:
            rep = stream.row_data(j)
            j += 1
            try:
                if rep.d_tau(tau) == 0:
                    continue
                theta, boundary = fit_theta(rep, family, options, warm_start=warm_theta)
                if boundary:
                    continue
                q, _ = q_hat(rep, family, theta, tau)
            except (ValueError, FitError):
                continue
            p0 = q * float(family.density(theta, 0))
            p0_out.append(p0)
            n_out.append(rep.d / (1.0 - p0))
    if len(p0_out) < m_boot:
        raise FitError(
            f"bootstrap at tau={tau} exhausted {budget} attempts "
            f"with only {len(p0_out)} successful fits")
    return np.array(p0_out), np.array(n_out)


def _acceptable_boundary(family: Family, theta: np.ndarray,
                         options: FitOptions) -> bool:
    """Boundary fits usable for selection: only the negbin heavy-tail edge.

    r pinned at its floor is the log-series limit of the Gamma mixing
    distribution (common on word-frequency data) and yields finite,
    well-behaved plug-ins; every other pinned coordinate marks a
    degenerate fit.
    """
    if not isinstance(family, NegativeBinomial):
        return False
    (r_lo, _), (p_lo, p_hi) = options.bounds_for(family)
    return (theta[0] <= r_lo * (1 + 1e-6)
            and p_lo * (1 + 1e-9) < theta[1] < p_hi * (1 - 1e-9))


def _stats_from_theta(data: CountData, family: Family, tau: int,
                      theta: np.ndarray) -> TauRecord:
    q, clamped = q_hat(data, family, theta, tau)
    p0 = q * float(family.density(theta, 0))
    nh = n_hat(data.d, family, theta, q)
    return TauRecord(tau=tau, p0_hat=p0, n_hat=nh, var_proxy=np.nan,
                     bias_proxy=np.nan, criterion=np.nan,
                     theta_hat=theta, q_hat=q, q_clamped=clamped)


def _original_stats(data: CountData, family: Family, tau: int,
                    options: FitOptions,
                    warm_theta: np.ndarray | None = None) -> TauRecord:
    theta, boundary = fit_theta(data, family, options, warm_start=warm_theta)
    if boundary and not _acceptable_boundary(family, theta, options):
        raise FitError(f"fit at tau={tau} sits on the parameter bounds")
    return _stats_from_theta(data, family, tau, theta)


def bootstrap_variance(data: CountData, family: Family, tau: int, m_boot: int,
                       seed: int, target: str = "P0",
                       options: FitOptions | None = None) -> float:
    """Bootstrap variance proxy of the target statistic at one threshold.

    Resamples D abundances with replacement, refits per replicate, and
    averages the squared deviations from the original-data estimate.
    """
    if m_boot < 2:
        raise ValueError("m_boot must be >= 2")
    if target not in _TARGETS:
        raise ValueError(f"target must be one of {_TARGETS}, got {target!r}")
    opts = options if options is not None else FitOptions(tau=tau)
    if opts.tau != tau:
        raise ValueError("options.tau must match tau")
    rec = _original_stats(data, family, tau, opts)
    stream = _BootstrapStream(data, seed)
    p0s, nhs = _bootstrap_tau(stream, family, tau, m_boot, opts, rec.theta_hat)
    if target == "P0":
        return float(np.mean((p0s - rec.p0_hat) ** 2))
    return float(np.mean((nhs - rec.n_hat) ** 2))


def bias_proxy(p_hats, var_proxies) -> float:
    """Pairwise bias proxy for the last threshold in a trace prefix.

    Given target estimates and variance proxies for all candidate
    thresholds up to and including the current one (in increasing
    order), returns max over tau' of the positive part of
    (P_hat(tau') - P_hat(tau))^2 - var_proxy(tau').
    """
    p_hats = np.asarray(p_hats, dtype=float)
    var_proxies = np.asarray(var_proxies, dtype=float)
    if p_hats.shape != var_proxies.shape or p_hats.ndim != 1 or p_hats.size == 0:
        raise ValueError("need equal-length, non-empty estimate and variance vectors")
    gaps = (p_hats - p_hats[-1]) ** 2 - var_proxies
    return float(max(np.max(gaps), 0.0))


def select_tau(data: CountData, family: Family, tau_min: int | None = None,
               tau_max: int | None = None, m_boot: int = 100, seed: int = 0,
               target: str = "P0",
               solver_options: FitOptions | None = None) -> SelectionTrace:
    """Select the truncation threshold minimizing bias + variance proxies.

    Fits every threshold in [tau_min, tau_max] (defaults: the family's
    identifiability floor and min(largest abundance, 40)), computes the
    proxies on the chosen target, and returns the full trace with the
    argmin, ties broken toward the smaller threshold.  Thresholds whose
    fit fails are dropped with a warning.
    """
    if target not in _TARGETS:
        raise ValueError(f"target must be one of {_TARGETS}, got {target!r}")
    if m_boot < 2:
        raise ValueError("m_boot must be >= 2")
    lo = family_tau_min(family) if tau_min is None else int(tau_min)
    hi = min(data.max_abundance, 40) if tau_max is None else int(tau_max)
    if lo < family_tau_min(family):
        raise ValueError(f"tau_min={lo} below identifiability floor "
                         f"{family_tau_min(family)} for {family.name}")
    if hi < lo:
        raise ValueError(f"empty threshold range [{lo}, {hi}]")
    if hi > data.max_abundance:
        raise ValueError(f"tau_max={hi} exceeds largest observed abundance "
                         f"{data.max_abundance}")

    stream = _BootstrapStream(data, seed)
    records: list[TauRecord] = []
    warm = None
    for tau in range(lo, hi + 1):
        opts = (FitOptions(tau=tau) if solver_options is None else
                FitOptions(tau=tau, theta_bounds=solver_options.theta_bounds,
                           solver_tol=solver_options.solver_tol,
                           max_iter=solver_options.max_iter,
                           em_tol=solver_options.em_tol))
        try:
            theta_tau, at_boundary = fit_theta(data, family, opts, warm_start=warm)
            warm = theta_tau  # chain even through boundary fits
            if at_boundary and not _acceptable_boundary(family, theta_tau, opts):
                raise FitError(f"fit at tau={tau} sits on the parameter bounds")
            rec = _stats_from_theta(data, family, tau, theta_tau)
            rec.boot_p0, rec.boot_n = _bootstrap_tau(
                stream, family, tau, m_boot, opts, rec.theta_hat)
        except (ValueError, FitError) as exc:
            warnings.warn(f"tau={tau} dropped from selection: {exc}",
                          stacklevel=2)
            continue
        if target == "P0":
            rec.var_proxy = float(np.mean((rec.boot_p0 - rec.p0_hat) ** 2))
        else:
            rec.var_proxy = float(np.mean((rec.boot_n - rec.n_hat) ** 2))
        records.append(rec)

    if not records:
        raise FitError(f"no threshold in [{lo}, {hi}] fit successfully")

    targets = [r.p0_hat if target == "P0" else r.n_hat for r in records]
    variances = [r.var_proxy for r in records]
    for i, rec in enumerate(records):
        rec.bias_proxy = bias_proxy(targets[:i + 1], variances[:i + 1])
        rec.criterion = rec.bias_proxy + rec.var_proxy
    best_idx = int(np.argmin([r.criterion for r in records]))
    return SelectionTrace(records=records, selected_tau=records[best_idx].tau,
                          target=target)

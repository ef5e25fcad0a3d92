"""Conditional maximum-likelihood fitting for the truncation model.

The abundance model blends a parametric rare component R_theta (weight q)
with an arbitrary abundant component supported above a threshold tau.
Estimation proceeds stepwise on the zero-truncated data:

1. ``fit_theta``: maximize the tau-truncated likelihood
   prod_x S_theta(x)^n_x, where S_theta renormalizes R_theta onto
   {1..tau}.  For Poisson-shaped families this reduces to matching the
   truncated mean, a monotone one-dimensional root problem solved by
   bracketed bisection.  The negative binomial is fit by damped Newton
   ascent with analytic score and Hessian (multi-start); Poisson
   mixtures by EM whose M-step solves per-component truncated-mean
   fixed points, followed by a Newton polish of the full score.
2. ``q_hat``: closed-form weight estimate given theta, clamped to 1.
3. ``n_hat``: plug-in species count D / (1 - q R_theta(0)).

``n_classical`` (rare-only correction plus the abundant headcount),
``chao`` and ``zelterman_theta`` are provided for comparison; with a
pure Poisson rare component and tau = 2 the pipeline reproduces the
Chao estimate exactly.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special
from scipy.special import logsumexp

from .counts import CountData
from .families import (Family, NegativeBinomial, Poisson, PoissonMixture,
                       TruncatedPoissonSupport)

__all__ = [
    "FitError",
    "FitOptions",
    "FitResult",
    "tau_min",
    "fit_theta",
    "q_hat",
    "f_pseudo",
    "n_hat",
    "n_classical",
    "chao",
    "zelterman_theta",
    "fit_full",
]


class FitError(RuntimeError):
    """Numerical failure: non-convergence, singular information, etc."""


def tau_min(family: Family) -> int:
    """Least truncation threshold that keeps theta identifiable (k + 1)."""
    return family.param_dim + 1


@dataclass
class FitOptions:
    """Solver configuration for a single truncation threshold.

    theta_bounds defaults to the family's box; it realizes the compact
    parameter-set assumption and is where boundary solutions land.
    """

    tau: int
    theta_bounds: list[tuple[float, float]] | None = None
    solver_tol: float = 1e-10
    max_iter: int = 500
    em_tol: float = 1e-9

    def bounds_for(self, family: Family) -> list[tuple[float, float]]:
        bounds = self.theta_bounds if self.theta_bounds is not None else family.default_bounds()
        if len(bounds) != family.param_dim:
            raise ValueError(
                f"theta_bounds needs {family.param_dim} intervals, got {len(bounds)}")
        return bounds


@dataclass
class FitResult:
    """Estimates produced by ``fit_full`` at one truncation threshold."""

    family: str
    tau: int
    theta_hat: np.ndarray
    q_hat: float
    q_clamped: bool
    theta_boundary: bool
    n_hat: float
    n_classical: float
    d: int
    d_tau: int
    score_residual: float
    asym_cov: np.ndarray | None = None
    se_n: float | None = None

    def to_dict(self) -> dict:
        out = {
            "family": self.family,
            "tau": self.tau,
            "theta_hat": [float(v) for v in self.theta_hat],
            "q_hat": float(self.q_hat),
            "q_clamped": self.q_clamped,
            "theta_boundary": self.theta_boundary,
            "n_hat": float(self.n_hat),
            "n_classical": float(self.n_classical),
            "d": self.d,
            "d_tau": self.d_tau,
            "score_residual": float(self.score_residual),
        }
        if self.asym_cov is not None:
            out["asym_cov"] = [[float(v) for v in row] for row in self.asym_cov]
        if self.se_n is not None:
            out["se_n"] = float(self.se_n)
        return out


# ---------------------------------------------------------------------------
# Poisson-shaped truncated mean matching
# ---------------------------------------------------------------------------

def _poisson_trunc_mean(rates: np.ndarray, tau: int) -> np.ndarray:
    """Mean of Poisson(rate) renormalized onto {1..tau}, vectorized.

    Computed through a shifted softmax of the log masses, so it stays
    exact even when the raw masses underflow (very large rates).
    """
    rates = np.asarray(rates, dtype=float)
    x = np.arange(1, tau + 1, dtype=float)
    logm = x[None, :] * np.log(rates)[:, None] - rates[:, None] - special.gammaln(x + 1.0)[None, :]
    logm -= logm.max(axis=1, keepdims=True)
    w = np.exp(logm)
    w /= w.sum(axis=1, keepdims=True)
    return w @ x


def poisson_theta_from_xbar(xbar: np.ndarray, tau: int,
                            lo: float = 1e-8, hi_cap: float = 1e4,
                            iters: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Solve truncated-mean matching for a batch of Poisson problems.

    For each entry of ``xbar`` finds the rate whose {1..tau}-truncated
    mean equals it.  The truncated mean is strictly increasing in the
    rate, so a sign change brackets a unique root; the bracket upper end
    grows geometrically until the residual changes sign.

    Returns (theta, boundary) where ``boundary`` marks entries clamped
    to ``lo`` (all mass at abundance 1) or ``hi_cap``.
    """
    xbar = np.atleast_1d(np.asarray(xbar, dtype=float))
    n = xbar.shape[0]
    theta = np.empty(n)
    boundary = np.zeros(n, dtype=bool)

    g_lo = xbar - _poisson_trunc_mean(np.full(n, lo), tau)
    at_lo = g_lo <= 0.0
    theta[at_lo] = lo
    boundary[at_lo] = True

    active = ~at_lo
    hi = np.maximum(xbar.copy(), 1.0)
    for _ in range(64):
        if not active.any():
            break
        g_hi = np.full(n, -1.0)
        g_hi[active] = xbar[active] - _poisson_trunc_mean(hi[active], tau)
        still_low = active & (g_hi >= 0.0)
        if not still_low.any():
            break
        hi[still_low] = np.minimum(hi[still_low] * 2.0, hi_cap)
        capped = still_low & (hi >= hi_cap)
        if capped.any():
            g_cap = xbar[capped] - _poisson_trunc_mean(np.full(capped.sum(), hi_cap), tau)
            cap_idx = np.flatnonzero(capped)
            pinned = cap_idx[g_cap >= 0.0]
            theta[pinned] = hi_cap
            boundary[pinned] = True
            active[pinned] = False

    lo_arr = np.full(n, lo)
    solve = ~boundary & ~at_lo
    a = lo_arr[solve]
    b = hi[solve]
    xb = xbar[solve]
    for _ in range(iters):
        mid = 0.5 * (a + b)
        g = xb - _poisson_trunc_mean(mid, tau)
        take_hi = g > 0.0
        a = np.where(take_hi, mid, a)
        b = np.where(take_hi, b, mid)
    theta[solve] = 0.5 * (a + b)
    return theta, boundary


# ---------------------------------------------------------------------------
# Generic truncated-likelihood machinery
# ---------------------------------------------------------------------------

def _trunc_data(data: CountData, tau: int) -> tuple[np.ndarray, np.ndarray, int]:
    xs, ns = data.to_arrays()
    mask = xs <= tau
    xs, ns = xs[mask], ns[mask]
    d_tau = int(ns.sum())
    if d_tau == 0:
        raise ValueError(f"insufficient rare data: no species with abundance <= {tau}")
    return xs.astype(float), ns.astype(float), d_tau


def trunc_loglik(family: Family, theta, data: CountData, tau: int) -> float:
    """Truncated log-likelihood per rare species (normalized by D_tau)."""
    xs, ns, d_tau = _trunc_data(data, tau)
    log_mass = family.log_density(theta, xs)
    log_norm = logsumexp(family.truncated_log_masses(theta, tau))
    return float((ns / d_tau) @ (log_mass - log_norm))


def _score_at(family, theta, xs, ns, d_tau, tau) -> np.ndarray:
    s = family.truncated_density(theta, tau)
    grid = np.arange(1, tau + 1)
    mass_grid = family.density(theta, grid)
    grad_grid = family.grad_density(theta, grid)
    with np.errstate(divide="ignore", invalid="ignore"):
        gl_grid = np.where(mass_grid[:, None] > 0.0, grad_grid / mass_grid[:, None], 0.0)
    return (ns / d_tau) @ gl_grid[xs.astype(int) - 1] - s @ gl_grid


def trunc_score(family: Family, theta, data: CountData, tau: int) -> np.ndarray:
    """Gradient of the normalized truncated log-likelihood."""
    xs, ns, d_tau = _trunc_data(data, tau)
    return _score_at(family, family.validate(theta), xs, ns, d_tau, tau)


# ---------------------------------------------------------------------------
# Negative binomial: damped Newton ascent on the truncated likelihood
# ---------------------------------------------------------------------------

def _negbin_batch_terms(r: np.ndarray, p: np.ndarray, w: np.ndarray, tau: int):
    """Objective, score, and Hessian of the truncated likelihood, batched.

    ``w`` holds per-problem data weights over the cells 1..tau (rows sum
    to 1).  Returns per-problem scalars/vectors for a whole batch at
    once; this is what makes bootstrap refits cheap.
    """
    x = np.arange(1, tau + 1, dtype=float)[None, :]
    r_c, p_c = r[:, None], p[:, None]
    log_p = np.log(p)[:, None]
    log_1mp = np.log1p(-p)[:, None]
    log_mass = (special.gammaln(x + r_c) - special.gammaln(r_c)
                - special.gammaln(x + 1.0) + r_c * log_p + x * log_1mp)
    peak = log_mass.max(axis=1, keepdims=True)
    bumped = np.exp(log_mass - peak)
    z = bumped.sum(axis=1, keepdims=True)
    s_tr = bumped / z
    obj = (w * log_mass).sum(axis=1) - (peak[:, 0] + np.log(z[:, 0]))

    g_r = special.digamma(x + r_c) - special.digamma(r_c) + log_p
    g_p = r_c / p_c - x / (1.0 - p_c)
    es_r = (s_tr * g_r).sum(axis=1)
    es_p = (s_tr * g_p).sum(axis=1)
    s1 = (w * g_r).sum(axis=1) - es_r
    s2 = (w * g_p).sum(axis=1) - es_p

    h_rr = special.polygamma(1, x + r_c) - special.polygamma(1, r_c)
    h_pp = -r_c / p_c**2 - x / (1.0 - p_c) ** 2
    inv_p = 1.0 / p
    h11 = (w * h_rr).sum(axis=1) - ((s_tr * (h_rr + g_r**2)).sum(axis=1) - es_r**2)
    h12 = inv_p - ((s_tr * (inv_p[:, None] + g_r * g_p)).sum(axis=1) - es_r * es_p)
    h22 = (w * h_pp).sum(axis=1) - ((s_tr * (h_pp + g_p**2)).sum(axis=1) - es_p**2)
    return obj, s1, s2, h11, h12, h22


def negbin_newton_batch(w: np.ndarray, tau: int, init: np.ndarray,
                        bounds: list[tuple[float, float]], tol: float = 1e-10,
                        max_iter: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Damped Newton ascent for many truncated negbin problems at once.

    ``init`` is (B, 2); each row iterates independently with its own
    backtracking, all within shared vector operations.  Returns the
    parameter matrix and a per-problem convergence mask (max-norm of the
    score within ``tol``).
    """
    (r_lo, r_hi), (p_lo, p_hi) = bounds
    u_r = np.clip(init[:, 0].astype(float), r_lo, r_hi)
    u_p = np.clip(init[:, 1].astype(float), p_lo, p_hi)
    n = u_r.shape[0]
    obj, s1, s2, h11, h12, h22 = _negbin_batch_terms(u_r, u_p, w, tau)

    def effective_res(u_r, s1, s2):
        # at the heavy-tail edge (r pinned low, score pointing out) only the
        # p-component still needs to vanish
        r_edge = (u_r <= r_lo * (1 + 1e-9)) & (s1 < 0.0)
        return np.where(r_edge, np.abs(s2), np.maximum(np.abs(s1), np.abs(s2)))

    moving = np.ones(n, dtype=bool)
    for _ in range(max_iter):
        res = effective_res(u_r, s1, s2)
        moving &= res > tol
        if not moving.any():
            break
        det = h11 * h22 - h12 * h12
        with np.errstate(divide="ignore", invalid="ignore"):
            d1 = (-s1 * h22 + s2 * h12) / det
            d2 = (-s2 * h11 + s1 * h12) / det
        bad = ~np.isfinite(d1) | ~np.isfinite(d2) | (d1 * s1 + d2 * s2 <= 0.0)
        d1 = np.where(bad, s1, d1)
        d2 = np.where(bad, s2, d2)
        r_edge = (u_r <= r_lo * (1 + 1e-9)) & (s1 < 0.0)
        if r_edge.any():
            with np.errstate(divide="ignore", invalid="ignore"):
                d2_edge = np.where(h22 < 0.0, -s2 / h22, s2)
            d1 = np.where(r_edge, 0.0, d1)
            d2 = np.where(r_edge, d2_edge, d2)
        scale = np.ones(n)
        pending = moving.copy()
        for _ in range(30):
            if not pending.any():
                break
            idx = np.flatnonzero(pending)
            cand_r = np.clip(u_r[idx] + scale[idx] * d1[idx], r_lo, r_hi)
            cand_p = np.clip(u_p[idx] + scale[idx] * d2[idx], p_lo, p_hi)
            obj_new = _negbin_batch_terms(cand_r, cand_p, w[idx], tau)[0]
            moved = (np.abs(cand_r - u_r[idx]) + np.abs(cand_p - u_p[idx])) > 0.0
            ok = moved & (obj_new > obj[idx] - 1e-14 * np.maximum(1.0, np.abs(obj[idx])))
            take = idx[ok]
            u_r[take] = cand_r[ok]
            u_p[take] = cand_p[ok]
            pending[take] = False
            scale[pending] *= 0.5
        # rows whose backtracking found no acceptable step stop moving
        moving &= ~pending
        obj, s1, s2, h11, h12, h22 = _negbin_batch_terms(u_r, u_p, w, tau)
    converged = effective_res(u_r, s1, s2) <= tol
    return np.stack([u_r, u_p], axis=1), converged


def _negbin_obj_score_hess(theta, xs, ns, d_tau, tau, family: NegativeBinomial):
    grid = np.arange(1, tau + 1, dtype=float)
    log_mass = family.log_density(theta, grid)
    log_norm = logsumexp(log_mass)
    s_tr = np.exp(log_mass - log_norm)
    gl = family.grad_log_density(theta, grid)
    hl = family.hess_log_density(theta, grid)

    idx = xs.astype(int) - 1
    wts = ns / d_tau
    obj = float(wts @ (log_mass[idx] - log_norm))
    e_gl = s_tr @ gl
    score = wts @ gl[idx] - e_gl
    e_h = np.einsum("k,kij->ij", s_tr, hl) + np.einsum("k,ki,kj->ij", s_tr, gl, gl)
    hess = np.einsum("k,kij->ij", wts, hl[idx]) - (e_h - np.outer(e_gl, e_gl))
    return obj, score, hess


def _clip_interior(u, bounds, margin=1e-12):
    out = np.array(u, dtype=float)
    for i, (lo, hi) in enumerate(bounds):
        span = hi - lo
        out[i] = min(max(out[i], lo + margin * max(1.0, abs(lo))),
                     hi - margin * max(1.0, span))
    return out


def _negbin_moment_init(xs, ns, d_tau) -> np.ndarray:
    m1 = float((xs * ns).sum() / d_tau)
    v = float((ns * (xs - m1) ** 2).sum() / d_tau)
    if v > 1.05 * m1:
        r0 = m1 * m1 / (v - m1)
    else:
        r0 = 2.0
    p0 = r0 / (r0 + m1)
    return np.array([r0, p0])


def _newton_ascend(theta0, bounds, obj_fn, tol, max_iter):
    """Damped Newton ascent; returns (theta, converged, score_inf).

    A step clipped back onto the current point counts as no movement, so
    boundary-pinned problems terminate immediately instead of spinning.
    """
    u = _clip_interior(theta0, bounds)
    obj, score, hess = obj_fn(u)
    for _ in range(min(max_iter, 80)):
        res = float(np.max(np.abs(score)))
        if res <= tol:
            return u, True, res
        try:
            step = np.linalg.solve(hess, -score)
        except np.linalg.LinAlgError:
            step = score
        if step @ score <= 0.0:
            step = score
        accepted = False
        scale = 1.0
        for _ in range(40):
            u_new = _clip_interior(u + scale * step, bounds)
            if float(np.max(np.abs(u_new - u))) <= 1e-15 * (1.0 + float(np.max(np.abs(u)))):
                scale *= 0.5
                continue
            try:
                obj_new, score_new, hess_new = obj_fn(u_new)
            except (ValueError, FloatingPointError):
                scale *= 0.5
                continue
            if obj_new > obj - 1e-14 * max(1.0, abs(obj)):
                u, obj, score, hess = u_new, obj_new, score_new, hess_new
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            break
    return u, float(np.max(np.abs(score))) <= tol, float(np.max(np.abs(score)))


def _fit_negbin(data: CountData, family: NegativeBinomial, options: FitOptions,
                warm_start: np.ndarray | None = None) -> tuple[np.ndarray, bool]:
    tau = options.tau
    xs, ns, d_tau = _trunc_data(data, tau)
    bounds = options.bounds_for(family)

    def obj_fn(u):
        return _negbin_obj_score_hess(u, xs, ns, d_tau, tau, family)

    def pinned_outward(u):
        score = obj_fn(u)[1]
        for i, (lo, hi) in enumerate(bounds):
            near_lo = u[i] <= lo * (1 + 1e-6) + 1e-15
            near_hi = u[i] >= hi * (1 - 1e-6)
            if (near_lo and score[i] < 0) or (near_hi and score[i] > 0):
                return True
        return False

    starts = []
    if warm_start is not None:
        starts.append(np.asarray(warm_start, dtype=float))
    starts += [_negbin_moment_init(xs, ns, d_tau),
               np.array([1.0, 0.5]), np.array([5.0, 0.5])]

    best = None
    for u0 in starts:
        u, ok, res = _newton_ascend(u0, bounds, obj_fn, options.solver_tol, options.max_iter)
        obj = obj_fn(u)[0]
        if best is None or obj > best[1] + 1e-12:
            best = (u, obj, ok, res)
        if warm_start is not None and (ok or pinned_outward(u)):
            # warm-started refits trust the warm point's basin
            best = (u, obj, ok, res)
            break

    u, obj, ok, res = best
    if not ok and not pinned_outward(u):
        # quasi-Newton rescue from the best point, then re-polish
        def neg(uv):
            o, s, _ = obj_fn(_clip_interior(uv, bounds))
            return -o, -s

        out = optimize.minimize(neg, u, jac=True, method="L-BFGS-B",
                                bounds=bounds, options={"maxiter": 200,
                                                        "ftol": 1e-15, "gtol": 1e-12})
        u2, ok2, res2 = _newton_ascend(out.x, bounds, obj_fn, options.solver_tol,
                                       options.max_iter)
        if obj_fn(u2)[0] >= obj or ok2:
            u, ok, res = u2, ok2, res2
    if ok:
        return u, False
    # stationarity failed inside the box: accept a boundary solution when the
    # score pushes outward at a pinned coordinate, otherwise report failure
    if pinned_outward(u):
        (r_lo, _), (p_lo, p_hi) = bounds
        if u[0] <= r_lo * (1 + 1e-6):
            # heavy-tail edge (log-series limit of the Gamma mixing): hold r
            # at the floor and make p exactly stationary in one dimension
            p = u[1]
            for _ in range(60):
                _, score, hess = obj_fn(np.array([r_lo, p]))
                if abs(score[1]) <= options.solver_tol:
                    break
                step = -score[1] / hess[1, 1] if hess[1, 1] < 0 else score[1]
                p = min(max(p + step, p_lo * (1 + 1e-9)), p_hi * (1 - 1e-9))
            u = np.array([r_lo, p])
        return u, True
    raise FitError(
        f"negbin fit did not converge at tau={tau}: score residual {res:.3e}")


# ---------------------------------------------------------------------------
# Poisson mixture: EM with truncated-mean M-steps, then Newton polish
# ---------------------------------------------------------------------------

def _mixture_em(data: CountData, family: PoissonMixture, options: FitOptions):
    tau = options.tau
    xs, ns, d_tau = _trunc_data(data, tau)
    j = family.n_components
    bounds = options.bounds_for(family)
    rate_lo, rate_hi = bounds[0]
    xbar = float((xs * ns).sum() / d_tau)

    rates = np.linspace(max(xbar / j, rate_lo * 10), min(xbar * j, rate_hi / 10), j)
    w = np.full(j, 1.0 / j)  # weights of the truncated components

    grid = np.arange(1, tau + 1, dtype=float)

    def comp_logs(rates_):
        # log of each component's truncated density on the grid
        lp = np.stack([grid * math.log(lam) - lam - special.gammaln(grid + 1.0)
                       for lam in rates_], axis=1)
        log_c = logsumexp(lp, axis=0)
        return lp - log_c[None, :], log_c

    def loglik(w_, lp_norm):
        log_mix = logsumexp(lp_norm[xs.astype(int) - 1], axis=1, b=w_)
        return float(ns @ log_mix / d_tau)

    lp_norm, log_c = comp_logs(rates)
    ll = loglik(w, lp_norm)
    trace = [ll]
    for _ in range(options.max_iter):
        # E-step: responsibilities on observed cells
        log_post = np.log(w)[None, :] + lp_norm[xs.astype(int) - 1]
        log_post -= logsumexp(log_post, axis=1, keepdims=True)
        gamma = np.exp(log_post)
        # M-step
        resp_mass = ns @ gamma
        w = resp_mass / d_tau
        w = np.clip(w, 1e-12, None)
        w /= w.sum()
        comp_xbar = (ns * xs) @ gamma / resp_mass
        rates, _ = poisson_theta_from_xbar(np.clip(comp_xbar, 1.0 + 1e-12, None),
                                           tau, lo=rate_lo, hi_cap=rate_hi)
        lp_norm, log_c = comp_logs(rates)
        ll_new = loglik(w, lp_norm)
        trace.append(ll_new)
        if abs(ll_new - ll) <= options.em_tol * max(1.0, abs(ll_new)):
            ll = ll_new
            break
        ll = ll_new

    # back to original mixture weights: pi_j proportional to w_j / c_j
    log_pi = np.log(w) - log_c
    pi = np.exp(log_pi - logsumexp(log_pi))
    theta = family.join(rates, pi)
    return theta, trace


def _fit_mixture(data: CountData, family: PoissonMixture, options: FitOptions,
                 warm_start: np.ndarray | None = None) -> tuple[np.ndarray, bool]:
    tau = options.tau
    xs, ns, d_tau = _trunc_data(data, tau)
    if warm_start is not None:
        theta = np.asarray(warm_start, dtype=float)
        trace = []
    else:
        theta, trace = _mixture_em(data, family, options)
    bounds = options.bounds_for(family)

    def obj_fn(u):
        th = family.validate(u)
        obj = trunc_loglik(family, th, data, tau)
        score = _score_at(family, th, xs, ns, d_tau, tau)
        k = len(u)
        hess = np.empty((k, k))
        for i in range(k):
            h = 1e-6 * (1.0 + abs(u[i]))
            up = u.copy(); up[i] += h
            dn = u.copy(); dn[i] -= h
            hess[:, i] = (_score_at(family, family.validate(up), xs, ns, d_tau, tau)
                          - _score_at(family, family.validate(dn), xs, ns, d_tau, tau)) / (2 * h)
        return obj, score, 0.5 * (hess + hess.T)

    def feasible(u):
        th = np.array(u, dtype=float)
        jc = family.n_components
        th[:jc] = np.clip(th[:jc], bounds[0][0], bounds[0][1])
        wfree = np.clip(th[jc:], 1e-9, None)
        total = wfree.sum()
        if total >= 1.0 - 1e-9:
            wfree *= (1.0 - 1e-9) / total
        th[jc:] = wfree
        return th

    base_obj = trunc_loglik(family, theta, data, tau)
    u = feasible(theta)
    try:
        obj, score, hess = obj_fn(u)
        for _ in range(60):
            res = float(np.max(np.abs(score)))
            if res <= options.solver_tol:
                break
            try:
                step = np.linalg.solve(hess, -score)
            except np.linalg.LinAlgError:
                step = score
            if step @ score <= 0.0:
                step = score
            scale, moved = 1.0, False
            for _ in range(40):
                u_new = feasible(u + scale * step)
                if float(np.max(np.abs(u_new - u))) <= 1e-15 * (1.0 + float(np.max(np.abs(u)))):
                    scale *= 0.5
                    continue
                try:
                    obj_new, score_new, hess_new = obj_fn(u_new)
                except (ValueError, FloatingPointError):
                    scale *= 0.5
                    continue
                if obj_new > obj - 1e-14 * max(1.0, abs(obj)):
                    u, obj, score, hess = u_new, obj_new, score_new, hess_new
                    moved = True
                    break
                scale *= 0.5
            if not moved:
                break
        if obj >= base_obj - 1e-10:
            theta = u
    except (ValueError, np.linalg.LinAlgError):
        pass  # keep the EM solution

    res = float(np.max(np.abs(_score_at(family, theta, xs, ns, d_tau, tau))))
    if res > max(options.solver_tol, 1e-8):
        raise FitError(
            f"mixture fit did not converge at tau={tau}: score residual {res:.3e}")
    return theta, False


def mixture_em_trace(data: CountData, family: PoissonMixture, options: FitOptions) -> list[float]:
    """Per-iteration truncated log-likelihoods of the EM pass (for checks)."""
    _, trace = _mixture_em(data, family, options)
    return trace


# ---------------------------------------------------------------------------
# Public fitting operations
# ---------------------------------------------------------------------------

def _check_tau(family: Family, tau: int) -> None:
    lo = tau_min(family)
    if tau < lo:
        raise ValueError(f"tau={tau} below tau_min={lo} for family {family.name}")


def fit_theta(data: CountData, family: Family, options: FitOptions,
              warm_start: np.ndarray | None = None) -> tuple[np.ndarray, bool]:
    """Maximize the tau-truncated likelihood; returns (theta_hat, boundary).

    ``boundary`` is True when the maximizer sits on the parameter box
    (for Poisson: all rare mass at abundance 1 drives the rate to the
    lower bound).
    """
    tau = options.tau
    _check_tau(family, tau)
    if isinstance(family, TruncatedPoissonSupport) and tau > family.tau_support:
        raise ValueError(
            f"tau={tau} exceeds the family support bound {family.tau_support}")
    if isinstance(family, (Poisson, TruncatedPoissonSupport)):
        xbar = data.truncated_mean(tau)  # raises when D_tau = 0
        lo, hi = options.bounds_for(family)[0]
        theta, boundary = poisson_theta_from_xbar(np.array([xbar]), tau, lo=lo, hi_cap=hi)
        return theta, bool(boundary[0])
    if isinstance(family, NegativeBinomial):
        return _fit_negbin(data, family, options, warm_start=warm_start)
    if isinstance(family, PoissonMixture):
        return _fit_mixture(data, family, options, warm_start=warm_start)
    raise ValueError(f"no fitting routine for family {family.name}")


def q_hat(data: CountData, family: Family, theta, tau: int) -> tuple[float, bool]:
    """Closed-form weight of the rare component given theta.

    Returns (q, clamped); values above 1 are constrained to 1 with the
    flag set.
    """
    d = data.d
    d_tau = data.d_tau(tau)
    if d_tau == 0:
        raise ValueError(f"insufficient rare data: no species with abundance <= {tau}")
    r0 = float(family.density(theta, 0))
    s1 = float(family.density(theta, np.arange(1, tau + 1)).sum())
    denom = r0 + (d / d_tau) * s1
    if denom <= 0.0:
        return 1.0, True
    q = 1.0 / denom
    if q > 1.0:
        return 1.0, True
    return q, False


def f_pseudo(data: CountData, family: Family, theta, q: float, tau: int, x: int) -> float:
    """Unconstrained abundant-component estimate at a point x > tau.

    May be negative (it is the likelihood maximizer without a
    nonnegativity constraint); unobserved support points always get
    negative mass.
    """
    if x <= tau:
        raise ValueError(f"x={x} must exceed tau={tau}")
    if q >= 1.0:
        raise ValueError("q must be < 1: abundant component absent")
    d = data.d
    d_tau = data.d_tau(tau)
    if d - d_tau < 1:
        raise ValueError("no species above tau: abundant component empty")
    s0 = float(family.density(theta, np.arange(0, tau + 1)).sum())
    n_x = data.n(x)
    return ((1.0 - q * s0) * n_x / ((1.0 - q) * (d - d_tau))
            - (q / (1.0 - q)) * float(family.density(theta, x)))


def n_hat(d: int, family: Family, theta, q: float) -> float:
    """Species-count estimate D / (1 - q R_theta(0)); may be non-integer."""
    p0 = q * float(family.density(theta, 0))
    if p0 >= 1.0:
        raise ValueError(f"q * R_theta(0) = {p0} >= 1; estimate undefined")
    return d / (1.0 - p0)


def n_classical(data: CountData, family: Family, theta, tau: int) -> float:
    """Pure-truncation estimate: corrected rare count plus the abundant headcount."""
    r0 = float(family.density(theta, 0))
    if r0 >= 1.0:
        raise ValueError(f"R_theta(0) = {r0} >= 1; estimate undefined")
    d = data.d
    d_tau = data.d_tau(tau)
    return d_tau / (1.0 - r0) + (d - d_tau)


def chao(data: CountData) -> float:
    """Chao's lower-bound estimate D + n1^2 / (2 n2)."""
    n2 = data.n(2)
    if n2 == 0:
        raise ValueError("chao estimate undefined: no species observed exactly twice")
    n1 = data.n(1)
    return data.d + n1 * n1 / (2.0 * n2)


def zelterman_theta(data: CountData) -> float:
    """Zelterman's Poisson rate estimate 2 n2 / n1."""
    n1, n2 = data.n(1), data.n(2)
    if n1 == 0 or n2 == 0:
        raise ValueError("zelterman estimate needs n1 >= 1 and n2 >= 1")
    return 2.0 * n2 / n1


def fit_full(data: CountData, family: Family, options: FitOptions,
             with_diagnostics: bool = False,
             warm_start: np.ndarray | None = None) -> FitResult:
    """Run the full pipeline theta -> q -> N at one threshold.

    ``score_residual`` (max-norm of the averaged efficient-score
    equations at the fitted pair) is always computed; the asymptotic
    covariance and the species-count standard error are added when
    ``with_diagnostics`` is set.
    """
    from . import efficiency

    tau = options.tau
    _check_tau(family, tau)
    d_tau = data.d_tau(tau)
    if d_tau == 0:
        raise ValueError(f"insufficient rare data: no species with abundance <= {tau}")
    theta, boundary = fit_theta(data, family, options, warm_start=warm_start)
    q, clamped = q_hat(data, family, theta, tau)
    nh = n_hat(data.d, family, theta, q)
    nc = n_classical(data, family, theta, tau)
    residual = efficiency.score_residual(data, family, theta, q, tau)
    result = FitResult(
        family=family.name, tau=tau, theta_hat=np.asarray(theta, dtype=float),
        q_hat=q, q_clamped=clamped, theta_boundary=boundary,
        n_hat=nh, n_classical=nc, d=data.d, d_tau=d_tau,
        score_residual=residual)
    if with_diagnostics:
        cov, se = efficiency.asymptotic_covariance(family, theta, q, tau, data.d)
        result.asym_cov = cov
        result.se_n = se
    return result

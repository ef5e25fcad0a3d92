"""Efficient scores and information for the truncation model.

With the abundant component treated as an infinite-dimensional nuisance,
the ordinary scores for (q, theta) are projected onto the orthocomplement
of the nuisance tangent space.  The projection has a closed form here:
the efficient score equals the ordinary score on the rare range
{1..tau} and is constant on the abundant range, the constant being the
conditional mean of the score over abundances above tau.  All tail sums
therefore reduce to a constant times a tail mass, which this module
exploits to give exact (truncation-free) expressions.

Vectors stack the q-component first, then the theta-components, giving
k + 1 entries; matrices follow the same ordering.
"""

import numpy as np

from .counts import CountData
from .families import Family
from .fit import FitError

__all__ = [
    "efficient_score",
    "fisher_information",
    "score_residual",
    "asymptotic_covariance",
]

_COND_LIMIT = 1e12


def _pieces(family: Family, theta, q: float, tau: int):
    """Shared sums: R(0), Rdot(0), sums over 0..tau, and the two denominators."""
    theta = family.validate(theta)
    if not 0.0 < q <= 1.0:
        raise ValueError(f"q must be in (0, 1], got {q}")
    grid = np.arange(0, tau + 1)
    mass = family.density(theta, grid)
    grad = family.grad_density(theta, grid)
    r0 = float(mass[0])
    rd0 = grad[0]
    s0 = float(mass.sum())
    sd0 = grad.sum(axis=0)
    m = 1.0 - q * r0
    t = 1.0 - q * s0
    if m <= 0.0:
        raise ValueError(f"q * R_theta(0) = {q * r0} >= 1")
    return theta, mass, grad, r0, rd0, s0, sd0, m, t


def efficient_score(family: Family, theta, q: float, tau: int, x: int) -> np.ndarray:
    """Efficient score vector at abundance x >= 1, ordered (q, theta).

    Piecewise: the ordinary score (plus a common offset) on the rare
    range, a single constant on the whole abundant range x > tau.
    """
    if x < 1:
        raise ValueError(f"abundance x must be >= 1, got {x}")
    theta, mass, grad, r0, rd0, s0, sd0, m, t = _pieces(family, theta, q, tau)
    k = family.param_dim
    out = np.empty(k + 1)
    if x <= tau:
        rx = float(mass[x])
        if rx <= 0.0:
            raise ValueError(f"R_theta({x}) = 0: score undefined on the rare range")
        out[0] = 1.0 / q + r0 / m
        out[1:] = grad[x] / rx + q * rd0 / m
    else:
        if t <= 0.0:
            raise ValueError(f"q * sum_(0..tau) R_theta = {q * s0} >= 1: "
                             "abundant range carries no mass")
        out[0] = -s0 / t + r0 / m
        out[1:] = -q * sd0 / t + q * rd0 / m
    return out


def fisher_information(family: Family, theta, q: float, tau: int) -> np.ndarray:
    """Efficient information matrix, order k + 1, in closed form.

    Equals the covariance of the efficient score under the truncated
    model; the abundant component enters only through its total mass, so
    no nuisance distribution is needed.
    """
    theta, mass, grad, r0, rd0, s0, sd0, m, t = _pieces(family, theta, q, tau)
    if t <= 0.0:
        raise FitError(f"singular configuration: 1 - q * sum R = {t} <= 0")
    k = family.param_dim
    info = np.empty((k + 1, k + 1))
    info[0, 0] = ((s0 - r0) / q + s0 * s0 / t - r0 * r0 / m) / m
    cross = (q / m) * ((sd0 - rd0) / q + s0 * sd0 / t - rd0 * (r0 / m))
    info[0, 1:] = cross
    info[1:, 0] = cross
    rare = mass[1:]
    rare_grad = grad[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rare[:, None] > 0.0, rare_grad / np.sqrt(rare)[:, None], 0.0)
    block = ratio.T @ ratio
    info[1:, 1:] = (q / m) * (block + q * np.outer(sd0, sd0) / t
                              - q * np.outer(rd0, rd0) / m)
    return info


def score_residual(data: CountData, family: Family, theta, q: float, tau: int) -> float:
    """Max-norm of the averaged efficient-score equations on a dataset.

    Computes max_c | sum_x n_x score_c(x) | / D via the counts; the
    fitted (q, theta) pair zeroes this up to solver precision.
    """
    theta, mass, grad, r0, rd0, s0, sd0, m, t = _pieces(family, theta, q, tau)
    k = family.param_dim
    xs, ns = data.to_arrays()
    total = np.zeros(k + 1)
    rare_mask = xs <= tau
    for x, n in zip(xs[rare_mask], ns[rare_mask]):
        rx = float(mass[x])
        if rx <= 0.0:
            raise ValueError(f"R_theta({x}) = 0: score undefined on the rare range")
        total[0] += n * (1.0 / q + r0 / m)
        total[1:] += n * (grad[x] / rx + q * rd0 / m)
    n_tail = int(ns[~rare_mask].sum())
    if n_tail:
        if t <= 0.0:
            raise ValueError(f"q * sum_(0..tau) R_theta = {q * s0} >= 1: "
                             "abundant range carries no mass")
        total[0] += n_tail * (-s0 / t + r0 / m)
        total[1:] += n_tail * (-q * sd0 / t + q * rd0 / m)
    return float(np.max(np.abs(total)) / data.d)


def asymptotic_covariance(family: Family, theta, q: float, tau: int,
                          d: int) -> tuple[np.ndarray, float]:
    """Asymptotic covariance of (q, theta) and the plug-in SE of the count.

    Returns (inverse information / d, se_n) where se_n is the delta-method
    standard error of D / (1 - q R_theta(0)) holding D fixed at d.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    info = fisher_information(family, theta, q, tau)
    cond = np.linalg.cond(info)
    if not np.isfinite(cond) or cond >= _COND_LIMIT:
        raise FitError(f"singular efficient information (condition number {cond:.3e})")
    cov = np.linalg.inv(info) / d
    theta = family.validate(theta)
    r0 = float(family.density(theta, 0))
    rd0 = family.grad_density(theta, 0)
    m = 1.0 - q * r0
    grad_n = np.empty(family.param_dim + 1)
    grad_n[0] = d * r0 / m**2
    grad_n[1:] = d * q * rd0 / m**2
    se_n = float(np.sqrt(grad_n @ cov @ grad_n))
    return cov, se_n

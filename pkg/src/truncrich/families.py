"""Parametric families for the rare-species abundance component.

Each family is a distribution R_theta on the non-negative integers with

* pointwise mass and log-mass evaluation,
* a closed-form gradient of the mass with respect to the parameters,
* a range-truncated version renormalized onto {1, ..., tau},
* a dilation theta -> theta^gamma representing a gamma-fold enlargement
  of the underlying sample (Poisson rates scale by gamma; the Gamma
  mixing scale of a negative binomial scales by gamma),
* seeded sampling.

Masses are computed in log space and exponentiated, so large abundances
and extreme rates stay inside float range; truncated densities are
normalized with log-sum-exp so they remain exact even when the raw
masses underflow.

Parameter vectors are plain float arrays:

* ``Poisson``: ``[rate]``
* ``NegativeBinomial``: ``[r, p]`` with p the zero-probability base,
  equivalently a Gamma(r, s) mixture of Poissons with p = 1/(1+s)
* ``PoissonMixture(J)``: ``[rate_1..rate_J, w_1..w_{J-1}]`` with the last
  weight completed to 1, so the dimension is 2J-1
* ``TruncatedPoissonSupport(m)``: ``[rate]``, a Poisson renormalized onto
  the finite support {0..m}; a test family for the disjoint-support case,
  excluded from dilation and from the CLI
"""

import math

import numpy as np
from scipy import special
from scipy.special import logsumexp

__all__ = [
    "Family",
    "Poisson",
    "NegativeBinomial",
    "PoissonMixture",
    "TruncatedPoissonSupport",
    "family_from_string",
]


def _poisson_log_pmf(x, rate):
    x = np.asarray(x, dtype=float)
    return x * math.log(rate) - rate - special.gammaln(x + 1.0)


class Family:
    """Common behaviour for the parametric rare-species families."""

    name: str = ""
    param_names: tuple[str, ...] = ()

    @property
    def param_dim(self) -> int:
        return len(self.param_names)

    def default_bounds(self) -> list[tuple[float, float]]:
        raise NotImplementedError

    def validate(self, theta) -> np.ndarray:
        """Return theta as a float array, checking domain membership."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != (self.param_dim,):
            raise ValueError(
                f"{self.name} expects {self.param_dim} parameter(s), got shape {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ValueError(f"{self.name} parameters must be finite, got {theta}")
        self._check_domain(theta)
        return theta

    def _check_domain(self, theta: np.ndarray) -> None:
        raise NotImplementedError

    def log_density(self, theta, x):
        raise NotImplementedError

    def density(self, theta, x):
        """Mass R_theta(x); vectorized over x."""
        return np.exp(self.log_density(theta, x))

    def grad_density(self, theta, x) -> np.ndarray:
        """Gradient of the mass in theta; shape (k,) or (len(x), k)."""
        raise NotImplementedError

    def truncated_log_masses(self, theta, tau: int) -> np.ndarray:
        """Log masses at 1..tau, not yet renormalized."""
        theta = self.validate(theta)
        return self.log_density(theta, np.arange(1, tau + 1))

    def truncated_density(self, theta, tau: int) -> np.ndarray:
        """Renormalized masses on {1..tau}; sums to 1 exactly."""
        if tau < 1:
            raise ValueError("tau must be >= 1")
        log_m = self.truncated_log_masses(theta, tau)
        norm = logsumexp(log_m)
        if not np.isfinite(norm):
            raise ValueError(f"{self.name} has zero mass on 1..{tau} at theta={theta}")
        s = np.exp(log_m - norm)
        return s / s.sum()

    def dilate(self, theta, gamma: float) -> np.ndarray:
        raise NotImplementedError(f"{self.name} does not support dilation")

    def sample(self, theta, count: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def sample_with_seed(self, theta, count: int, seed) -> np.ndarray:
        """Deterministic i.i.d. draws; same seed gives identical output."""
        return self.sample(theta, count, np.random.default_rng(seed))

    def support_cutoff(self, theta, tol: float = 1e-12) -> int:
        """Smallest X with total mass beyond X below ``tol``."""
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"

    def __eq__(self, other):
        return type(self) is type(other) and repr(self) == repr(other)

    def __hash__(self):
        return hash(repr(self))


class Poisson(Family):
    name = "poisson"
    param_names = ("rate",)

    def default_bounds(self):
        return [(1e-8, 1e4)]

    def _check_domain(self, theta):
        if theta[0] <= 0:
            raise ValueError(f"poisson rate must be > 0, got {theta[0]}")

    def log_density(self, theta, x):
        theta = self.validate(theta)
        return _poisson_log_pmf(x, theta[0])

    def grad_density(self, theta, x):
        theta = self.validate(theta)
        x = np.asarray(x, dtype=float)
        r = np.exp(_poisson_log_pmf(x, theta[0]))
        return (r * (x / theta[0] - 1.0))[..., None]

    def dilate(self, theta, gamma):
        theta = self.validate(theta)
        if gamma <= 0:
            raise ValueError("gamma must be > 0")
        return theta * gamma

    def sample(self, theta, count, rng):
        theta = self.validate(theta)
        return rng.poisson(theta[0], size=count).astype(np.int64)

    def support_cutoff(self, theta, tol=1e-12):
        theta = self.validate(theta)
        lam = theta[0]
        x = int(max(10, lam + 12 * math.sqrt(lam) + 20))
        while special.gammainc(x + 1.0, lam) > tol:  # upper Poisson tail P(X > x)
            x *= 2
        return x


class NegativeBinomial(Family):
    """Gamma-Poisson mixture with shape r and zero-base p = 1/(1+s)."""

    name = "negbin"
    param_names = ("r", "p")

    def default_bounds(self):
        return [(1e-3, 1e3), (1e-6, 1.0 - 1e-6)]

    def _check_domain(self, theta):
        r, p = theta
        if r <= 0:
            raise ValueError(f"negbin r must be > 0, got {r}")
        if not 0.0 < p < 1.0:
            raise ValueError(f"negbin p must be in (0,1), got {p}")

    def log_density(self, theta, x):
        theta = self.validate(theta)
        r, p = theta
        x = np.asarray(x, dtype=float)
        return (special.gammaln(x + r) - special.gammaln(r) - special.gammaln(x + 1.0)
                + r * math.log(p) + x * math.log1p(-p))

    def grad_log_density(self, theta, x) -> np.ndarray:
        theta = self.validate(theta)
        r, p = theta
        x = np.asarray(x, dtype=float)
        dr = special.digamma(x + r) - special.digamma(r) + math.log(p)
        dp = r / p - x / (1.0 - p)
        return np.stack([dr, dp], axis=-1)

    def grad_density(self, theta, x):
        mass = self.density(theta, x)
        return np.asarray(mass)[..., None] * self.grad_log_density(theta, x)

    def hess_log_density(self, theta, x) -> np.ndarray:
        """Second derivatives of log mass; shape (..., 2, 2)."""
        theta = self.validate(theta)
        r, p = theta
        x = np.asarray(x, dtype=float)
        drr = special.polygamma(1, x + r) - special.polygamma(1, r)
        drp = np.full_like(x, 1.0 / p)
        dpp = -r / p**2 - x / (1.0 - p) ** 2
        h = np.empty(x.shape + (2, 2))
        h[..., 0, 0] = drr
        h[..., 0, 1] = h[..., 1, 0] = drp
        h[..., 1, 1] = dpp
        return h

    def from_gamma_scale(self, r: float, s: float) -> np.ndarray:
        """Convert the Gamma(r, s) mixing view to the (r, p) vector."""
        if s <= 0:
            raise ValueError("gamma scale s must be > 0")
        return np.array([r, 1.0 / (1.0 + s)])

    def gamma_scale(self, theta) -> float:
        theta = self.validate(theta)
        return (1.0 - theta[1]) / theta[1]

    def dilate(self, theta, gamma):
        theta = self.validate(theta)
        if gamma <= 0:
            raise ValueError("gamma must be > 0")
        r, p = theta
        return np.array([r, p / (p + gamma * (1.0 - p))])

    def sample(self, theta, count, rng):
        theta = self.validate(theta)
        r, p = theta
        return rng.negative_binomial(r, p, size=count).astype(np.int64)

    def support_cutoff(self, theta, tol=1e-12):
        theta = self.validate(theta)
        r, p = theta
        x = int(max(10, 4 * r * (1 - p) / p + 20))
        while special.betainc(x + 1.0, r, 1.0 - p) > tol:  # P(X > x)
            x *= 2
        return x


class PoissonMixture(Family):
    """Finite mixture of Poissons with J - 1 free weights."""

    def __init__(self, n_components: int):
        if n_components < 2:
            raise ValueError("poisson mixture needs at least 2 components")
        self.n_components = n_components
        self.param_names = tuple(
            [f"rate_{j+1}" for j in range(n_components)]
            + [f"weight_{j+1}" for j in range(n_components - 1)])

    @property
    def name(self):
        return f"poisson-mixture:{self.n_components}"

    def default_bounds(self):
        j = self.n_components
        return [(1e-8, 1e4)] * j + [(1e-9, 1.0 - 1e-9)] * (j - 1)

    def _check_domain(self, theta):
        j = self.n_components
        rates, w = theta[:j], theta[j:]
        if np.any(rates <= 0):
            raise ValueError(f"mixture rates must be > 0, got {rates}")
        if np.any(w <= 0) or w.sum() >= 1.0:
            raise ValueError(f"free weights must be positive with sum < 1, got {w}")

    def split(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """Return (rates, full weight vector) including the completed weight."""
        theta = self.validate(theta)
        j = self.n_components
        rates = theta[:j]
        weights = np.append(theta[j:], 1.0 - theta[j:].sum())
        return rates, weights

    def join(self, rates, weights) -> np.ndarray:
        return np.concatenate([np.asarray(rates, float), np.asarray(weights, float)[:-1]])

    def log_density(self, theta, x):
        rates, weights = self.split(theta)
        x = np.asarray(x, dtype=float)
        comp = np.stack([_poisson_log_pmf(x, lam) for lam in rates], axis=-1)
        return logsumexp(comp, axis=-1, b=weights)

    def grad_density(self, theta, x):
        rates, weights = self.split(theta)
        x = np.asarray(x, dtype=float)
        comp_mass = np.stack([np.exp(_poisson_log_pmf(x, lam)) for lam in rates], axis=-1)
        j = self.n_components
        g = np.empty(x.shape + (2 * j - 1,))
        for i, lam in enumerate(rates):
            g[..., i] = weights[i] * comp_mass[..., i] * (x / lam - 1.0)
        for i in range(j - 1):
            g[..., j + i] = comp_mass[..., i] - comp_mass[..., j - 1]
        return g

    def dilate(self, theta, gamma):
        if gamma <= 0:
            raise ValueError("gamma must be > 0")
        rates, weights = self.split(theta)
        return self.join(rates * gamma, weights)

    def sample(self, theta, count, rng):
        rates, weights = self.split(theta)
        comps = rng.choice(self.n_components, size=count, p=weights)
        return rng.poisson(rates[comps]).astype(np.int64)

    def support_cutoff(self, theta, tol=1e-12):
        rates, _ = self.split(theta)
        return max(Poisson().support_cutoff([lam], tol) for lam in rates)

    def __repr__(self):
        return f"PoissonMixture({self.n_components})"


class TruncatedPoissonSupport(Family):
    """Poisson renormalized onto the finite support {0..tau_support}."""

    name = "truncated-poisson-support"
    param_names = ("rate",)

    def __init__(self, tau_support: int):
        if tau_support < 1:
            raise ValueError("tau_support must be >= 1")
        self.tau_support = tau_support

    def default_bounds(self):
        return [(1e-8, 1e4)]

    def _check_domain(self, theta):
        if theta[0] <= 0:
            raise ValueError(f"rate must be > 0, got {theta[0]}")

    def _log_norm(self, rate: float) -> float:
        # log P(Poisson(rate) <= tau_support), via the support masses directly
        return float(logsumexp(_poisson_log_pmf(np.arange(self.tau_support + 1), rate)))

    def log_density(self, theta, x):
        theta = self.validate(theta)
        x_arr = np.asarray(x, dtype=float)
        out = _poisson_log_pmf(x_arr, theta[0]) - self._log_norm(theta[0])
        return np.where(x_arr <= self.tau_support, out, -np.inf)

    def grad_density(self, theta, x):
        theta = self.validate(theta)
        rate = theta[0]
        x_arr = np.asarray(x, dtype=float)
        mass = np.exp(self.log_density(theta, x_arr))
        support = np.arange(self.tau_support + 1)
        s_mass = np.exp(_poisson_log_pmf(support, rate) - self._log_norm(rate))
        # d/dtheta log norm = truncated-support mean / rate - 1
        dlog_norm = (support * s_mass).sum() / rate - 1.0
        grad = mass * ((x_arr / rate - 1.0) - dlog_norm)
        return np.where(x_arr <= self.tau_support, grad, 0.0)[..., None]

    def sample(self, theta, count, rng):
        theta = self.validate(theta)
        out = np.empty(0, dtype=np.int64)
        while out.size < count:
            draw = rng.poisson(theta[0], size=max(count - out.size, 16) * 2)
            out = np.concatenate([out, draw[draw <= self.tau_support]])
        return out[:count]

    def support_cutoff(self, theta, tol=1e-12):
        return self.tau_support

    def __repr__(self):
        return f"TruncatedPoissonSupport({self.tau_support})"


def family_from_string(spec: str) -> Family:
    """Parse CLI family strings: poisson, negbin, poisson-mixture:J."""
    spec = spec.strip().lower()
    if spec == "poisson":
        return Poisson()
    if spec in ("negbin", "negative-binomial"):
        return NegativeBinomial()
    if spec.startswith("poisson-mixture:"):
        try:
            j = int(spec.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad mixture component count in {spec!r}") from None
        return PoissonMixture(j)
    raise ValueError(
        f"unknown family {spec!r}; expected poisson, negbin, or poisson-mixture:J")

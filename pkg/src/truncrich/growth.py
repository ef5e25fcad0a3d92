"""Observational richness: distinct-count forecasts for enlarged samples.

Enlarging the underlying sample by a factor gamma dilates the rare
family's parameters (Poisson rates scale by gamma, the Gamma mixing
scale of a negative binomial scales by gamma), while the species count
stays fixed.  Equating the two views of the count gives the forecast

    E_gamma[D] = D * (1 - q R_{theta^gamma}(0)) / (1 - q R_theta(0)),

which grows from D (gamma = 1) toward the species-count estimate as
gamma increases.  The classic use case is vocabulary growth: observe a
prefix of a text, fit word-frequency counts, and predict the number of
distinct words in the whole text with gamma = 1 / fraction observed.

Tokenization: text is case-folded, and a token is a maximal run of
alphabetic characters, allowing internal apostrophes and hyphens so
French elisions ("l'art") and compounds stay single words.
"""

import math
import re
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from typing import IO

import numpy as np

from .counts import CountData
from .families import Family, NegativeBinomial
from .fit import FitOptions, FitResult, fit_full
from .selection import select_tau

__all__ = [
    "GrowthCurve",
    "GrowthPoint",
    "extrapolate",
    "growth_curve",
    "tokenize",
    "tokens",
    "growth_experiment",
    "bundled_corpus_path",
    "load_bundled_corpus",
]

_TOKEN_RE = re.compile(r"[^\W\d_]+(?:['’\-‐][^\W\d_]+)*")


def extrapolate(fit: FitResult, family: Family, gamma: float) -> float:
    """Expected distinct-species count in a gamma-fold enlarged sample."""
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    if family.name != fit.family:
        raise ValueError(f"family {family.name!r} does not match fit {fit.family!r}")
    theta = np.asarray(fit.theta_hat, dtype=float)
    if gamma == 1.0:
        return float(fit.d)
    theta_g = family.dilate(theta, gamma)
    base = 1.0 - fit.q_hat * float(family.density(theta, 0))
    grown = 1.0 - fit.q_hat * float(family.density(theta_g, 0))
    if base <= 0.0:
        raise ValueError("q * R_theta(0) >= 1; extrapolation undefined")
    return fit.d * grown / base


@dataclass
class GrowthCurve:
    """Extrapolated distinct counts over a grid of enlargement factors."""

    points: list[tuple[float, float]]
    base_d: int
    fit: FitResult

    def to_csv(self) -> str:
        lines = ["gamma,e_gamma_d"]
        lines += [f"{g:.12g},{v:.12g}" for g, v in self.points]
        return "\n".join(lines) + "\n"


def growth_curve(fit: FitResult, family: Family, gammas) -> GrowthCurve:
    points = [(float(g), extrapolate(fit, family, float(g))) for g in gammas]
    return GrowthCurve(points=points, base_d=fit.d, fit=fit)


def tokens(text: str | bytes | IO) -> list[str]:
    """Case-folded word tokens in reading order."""
    if hasattr(text, "read"):
        text = text.read()
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    return _TOKEN_RE.findall(text.casefold())


def tokenize(text: str | bytes | IO) -> CountData:
    """Word-frequency histogram of a text: n_x species (words) seen x times."""
    word_counts = Counter(tokens(text))
    fof = Counter(word_counts.values())
    return CountData(dict(fof), provenance="text")


@dataclass
class GrowthPoint:
    """One prefix-extrapolation outcome of a growth experiment."""

    fraction: float
    gamma: float
    tau_used: int
    predicted: float
    true: int


def growth_experiment(text: str | bytes | IO, family: Family | None = None,
                      fractions=(0.2, 0.4, 0.6, 0.8, 1.0),
                      tau: int | str = "auto", seed: int = 0,
                      m_boot: int = 100,
                      selection_target: str = "P0") -> list[GrowthPoint]:
    """Predict whole-text vocabulary from prefixes of given fractions.

    For each fraction rho, fits the model on the first ceil(rho * n)
    tokens (threshold fixed or selected) and extrapolates with
    gamma = 1/rho; the full-text distinct-word count is the ground truth
    paired with each prediction.
    """
    family = family if family is not None else NegativeBinomial()
    toks = tokens(text)
    if not toks:
        raise ValueError("no tokens in input text")
    full_vocab = len(set(toks))
    out: list[GrowthPoint] = []
    for rho in fractions:
        rho = float(rho)
        if not 0.0 < rho <= 1.0:
            raise ValueError(f"fractions must lie in (0, 1], got {rho}")
        prefix = toks[:math.ceil(rho * len(toks))]
        data = tokenize(" ".join(prefix))
        if tau == "auto":
            trace = select_tau(data, family, m_boot=m_boot, seed=seed,
                               target=selection_target)
            tau_used = trace.selected_tau
        else:
            tau_used = int(tau)
        result = fit_full(data, family, FitOptions(tau=tau_used))
        gamma = 1.0 / rho
        out.append(GrowthPoint(fraction=rho, gamma=gamma, tau_used=tau_used,
                               predicted=extrapolate(result, family, gamma),
                               true=full_vocab))
    return out


def growth_points_csv(points: list[GrowthPoint]) -> str:
    lines = ["fraction,gamma,predicted,true,tau_used"]
    lines += [f"{p.fraction:.12g},{p.gamma:.12g},{p.predicted:.12g},{p.true},{p.tau_used}"
              for p in points]
    return "\n".join(lines) + "\n"


def bundled_corpus_path():
    """Path-like handle on the bundled public-domain French anthology."""
    return resources.files(__package__).joinpath("data/french_anthology.txt")


def load_bundled_corpus() -> str:
    return bundled_corpus_path().read_text(encoding="utf-8")

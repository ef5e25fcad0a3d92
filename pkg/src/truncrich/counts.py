"""Frequency-of-frequencies count data and its text formats.

Observed abundance data is stored sparsely as a map ``x -> n_x`` where
``n_x`` is the number of species seen exactly ``x`` times.  Zero counts
never appear: a species with abundance 0 is by definition unobserved, so
every stored abundance is >= 1 and every stored frequency is >= 1 (absent
keys mean zero).

Two text formats are supported:

``pairs``
    lines of ``x n_x`` separated by whitespace; duplicate ``x`` lines are
    summed so that concatenated count files load cleanly.

``raw``
    one positive abundance per line, one line per observed species.

``#``-prefixed comment lines and blank lines are ignored in both formats.
"""

from collections import Counter
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np

MAX_ABUNDANCE = 2**31 - 1


class CountFormatError(ValueError):
    """Malformed count input; carries the offending 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class CountData:
    """Immutable frequency-of-frequencies histogram.

    Attributes:
        counts: map from abundance value x (>= 1) to frequency n_x (>= 1).
        provenance: optional source descriptor (file path or "synthetic").
    """

    counts: dict[int, int]
    provenance: str = "unknown"
    _xs: np.ndarray = field(init=False, repr=False, compare=False)
    _ns: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        clean: dict[int, int] = {}
        for x, n in self.counts.items():
            x = int(x)
            n = int(n)
            if x < 1:
                raise ValueError(f"abundance values must be >= 1, got {x}")
            if x > MAX_ABUNDANCE:
                raise ValueError(f"abundance value {x} exceeds {MAX_ABUNDANCE}")
            if n < 1:
                raise ValueError(f"frequency for abundance {x} must be >= 1, got {n}")
            clean[x] = n
        xs = np.array(sorted(clean), dtype=np.int64)
        ns = np.array([clean[x] for x in xs], dtype=np.int64)
        object.__setattr__(self, "counts", clean)
        object.__setattr__(self, "_xs", xs)
        object.__setattr__(self, "_ns", ns)

    @classmethod
    def from_abundances(cls, abundances: Iterable[int], provenance: str = "unknown") -> "CountData":
        """Aggregate raw per-species abundances into a histogram."""
        return cls(dict(Counter(int(a) for a in abundances)), provenance)

    @property
    def d(self) -> int:
        """Number of distinct observed species, sum of all frequencies."""
        return int(self._ns.sum())

    @property
    def max_abundance(self) -> int:
        return int(self._xs[-1]) if self._xs.size else 0

    def n(self, x: int) -> int:
        """Frequency of abundance ``x`` (0 when unobserved)."""
        return self.counts.get(x, 0)

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Sorted (abundances, frequencies) arrays; do not mutate."""
        return self._xs, self._ns

    def d_tau(self, tau: int) -> int:
        """Number of species with abundance no greater than ``tau``."""
        if tau < 1:
            raise ValueError("tau must be >= 1")
        return int(self._ns[self._xs <= tau].sum())

    def truncated_mean(self, tau: int) -> float:
        """Mean abundance among species with abundance <= ``tau``.

        Raises ValueError when no species fall in the rare range.
        """
        mask = self._xs <= tau
        d_tau = int(self._ns[mask].sum())
        if d_tau == 0:
            raise ValueError(f"insufficient rare data: no species with abundance <= {tau}")
        return float((self._xs[mask] * self._ns[mask]).sum() / d_tau)

    def abundances(self) -> np.ndarray:
        """Expand back to one abundance per species (sorted)."""
        return np.repeat(self._xs, self._ns)


def _decoded_lines(source: IO | Iterable[str] | str | bytes) -> Iterable[str]:
    if isinstance(source, bytes):
        yield from source.decode("utf-8").splitlines()
        return
    if isinstance(source, str):
        yield from source.splitlines()
        return
    for line in source:
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        yield line


def _parse_positive_int(token: str, what: str, lineno: int) -> int:
    try:
        value = int(token)
    except ValueError:
        raise CountFormatError(f"expected integer {what}, got {token!r}", lineno) from None
    if value <= 0:
        raise CountFormatError(f"{what} must be positive, got {value}", lineno)
    if value > MAX_ABUNDANCE:
        raise CountFormatError(f"{what} {value} exceeds {MAX_ABUNDANCE}", lineno)
    return value


def load_counts(source: IO | Iterable[str] | str | bytes, format: str = "pairs",
                provenance: str = "stream") -> CountData:
    """Parse count data from a text stream.

    Args:
        source: file object, bytes, or string holding UTF-8 text.
        format: "pairs" for ``x n_x`` lines, "raw" for one abundance per line.
        provenance: recorded on the returned CountData.

    Raises:
        CountFormatError: malformed line (message carries the line number),
            non-positive values, or an empty dataset.
    """
    if format not in ("pairs", "raw"):
        raise ValueError(f"unknown counts format {format!r}")
    counts: Counter[int] = Counter()
    for lineno, line in enumerate(_decoded_lines(source), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = stripped.split()
        if format == "pairs":
            if len(fields) != 2:
                raise CountFormatError(
                    f"expected 'x n_x', got {len(fields)} fields", lineno)
            x = _parse_positive_int(fields[0], "abundance", lineno)
            n = _parse_positive_int(fields[1], "frequency", lineno)
            counts[x] += n
        else:
            if len(fields) != 1:
                raise CountFormatError(
                    f"expected a single abundance, got {len(fields)} fields", lineno)
            x = _parse_positive_int(fields[0], "abundance", lineno)
            counts[x] += 1
    if not counts:
        raise CountFormatError("empty dataset: no count lines found")
    return CountData(dict(counts), provenance)


def read_counts_file(path: str, format: str = "pairs") -> CountData:
    """Load count data from a UTF-8 text file."""
    with open(path, "rb") as fh:
        return load_counts(fh, format=format, provenance=str(path))

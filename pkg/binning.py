"""
Outcome discretization into right-closed bins (a_k, a_{k+1}]

Bin k (1-based) holds every value v with a_k < v <= a_{k+1}; the first bin also
holds v == a_1 so the minimum is never orphaned.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Mapping, Tuple

import numpy as np

from errors import BinningError

logger = logging.getLogger(__name__)


class BinScheme(str, Enum):
    EQUAL_WIDTH = "equal_width"
    QUANTILE = "quantile"


@dataclass(frozen=True)
class BinEdges:
    edges: Tuple[float, ...]
    scheme: BinScheme
    # m asked for; `m` below is what the data allowed
    requested_m: int

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "scheme", BinScheme(self.scheme))
        if len(edges) < 2:
            raise BinningError("bin edges need at least two boundaries")
        if not all(np.isfinite(edges)):
            raise BinningError("bin edges must be finite")
        # A single degenerate bin [v, v] is allowed for constant data
        degenerate = len(edges) == 2 and edges[0] == edges[1]
        if not degenerate and any(b <= a for a, b in zip(edges, edges[1:])):
            raise BinningError(f"bin edges must be strictly increasing: {edges}")

    @property
    def m(self) -> int:
        return len(self.edges) - 1

    @property
    def realized_m(self) -> int:
        return self.m

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scheme": self.scheme.value,
            "edges": list(self.edges),
            "requested_m": self.requested_m,
            "realized_m": self.m,
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "BinEdges":
        return cls(tuple(payload["edges"]), BinScheme(payload["scheme"]), int(payload["requested_m"]))


@dataclass(frozen=True, eq=False)
class BinLabels:
    """Per-row bin index in 1..m, aligned with Dataset row order"""

    values: np.ndarray
    m: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.int64)
        if values.size and (values.min() < 1 or values.max() > self.m):
            raise BinningError(f"bin labels must lie in 1..{self.m}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.size)

    def counts(self) -> np.ndarray:
        """Occupancy of bins 1..m"""
        return np.bincount(self.values - 1, minlength=self.m)

    def zero_based(self) -> np.ndarray:
        return self.values - 1


def _validated(values) -> np.ndarray:
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size == 0:
        raise BinningError("cannot bin an empty vector")
    if not np.isfinite(arr).all():
        raise BinningError("values to bin must be finite")
    return arr


def equal_width_bins(values, m: int) -> BinEdges:
    """m intervals of equal width spanning [min, max]"""
    if m < 1:
        raise BinningError(f"bin count must be >= 1, got {m}")
    arr = _validated(values)
    lo, hi = float(arr.min()), float(arr.max())
    if lo == hi:
        if m == 1:
            return BinEdges((lo, hi), BinScheme.EQUAL_WIDTH, 1)
        raise BinningError(
            f"all values equal {lo}: equal-width bins have zero width; "
            "use quantile_bins or m=1"
        )
    edges = np.linspace(lo, hi, m + 1)
    edges[0], edges[-1] = lo, hi
    return BinEdges(tuple(edges), BinScheme.EQUAL_WIDTH, m)


def quantile_bins(values, m: int) -> BinEdges:
    """Equal-frequency bins from order statistics at positions ceil(k n / m)

    Ties can merge edges; the realized bin count is then smaller than m and
    reported through `BinEdges.m`.
    """
    if m < 1:
        raise BinningError(f"bin count must be >= 1, got {m}")
    arr = np.sort(_validated(values))
    n = arr.size
    if m > n:
        raise BinningError(f"cannot build {m} quantile bins from {n} values")

    inner = [arr[-(-k * n // m) - 1] for k in range(1, m)]
    raw = np.array([arr[0], *inner, arr[-1]], dtype=float)
    edges = np.unique(raw)
    if edges.size == 1:
        edges = np.array([arr[0], arr[0]])
    if edges.size - 1 < m:
        logger.info("Quantile binning collapsed %d requested bins to %d", m, edges.size - 1)
    return BinEdges(tuple(edges), BinScheme.QUANTILE, m)


def make_bins(values, m: int, scheme: str) -> BinEdges:
    if BinScheme(scheme) == BinScheme.EQUAL_WIDTH:
        return equal_width_bins(values, m)
    return quantile_bins(values, m)


def assign_bins(values, edges: BinEdges, clamp: bool = False) -> BinLabels:
    """Map each value to its bin by binary search over the interior edges"""
    arr = np.asarray(values, dtype=float).ravel()
    if not np.isfinite(arr).all():
        raise BinningError("values to bin must be finite")
    lo, hi = edges.edges[0], edges.edges[-1]
    outside = (arr < lo) | (arr > hi)
    if outside.any():
        if not clamp:
            raise BinningError(
                f"{int(outside.sum())} value(s) outside [{lo}, {hi}] and clamping is disabled"
            )
        arr = np.clip(arr, lo, hi)
    interior = np.asarray(edges.edges[1:-1], dtype=float)
    # Count of interior edges strictly below v gives the right-closed bin
    labels = np.searchsorted(interior, arr, side="left") + 1
    return BinLabels(labels, edges.m)

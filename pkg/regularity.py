"""
Epsilon-regularity and quasi-randomness audits on weighted bipartite graphs

Left vertices are micro-causes, right vertices micro-effects (outcome bins),
and the weight of (x, y) is P(y | x). Partitions come from clustering or an
exact oracle; this module only audits them.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from clustering import Partition
from config import EXACT_CHUNK_ROWS, EXACT_MAX_CELL, SAMPLED_SUBSET_PAIRS
from density import CondDistMatrix
from errors import RegularityError

logger = logging.getLogger(__name__)

MODES = ("exact", "sampled")


@dataclass(frozen=True, eq=False)
class WeightedBipartiteGraph:
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 2:
            raise RegularityError("weight matrix must be 2-D (left x right)")
        if not np.isfinite(w).all() or (w < 0).any():
            raise RegularityError("weights must be finite and non-negative")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n_left(self) -> int:
        return self.weights.shape[0]

    @property
    def n_right(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def from_cond_dist(cls, cond: Union[CondDistMatrix, np.ndarray]) -> "WeightedBipartiteGraph":
        values = cond.values if isinstance(cond, CondDistMatrix) else cond
        return cls(values)

    @classmethod
    def from_scm(cls, scm, interventional: bool = False) -> "WeightedBipartiteGraph":
        """Micro-states x against bins, weighted by P(bin | x) or P(bin | do(x))"""
        return cls(scm.interventional_table() if interventional else scm.observational_table())

    def transposed(self) -> "WeightedBipartiteGraph":
        return WeightedBipartiteGraph(self.weights.T)

    def scaled(self, c: float) -> "WeightedBipartiteGraph":
        if c <= 0:
            raise RegularityError("scale factor must be positive")
        return WeightedBipartiteGraph(self.weights * c)

    def density(self, A: Sequence[int], B: Sequence[int]) -> float:
        """w(A, B) / (|A| |B|)"""
        A, B = list(A), list(B)
        if not A or not B:
            raise RegularityError("density needs non-empty vertex sets")
        return float(self.weights[np.ix_(A, B)].sum()) / (len(A) * len(B))


@dataclass(frozen=True)
class PairRegularity:
    regular: bool
    worst_deviation: float
    witness: Optional[Tuple[Tuple[int, ...], Tuple[int, ...]]]
    eps: float
    mode: str
    # sampled mode only certifies irregularity
    one_sided: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "regular": self.regular,
            "worst_deviation": self.worst_deviation,
            "witness": None if self.witness is None else [list(self.witness[0]), list(self.witness[1])],
            "eps": self.eps,
            "mode": self.mode,
            "one_sided": self.one_sided,
        }


def _admissible(size: int, eps: float) -> np.ndarray:
    """Subset sizes s with s > eps * size"""
    sizes = np.arange(1, size + 1)
    return sizes[sizes > eps * size]


def _subset_indicators(size: int, eps: float) -> np.ndarray:
    """0/1 rows for every subset with more than eps * size members, in bitmask order"""
    masks = np.arange(1, 2 ** size, dtype=np.int64)
    bits = ((masks[:, None] >> np.arange(size)) & 1).astype(float)
    return bits[bits.sum(axis=1) > eps * size]


def _check_sets(g: WeightedBipartiteGraph, A: Sequence[int], B: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    A = np.asarray(list(A), dtype=np.int64)
    B = np.asarray(list(B), dtype=np.int64)
    if A.size == 0 or B.size == 0:
        raise RegularityError("vertex sets must be non-empty")
    if np.unique(A).size != A.size or np.unique(B).size != B.size:
        raise RegularityError("vertex sets must not repeat vertices")
    if A.min() < 0 or A.max() >= g.n_left or B.min() < 0 or B.max() >= g.n_right:
        raise RegularityError("vertex index outside the graph")
    return A, B


def _exact_pair(W: np.ndarray, eps: float) -> Tuple[float, Optional[Tuple[np.ndarray, np.ndarray]]]:
    na, nb = W.shape
    if na > EXACT_MAX_CELL or nb > EXACT_MAX_CELL:
        raise RegularityError(
            f"exact mode enumerates at most {EXACT_MAX_CELL} vertices per side, got {na} x {nb}"
        )
    MA = _subset_indicators(na, eps)
    MB = _subset_indicators(nb, eps)
    if MA.shape[0] == 0 or MB.shape[0] == 0:
        return 0.0, None

    overall = W.sum() / (na * nb)
    sizes_b = MB.sum(axis=1)
    WB = W @ MB.T
    worst, witness = -1.0, None
    for start in range(0, MA.shape[0], EXACT_CHUNK_ROWS):
        chunk = MA[start:start + EXACT_CHUNK_ROWS]
        dens = (chunk @ WB) / np.outer(chunk.sum(axis=1), sizes_b)
        dev = np.abs(dens - overall)
        flat = int(np.argmax(dev))
        i, j = divmod(flat, dev.shape[1])
        if dev[i, j] > worst:
            worst = float(dev[i, j])
            witness = (chunk[i], MB[j])
    return worst, witness


def _sampled_indicators(rng: np.random.Generator, size: int, eps: float, samples: int) -> np.ndarray:
    sizes = rng.choice(_admissible(size, eps), size=samples)
    ranks = np.argsort(np.argsort(rng.random((samples, size)), axis=1), axis=1)
    return (ranks < sizes[:, None]).astype(float)


def _sampled_pair(
    W: np.ndarray, eps: float, samples: int, seed
) -> Tuple[float, Optional[Tuple[np.ndarray, np.ndarray]]]:
    na, nb = W.shape
    if _admissible(na, eps).size == 0 or _admissible(nb, eps).size == 0:
        return 0.0, None
    rng = np.random.default_rng(seed)
    MA = _sampled_indicators(rng, na, eps, samples)
    MB = _sampled_indicators(rng, nb, eps, samples)
    overall = W.sum() / (na * nb)
    dens = np.einsum("sa,ab,sb->s", MA, W, MB) / (MA.sum(axis=1) * MB.sum(axis=1))
    dev = np.abs(dens - overall)
    s = int(np.argmax(dev))
    return float(dev[s]), (MA[s], MB[s])


def pair_regularity(
    g: WeightedBipartiteGraph,
    A: Sequence[int],
    B: Sequence[int],
    eps: float,
    mode: str = "exact",
    samples: int = SAMPLED_SUBSET_PAIRS,
    seed=0,
) -> PairRegularity:
    """Is (A, B) eps-regular: every A' of A, B' of B with |A'| > eps|A|, |B'| > eps|B|
    has density within eps of the density of (A, B)?

    Exact mode enumerates every admissible subset pair. Sampled mode draws
    `samples` seeded pairs and can only prove irregularity.
    """
    if mode not in MODES:
        raise RegularityError(f"mode must be one of {MODES}, got '{mode}'")
    if eps <= 0:
        raise RegularityError("eps must be positive")
    A, B = _check_sets(g, A, B)
    W = g.weights[np.ix_(A, B)]
    if mode == "exact":
        worst, hit = _exact_pair(W, eps)
    else:
        worst, hit = _sampled_pair(W, eps, samples, seed)

    witness = None
    if hit is not None:
        witness = (
            tuple(int(v) for v in A[hit[0] > 0]),
            tuple(int(v) for v in B[hit[1] > 0]),
        )
    return PairRegularity(worst < eps, worst, witness, eps, mode, one_sided=mode == "sampled")


@dataclass(frozen=True)
class QuasiRandomness:
    beta: float
    d_upper: float
    d_lower: float
    mode: str

    @property
    def D_hat(self) -> float:
        """Smallest D with 1/D <= ratio <= D over the checked pairs; inf if some density is 0"""
        if self.d_lower <= 0.0:
            return float("inf")
        return max(self.d_upper, 1.0 / self.d_lower)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "beta": self.beta,
            "d_upper": self.d_upper,
            "d_lower": self.d_lower,
            "D_hat": self.D_hat,
            "mode": self.mode,
            "lower_bound_only": self.mode == "sampled",
        }


def quasi_randomness(
    g: WeightedBipartiteGraph,
    beta: float,
    mode: str = "exact",
    samples: int = SAMPLED_SUBSET_PAIRS,
    seed=0,
) -> QuasiRandomness:
    """Range of density ratios (A, B) / (L, R) over A, B larger than beta of their side"""
    if not 0 < beta < 1:
        raise RegularityError("beta must lie strictly between 0 and 1")
    if mode not in MODES:
        raise RegularityError(f"mode must be one of {MODES}, got '{mode}'")
    W = g.weights
    total = W.sum()
    if total <= 0:
        raise RegularityError("total edge weight is zero")
    na, nb = W.shape
    global_density = total / (na * nb)

    if mode == "exact":
        if na > EXACT_MAX_CELL or nb > EXACT_MAX_CELL:
            raise RegularityError(
                f"exact mode enumerates at most {EXACT_MAX_CELL} vertices per side, got {na} x {nb}"
            )
        MA = _subset_indicators(na, beta)
        MB = _subset_indicators(nb, beta)
        sizes_b = MB.sum(axis=1)
        WB = W @ MB.T
        hi, lo = -np.inf, np.inf
        for start in range(0, MA.shape[0], EXACT_CHUNK_ROWS):
            chunk = MA[start:start + EXACT_CHUNK_ROWS]
            ratio = (chunk @ WB) / np.outer(chunk.sum(axis=1), sizes_b) / global_density
            hi, lo = max(hi, float(ratio.max())), min(lo, float(ratio.min()))
    else:
        rng = np.random.default_rng(seed)
        MA = _sampled_indicators(rng, na, beta, samples)
        MB = _sampled_indicators(rng, nb, beta, samples)
        ratio = np.einsum("sa,ab,sb->s", MA, W, MB) / (MA.sum(axis=1) * MB.sum(axis=1)) / global_density
        hi, lo = float(ratio.max()), float(ratio.min())
    return QuasiRandomness(beta, hi, lo, mode)


@dataclass(frozen=True)
class CellPairResult:
    left_cell: int
    right_cell: int
    result: PairRegularity

    def to_dict(self) -> Dict[str, Any]:
        return {"left_cell": self.left_cell, "right_cell": self.right_cell, **self.result.to_dict()}


@dataclass(frozen=True)
class RegularityReport:
    eps: float
    pairs: Tuple[CellPairResult, ...] = field(default_factory=tuple)
    left_cells: int = 0
    right_cells: int = 0

    @property
    def total_pairs(self) -> int:
        return len(self.pairs)

    @property
    def irregular_pairs(self) -> int:
        return sum(not p.result.regular for p in self.pairs)

    @property
    def allowed_irregular(self) -> float:
        return self.eps * self.left_cells * self.right_cells

    @property
    def partition_regular(self) -> bool:
        """All but at most eps * l_x * l_y cell pairs are regular"""
        return self.irregular_pairs <= self.allowed_irregular

    @property
    def one_sided(self) -> bool:
        return any(p.result.one_sided for p in self.pairs)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "eps": self.eps,
            "left_cells": self.left_cells,
            "right_cells": self.right_cells,
            "total_pairs": self.total_pairs,
            "irregular_pairs": self.irregular_pairs,
            "irregular_fraction": self.irregular_pairs / self.total_pairs if self.pairs else 0.0,
            "allowed_irregular": self.allowed_irregular,
            "partition_regular": self.partition_regular,
            "one_sided": self.one_sided,
            "pairs": [p.to_dict() for p in self.pairs],
        }


def _cells(labels: Union[Partition, Sequence[int]], n: int, side: str) -> List[np.ndarray]:
    arr = labels.labels if isinstance(labels, Partition) else np.asarray(labels, dtype=np.int64)
    if arr.size != n:
        raise RegularityError(f"{side} partition has {arr.size} labels for {n} vertices")
    return [np.flatnonzero(arr == c) for c in np.unique(arr)]


def partition_regularity_report(
    g: WeightedBipartiteGraph,
    px: Union[Partition, Sequence[int]],
    py: Union[Partition, Sequence[int]],
    eps: float,
    mode: str = "exact",
    sampled_fallback: bool = False,
    samples: int = SAMPLED_SUBSET_PAIRS,
    seed: int = 0,
    n_jobs: int = 1,
) -> RegularityReport:
    """Check every cross pair of cells; cells too large for exact mode go to sampling if allowed"""
    left = _cells(px, g.n_left, "left")
    right = _cells(py, g.n_right, "right")

    jobs = []
    for i, A in enumerate(left):
        for j, B in enumerate(right):
            pair_mode = mode
            if mode == "exact" and max(A.size, B.size) > EXACT_MAX_CELL:
                if not sampled_fallback:
                    raise RegularityError(
                        f"cell pair ({i}, {j}) is {A.size} x {B.size}; exact mode allows "
                        f"{EXACT_MAX_CELL} per side and sampled fallback is disabled"
                    )
                logger.info("Cell pair (%d, %d) too large for exact mode; sampling", i, j)
                pair_mode = "sampled"
            jobs.append((i, j, A, B, pair_mode))

    results = Parallel(n_jobs=n_jobs)(
        delayed(pair_regularity)(g, A, B, eps, pair_mode, samples, [seed, i, j])
        for i, j, A, B, pair_mode in jobs
    )
    pairs = tuple(CellPairResult(i, j, r) for (i, j, _, _, _), r in zip(jobs, results))
    report = RegularityReport(eps, pairs, len(left), len(right))
    logger.info(
        "Regularity audit: %d of %d cell pair(s) irregular at eps=%.3g (allowed %.2f)",
        report.irregular_pairs, report.total_pairs, eps, report.allowed_irregular,
    )
    return report

"""
Exact ground truth on small discrete structural causal models

An SCM here is Z -> X, (X, Z) -> Y with Y already binned:
    gamma[z]       = P(z)
    beta[x, z]     = P(x | z)
    alpha[k, x, z] = P(Y in bin k | x, z)
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import jsonschema
import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

from config import ANALYTIC_TOL, DEGENERATE_MARGIN, DEFAULT_CCT_DIMS
from data_model import Dataset, from_frame
from errors import ZeroProbabilityError

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9

FAMILIES = ("unconstrained", "unconfounded")
SIDES = ("x", "y")


def _normalized_exponentials(rng: np.random.Generator, shape: Tuple[int, ...], axis: int) -> np.ndarray:
    """Flat Dirichlet draws along `axis`"""
    draws = rng.exponential(size=shape)
    return draws / draws.sum(axis=axis, keepdims=True)


@dataclass(frozen=True, eq=False)
class SyntheticSCM:
    gamma: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        gamma = np.array(self.gamma, dtype=float)
        beta = np.array(self.beta, dtype=float)
        alpha = np.array(self.alpha, dtype=float)
        if gamma.ndim != 1 or beta.ndim != 2 or alpha.ndim != 3:
            raise ValueError("gamma, beta and alpha must be 1-, 2- and 3-dimensional")
        nz = gamma.size
        if beta.shape[1] != nz or alpha.shape[1:] != beta.shape:
            raise ValueError(
                f"shape mismatch: gamma {gamma.shape}, beta {beta.shape}, alpha {alpha.shape}"
            )
        for name, arr, axis in (("gamma", gamma, 0), ("beta", beta, 0), ("alpha", alpha, 0)):
            if not np.isfinite(arr).all() or (arr < 0).any():
                raise ValueError(f"{name} must be finite and non-negative")
            if not np.allclose(arr.sum(axis=axis), 1.0, atol=SIMPLEX_TOL, rtol=0.0):
                raise ValueError(f"{name} does not sum to 1 along its distribution axis")
        for arr in (gamma, beta, alpha):
            arr.setflags(write=False)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)

    @property
    def dims(self) -> Tuple[int, int, int]:
        """(|Z|, |X|, m)"""
        return self.gamma.size, self.beta.shape[0], self.alpha.shape[0]

    @classmethod
    def random(
        cls,
        dims: Tuple[int, int, int] = DEFAULT_CCT_DIMS,
        rng: Optional[np.random.Generator] = None,
        family: str = "unconstrained",
    ) -> "SyntheticSCM":
        """Uniform simplex draws; the unconfounded family makes alpha ignore z"""
        if family not in FAMILIES:
            raise ValueError(f"unknown SCM family '{family}'")
        rng = rng if rng is not None else np.random.default_rng(0)
        nz, nx, m = dims
        gamma = _normalized_exponentials(rng, (nz,), axis=0)
        beta = _normalized_exponentials(rng, (nx, nz), axis=0)
        if family == "unconfounded":
            alpha = np.repeat(_normalized_exponentials(rng, (m, nx), axis=0)[:, :, None], nz, axis=2)
        else:
            alpha = _normalized_exponentials(rng, (m, nx, nz), axis=0)
        return cls(gamma, beta, alpha)

    def marginal_x(self) -> np.ndarray:
        return self.beta @ self.gamma

    def observational_table(self) -> np.ndarray:
        """P(bin k | x) as an |X| x m matrix"""
        px = self.marginal_x()
        zero = np.flatnonzero(px <= 0.0)
        if zero.size:
            raise ZeroProbabilityError(f"micro-state(s) {zero.tolist()} have P(x) = 0")
        joint = np.einsum("z,xz,kxz->xk", self.gamma, self.beta, self.alpha)
        return joint / px[:, None]

    def interventional_table(self) -> np.ndarray:
        """P(bin k | do(x)) as an |X| x m matrix; do(x) cuts Z -> X"""
        return np.einsum("z,kxz->xk", self.gamma, self.alpha)

    def to_dict(self) -> Dict[str, Any]:
        return {"gamma": self.gamma.tolist(), "beta": self.beta.tolist(), "alpha": self.alpha.tolist()}

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "SyntheticSCM":
        return cls(payload["gamma"], payload["beta"], payload["alpha"])


@dataclass(frozen=True)
class ExactPartition:
    """Equivalence class per micro-state; classes numbered by first appearance"""

    labels: Tuple[int, ...]

    @property
    def count(self) -> int:
        return len(set(self.labels))

    def __len__(self) -> int:
        return len(self.labels)

    def classes(self) -> List[List[int]]:
        out: Dict[int, List[int]] = {}
        for state, label in enumerate(self.labels):
            out.setdefault(label, []).append(state)
        return [out[c] for c in sorted(out)]


def tolerance_partition(vectors, tol: float = ANALYTIC_TOL) -> ExactPartition:
    """Canonical grouping of rows whose entries agree within `tol` (max-abs)

    Classes are the connected components of the within-tol relation, i.e. its
    transitive closure. This contains every run of lexicographically
    consecutive rows within tol, and also joins equal rows that roundoff in a
    leading entry pushed apart in that order. Labels follow first appearance.
    """
    V = np.atleast_2d(np.asarray(vectors, dtype=float))
    close = cdist(V, V, metric="chebyshev") <= tol
    _, closure = connected_components(csr_matrix(close), directed=False)

    canonical: Dict[int, int] = {}
    labels = []
    for g in closure.tolist():
        canonical.setdefault(g, len(canonical))
        labels.append(canonical[g])
    return ExactPartition(tuple(labels))


def _side_vectors(table: np.ndarray, side: str) -> np.ndarray:
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}, got '{side}'")
    return table if side == "x" else table.T


def observational_partition(scm: SyntheticSCM, tol: float = ANALYTIC_TOL, side: str = "x") -> ExactPartition:
    """x1 ~ x2 iff P(Y | x1) and P(Y | x2) agree within tol; side='y' partitions bins instead"""
    return tolerance_partition(_side_vectors(scm.observational_table(), side), tol)


def causal_partition(scm: SyntheticSCM, tol: float = ANALYTIC_TOL, side: str = "x") -> ExactPartition:
    return tolerance_partition(_side_vectors(scm.interventional_table(), side), tol)


def confounding_partition(scm: SyntheticSCM, tol: float = ANALYTIC_TOL) -> ExactPartition:
    """x1 ~ x2 iff P(x1 | z) and P(x2 | z) agree for every z"""
    return tolerance_partition(scm.beta, tol)


def is_coarsening(coarse: ExactPartition, fine: ExactPartition) -> bool:
    """True iff every class of `fine` sits inside one class of `coarse`"""
    if len(coarse) != len(fine):
        raise ValueError(f"partitions cover different ground sets ({len(coarse)} vs {len(fine)} states)")
    seen: Dict[int, int] = {}
    for f, c in zip(fine.labels, coarse.labels):
        if seen.setdefault(f, c) != c:
            return False
    return True


def _min_pair_gap(table: np.ndarray) -> float:
    if table.shape[0] < 2:
        return np.inf
    gaps = np.abs(table[:, None, :] - table[None, :, :]).max(axis=2)
    return float(gaps[np.triu_indices(table.shape[0], k=1)].min())


CCT_REPORT_SCHEMA: Dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "coarsening Monte Carlo report",
    "type": "object",
    "required": [
        "dims", "trials", "seed", "tol", "side", "family",
        "violations", "degenerate_draws", "degenerate_violations",
        "equal_partitions", "violating_trials",
    ],
    "properties": {
        "dims": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
        "trials": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer"},
        "tol": {"type": "number"},
        "side": {"enum": list(SIDES)},
        "family": {"enum": list(FAMILIES)},
        "violations": {"type": "integer", "minimum": 0},
        "degenerate_draws": {"type": "integer", "minimum": 0},
        "degenerate_violations": {"type": "integer", "minimum": 0},
        "equal_partitions": {"type": "integer", "minimum": 0},
        "violating_trials": {"type": "array", "items": {"type": "integer"}},
    },
}


@dataclass(frozen=True)
class CCTReport:
    dims: Tuple[int, int, int]
    trials: int
    seed: int
    tol: float
    side: str
    family: str
    # counted on non-degenerate draws only
    violations: int = 0
    degenerate_draws: int = 0
    degenerate_violations: int = 0
    equal_partitions: int = 0
    violating_trials: Tuple[int, ...] = field(default_factory=tuple)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "dims": list(self.dims),
            "trials": self.trials,
            "seed": self.seed,
            "tol": self.tol,
            "side": self.side,
            "family": self.family,
            "violations": self.violations,
            "degenerate_draws": self.degenerate_draws,
            "degenerate_violations": self.degenerate_violations,
            "equal_partitions": self.equal_partitions,
            "violating_trials": list(self.violating_trials),
        }


def validate_cct_report(payload: Mapping[str, Any]) -> None:
    jsonschema.validate(instance=dict(payload), schema=CCT_REPORT_SCHEMA)


def _cct_trial(index: int, dims, seed: int, tol: float, side: str, family: str) -> Tuple[bool, bool, bool]:
    """(violation, degenerate, partitions equal) for one seeded draw"""
    scm = SyntheticSCM.random(dims, np.random.default_rng([seed, index]), family)
    obs = _side_vectors(scm.observational_table(), side)
    cau = _side_vectors(scm.interventional_table(), side)
    po = tolerance_partition(obs, tol)
    pc = tolerance_partition(cau, tol)
    degenerate = min(_min_pair_gap(obs), _min_pair_gap(cau)) <= DEGENERATE_MARGIN
    return not is_coarsening(pc, po), degenerate, po == pc


def cct_monte_carlo(
    trials: int,
    dims: Tuple[int, int, int] = DEFAULT_CCT_DIMS,
    seed: int = 0,
    tol: float = ANALYTIC_TOL,
    side: str = "x",
    family: str = "unconstrained",
    n_jobs: int = 1,
) -> CCTReport:
    """Count random SCMs whose causal partition fails to coarsen the observational one

    Draw i uses the stream (seed, i), so the report is independent of `n_jobs`.
    Draws with two states closer than the degenerate margin are tallied apart.
    """
    dims = tuple(int(v) for v in dims)
    if trials < 0:
        raise ValueError("trials must be non-negative")
    if family not in FAMILIES:
        raise ValueError(f"unknown SCM family '{family}'")
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}, got '{side}'")

    results = Parallel(n_jobs=n_jobs, batch_size=256)(
        delayed(_cct_trial)(i, dims, seed, tol, side, family) for i in range(trials)
    ) if trials else []

    violations = degenerate = degenerate_violations = equal = 0
    violating: List[int] = []
    for i, (violated, near_tie, same) in enumerate(results):
        equal += same
        if near_tie:
            degenerate += 1
            degenerate_violations += violated
        elif violated:
            violations += 1
            violating.append(i)

    report = CCTReport(
        dims, trials, seed, tol, side, family,
        violations, degenerate, degenerate_violations, equal, tuple(violating),
    )
    logger.info(
        "Coarsening check: %d trial(s) at dims %s, %d violation(s), %d degenerate draw(s)",
        trials, dims, violations, degenerate,
    )
    return report


def constraint_matrix(scm: SyntheticSCM, x1: int, x2: int, k: int) -> np.ndarray:
    """S[z1, z2] = b1[z1] a1[z1] b2[z2] - b2[z1] a2[z1] b1[z2]"""
    b1, b2 = scm.beta[x1], scm.beta[x2]
    a1, a2 = scm.alpha[k, x1], scm.alpha[k, x2]
    return np.outer(b1 * a1, b2) - np.outer(b2 * a2, b1)


def constraint_residual(
    scm: SyntheticSCM, x1: int, x2: int, k: int, gamma: Optional[np.ndarray] = None
) -> float:
    """gamma' S gamma, which equals P(x1) P(x2) (P(k | x1) - P(k | x2))

    Exactly zero when x1 == x2. `gamma` overrides the SCM's confounder law.
    """
    g = scm.gamma if gamma is None else np.asarray(gamma, dtype=float)
    if x1 == x2:
        return 0.0
    return float(g @ constraint_matrix(scm, x1, x2, k) @ g)


def constraints_hold(scm: SyntheticSCM, x1: int, x2: int, tol: float = ANALYTIC_TOL) -> bool:
    """Residual test of observational equivalence, scaled to match the partition tolerance"""
    px = scm.marginal_x()
    scale = px[x1] * px[x2]
    return all(abs(constraint_residual(scm, x1, x2, k)) <= tol * scale for k in range(scm.dims[2]))


@dataclass(frozen=True)
class NontrivialityWitness:
    x1: int
    x2: int
    k: int
    uniform_residual: float
    z_plus: Optional[int] = None
    z_minus: Optional[int] = None
    perturbed_gamma: Optional[Tuple[float, ...]] = None
    perturbed_residual: Optional[float] = None

    @property
    def violated(self) -> bool:
        """Some confounder law breaks the constraint for this (x1, x2, k)"""
        residual = self.uniform_residual if self.perturbed_residual is None else self.perturbed_residual
        return residual != 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "x1": self.x1,
            "x2": self.x2,
            "k": self.k,
            "uniform_residual": self.uniform_residual,
            "z_plus": self.z_plus,
            "z_minus": self.z_minus,
            "perturbed_gamma": None if self.perturbed_gamma is None else list(self.perturbed_gamma),
            "perturbed_residual": self.perturbed_residual,
        }


def nontriviality_witness(
    scm: SyntheticSCM, x1: int, x2: int, k: int, tol: float = ANALYTIC_TOL
) -> NontrivialityWitness:
    """Show the equivalence constraint is not satisfied by every confounder law

    Under uniform gamma a nonzero residual is already a witness. Otherwise pick
    a positive and a negative summand in different rows z+ != z- and move mass
    from z- to z+ (3/(2K) and 1/(2K), K = |Z|).
    """
    nz = scm.dims[0]
    uniform = np.full(nz, 1.0 / nz)
    r0 = constraint_residual(scm, x1, x2, k, uniform)
    scale = float((scm.beta[x1] @ uniform) * (scm.beta[x2] @ uniform))
    if abs(r0) > tol * scale:
        return NontrivialityWitness(x1, x2, k, r0)

    S = constraint_matrix(scm, x1, x2, k)
    positives = sorted(zip(*np.nonzero(S > 0)), key=lambda ij: (-S[ij], ij))
    negatives = sorted(zip(*np.nonzero(S < 0)), key=lambda ij: (S[ij], ij))
    for zp, _ in positives:
        for zm, _ in negatives:
            if zp != zm:
                gamma = uniform.copy()
                gamma[zp] = 3.0 / (2 * nz)
                gamma[zm] = 1.0 / (2 * nz)
                residual = constraint_residual(scm, x1, x2, k, gamma)
                return NontrivialityWitness(
                    x1, x2, k, r0, int(zp), int(zm), tuple(gamma.tolist()), residual
                )
    raise ValueError(
        f"no positive and negative summands in distinct confounder states for x=({x1}, {x2}), bin {k}"
    )


def _draw_categorical(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Index per row from cumulative probabilities (rows of `cum`) and uniforms u"""
    idx = (cum <= u[:, None]).sum(axis=1)
    return np.minimum(idx, cum.shape[1] - 1)


def sample_dataset(
    scm: SyntheticSCM,
    n: int,
    seed: int,
    intervene: Optional[int] = None,
    expose_z: bool = False,
) -> Dataset:
    """i.i.d. rows (x, y_bin[, z]); with `intervene`, x is fixed and z no longer drives it

    y_bin is 1-based like BinLabels. An exposed z column carries the ignored
    role so it never feeds density fitting.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    nz, nx, m = scm.dims
    if intervene is not None and not 0 <= intervene < nx:
        raise ValueError(f"intervention state {intervene} outside 0..{nx - 1}")
    rng = np.random.default_rng(seed)

    z = _draw_categorical(np.broadcast_to(np.cumsum(scm.gamma), (n, nz)), rng.random(n))
    if intervene is None:
        x = _draw_categorical(np.cumsum(scm.beta[:, z].T, axis=1), rng.random(n))
    else:
        x = np.full(n, intervene, dtype=np.int64)
    y = _draw_categorical(np.cumsum(scm.alpha[:, x, z].T, axis=1), rng.random(n)) + 1

    frame = pd.DataFrame({"x": x, "y_bin": y})
    roles = {"x": "covariate", "y_bin": "outcome"}
    if expose_z:
        frame["z"] = z
        roles["z"] = "ignored"
    return from_frame(frame, roles)


def empirical_table(d: Dataset, nx: int, m: int) -> np.ndarray:
    """Empirical P(y_bin | x) from a sampled dataset, |X| x m; unseen x rows are zero"""
    x = d.column("x").astype(np.int64)
    y = d.column("y_bin").astype(np.int64) - 1
    counts = np.zeros((nx, m))
    np.add.at(counts, (x, y), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)


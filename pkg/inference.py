"""
Downstream causal analysis on discovered macrostates

OLS with interaction and cluster-indicator designs, heterogeneity flags read
off a partition, propensity score matching with balance diagnostics and a
pair bootstrap, and the unconfoundedness-preservation check for macrostate
coarsenings.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import stats
from scipy.special import expit

from binning import BinLabels
from clustering import Partition
from config import (
    DEFAULT_BOOTSTRAP,
    DEFAULT_CALIPER_WIDTH,
    DEFAULT_HETEROGENEITY_TOL,
    IRLS_GRAD_TOL,
    IRLS_MAX_ITER,
    MIN_BOOTSTRAP,
    SEPARATION_COEF_BOUND,
    SEPARATION_ETA_BOUND,
)
from data_model import Dataset
from errors import (
    EmptyStratumError,
    MatchingError,
    RankDeficiencyError,
    SchemaError,
    SeparationError,
)

logger = logging.getLogger(__name__)

CAUSAL_LABEL = "causal (randomized treatment asserted)"
BIASED_LABEL = "potentially selection-biased"

SELECTION_BIAS_CAVEAT = (
    "Randomized treatment is necessary for these flags to indicate treatment effect "
    "heterogeneity. Without it, the observed arm contrast in stratum x equals "
    "E[Y(1) - Y(0) | D=1, x] plus the selection bias E[Y(0) | D=1, x] - E[Y(0) | D=0, x], "
    "and strata that differ only in selection bias are flagged all the same. "
    "The bias term involves the unobserved Y(0) of treated units and is not estimated."
)


# Least squares

@dataclass(frozen=True, eq=False)
class OlsResult:
    names: Tuple[str, ...]
    coef: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    n: int
    r2: float
    df_resid: int
    fitted: np.ndarray
    robust: bool = False

    def __getitem__(self, name: str) -> Dict[str, float]:
        i = self.names.index(name)
        return {"coef": float(self.coef[i]), "se": float(self.se[i]), "t": float(self.t[i]), "p": float(self.p[i])}

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"term": self.names, "coef": self.coef, "se": self.se, "t": self.t, "p": self.p})

    def bracket_table(self, terms: Optional[Sequence[str]] = None, digits: int = 4) -> pd.DataFrame:
        """coef (se) [p] strings per term, the cluster-regression table layout"""
        terms = list(terms) if terms is not None else list(self.names)
        cells = []
        for term in terms:
            r = self[term]
            cells.append(f"{r['coef']:.{digits}f} ({r['se']:.{digits}f}) [{r['p']:.{digits}f}]")
        return pd.DataFrame({"term": terms, "estimate": cells})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n": self.n,
            "df_resid": self.df_resid,
            "r2": self.r2,
            "robust": self.robust,
            "terms": [
                {"term": name, "coef": float(c), "se": float(s), "t": float(t), "p": float(p)}
                for name, c, s, t, p in zip(self.names, self.coef, self.se, self.t, self.p)
            ],
        }


def _dependent_columns(X: np.ndarray, names: Sequence[str]) -> List[str]:
    """Columns that add no rank when appended left to right"""
    dependent, kept = [], []
    for j, name in enumerate(names):
        trial = kept + [j]
        if np.linalg.matrix_rank(X[:, trial]) < len(trial):
            dependent.append(name)
        else:
            kept = trial
    return dependent


def ols(y, design, names: Sequence[str], robust: bool = False) -> OlsResult:
    """Least squares with classical standard errors (HC1 when `robust`) and t-based p-values"""
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    names = tuple(names)
    n, k = X.shape
    if len(names) != k:
        raise ValueError(f"{len(names)} names for {k} design columns")
    if y.size != n:
        raise ValueError(f"{y.size} outcomes for {n} design rows")
    if n <= k:
        raise RankDeficiencyError(f"need more rows than columns, got n={n}, k={k}", names)
    if np.linalg.matrix_rank(X) < k:
        dependent = _dependent_columns(X, names)
        raise RankDeficiencyError(f"design is rank deficient; collinear column(s): {dependent}", dependent)

    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    fitted = X @ coef
    resid = y - fitted
    df = n - k
    xtx_inv = np.linalg.inv(X.T @ X)
    if robust:
        meat = X.T @ (X * (resid ** 2)[:, None])
        cov = xtx_inv @ meat @ xtx_inv * (n / df)
    else:
        cov = xtx_inv * (float(resid @ resid) / df)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))

    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, coef / np.where(se > 0, se, 1.0), np.where(coef == 0, np.nan, np.sign(coef) * np.inf))
    p = np.where(np.isnan(t), np.nan, 2.0 * stats.t.sf(np.abs(t), df))

    tss = float(((y - y.mean()) ** 2).sum())
    rss = float(resid @ resid)
    r2 = 1.0 - rss / tss if tss > 0 else 1.0
    return OlsResult(names, coef, se, t, p, n, r2, df, fitted, robust)


def heterogeneity_regression(d: Dataset, moderator: str, robust: bool = False) -> OlsResult:
    """Y on treatment, 1[moderator > mean], and their product, on the raw outcome"""
    treatment, outcome = d.require_inference_roles()
    t = d.column(treatment)
    m = d.column(moderator)
    dummy = (m > m.mean()).astype(float)
    design = np.column_stack([np.ones(d.n), t, dummy, t * dummy])
    names = ["Intercept", treatment, f"{moderator}_dummy", f"{treatment}:{moderator}_dummy"]
    return ols(d.column(outcome), design, names, robust)


@dataclass(frozen=True, eq=False)
class MacrostateIndicator:
    """One-hot over K-1 classes; rows of the last class (the reference) are all zero"""

    matrix: np.ndarray
    names: Tuple[str, ...]

    @property
    def width(self) -> int:
        return self.matrix.shape[1]


def macrostate_indicators(p: Partition, prefix: str = "cluster") -> MacrostateIndicator:
    K = p.K
    matrix = np.zeros((p.n, K - 1))
    rows = np.flatnonzero(p.labels < K - 1)
    matrix[rows, p.labels[rows]] = 1.0
    return MacrostateIndicator(matrix, tuple(f"{prefix}_{k}" for k in range(K - 1)))


def _binary_column(d: Dataset, name: str) -> np.ndarray:
    """A 0/1 column, coerced when it carries no analysis role"""
    if name not in d.columns:
        raise SchemaError(f"column '{name}' not found")
    values = pd.to_numeric(d.frame[name], errors="coerce").to_numpy(dtype=float)
    if not np.isin(values, (0.0, 1.0)).all():
        raise SchemaError(f"column '{name}' must be binary 0/1")
    return values


def cluster_indicator_regression(
    d: Dataset, p: Partition, treatments: Optional[Sequence[str]] = None, robust: bool = False
) -> OlsResult:
    """Outcome on treatment dummies plus K-1 macrostate indicators; covariates enter only through clusters"""
    if p.n != d.n:
        raise SchemaError(f"partition has {p.n} labels for {d.n} rows")
    outcome = d.outcome
    if outcome is None:
        raise SchemaError("cluster regression needs exactly one outcome column")
    treatments = list(treatments) if treatments else [d.require_inference_roles()[0]]
    M = macrostate_indicators(p)
    design = np.column_stack([np.ones(d.n)] + [_binary_column(d, c) for c in treatments] + [M.matrix])
    names = ["Intercept", *treatments, *M.names]
    return ols(d.column(outcome), design, names, robust)


# Heterogeneity

@dataclass(frozen=True)
class StratumAssignment:
    stratum: float
    treated_cluster: int
    control_cluster: int
    n_treated: int
    n_control: int

    @property
    def co_clustered(self) -> bool:
        return self.treated_cluster == self.control_cluster


@dataclass(frozen=True)
class HeterogeneityReport:
    strata: Tuple[StratumAssignment, ...]
    skipped: Tuple[float, ...]
    # (j, i): stratum j co-clustered across arms, stratum i split
    case1: Optional[Tuple[float, float]]
    # (i, j, arm): the arm whose cells share a cluster while the other arm's do not
    case2: Optional[Tuple[float, float, int]]
    randomized: bool
    caveat: str = SELECTION_BIAS_CAVEAT

    @property
    def heterogeneous(self) -> bool:
        return self.case1 is not None or self.case2 is not None

    @property
    def label(self) -> str:
        return CAUSAL_LABEL if self.randomized else BIASED_LABEL

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "stratum": s.stratum,
                    "treated_cluster": s.treated_cluster,
                    "control_cluster": s.control_cluster,
                    "co_clustered": s.co_clustered,
                    "n_treated": s.n_treated,
                    "n_control": s.n_control,
                }
                for s in self.strata
            ],
            columns=["stratum", "treated_cluster", "control_cluster", "co_clustered", "n_treated", "n_control"],
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "heterogeneous": self.heterogeneous,
            "case1": None if self.case1 is None else list(self.case1),
            "case2": None if self.case2 is None else list(self.case2),
            "randomized": self.randomized,
            "label": self.label,
            "caveat": self.caveat,
            "skipped_strata": list(self.skipped),
            "strata": self.to_frame().to_dict(orient="records"),
        }


def _majority(labels: np.ndarray) -> int:
    """Most frequent cluster; ties go to the smaller label"""
    return int(np.argmax(np.bincount(labels)))


def heterogeneity_flags(
    d: Dataset, p: Partition, x_strata: str, randomized: bool = False
) -> HeterogeneityReport:
    """Read treatment effect heterogeneity off the macrostates of (D, x) cells

    Case 1: in some stratum both arms share a macrostate while in another they
    do not. Case 2: one arm's cells of two strata share a macrostate while the
    other arm's cells of the same strata do not.
    """
    treatment, _ = d.require_inference_roles()
    if p.n != d.n:
        raise SchemaError(f"partition has {p.n} labels for {d.n} rows")
    t = d.column(treatment)
    s = d.column(x_strata)

    strata: List[StratumAssignment] = []
    skipped: List[float] = []
    for value in np.unique(s):
        treated = p.labels[(s == value) & (t == 1.0)]
        control = p.labels[(s == value) & (t == 0.0)]
        if treated.size == 0 or control.size == 0:
            err = EmptyStratumError(f"stratum {x_strata}={value} lacks a treatment arm")
            logger.warning("%s; skipped", err)
            skipped.append(float(value))
            continue
        strata.append(
            StratumAssignment(float(value), _majority(treated), _majority(control), treated.size, control.size)
        )

    case1 = None
    together = [a for a in strata if a.co_clustered]
    apart = [a for a in strata if not a.co_clustered]
    if together and apart:
        case1 = (together[0].stratum, apart[0].stratum)

    case2 = None
    for a_idx, a in enumerate(strata):
        for b in strata[a_idx + 1:]:
            treated_same = a.treated_cluster == b.treated_cluster
            control_same = a.control_cluster == b.control_cluster
            if treated_same != control_same:
                case2 = (a.stratum, b.stratum, 1 if treated_same else 0)
                break
        if case2 is not None:
            break

    report = HeterogeneityReport(tuple(strata), tuple(skipped), case1, case2, randomized)
    if report.heterogeneous:
        logger.info("Heterogeneity flagged (%s)", report.label)
    return report


@dataclass(frozen=True, eq=False)
class DistributionHeterogeneity:
    strata: Tuple[float, ...]
    treated: np.ndarray
    control: np.ndarray
    max_gap: float
    tol: float
    skipped: Tuple[float, ...]
    randomized: bool

    @property
    def differences(self) -> np.ndarray:
        """P(bin | D=1, x) - P(bin | D=0, x), one row per stratum"""
        return self.treated - self.control

    @property
    def heterogeneous(self) -> bool:
        return self.max_gap > self.tol

    @property
    def label(self) -> str:
        return CAUSAL_LABEL if self.randomized else BIASED_LABEL

    def to_dict(self) -> Dict[str, Any]:
        return {
            "heterogeneous": self.heterogeneous,
            "max_gap": self.max_gap,
            "tol": self.tol,
            "label": self.label,
            "caveat": SELECTION_BIAS_CAVEAT,
            "skipped_strata": list(self.skipped),
            "strata": [
                {"stratum": s, "difference": diff.tolist()}
                for s, diff in zip(self.strata, self.differences)
            ],
        }


def distribution_heterogeneity(
    d: Dataset,
    labels: BinLabels,
    x_strata: str,
    tol: float = DEFAULT_HETEROGENEITY_TOL,
    randomized: bool = False,
) -> DistributionHeterogeneity:
    """Compare arm contrasts of the binned outcome distribution across strata"""
    treatment, _ = d.require_inference_roles()
    if len(labels) != d.n:
        raise SchemaError(f"{len(labels)} bin labels for {d.n} rows")
    t = d.column(treatment)
    s = d.column(x_strata)
    k = labels.zero_based()

    kept, skipped, treated_rows, control_rows = [], [], [], []
    for value in np.unique(s):
        in_stratum = s == value
        ti, ci = in_stratum & (t == 1.0), in_stratum & (t == 0.0)
        if not ti.any() or not ci.any():
            skipped.append(float(value))
            continue
        kept.append(float(value))
        treated_rows.append(np.bincount(k[ti], minlength=labels.m) / ti.sum())
        control_rows.append(np.bincount(k[ci], minlength=labels.m) / ci.sum())

    treated = np.array(treated_rows).reshape(-1, labels.m)
    control = np.array(control_rows).reshape(-1, labels.m)
    diffs = treated - control
    gap = 0.0
    if diffs.shape[0] > 1:
        gap = float(np.abs(diffs[:, None, :] - diffs[None, :, :]).max())
    return DistributionHeterogeneity(tuple(kept), treated, control, gap, tol, tuple(skipped), randomized)


# Propensity score matching

@dataclass(frozen=True, eq=False)
class PropensityModel:
    covariates: Tuple[str, ...]
    # intercept first, on the raw covariate scale
    coef: np.ndarray
    scores: np.ndarray
    # linear predictor, log-odds of treatment
    logits: np.ndarray
    iterations: int
    converged: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            "covariates": list(self.covariates),
            "coef": {name: float(c) for name, c in zip(("Intercept", *self.covariates), self.coef)},
            "iterations": self.iterations,
            "converged": self.converged,
        }


def require_both_arms(t: np.ndarray) -> None:
    n_treated = int((t == 1.0).sum())
    if n_treated == 0:
        raise MatchingError("no treated units")
    if n_treated == t.size:
        raise MatchingError("no controls: every unit is treated")


def propensity_fit(d: Dataset, covariates: Optional[Sequence[str]] = None) -> PropensityModel:
    """Logistic regression of treatment on covariates by IRLS; the outcome is never read

    Covariates are standardized for the iterations and coefficients mapped back
    to the raw scale. Coefficients leaving the separation bound end the fit.
    """
    treatment, _ = d.require_inference_roles()
    covariates = tuple(covariates if covariates is not None else d.covariates)
    t = d.column(treatment)
    require_both_arms(t)

    raw = d.matrix(covariates)
    mu = raw.mean(axis=0)
    sd = raw.std(axis=0, ddof=1) if d.n > 1 else np.zeros(len(covariates))
    constant = [c for c, v in zip(covariates, sd) if v == 0.0]
    if constant:
        raise RankDeficiencyError(f"constant covariate(s) collinear with the intercept: {constant}", constant)
    X = np.column_stack([np.ones(d.n), (raw - mu) / sd])

    beta = np.zeros(X.shape[1])
    converged = False
    iterations = 0
    for iterations in range(1, IRLS_MAX_ITER + 1):
        eta = X @ beta
        prob = expit(eta)
        grad = X.T @ (t - prob)
        if np.max(np.abs(grad)) / d.n < IRLS_GRAD_TOL:
            converged = True
            break
        weights = prob * (1.0 - prob)
        try:
            step = np.linalg.solve(X.T @ (X * weights[:, None]), grad)
        except np.linalg.LinAlgError:
            raise SeparationError("information matrix became singular; treatment is (quasi-)separated") from None
        beta = beta + step
        if np.max(np.abs(beta)) > SEPARATION_COEF_BOUND or np.max(np.abs(X @ beta)) > SEPARATION_ETA_BOUND:
            raise SeparationError(
                f"propensity coefficients diverge at iteration {iterations}; "
                f"covariates {list(covariates)} (quasi-)perfectly separate treatment"
            )
    if not converged:
        logger.warning("IRLS stopped after %d iterations without meeting the gradient tolerance", iterations)

    logits = X @ beta
    scores = expit(logits)
    raw_coef = np.concatenate([[beta[0] - np.sum(beta[1:] * mu / sd)], beta[1:] / sd])
    logger.info("Propensity model fitted in %d IRLS iteration(s)", iterations)
    return PropensityModel(covariates, raw_coef, scores, logits, iterations, converged)


@dataclass(frozen=True, eq=False)
class MatchResult:
    pairs: Tuple[Tuple[int, int], ...]
    scores: np.ndarray
    caliper: Optional[float]
    unmatched_treated: Tuple[int, ...] = field(default_factory=tuple)

    @property
    def treated_rows(self) -> np.ndarray:
        return np.array([a for a, _ in self.pairs], dtype=np.int64)

    @property
    def control_rows(self) -> np.ndarray:
        return np.array([b for _, b in self.pairs], dtype=np.int64)

    def matched_rows(self) -> List[int]:
        """Treated then control row of each pair, in match order"""
        return [row for pair in self.pairs for row in pair]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "treated_row": self.treated_rows,
                "control_row": self.control_rows,
                "treated_score": self.scores[self.treated_rows] if self.pairs else [],
                "control_score": self.scores[self.control_rows] if self.pairs else [],
            }
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "pairs": len(self.pairs),
            "caliper": self.caliper,
            "unmatched_treated": list(self.unmatched_treated),
        }


def default_caliper(logits, width: float = DEFAULT_CALIPER_WIDTH) -> Optional[float]:
    """width * sd of the logit propensity; None when the logits do not vary"""
    logits = np.asarray(logits, dtype=float)
    if width <= 0:
        raise MatchingError("caliper width must be positive")
    sd = float(logits.std(ddof=1)) if logits.size > 1 else 0.0
    if sd == 0.0:
        logger.warning("Propensity logits are constant; matching without a caliper")
        return None
    return width * sd


def nn_match(scores, treat, caliper: Optional[float] = None) -> MatchResult:
    """Greedy nearest-neighbour matching without replacement

    Treated units go in descending score order (ties by row); each takes the
    unused control with the smallest score gap (ties by row), if within caliper.
    """
    scores = np.asarray(scores, dtype=float)
    treat = np.asarray(treat, dtype=float)
    if scores.shape != treat.shape:
        raise MatchingError("scores and treatment vectors differ in length")
    if caliper is not None and caliper <= 0:
        raise MatchingError("caliper must be positive")

    treated = np.flatnonzero(treat == 1.0)
    controls = np.flatnonzero(treat == 0.0)
    order = treated[np.lexsort((treated, -scores[treated]))]
    available = np.ones(controls.size, dtype=bool)

    pairs: List[Tuple[int, int]] = []
    unmatched: List[int] = []
    for row in order:
        if not available.any():
            unmatched.append(int(row))
            continue
        gaps = np.where(available, np.abs(scores[controls] - scores[row]), np.inf)
        j = int(np.argmin(gaps))
        if caliper is not None and gaps[j] > caliper:
            unmatched.append(int(row))
            continue
        available[j] = False
        pairs.append((int(row), int(controls[j])))

    if unmatched:
        logger.info("%d treated unit(s) left unmatched", len(unmatched))
    return MatchResult(tuple(pairs), scores, caliper, tuple(sorted(unmatched)))


@dataclass(frozen=True)
class CovariateBalance:
    covariate: str
    smd_before: float
    smd_after: float
    # pooled sd was zero in at least one comparison
    flagged: bool = False


@dataclass(frozen=True)
class BalanceReport:
    rows: Tuple[CovariateBalance, ...]

    @property
    def max_smd_after(self) -> float:
        return max((abs(r.smd_after) for r in self.rows), default=0.0)

    @property
    def max_smd_before(self) -> float:
        return max((abs(r.smd_before) for r in self.rows), default=0.0)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {"covariate": r.covariate, "smd_before": r.smd_before, "smd_after": r.smd_after, "flagged": r.flagged}
                for r in self.rows
            ],
            columns=["covariate", "smd_before", "smd_after", "flagged"],
        )


def standardized_mean_difference(treated: np.ndarray, control: np.ndarray) -> Tuple[float, bool]:
    """(mean_T - mean_C) / sqrt((var_T + var_C) / 2); zero pooled sd gives (0 or nan, True)"""
    var_t = treated.var(ddof=1) if treated.size > 1 else 0.0
    var_c = control.var(ddof=1) if control.size > 1 else 0.0
    pooled = np.sqrt((var_t + var_c) / 2.0)
    diff = float(treated.mean() - control.mean())
    if pooled == 0.0:
        return (0.0 if diff == 0.0 else float("nan")), True
    return diff / float(pooled), False


def balance_report(d: Dataset, m: MatchResult, covariates: Optional[Sequence[str]] = None) -> BalanceReport:
    treatment, _ = d.require_inference_roles()
    if not m.pairs:
        raise MatchingError("no matched pairs to assess balance on")
    covariates = list(covariates if covariates is not None else d.covariates)
    t = d.column(treatment)
    rows = []
    for cov in covariates:
        x = d.column(cov)
        before, flag_before = standardized_mean_difference(x[t == 1.0], x[t == 0.0])
        after, flag_after = standardized_mean_difference(x[m.treated_rows], x[m.control_rows])
        if flag_before or flag_after:
            logger.warning("Covariate '%s' has zero pooled standard deviation", cov)
        rows.append(CovariateBalance(cov, before, after, flag_before or flag_after))
    return BalanceReport(tuple(rows))


@dataclass(frozen=True)
class AteEstimate:
    ate: float
    se: float
    replicates: int
    pairs: int

    def to_dict(self) -> Dict[str, Any]:
        return {"ate": self.ate, "bootstrap_se": self.se, "replicates": self.replicates, "pairs": self.pairs}


def _bootstrap_mean(diffs: np.ndarray, seed: int, b: int) -> float:
    rng = np.random.default_rng([seed, b])
    return float(diffs[rng.integers(0, diffs.size, size=diffs.size)].mean())


def ate_bootstrap(
    d: Dataset,
    m: MatchResult,
    outcome: Optional[str] = None,
    B: int = DEFAULT_BOOTSTRAP,
    seed: int = 0,
    n_jobs: int = 1,
) -> AteEstimate:
    """Mean matched-pair difference and its pair-level bootstrap standard error"""
    if B < MIN_BOOTSTRAP:
        raise ValueError(f"need at least {MIN_BOOTSTRAP} bootstrap replicates, got {B}")
    if not m.pairs:
        raise MatchingError("no matched pairs")
    outcome = outcome or d.require_inference_roles()[1]
    y = d.column(outcome)
    diffs = y[m.treated_rows] - y[m.control_rows]
    replicates = Parallel(n_jobs=n_jobs)(delayed(_bootstrap_mean)(diffs, seed, b) for b in range(B))
    se = float(np.std(replicates, ddof=1))
    ate = float(diffs.mean())
    logger.info("ATE %.6g (bootstrap SE %.6g over %d replicate(s), %d pair(s))", ate, se, B, diffs.size)
    return AteEstimate(ate, se, B, int(diffs.size))


# Unconfoundedness preservation

def stratified_ate(y: np.ndarray, t: np.ndarray, strata: np.ndarray) -> float:
    """Size-weighted mean of within-stratum arm contrasts; every stratum needs both arms"""
    total = 0.0
    for value in np.unique(strata):
        cell = strata == value
        treated, control = cell & (t == 1.0), cell & (t == 0.0)
        if not treated.any() or not control.any():
            raise EmptyStratumError(f"stratum {value} lacks a treatment arm")
        total += cell.sum() * (y[treated].mean() - y[control].mean())
    return float(total / y.size)


def rows_partition(exact_labels: Sequence[int], states) -> Partition:
    """Lift a partition of micro-states to rows via each row's state index"""
    labels = np.asarray(exact_labels, dtype=np.int64)[np.asarray(states, dtype=np.int64)]
    _, relabelled = np.unique(labels, return_inverse=True)
    return Partition(relabelled, int(relabelled.max()) + 1)


@dataclass(frozen=True)
class PreservationReport:
    ate_macro: float
    ate_micro: float
    true_tau: Optional[float]
    sd_y: float
    macro_cells: int
    micro_cells: int

    @property
    def discrepancy(self) -> float:
        """|ATE within macrostates - ATE within micro-states|"""
        return abs(self.ate_macro - self.ate_micro)

    @property
    def max_abs_discrepancy(self) -> float:
        gaps = [self.discrepancy]
        if self.true_tau is not None:
            gaps += [abs(self.ate_macro - self.true_tau), abs(self.ate_micro - self.true_tau)]
        return max(gaps)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ate_macro": self.ate_macro,
            "ate_micro": self.ate_micro,
            "true_tau": self.true_tau,
            "discrepancy": self.discrepancy,
            "max_abs_discrepancy": self.max_abs_discrepancy,
            "sd_y": self.sd_y,
            "macro_cells": self.macro_cells,
            "micro_cells": self.micro_cells,
        }


def unconfoundedness_preservation_test(
    d: Dataset, p: Partition, x_column: str, true_tau: Optional[float] = None
) -> PreservationReport:
    """Stratified ATE within macrostate cells against stratified ATE within x cells"""
    treatment, outcome = d.require_inference_roles()
    if p.n != d.n:
        raise SchemaError(f"partition has {p.n} labels for {d.n} rows")
    y = d.column(outcome)
    t = d.column(treatment)
    x = d.column(x_column)
    report = PreservationReport(
        ate_macro=stratified_ate(y, t, p.labels),
        ate_micro=stratified_ate(y, t, x),
        true_tau=true_tau,
        sd_y=float(y.std(ddof=1)),
        macro_cells=p.K,
        micro_cells=int(np.unique(x).size),
    )
    logger.info(
        "Stratified ATE: %.6g over %d macrostate(s) vs %.6g over %d micro-state(s)",
        report.ate_macro, report.macro_cells, report.ate_micro, report.micro_cells,
    )
    return report

"""
Typed tabular micro-data with column roles, CSV ingestion and standardization
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import CSV_ENCODING
from errors import SchemaError

logger = logging.getLogger(__name__)


class ColumnKind(str, Enum):
    NUMERIC = "numeric"
    INTEGER = "integer"
    BINARY = "binary"


class Role(str, Enum):
    COVARIATE = "covariate"
    TREATMENT = "treatment"
    OUTCOME = "outcome"
    ID = "id"
    IGNORED = "ignored"


# Roles whose columns must be numeric and finite
ANALYSIS_ROLES = (Role.COVARIATE, Role.TREATMENT, Role.OUTCOME)


def detect_kind(values: np.ndarray) -> ColumnKind:
    """Binary when the value set is inside {0, 1}; CSV carries no types"""
    finite = values[np.isfinite(values)]
    if finite.size and np.isin(finite, (0.0, 1.0)).all():
        return ColumnKind.BINARY
    if finite.size and np.all(np.equal(np.floor(finite), finite)):
        return ColumnKind.INTEGER
    return ColumnKind.NUMERIC


@dataclass(frozen=True, eq=False)
class Dataset:
    """Micro-data rows in file order; every label vector downstream is index-aligned with it

    The frame is copied on the way in and on the way out, so a Dataset can be
    shared between workers without anyone mutating it.
    """

    frame: pd.DataFrame
    schema: Mapping[str, ColumnKind]
    roles: Mapping[str, Role]
    dropped_rows: int = 0

    def __post_init__(self):
        frame = self.frame.reset_index(drop=True).copy()
        object.__setattr__(self, "frame", frame)
        object.__setattr__(self, "schema", dict(self.schema))
        object.__setattr__(self, "roles", {c: Role(r) for c, r in self.roles.items()})

    @property
    def n(self) -> int:
        return len(self.frame)

    @property
    def columns(self) -> List[str]:
        return list(self.frame.columns)

    def columns_with_role(self, role: Role) -> List[str]:
        return [c for c in self.frame.columns if self.roles.get(c) == role]

    @property
    def covariates(self) -> List[str]:
        return self.columns_with_role(Role.COVARIATE)

    @property
    def treatment(self) -> Optional[str]:
        cols = self.columns_with_role(Role.TREATMENT)
        return cols[0] if len(cols) == 1 else None

    @property
    def outcome(self) -> Optional[str]:
        cols = self.columns_with_role(Role.OUTCOME)
        return cols[0] if len(cols) == 1 else None

    def feature_columns(self, include_treatment: bool = False) -> List[str]:
        """Covariates, optionally followed by the treatment column"""
        cols = self.covariates
        if include_treatment and self.treatment is not None:
            cols = cols + [self.treatment]
        return cols

    def require_inference_roles(self) -> Tuple[str, str]:
        """Exactly one treatment and one outcome column are needed for inference"""
        treatments = self.columns_with_role(Role.TREATMENT)
        outcomes = self.columns_with_role(Role.OUTCOME)
        if len(treatments) != 1 or len(outcomes) != 1:
            raise SchemaError(
                f"inference needs exactly one treatment and one outcome column, "
                f"got treatment={treatments} outcome={outcomes}"
            )
        return treatments[0], outcomes[0]

    def _check(self, columns: Iterable[str]) -> List[str]:
        columns = list(columns)
        missing = [c for c in columns if c not in self.frame.columns]
        if missing:
            raise SchemaError(f"columns not found: {missing}")
        return columns

    def column(self, name: str) -> np.ndarray:
        self._check([name])
        return self.frame[name].to_numpy(dtype=float, copy=True)

    def matrix(self, columns: Sequence[str]) -> np.ndarray:
        columns = self._check(columns)
        return self.frame[columns].to_numpy(dtype=float, copy=True)

    def to_frame(self) -> pd.DataFrame:
        return self.frame.copy()

    def subset(self, indices: Sequence[int]) -> "Dataset":
        """Rows at the given positions, in the given order"""
        rows = self.frame.iloc[list(indices)]
        return Dataset(rows, self.schema, self.roles, dropped_rows=0)

    def with_frame(self, frame: pd.DataFrame, schema: Optional[Mapping[str, ColumnKind]] = None) -> "Dataset":
        return Dataset(frame, schema if schema is not None else self.schema, self.roles, self.dropped_rows)


def from_frame(frame: pd.DataFrame, roles: Mapping[str, str]) -> Dataset:
    """Build a Dataset from an in-memory frame (synthetic data, tests)

    Columns not named in `roles` are ignored. Rows with missing or non-finite
    values in role-bearing columns are dropped and counted.
    """
    unknown = [c for c in roles if c not in frame.columns]
    if unknown:
        raise SchemaError(f"role config names unknown columns: {unknown}")

    role_map = {c: Role(roles.get(c, Role.IGNORED.value)) for c in frame.columns}
    frame = frame.reset_index(drop=True).copy()
    analysis_cols = [c for c in frame.columns if role_map[c] in ANALYSIS_ROLES]

    for col in analysis_cols:
        frame[col] = pd.to_numeric(frame[col], errors="coerce").astype(float)

    if analysis_cols:
        values = frame[analysis_cols].to_numpy(dtype=float)
        keep = np.isfinite(values).all(axis=1)
    else:
        keep = np.ones(len(frame), dtype=bool)
    dropped = int((~keep).sum())
    if dropped:
        logger.warning("Dropped %d row(s) with missing or non-numeric values", dropped)
    frame = frame.loc[keep].reset_index(drop=True)

    treatments = [c for c in analysis_cols if role_map[c] == Role.TREATMENT]
    for col in treatments:
        bad = ~frame[col].isin((0.0, 1.0))
        if bad.any():
            raise SchemaError(
                f"treatment column '{col}' has values outside {{0, 1}}: "
                f"{sorted(frame.loc[bad, col].unique().tolist())[:5]}"
            )

    schema = {c: detect_kind(frame[c].to_numpy(dtype=float)) for c in analysis_cols}
    return Dataset(frame, schema, role_map, dropped_rows=dropped)


def add_differences(frame: pd.DataFrame, differences: Mapping[str, Sequence[str]]) -> pd.DataFrame:
    """New columns name = minuend - subtrahend on a raw text frame; stray tokens become NaN"""
    frame = frame.copy()
    for name, (minuend, subtrahend) in differences.items():
        if name in frame.columns:
            raise SchemaError(f"derived column '{name}' already exists in the input")
        missing = [c for c in (minuend, subtrahend) if c not in frame.columns]
        if missing:
            raise SchemaError(f"derived column '{name}' needs unknown column(s) {missing}")
        frame[name] = (
            pd.to_numeric(frame[minuend], errors="coerce") - pd.to_numeric(frame[subtrahend], errors="coerce")
        )
    return frame


def load_csv(
    path: str,
    role_config: Mapping[str, str],
    differences: Optional[Mapping[str, Sequence[str]]] = None,
) -> Dataset:
    """Read a comma-delimited UTF-8 CSV with a header row and attach column roles

    `differences` maps a new column name to (minuend, subtrahend), e.g. an
    earnings change from post and pre earnings; the new column can take a role.
    """
    csv_path = Path(path)
    if not csv_path.exists():
        raise FileNotFoundError(f"input file not found: {path}")

    # Everything is read as text so that stray tokens become NaN during coercion
    frame = pd.read_csv(csv_path, dtype=str, keep_default_na=False, encoding=CSV_ENCODING)
    if differences:
        frame = add_differences(frame, differences)
    dataset = from_frame(frame, role_config)
    logger.info(
        "Loaded %s: %d rows kept, %d dropped, %d covariate(s)",
        csv_path.name, dataset.n, dataset.dropped_rows, len(dataset.covariates),
    )
    return dataset


@dataclass(frozen=True)
class StandardizationParams:
    means: Mapping[str, float]
    stds: Mapping[str, float]
    # Zero-variance columns are left unscaled
    flagged: Tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> Dict[str, object]:
        return {"means": dict(self.means), "stds": dict(self.stds), "flagged": list(self.flagged)}

    @classmethod
    def from_dict(cls, payload: Mapping[str, object]) -> "StandardizationParams":
        return cls(dict(payload["means"]), dict(payload["stds"]), tuple(payload["flagged"]))

    def apply_matrix(self, columns: Sequence[str], values: np.ndarray) -> np.ndarray:
        """Scale a raw matrix whose columns are `columns` (unknown columns pass through)"""
        out = np.array(values, dtype=float, copy=True)
        for j, col in enumerate(columns):
            if col in self.means and col not in self.flagged:
                out[:, j] = (out[:, j] - self.means[col]) / self.stds[col]
        return out


def standardize(d: Dataset, columns: Iterable[str]) -> Tuple[Dataset, StandardizationParams]:
    """Center and scale columns to sample mean 0 and sample (n-1) sd 1"""
    columns = list(columns)
    d._check(columns)
    frame = d.to_frame()
    schema = dict(d.schema)
    means: Dict[str, float] = {}
    stds: Dict[str, float] = {}
    flagged: List[str] = []

    for col in columns:
        values = frame[col].to_numpy(dtype=float)
        mean = float(values.mean())
        std = float(values.std(ddof=1)) if values.size > 1 else 0.0
        means[col] = mean
        stds[col] = std
        if std == 0.0:
            flagged.append(col)
            logger.warning("Column '%s' has zero variance; left unscaled", col)
            continue
        frame[col] = (values - mean) / std
        schema[col] = ColumnKind.NUMERIC

    return d.with_frame(frame, schema), StandardizationParams(means, stds, tuple(flagged))


def unstandardize(d: Dataset, params: StandardizationParams) -> Dataset:
    """Invert `standardize`; flagged columns are untouched"""
    frame = d.to_frame()
    for col, mean in params.means.items():
        if col in params.flagged:
            continue
        frame[col] = frame[col].to_numpy(dtype=float) * params.stds[col] + mean
    return d.with_frame(frame)

"""
Conditional distribution estimation P(outcome bin | covariates)

Two estimators share one interface (`predict_cond_dist`): a small
feed-forward softmax classifier trained by seeded mini-batch gradient
descent, and an exact frequency table for fully discrete covariates.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import log_softmax

from binning import BinLabels
from config import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_EPOCHS,
    DEFAULT_HIDDEN_WIDTH,
    DEFAULT_L2_PENALTY,
    DEFAULT_LEARNING_RATE,
    MAX_COVARIATES_WITHOUT_HIDDEN,
)
from data_model import ColumnKind, Dataset, StandardizationParams, standardize
from errors import DensityError, SchemaError, UnseenCovariateError

logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-6

Layer = Tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True, eq=False)
class CondDistMatrix:
    """n x m row-stochastic matrix; row i is the estimated P(bin | x_i)"""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("conditional distribution matrix must be 2-D")
        if values.size and (values.min() < 0.0 or values.max() > 1.0 + ROW_SUM_TOL):
            raise ValueError("probabilities must lie in [0, 1]")
        if not np.allclose(values.sum(axis=1), 1.0, atol=ROW_SUM_TOL, rtol=0.0):
            raise ValueError("every row must sum to 1")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, columns=[f"bin_{k}" for k in range(1, self.m + 1)])


@dataclass(frozen=True)
class SoftmaxClassifierConfig:
    hidden_layers: Tuple[int, ...] = ()
    learning_rate: float = DEFAULT_LEARNING_RATE
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    seed: int = 0
    l2_penalty: float = DEFAULT_L2_PENALTY

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if any(h < 1 for h in self.hidden_layers):
            raise ValueError("hidden layer widths must be positive")
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning rate, epochs and batch size must be positive")
        if self.l2_penalty < 0:
            raise ValueError("L2 penalty must be non-negative")

    @classmethod
    def default_for(cls, n_covariates: int, seed: int = 0, **overrides) -> "SoftmaxClassifierConfig":
        """Multinomial logistic for few covariates, one hidden layer otherwise"""
        hidden = () if n_covariates <= MAX_COVARIATES_WITHOUT_HIDDEN else (DEFAULT_HIDDEN_WIDTH,)
        cfg = cls(hidden_layers=hidden, seed=seed)
        return replace(cfg, **overrides) if overrides else cfg

    def to_dict(self) -> Dict[str, Any]:
        return {
            "hidden_layers": list(self.hidden_layers),
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "l2_penalty": self.l2_penalty,
        }


def forward(layers: Sequence[Layer], X: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
    """Activations fed into each layer and the output log-probabilities"""
    inputs = [X]
    h = X
    for W, b in layers[:-1]:
        h = np.tanh(h @ W + b)
        inputs.append(h)
    W, b = layers[-1]
    return inputs, log_softmax(h @ W + b, axis=1)


def loss_and_gradients(
    layers: Sequence[Layer], X: np.ndarray, Y: np.ndarray, l2_penalty: float
) -> Tuple[float, List[Layer]]:
    """Mean cross-entropy plus 0.5 * l2 * ||W||^2 (biases unpenalized), with its analytic gradient

    Y is the one-hot target matrix.
    """
    inputs, logp = forward(layers, X)
    n = X.shape[0]
    loss = -float(np.sum(Y * logp)) / n
    loss += 0.5 * l2_penalty * sum(float(np.sum(W * W)) for W, _ in layers)

    delta = (np.exp(logp) - Y) / n
    grads: List[Layer] = [None] * len(layers)  # type: ignore[list-item]
    for i in reversed(range(len(layers))):
        W, _ = layers[i]
        a = inputs[i]
        grads[i] = (a.T @ delta + l2_penalty * W, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ W.T) * (1.0 - a * a)
    return loss, grads


def _init_layers(sizes: Sequence[int], rng: np.random.Generator) -> List[Layer]:
    layers = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return layers


@dataclass(frozen=True, eq=False)
class SoftmaxClassifier:
    """Fitted classifier; immutable once returned by `fit_softmax_classifier`"""

    features: Tuple[str, ...]
    m: int
    config: SoftmaxClassifierConfig
    layers: Tuple[Layer, ...]
    scaling: StandardizationParams
    final_loss: float
    n_train: int

    def predict_proba(self, X_raw: np.ndarray) -> np.ndarray:
        X = self.scaling.apply_matrix(self.features, X_raw)
        _, logp = forward(self.layers, X)
        return np.exp(logp)

    def predict_cond_dist(self, d: Dataset) -> CondDistMatrix:
        missing = [c for c in self.features if c not in d.columns]
        if missing:
            raise SchemaError(f"dataset lacks estimator features {missing}")
        return CondDistMatrix(self.predict_proba(d.matrix(self.features)))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": "softmax",
            "features": list(self.features),
            "m": self.m,
            "config": self.config.to_dict(),
            "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in self.layers],
            "scaling": self.scaling.to_dict(),
            "final_loss": self.final_loss,
            "n_train": self.n_train,
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "SoftmaxClassifier":
        cfg = dict(payload["config"])
        return cls(
            features=tuple(payload["features"]),
            m=int(payload["m"]),
            config=SoftmaxClassifierConfig(**cfg),
            layers=tuple((np.asarray(l["W"], float), np.asarray(l["b"], float)) for l in payload["layers"]),
            scaling=StandardizationParams.from_dict(payload["scaling"]),
            final_loss=float(payload["final_loss"]),
            n_train=int(payload["n_train"]),
        )


def _check_labels(d: Dataset, labels: BinLabels) -> None:
    if len(labels) != d.n:
        raise SchemaError(f"{len(labels)} bin labels for {d.n} rows")


def fit_softmax_classifier(
    d: Dataset,
    labels: BinLabels,
    cfg: SoftmaxClassifierConfig,
    features: Optional[Sequence[str]] = None,
) -> SoftmaxClassifier:
    """Train P(bin | features) by mini-batch gradient descent

    Non-binary features are standardized first. Shuffling and initialization
    both come from `cfg.seed`, so training is reproducible bit for bit.
    """
    _check_labels(d, labels)
    features = tuple(features if features is not None else d.covariates)
    if not features:
        raise SchemaError("no feature columns to fit on")
    if np.unique(labels.values).size < 2:
        raise DensityError("at least two distinct bins must be present to fit a classifier")

    continuous = [c for c in features if d.schema.get(c) != ColumnKind.BINARY]
    scaled, scaling = standardize(d, continuous)
    X = scaled.matrix(features)
    m = labels.m
    Y = np.eye(m)[labels.zero_based()]
    n = X.shape[0]

    rng = np.random.default_rng(cfg.seed)
    layers = _init_layers([X.shape[1], *cfg.hidden_layers, m], rng)
    batch = min(cfg.batch_size, n)

    loss = float("nan")
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            _, grads = loss_and_gradients(layers, X[idx], Y[idx], cfg.l2_penalty)
            layers = [
                (W - cfg.learning_rate * gW, b - cfg.learning_rate * gb)
                for (W, b), (gW, gb) in zip(layers, grads)
            ]
        with np.errstate(over="ignore", invalid="ignore"):
            loss, _ = loss_and_gradients(layers, X, Y, cfg.l2_penalty)
        if not np.isfinite(loss):
            raise DensityError(
                f"training loss diverged at epoch {epoch} with learning rate {cfg.learning_rate}"
            )
        if epoch % 100 == 0:
            logger.debug("epoch %d: cross-entropy %.6f", epoch, loss)

    for W, b in layers:
        W.setflags(write=False)
        b.setflags(write=False)
    logger.info("Softmax classifier trained on %d rows, %d bins; final loss %.5f", n, m, loss)
    return SoftmaxClassifier(features, m, cfg, tuple(layers), scaling, float(loss), n)


@dataclass(frozen=True)
class FrequencyTable:
    """Empirical P(bin | x) for discrete covariates; unseen x is an error"""

    features: Tuple[str, ...]
    m: int
    table: Mapping[Tuple[float, ...], Tuple[float, ...]] = field(default_factory=dict)

    def lookup(self, key: Tuple[float, ...]) -> Tuple[float, ...]:
        try:
            return self.table[key]
        except KeyError:
            raise UnseenCovariateError(
                f"covariate combination {dict(zip(self.features, key))} was not seen during fitting"
            ) from None

    def predict_cond_dist(self, d: Dataset) -> CondDistMatrix:
        missing = [c for c in self.features if c not in d.columns]
        if missing:
            raise SchemaError(f"dataset lacks estimator features {missing}")
        X = d.matrix(self.features)
        return CondDistMatrix(np.array([self.lookup(tuple(row)) for row in X.tolist()]).reshape(-1, self.m))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": "frequency",
            "features": list(self.features),
            "m": self.m,
            "table": [{"x": list(k), "p": list(v)} for k, v in sorted(self.table.items())],
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "FrequencyTable":
        table = {tuple(float(v) for v in e["x"]): tuple(float(p) for p in e["p"]) for e in payload["table"]}
        return cls(tuple(payload["features"]), int(payload["m"]), table)


def estimator_from_dict(payload: Mapping[str, Any]):
    """Rebuild either estimator from its JSON form"""
    if payload.get("kind") == "frequency":
        return FrequencyTable.from_dict(payload)
    return SoftmaxClassifier.from_dict(payload)


def fit_frequency_table(d: Dataset, labels: BinLabels, features: Optional[Sequence[str]] = None) -> FrequencyTable:
    """Count ratios per observed covariate combination; row order is irrelevant"""
    _check_labels(d, labels)
    features = tuple(features if features is not None else d.covariates)
    if not features:
        raise SchemaError("no feature columns to fit on")
    frame = pd.DataFrame(d.matrix(features), columns=list(features))
    bins = pd.Series(labels.zero_based(), name="bin")
    shares = pd.crosstab(
        index=[frame[c] for c in features], columns=bins, normalize="index"
    ).reindex(columns=range(labels.m), fill_value=0.0)
    table = {
        tuple(float(v) for v in (key if isinstance(key, tuple) else (key,))): tuple(float(p) for p in row)
        for key, row in zip(shares.index, shares.to_numpy())
    }
    logger.info("Frequency table over %d distinct covariate combination(s)", len(table))
    return FrequencyTable(features, labels.m, table)


def predict_cond_dist(estimator, d: Dataset) -> CondDistMatrix:
    """Estimated conditional distribution over bins for every row of d"""
    return estimator.predict_cond_dist(d)

"""Finite-support generative models for multiple-choice labels, plus exact
population-level calibration quantities built on them.

A model assigns each support point a weight and a label distribution p*(x).
Keeping the support finite makes every expectation a finite sum, so the
accuracy/distance bound constructions and the cw-ECE <= TCE relation can be
checked exactly instead of estimated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import (
    CalibrationError,
    ConfidenceVector,
    Dataset,
    PredictionRecord,
    SIMPLEX_ATOL,
    SimplexViolation,
)

MODEL_KINDS = ("pure-random", "deterministic", "dirichlet")


class BadParams(CalibrationError):
    pass


class UnknownSupportPoint(CalibrationError):
    pass


class UnreachableAccuracy(CalibrationError):
    pass


class NoDisagreement(CalibrationError):
    pass


def _check_rows_on_simplex(rows: np.ndarray, what: str) -> None:
    if rows.ndim != 2 or rows.shape[1] < 2:
        raise SimplexViolation(f"{what} must be an (s, k>=2) matrix")
    if not np.isfinite(rows).all():
        raise SimplexViolation(f"{what} contains non-finite entries")
    if rows.min() < 0.0 or rows.max() > 1.0:
        raise SimplexViolation(f"{what} entries outside [0, 1]")
    sums = rows.sum(axis=1)
    if np.abs(sums - 1.0).max() > SIMPLEX_ATOL:
        raise SimplexViolation(f"{what} rows do not sum to 1 within {SIMPLEX_ATOL}")


class FiniteGenerativeModel:
    """Finite-support distribution over points, each with a label distribution."""

    def __init__(self, k: int, support: Sequence[str], weights, label_probs):
        support = [str(s) for s in support]
        weights = np.asarray(weights, dtype=float)
        label_probs = np.asarray(label_probs, dtype=float)
        if k < 2:
            raise BadParams("class count k must be >= 2")
        if len(support) != len(set(support)):
            raise BadParams("support ids must be unique")
        if weights.shape != (len(support),):
            raise BadParams("weights must align with the support")
        if not np.isfinite(weights).all() or weights.min() < 0.0:
            raise BadParams("weights must be finite and nonnegative")
        if abs(weights.sum() - 1.0) > SIMPLEX_ATOL:
            raise BadParams(f"weights sum to {weights.sum()!r}, not 1")
        if label_probs.shape != (len(support), k):
            raise BadParams("label_probs must be (n_support, k)")
        _check_rows_on_simplex(label_probs, "label distributions")
        self.k = k
        self.support = support
        self.weights = weights
        self.label_probs = label_probs

    @property
    def n_support(self) -> int:
        return len(self.support)

    def label_dist(self, i: int) -> ConfidenceVector:
        return ConfidenceVector(tuple(self.label_probs[i]))

    def to_json_dict(self) -> dict:
        return {
            "k": self.k,
            "support": [
                {
                    "id": self.support[i],
                    "weight": float(self.weights[i]),
                    "label_dist": [float(p) for p in self.label_probs[i]],
                }
                for i in range(self.n_support)
            ],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "FiniteGenerativeModel":
        try:
            k = int(obj["k"])
            points = obj["support"]
            ids = [p["id"] for p in points]
            weights = [p["weight"] for p in points]
            rows = [p["label_dist"] for p in points]
        except (KeyError, TypeError) as exc:
            raise BadParams(f"malformed model object: {exc}") from exc
        return cls(k, ids, weights, rows)


class Predictor:
    """Assignment of a confidence vector to every support point it knows."""

    def __init__(self, ids: Sequence[str], probs):
        ids = [str(s) for s in ids]
        probs = np.asarray(probs, dtype=float)
        if probs.shape[0] != len(ids):
            raise BadParams("probs must align with ids")
        _check_rows_on_simplex(probs, "predictor confidences")
        if len(ids) != len(set(ids)):
            raise BadParams("predictor ids must be unique")
        self.ids = ids
        self.probs = probs
        self._row = {pid: i for i, pid in enumerate(ids)}

    @property
    def k(self) -> int:
        return self.probs.shape[1]

    def vector_for(self, point_id: str) -> ConfidenceVector:
        if point_id not in self._row:
            raise UnknownSupportPoint(f"predictor undefined at {point_id!r}")
        return ConfidenceVector(tuple(self.probs[self._row[point_id]]))

    def matrix_for(self, support: Sequence[str]) -> np.ndarray:
        """Rows aligned with ``support`` order; fails on any missing point."""
        try:
            rows = [self._row[s] for s in support]
        except KeyError as exc:
            raise UnknownSupportPoint(f"predictor undefined at {exc.args[0]!r}") from exc
        return self.probs[rows]

    @classmethod
    def from_model(cls, model: FiniteGenerativeModel) -> "Predictor":
        """The model's own label distribution used as a predictor."""
        return cls(list(model.support), model.label_probs.copy())

    @classmethod
    def constant(cls, model: FiniteGenerativeModel, cv: ConfidenceVector) -> "Predictor":
        rows = np.tile(cv.as_array(), (model.n_support, 1))
        return cls(list(model.support), rows)

    @classmethod
    def from_table(cls, table: Mapping[str, ConfidenceVector]) -> "Predictor":
        ids = list(table)
        rows = [table[i].as_array() for i in ids]
        return cls(ids, np.asarray(rows))


def make_model(
    kind: str,
    k: int,
    n_support: int,
    alpha: float = 1.0,
    seed: int = 0,
) -> FiniteGenerativeModel:
    """Build a uniform-weight model of one of the three archetypes.

    pure-random: every point labels uniformly at 1/k.
    deterministic: one-hot labels, classes assigned round-robin over points.
    dirichlet: label rows drawn from a symmetric Dirichlet(alpha), seeded.
    """
    if kind not in MODEL_KINDS:
        raise BadParams(f"unknown model kind {kind!r}")
    if n_support < 1:
        raise BadParams("n_support must be >= 1")
    if k < 2:
        raise BadParams("k must be >= 2")
    ids = [f"x{i}" for i in range(n_support)]
    weights = np.full(n_support, 1.0 / n_support)
    if kind == "pure-random":
        rows = np.full((n_support, k), 1.0 / k)
    elif kind == "deterministic":
        rows = np.zeros((n_support, k))
        rows[np.arange(n_support), np.arange(n_support) % k] = 1.0
    else:
        if not (alpha > 0.0):
            raise BadParams("dirichlet concentration must be > 0")
        rng = np.random.default_rng(seed)
        rows = rng.dirichlet(np.full(k, float(alpha)), size=n_support)
        # Sampler rows can sit a few ulp off unit sum; pin them down.
        rows = rows / rows.sum(axis=1, keepdims=True)
    return FiniteGenerativeModel(k, ids, weights, rows)


def sample_dataset(
    model: FiniteGenerativeModel,
    predictor: Predictor,
    n: int,
    seed: int = 0,
) -> Dataset:
    """Draw n i.i.d. (point, label) pairs and attach the predictor's confidences."""
    if n < 1:
        raise BadParams("n must be >= 1")
    pred = predictor.matrix_for(model.support)
    rng = np.random.default_rng(seed)
    idx = rng.choice(model.n_support, size=n, p=model.weights)
    u = rng.random(n)
    cdf = np.cumsum(model.label_probs[idx], axis=1)
    labels = np.minimum((cdf < u[:, None]).sum(axis=1), model.k - 1)
    records = [
        PredictionRecord(f"r{i}", ConfidenceVector(tuple(pred[idx[i]])), int(labels[i]))
        for i in range(n)
    ]
    return Dataset(records)


def population_accuracy(model: FiniteGenerativeModel, predictor: Predictor) -> float:
    """Probability that the predictor's top choice matches a label drawn from p*."""
    pred = predictor.matrix_for(model.support)
    top = np.argmax(pred, axis=1)
    return float(model.weights @ model.label_probs[np.arange(model.n_support), top])


def labeled_accuracy(
    model: FiniteGenerativeModel, predictor: Predictor, labels: np.ndarray
) -> float:
    """Weighted accuracy against one realized label per support point."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (model.n_support,):
        raise BadParams("labels must align with the support")
    pred = predictor.matrix_for(model.support)
    return float(model.weights @ (np.argmax(pred, axis=1) == labels))


def realize_labels(model: FiniteGenerativeModel, seed: int = 0) -> np.ndarray:
    """Draw one label per support point from its label distribution."""
    rng = np.random.default_rng(seed)
    u = rng.random(model.n_support)
    cdf = np.cumsum(model.label_probs, axis=1)
    return np.minimum((cdf < u[:, None]).sum(axis=1), model.k - 1)


def labels_matching_accuracy(
    model: FiniteGenerativeModel, target_acc: float
) -> np.ndarray:
    """Deterministic labeling under which the model's own top choice scores
    as close to ``target_acc`` as the point masses allow.

    A prefix of points (in support order) gets its modal label; the rest get
    the lowest-index non-modal label.
    """
    if not (0.0 <= target_acc <= 1.0):
        raise BadParams("target accuracy must lie in [0, 1]")
    modal = np.argmax(model.label_probs, axis=1)
    labels = np.where(modal == 0, 1, 0)
    acc = 0.0
    for i in range(model.n_support):
        w = model.weights[i]
        if abs(acc + w - target_acc) <= abs(acc - target_acc):
            labels[i] = modal[i]
            acc += w
        else:
            break
    return labels


def tce(model: FiniteGenerativeModel, predictor: Predictor) -> float:
    """Expected per-class L1 gap (scaled by 1/k) between p* and the predictor."""
    pred = predictor.matrix_for(model.support)
    per_point = np.abs(model.label_probs - pred).sum(axis=1) / model.k
    return float(model.weights @ per_point)


@dataclass(frozen=True)
class BoundConstruction:
    """Result of the accuracy-trading construction: the predictor, the
    accuracy it achieves under the given labels, and the reference accuracy."""

    predictor: Predictor
    achieved_acc: float
    reference_acc: float


def construct_bound_predictor(
    model: FiniteGenerativeModel,
    labels: np.ndarray,
    target_acc: float,
    pi_star: Predictor | None = None,
) -> BoundConstruction:
    """Modify the reference predictor to hit ~target_acc while keeping the
    distribution distance within twice the accuracy gap.

    The reference predictor is the model's own label distribution (passing a
    different one would void the guarantee, so it is checked). Points are
    flipped greedily in support order: to a one-hot on their realized label
    (raising accuracy) or on the lowest-index wrong class (lowering it),
    stopping at the nearest achievable mass. The result satisfies
    ``tce(model, out) <= 2 * |achieved - reference|`` exactly.
    """
    if not (0.0 <= target_acc <= 1.0):
        raise BadParams("target accuracy must lie in [0, 1]")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (model.n_support,):
        raise BadParams("labels must align with the support")
    if labels.min() < 0 or labels.max() >= model.k:
        raise BadParams("labels outside [0, k)")
    base = model.label_probs
    if pi_star is not None:
        given = pi_star.matrix_for(model.support)
        if np.abs(given - base).max() > SIMPLEX_ATOL:
            raise BadParams(
                "reference predictor must equal the model's label distribution"
            )

    top = np.argmax(base, axis=1)
    correct = top == labels
    a_star = float(model.weights @ correct)

    raise_acc = target_acc >= a_star
    pool = np.flatnonzero(~correct) if raise_acc else np.flatnonzero(correct)
    needed = abs(target_acc - a_star)
    if needed > float(model.weights[pool].sum()) + 1e-9:
        raise UnreachableAccuracy(
            f"cannot move accuracy from {a_star} to {target_acc}: "
            f"only {model.weights[pool].sum()} mass available"
        )

    out = base.copy()
    moved = 0.0
    for i in pool:
        w = float(model.weights[i])
        if abs(moved + w - needed) > abs(moved - needed):
            break
        out[i] = 0.0
        if raise_acc:
            out[i, labels[i]] = 1.0
        else:
            wrong = 0 if labels[i] != 0 else 1
            out[i, wrong] = 1.0
        moved += w

    achieved = a_star + moved if raise_acc else a_star - moved
    return BoundConstruction(Predictor(list(model.support), out), achieved, a_star)


def lower_bound_constant(
    model: FiniteGenerativeModel, pi_star: Predictor, pi: Predictor
) -> tuple[float, bool]:
    """Smallest scaled per-point gap over points where the two predictors
    pick different top classes, and whether it lower-bounds TCE against the
    accuracy difference (it must).
    """
    ref = pi_star.matrix_for(model.support)
    other = pi.matrix_for(model.support)
    disagree = np.argmax(ref, axis=1) != np.argmax(other, axis=1)
    if not disagree.any():
        raise NoDisagreement("the predictors pick the same top class everywhere")
    gaps = np.abs(model.label_probs[disagree] - other[disagree]).max(axis=1)
    c = float(gaps.min()) / model.k
    acc_gap = abs(population_accuracy(model, pi_star) - population_accuracy(model, pi))
    holds = tce(model, pi) >= c * acc_gap - 1e-12
    return c, holds


def population_cw_ece(model: FiniteGenerativeModel, predictor: Predictor) -> float:
    """Classwise calibration gap conditioning on exact per-class confidences."""
    pred = predictor.matrix_for(model.support)
    total = 0.0
    for j in range(model.k):
        vals = pred[:, j]
        for v in np.unique(vals):
            mask = vals == v
            w = float(model.weights[mask].sum())
            if w == 0.0:
                continue
            freq = float(model.weights[mask] @ model.label_probs[mask, j]) / w
            total += w * abs(freq - float(v))
    return float(total) / model.k


def verify_ece_le_tce(
    model: FiniteGenerativeModel, predictor: Predictor
) -> tuple[float, float, bool]:
    """Population classwise gap, the distribution distance, and whether the
    first is bounded by the second (it must be, up to 1e-12)."""
    cw = population_cw_ece(model, predictor)
    t = tce(model, predictor)
    return cw, t, bool(cw <= t + 1e-12)


# Strictly-positive marker for the unreachable-zero side of the regime split;
# the actual constant is instance-dependent and not quantified here.
ECE_LOWER_POSITIVE_MARKER = math.ulp(0.0)


@dataclass(frozen=True)
class RegimeClassification:
    regime: str
    acc: float
    acc_star: float
    ece_upper: float
    ece_lower: float


def classify_regime(acc: float, acc_star: float) -> RegimeClassification:
    """Split on the reference accuracy: at or below it, zero calibration error
    is achievable; above it, the error is strictly positive."""
    if not (0.0 <= acc <= 1.0 and 0.0 <= acc_star <= 1.0):
        raise BadParams("accuracies must lie in [0, 1]")
    calibratable = acc <= acc_star
    return RegimeClassification(
        regime="calibratable" if calibratable else "non-calibratable",
        acc=acc,
        acc_star=acc_star,
        ece_upper=2.0 * abs(acc_star - acc),
        ece_lower=0.0 if calibratable else ECE_LOWER_POSITIVE_MARKER,
    )

"""Labeled samples, finite atomic measures, and the conjugate Dirichlet sampler.

Outcomes are stored in vectorized form: one container holds all outcomes of a
sample or measure, tagged with a variant kind ("real", "class", or "probs").
All types are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import OutcomeTypeError, ParameterError

REAL = "real"
CLASS = "class"
PROBS = "probs"

_PROB_TOL = 1e-9
_WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class RngStream:
    """Deterministic, splittable random stream keyed by (seed, path).

    Identical (seed, path) pairs always yield identical generators.  Child
    streams are statistically independent, which makes per-draw results
    independent of thread scheduling.
    """

    seed: int
    path: tuple[int, ...] = ()

    def child(self, index: int) -> "RngStream":
        return RngStream(self.seed, self.path + (int(index),))

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=self.path))


class Outcomes:
    """Immutable column of outcomes, all of one variant.

    kind == "real":  values is a float vector.
    kind == "class": values is an int vector of labels in [0, num_classes).
    kind == "probs": values is a (n, C) matrix of rows on the simplex.
    """

    __slots__ = ("kind", "values", "num_classes")

    def __init__(self, kind, values, num_classes=None):
        values = np.asarray(values)
        if not np.all(np.isfinite(values)):
            raise ParameterError("outcomes contain NaN or Inf")
        if kind == REAL:
            values = np.array(values, dtype=float)
            if values.ndim != 1:
                raise ParameterError("real outcomes must form a vector")
        elif kind == CLASS:
            values = np.array(values, dtype=np.int64)
            if values.ndim != 1:
                raise ParameterError("class outcomes must form a vector")
            if num_classes is None or num_classes < 2:
                raise ParameterError("class outcomes need num_classes >= 2")
            if values.size and (values.min() < 0 or values.max() >= num_classes):
                raise ParameterError("class label outside [0, num_classes)")
        elif kind == PROBS:
            values = np.array(values, dtype=float)
            if values.ndim != 2 or values.shape[1] < 2:
                raise ParameterError("probability outcomes must form an (n, C>=2) matrix")
            if np.any(values < -_PROB_TOL):
                raise ParameterError("negative class probability")
            sums = values.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > _PROB_TOL):
                raise ParameterError("class probabilities must sum to 1 within 1e-9")
            values = np.clip(values, 0.0, None)
            values = values / values.sum(axis=1, keepdims=True)
            num_classes = values.shape[1]
        else:
            raise ParameterError(f"unknown outcome kind {kind!r}")
        values.setflags(write=False)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "num_classes", num_classes)

    def __setattr__(self, name, value):
        raise AttributeError("Outcomes is immutable")

    @classmethod
    def real(cls, values) -> "Outcomes":
        return cls(REAL, values)

    @classmethod
    def classes(cls, labels, num_classes) -> "Outcomes":
        return cls(CLASS, labels, num_classes)

    @classmethod
    def probs(cls, p) -> "Outcomes":
        return cls(PROBS, p)

    def __len__(self):
        return self.values.shape[0]

    def take(self, idx) -> "Outcomes":
        return Outcomes(self.kind, self.values[idx], self.num_classes)

    def same_variant(self, other: "Outcomes") -> bool:
        return self.kind == other.kind and self.num_classes == other.num_classes

    @staticmethod
    def concat(a: "Outcomes", b: "Outcomes") -> "Outcomes":
        if not a.same_variant(b):
            raise OutcomeTypeError("cannot concatenate outcomes of different variants")
        return Outcomes(a.kind, np.concatenate([a.values, b.values]), a.num_classes)


def _check_covariates(covariates, n):
    covariates = np.array(np.asarray(covariates, dtype=float), dtype=float)
    if covariates.ndim == 1:
        covariates = covariates[:, None]
    if covariates.ndim != 2 or covariates.shape[0] != n:
        raise ParameterError("covariate row count must match outcome count")
    if not np.all(np.isfinite(covariates)):
        raise ParameterError("covariates contain NaN or Inf")
    covariates.setflags(write=False)
    return covariates


@dataclass(frozen=True)
class LabeledSample:
    """A labeled data sample, optionally carrying paired imputed outcomes.

    The `imputed` column holds the AI imputation for each labeled row (a real
    prediction or a class-probability vector).  It is required only by
    rectifiers that fit on paired (true, imputed) calibration data.
    """

    covariates: np.ndarray
    outcomes: Outcomes
    imputed: Outcomes | None = None

    def __post_init__(self):
        n = len(self.outcomes)
        if n < 1:
            raise ParameterError("labeled sample must be nonempty")
        object.__setattr__(self, "covariates", _check_covariates(self.covariates, n))
        if self.imputed is not None and len(self.imputed) != n:
            raise ParameterError("imputed column length must match the sample")

    @property
    def n(self) -> int:
        return len(self.outcomes)

    @property
    def d_x(self) -> int:
        return self.covariates.shape[1]

    def take(self, idx) -> "LabeledSample":
        imputed = None if self.imputed is None else self.imputed.take(idx)
        return LabeledSample(self.covariates[idx], self.outcomes.take(idx), imputed)


@dataclass(frozen=True)
class AtomicMeasure:
    """Finite weighted set of (covariate, outcome) atoms with weights on the simplex."""

    covariates: np.ndarray
    outcomes: Outcomes
    weights: np.ndarray = None

    def __post_init__(self):
        k = len(self.outcomes)
        if k < 1:
            raise ParameterError("atomic measure must have at least one atom")
        object.__setattr__(self, "covariates", _check_covariates(self.covariates, k))
        if self.weights is None:
            weights = np.full(k, 1.0 / k)
        else:
            weights = np.array(np.asarray(self.weights, dtype=float))
            if weights.shape != (k,):
                raise ParameterError("weight count must match atom count")
            if np.any(weights < 0):
                raise ParameterError("weights must be nonnegative")
            total = weights.sum()
            if abs(total - 1.0) > _WEIGHT_TOL:
                raise ParameterError("weights must sum to 1 within 1e-12")
            weights = weights / total
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)

    @property
    def k(self) -> int:
        return len(self.outcomes)

    def with_outcomes(self, outcomes: Outcomes) -> "AtomicMeasure":
        if len(outcomes) != self.k:
            raise ParameterError("replacement outcomes must match atom count")
        return AtomicMeasure(self.covariates, outcomes, self.weights)


@dataclass(frozen=True)
class DirichletWeights:
    """One joint Dirichlet draw over labeled rows and base atoms."""

    labeled_w: np.ndarray
    base_w: np.ndarray = field(default_factory=lambda: np.empty(0))


def sample_dirichlet_weights(n: int, k: int, alpha: float, rng: RngStream) -> DirichletWeights:
    """Draw (w_1..w_n, wt_1..wt_k) ~ Dirichlet(1,...,1, alpha/k,...,alpha/k).

    Sampling goes through independent Gamma variates; shapes alpha/k below 1
    are handled exactly by the generator.  Underflowed zeros are clamped to
    the smallest positive float and the vector renormalized, so downstream
    objectives never see a degenerate zero weight.
    """
    if n < 1 or k < 1:
        raise ParameterError("n and k must be positive")
    if not alpha > 0:
        raise ParameterError("alpha must be positive")
    gen = rng.generator()
    shapes = np.concatenate([np.ones(n), np.full(k, alpha / k)])
    g = gen.gamma(shapes)
    g = np.maximum(g, np.finfo(float).tiny)
    g = g / g.sum()
    return DirichletWeights(labeled_w=g[:n], base_w=g[n:])


def sample_uniform_dirichlet(n: int, rng: RngStream) -> np.ndarray:
    """Flat Dirichlet(1,...,1) over n rows; the Bayesian bootstrap weight law."""
    if n < 1:
        raise ParameterError("n must be positive")
    g = rng.generator().gamma(1.0, size=n)
    g = np.maximum(g, np.finfo(float).tiny)
    return g / g.sum()


def empirical_measure(sample: LabeledSample) -> AtomicMeasure:
    """Uniform-weight atomic measure on the sample rows (multiset semantics)."""
    return AtomicMeasure(sample.covariates, sample.outcomes, np.full(sample.n, 1.0 / sample.n))


def resample_nonparametric_bootstrap(sample: LabeledSample, rng: RngStream) -> LabeledSample:
    """n rows drawn i.i.d. uniformly with replacement from the input sample."""
    idx = rng.generator().integers(0, sample.n, size=sample.n)
    return sample.take(idx)


def realize_class_labels(base: AtomicMeasure, rng: RngStream) -> AtomicMeasure:
    """Replace each ClassProbs atom by a Class label drawn from its categorical law."""
    if base.outcomes.kind != PROBS:
        raise OutcomeTypeError("realize_class_labels requires probability outcomes")
    p = base.outcomes.values
    u = rng.generator().random(base.k)
    labels = (p.cumsum(axis=1) < u[:, None]).sum(axis=1)
    labels = np.minimum(labels, p.shape[1] - 1)
    return base.with_outcomes(Outcomes.classes(labels, p.shape[1]))

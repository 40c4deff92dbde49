"""Rectifier fitting and application, plus calibration-sample strategies.

A rectifier is a map on atomic measures that transforms outcomes atom by
atom, leaving covariates and weights untouched.  Fitting uses a labeled
calibration sample; application targets the AI base measure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import softmax

from .exceptions import OutcomeTypeError, ParameterError
from .losses import LossSpec, _solve_logistic, mean_score
from .measures import (
    CLASS,
    PROBS,
    REAL,
    AtomicMeasure,
    LabeledSample,
    Outcomes,
    RngStream,
    resample_nonparametric_bootstrap,
)


@dataclass(frozen=True)
class Identity:
    pass


@dataclass(frozen=True)
class QuantileMap:
    pass


@dataclass(frozen=True)
class Isotonic:
    pass


@dataclass(frozen=True)
class MomentShift:
    pass


@dataclass(frozen=True)
class MomentAffine:
    pass


@dataclass(frozen=True)
class ProbRecalib:
    ridge: float = 1e-4
    clamp: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.clamp <= 1e-2:
            raise ParameterError("clamp must lie in (0, 1e-2]")
        if self.ridge < 0:
            raise ParameterError("ridge must be nonnegative")


RectifierSpec = Union[Identity, QuantileMap, Isotonic, MomentShift, MomentAffine, ProbRecalib]


@dataclass(frozen=True)
class Fixed:
    pass


@dataclass(frozen=True)
class Split:
    fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.fraction < 1.0:
            raise ParameterError("split fraction must lie in (0, 1)")


@dataclass(frozen=True)
class Npb:
    pass


CalibrationStrategy = Union[Fixed, Split, Npb]


@dataclass(frozen=True)
class FittedRectifier:
    spec: RectifierSpec
    state: dict


def make_calibration_sample(labeled: LabeledSample, strategy: CalibrationStrategy,
                            rng: RngStream) -> tuple[LabeledSample, LabeledSample]:
    """Build (calibration, inference) samples under the configured strategy.

    Fixed reuses the full labeled sample for both roles; Split partitions it
    at random; Npb calibrates on a nonparametric bootstrap resample while
    keeping the full sample for inference.
    """
    if isinstance(strategy, Fixed):
        return labeled, labeled
    if isinstance(strategy, Split):
        n = labeled.n
        n_cal = math.ceil(strategy.fraction * n)
        if n_cal == 0 or n_cal == n:
            raise ParameterError("split leaves an empty part")
        perm = rng.generator().permutation(n)
        return labeled.take(perm[:n_cal]), labeled.take(perm[n_cal:])
    if isinstance(strategy, Npb):
        return resample_nonparametric_bootstrap(labeled, rng), labeled
    raise ParameterError(f"unknown strategy {strategy!r}")


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def fit_quantile_map(calib_true, calib_imputed) -> FittedRectifier:
    """Empirical quantile-mapping transform y -> Fhat_Y^{-1}(Fhat_Yhat(y)).

    Stores both marginals as sorted grids of equal length m.  Application
    uses the right-continuous empirical CDF of the imputed grid and the
    ceil(u*m)-th order statistic of the true grid, clamping below the grid
    to the smallest order statistic.
    """
    t = np.sort(np.asarray(calib_true, dtype=float))
    i = np.sort(np.asarray(calib_imputed, dtype=float))
    if t.size != i.size or t.size < 1:
        raise ParameterError("calibration grids must be nonempty and of equal length")
    return FittedRectifier(QuantileMap(), {"imputed_grid": i, "true_grid": t})


def _apply_quantile_map(state, y):
    grid_i, grid_t = state["imputed_grid"], state["true_grid"]
    m = grid_i.size
    j = np.searchsorted(grid_i, y, side="right")
    return grid_t[np.clip(j, 1, m) - 1]


def pava(values, weights) -> np.ndarray:
    """Weighted least-squares isotonic fit by pool-adjacent-violators."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    level_val = []
    level_w = []
    level_len = []
    for v, w in zip(values, weights):
        level_val.append(v)
        level_w.append(w)
        level_len.append(1)
        while len(level_val) > 1 and level_val[-2] > level_val[-1] + 0.0:
            v2, w2, n2 = level_val.pop(), level_w.pop(), level_len.pop()
            v1, w1, n1 = level_val.pop(), level_w.pop(), level_len.pop()
            level_val.append((w1 * v1 + w2 * v2) / (w1 + w2))
            level_w.append(w1 + w2)
            level_len.append(n1 + n2)
    return np.repeat(level_val, level_len)


def fit_isotonic(calib_imputed, calib_true) -> FittedRectifier:
    """Monotone nondecreasing map of imputed to true outcomes via PAVA.

    Ties in the imputed values are pre-pooled (weighted by multiplicity)
    before running PAVA, which yields the least-squares monotone fit.
    Application is stepwise constant with knots at midpoints between
    consecutive distinct imputed values, clamped beyond the grid.
    """
    x = np.asarray(calib_imputed, dtype=float)
    y = np.asarray(calib_true, dtype=float)
    if x.size != y.size or x.size < 1:
        raise ParameterError("calibration vectors must be nonempty and of equal length")
    knots, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    sums = np.zeros(knots.size)
    np.add.at(sums, inverse, y)
    fitted = pava(sums / counts, counts.astype(float))
    return FittedRectifier(Isotonic(), {"knots": knots, "fitted": fitted})


def _apply_isotonic(state, y):
    knots, fitted = state["knots"], state["fitted"]
    if knots.size == 1:
        return np.full(np.shape(y), fitted[0])
    mids = 0.5 * (knots[:-1] + knots[1:])
    idx = np.searchsorted(mids, y, side="left")
    return fitted[idx]


def _base_real_values(base: AtomicMeasure):
    if base.outcomes.kind != REAL:
        raise OutcomeTypeError("rectifier requires real base outcomes")
    return base.outcomes.values


def fit_moment_shift(calib: LabeledSample, base: AtomicMeasure) -> FittedRectifier:
    """Scalar shift making the rectified base mean equal the calibration mean."""
    if calib.outcomes.kind != REAL:
        raise OutcomeTypeError("moment shift requires real outcomes")
    c = calib.outcomes.values.mean() - np.average(_base_real_values(base), weights=base.weights)
    return FittedRectifier(MomentShift(), {"shift": float(c)})


def fit_moment_affine(calib: LabeledSample, base: AtomicMeasure) -> FittedRectifier:
    """Affine map y -> a + b*y matching mean and covariate-cross moments.

    Solves the stacked 1 + d_x moment equations in least squares.  When the
    system is rank deficient (base imputations effectively constant, or a
    constant covariate duplicating the mean equation), it falls back to the
    moment-shift solution (b = 1).
    """
    if calib.outcomes.kind != REAL:
        raise OutcomeTypeError("moment affine requires real outcomes")
    yhat = _base_real_values(base)
    w = base.weights
    yc = calib.outcomes.values
    rows = [[1.0, float(np.average(yhat, weights=w))]]
    rhs = [yc.mean()]
    for j in range(base.covariates.shape[1]):
        xb = base.covariates[:, j]
        rows.append([float(np.average(xb, weights=w)), float(np.average(xb * yhat, weights=w))])
        rhs.append(float(np.mean(calib.covariates[:, j] * yc)))
    A = np.asarray(rows)
    r = np.asarray(rhs)
    sol, _, rank, _ = np.linalg.lstsq(A, r, rcond=1e-10)
    if rank < 2:
        shift = fit_moment_shift(calib, base)
        return FittedRectifier(MomentAffine(), {"a": shift.state["shift"], "b": 1.0})
    return FittedRectifier(MomentAffine(), {"a": float(sol[0]), "b": float(sol[1])})


def clamp_log_probs(p, clamp):
    """Clamp probabilities away from zero, renormalize, and take logs."""
    q = np.clip(p, clamp, None)
    q = q / q.sum(axis=1, keepdims=True)
    return np.log(q)


def fit_prob_recalib(calib: LabeledSample, spec: ProbRecalib) -> FittedRectifier:
    """Multinomial logistic recalibration g(p, x) = softmax(W(log p, x) + b).

    The calibration sample must carry Class outcomes and per-row imputed
    class probabilities; (W, b) minimize ridge-regularized cross-entropy on
    the features (log clamped probabilities, covariates).
    """
    if calib.outcomes.kind != CLASS:
        raise OutcomeTypeError("probability recalibration requires class outcomes")
    if calib.imputed is None or calib.imputed.kind != PROBS:
        raise OutcomeTypeError("calibration sample must carry imputed class probabilities")
    c = calib.outcomes.num_classes
    if calib.imputed.num_classes != c:
        raise OutcomeTypeError("imputed probabilities disagree with label classes")
    feats = np.column_stack([clamp_log_probs(calib.imputed.values, spec.clamp), calib.covariates])
    f = np.column_stack([np.ones(calib.n), feats])
    ridge = max(spec.ridge, 1e-8)
    theta, _ = _solve_logistic(f, calib.outcomes.values, np.ones(calib.n), c, ridge)
    coef = theta.reshape(c, -1)
    return FittedRectifier(spec, {"W": coef[:, 1:], "b": coef[:, 0]})


def _apply_prob_recalib(spec: ProbRecalib, state, base: AtomicMeasure):
    if base.outcomes.kind != PROBS:
        raise OutcomeTypeError("probability recalibration requires probability outcomes")
    feats = np.column_stack([clamp_log_probs(base.outcomes.values, spec.clamp), base.covariates])
    z = feats @ state["W"].T + state["b"]
    return Outcomes.probs(softmax(z, axis=1))


def apply_rectifier(r: FittedRectifier, base: AtomicMeasure) -> AtomicMeasure:
    """Transform every atom's outcome; covariates and weights are unchanged."""
    spec = r.spec
    if isinstance(spec, Identity):
        return base
    if isinstance(spec, QuantileMap):
        return base.with_outcomes(Outcomes.real(_apply_quantile_map(r.state, _base_real_values(base))))
    if isinstance(spec, Isotonic):
        return base.with_outcomes(Outcomes.real(_apply_isotonic(r.state, _base_real_values(base))))
    if isinstance(spec, MomentShift):
        return base.with_outcomes(Outcomes.real(_base_real_values(base) + r.state["shift"]))
    if isinstance(spec, MomentAffine):
        return base.with_outcomes(Outcomes.real(r.state["a"] + r.state["b"] * _base_real_values(base)))
    if isinstance(spec, ProbRecalib):
        return base.with_outcomes(_apply_prob_recalib(spec, r.state, base))
    raise ParameterError(f"unknown rectifier spec {spec!r}")


def _paired_real(calib: LabeledSample):
    if calib.outcomes.kind != REAL:
        raise OutcomeTypeError("rectifier requires real outcomes")
    if calib.imputed is None or calib.imputed.kind != REAL:
        raise OutcomeTypeError("calibration sample must carry real imputed outcomes")
    return calib.outcomes.values, calib.imputed.values


def fit_rectifier(spec: RectifierSpec, calib: LabeledSample, base: AtomicMeasure) -> FittedRectifier:
    """Dispatch fitting of any rectifier family on a calibration sample."""
    if isinstance(spec, Identity):
        return FittedRectifier(spec, {})
    if isinstance(spec, QuantileMap):
        true, imputed = _paired_real(calib)
        return fit_quantile_map(true, imputed)
    if isinstance(spec, Isotonic):
        true, imputed = _paired_real(calib)
        return fit_isotonic(imputed, true)
    if isinstance(spec, MomentShift):
        return fit_moment_shift(calib, base)
    if isinstance(spec, MomentAffine):
        return fit_moment_affine(calib, base)
    if isinstance(spec, ProbRecalib):
        return fit_prob_recalib(calib, spec)
    raise ParameterError(f"unknown rectifier spec {spec!r}")


def score_discrepancy(base: AtomicMeasure, reference: AtomicMeasure,
                      loss: LossSpec, theta) -> np.ndarray:
    """(P_reference - P_base) g_theta as a difference of weighted score means."""
    ref = mean_score(loss, theta, reference.covariates, reference.outcomes, reference.weights)
    bas = mean_score(loss, theta, base.covariates, base.outcomes, base.weights)
    return ref - bas


# ---------------------------------------------------------------------------
# serialization (versioned key = value text document)
# ---------------------------------------------------------------------------

_FORMAT_TAG = "rectiprior-rectifier-v1"

_SPEC_TAGS = {
    Identity: "identity",
    QuantileMap: "quantile-map",
    Isotonic: "isotonic",
    MomentShift: "moment-shift",
    MomentAffine: "moment-affine",
    ProbRecalib: "prob-recalib",
}


def _fmt_array(a):
    return ",".join(repr(float(v)) for v in np.asarray(a, dtype=float).ravel())


def serialize_rectifier(r: FittedRectifier) -> str:
    lines = [_FORMAT_TAG, f"spec = {_SPEC_TAGS[type(r.spec)]}"]
    if isinstance(r.spec, ProbRecalib):
        lines.append(f"ridge = {r.spec.ridge!r}")
        lines.append(f"clamp = {r.spec.clamp!r}")
        lines.append(f"num_classes = {r.state['W'].shape[0]}")
    for key in sorted(r.state):
        lines.append(f"{key} = {_fmt_array(r.state[key])}")
    return "\n".join(lines) + "\n"


def parse_rectifier(text: str) -> FittedRectifier:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _FORMAT_TAG:
        raise ParameterError("unrecognized rectifier document format")
    fields = {}
    for ln in lines[1:]:
        key, _, value = ln.partition("=")
        fields[key.strip()] = value.strip()
    tag = fields.pop("spec")
    by_tag = {v: k for k, v in _SPEC_TAGS.items()}
    if tag not in by_tag:
        raise ParameterError(f"unknown rectifier tag {tag!r}")
    cls = by_tag[tag]
    if cls is ProbRecalib:
        spec = ProbRecalib(ridge=float(fields.pop("ridge")), clamp=float(fields.pop("clamp")))
        c = int(fields.pop("num_classes"))
        w = np.array([float(v) for v in fields["W"].split(",")])
        b = np.array([float(v) for v in fields["b"].split(",")])
        state = {"W": w.reshape(c, -1), "b": b}
        return FittedRectifier(spec, state)
    spec = cls()
    state = {}
    for key, value in fields.items():
        arr = np.array([float(v) for v in value.split(",")])
        state[key] = float(arr[0]) if key in ("shift", "a", "b") else arr
    return FittedRectifier(spec, state)

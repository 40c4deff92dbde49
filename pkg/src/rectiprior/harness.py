"""Synthetic scenario generators, CSV ingestion, and the replication benchmark."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax
from scipy.stats import norm

from .diagnostics import (
    BenchRecord,
    aggregate_bench,
    classical_interval,
    interval_score,
    labeled_erm,
)
from .exceptions import CapabilityError, IngestionError, ParameterError
from .losses import (
    LinearRegressionLoss,
    LossSpec,
    MeanLoss,
    QuantileLoss,
    is_classification,
)
from .measures import AtomicMeasure, LabeledSample, Outcomes, RngStream
from .posterior import PriorConfig, run_posterior
from .rectifiers import CalibrationStrategy, Identity, Npb, RectifierSpec

SCENARIO_TAGS = ("gaussian-shift", "monotone-distortion",
                 "heteroscedastic-linear", "categorical-miscalibrated")

# fixed generating coefficients for the linear scenario: intercept, slopes
_LINEAR_THETA = np.array([0.5, 2.0, -1.0])
_LINEAR_DAMP = 0.7


@dataclass(frozen=True)
class ScenarioSpec:
    """Desk-scale synthetic scenario with an analytically known target.

    miscal is the primary miscalibration parameter (additive shift of the
    imputations, warp strength, or categorical logit bias depending on the
    tag); miscal2 is the secondary one (slope damping for the linear
    scenario, sharpening temperature for the categorical one).
    """

    tag: str
    n: int
    n_unlabeled: int = 500
    noise: float = 0.2
    miscal: float = 1.0
    miscal2: float = 0.5
    num_classes: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.tag not in SCENARIO_TAGS:
            raise ParameterError(f"unknown scenario tag {self.tag!r}")
        if self.n < 1 or self.n_unlabeled < 1:
            raise ParameterError("sample sizes must be positive")
        if not np.isfinite([self.noise, self.miscal, self.miscal2]).all():
            raise ParameterError("scenario parameters must be finite")

    @property
    def target_coord(self) -> int:
        return 1 if self.tag == "heteroscedastic-linear" else 0


def _monotone_warp(y, a):
    # strictly increasing, asymmetric warp; a controls the distortion strength
    if a == 0:
        return np.asarray(y, dtype=float)
    return np.expm1(a * np.asarray(y, dtype=float)) / a


def _categorical_logit_matrix(num_classes, d_x=2):
    # deterministic, well-spread class directions
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    return 2.0 * np.column_stack([np.cos(angles), np.sin(angles)])[:, :d_x]


def scenario_theta0(spec: ScenarioSpec, loss: LossSpec):
    """Analytic risk-minimizer of the scenario's generating law, when known."""
    if spec.tag in ("gaussian-shift", "monotone-distortion"):
        if isinstance(loss, MeanLoss):
            return np.array([0.0])
        if isinstance(loss, QuantileLoss):
            return np.array([norm.ppf(loss.tau)])
        raise CapabilityError("scenario has real scalar outcomes")
    if spec.tag == "heteroscedastic-linear":
        if isinstance(loss, LinearRegressionLoss):
            return _LINEAR_THETA.copy() if loss.intercept else _LINEAR_THETA[1:].copy()
        raise CapabilityError("scenario targets a regression coefficient")
    return None


def generate_scenario(spec: ScenarioSpec, loss: LossSpec | None = None):
    """Draw (labeled, base, theta0) from the scenario's generating law.

    Labeled samples carry paired imputations so that paired rectifiers
    (quantile map, isotonic, probability recalibration) can be fit.
    """
    gen = RngStream(spec.seed).generator()
    if spec.tag in ("gaussian-shift", "monotone-distortion"):
        y = gen.standard_normal(spec.n)
        y0 = gen.standard_normal(spec.n_unlabeled)
        if spec.tag == "gaussian-shift":
            imputed = y + spec.miscal + spec.noise * gen.standard_normal(spec.n)
            base_yhat = y0 + spec.miscal + spec.noise * gen.standard_normal(spec.n_unlabeled)
        else:
            imputed = _monotone_warp(y + spec.noise * gen.standard_normal(spec.n), spec.miscal)
            base_yhat = _monotone_warp(y0 + spec.noise * gen.standard_normal(spec.n_unlabeled),
                                       spec.miscal)
        labeled = LabeledSample(np.zeros((spec.n, 1)), Outcomes.real(y), Outcomes.real(imputed))
        base = AtomicMeasure(np.zeros((spec.n_unlabeled, 1)), Outcomes.real(base_yhat))
        theta0 = scenario_theta0(spec, loss) if loss is not None else np.array([0.0])
        return labeled, base, theta0

    if spec.tag == "heteroscedastic-linear":
        def draw(count):
            x = gen.standard_normal((count, 2))
            mean = _LINEAR_THETA[0] + x @ _LINEAR_THETA[1:]
            y = mean + (0.5 + 0.5 * np.abs(x[:, 0])) * spec.noise * gen.standard_normal(count)
            yhat = spec.miscal + _LINEAR_DAMP * mean + spec.miscal2 * gen.standard_normal(count)
            return x, y, yhat

        x, y, yhat = draw(spec.n)
        xb, _, yhat_b = draw(spec.n_unlabeled)
        labeled = LabeledSample(x, Outcomes.real(y), Outcomes.real(yhat))
        base = AtomicMeasure(xb, Outcomes.real(yhat_b))
        theta0 = scenario_theta0(spec, loss) if loss is not None else _LINEAR_THETA.copy()
        return labeled, base, theta0

    # categorical-miscalibrated
    a = _categorical_logit_matrix(spec.num_classes)
    temp = spec.miscal2 if spec.miscal2 > 0 else 0.5

    def draw_cat(count):
        x = gen.standard_normal((count, 2))
        z = x @ a.T
        p = softmax(z, axis=1)
        u = gen.random(count)
        labels = (p.cumsum(axis=1) < u[:, None]).sum(axis=1)
        labels = np.minimum(labels, spec.num_classes - 1)
        zh = z / temp
        zh[:, 0] += spec.miscal
        return x, labels, softmax(zh, axis=1)

    x, labels, phat = draw_cat(spec.n)
    xb, _, phat_b = draw_cat(spec.n_unlabeled)
    labeled = LabeledSample(x, Outcomes.classes(labels, spec.num_classes), Outcomes.probs(phat))
    base = AtomicMeasure(xb, Outcomes.probs(phat_b))
    return labeled, base, None


# ---------------------------------------------------------------------------
# CSV ingestion and emission
# ---------------------------------------------------------------------------

def _fmt(v):
    return repr(float(v))


def _parse_float(cell, line_no):
    try:
        return float(cell)
    except ValueError:
        raise IngestionError(f"non-numeric cell {cell!r}", line=line_no) from None


def _read_rows(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise IngestionError("empty file", line=1)
    return rows[0], rows[1:]


def _x_columns(header):
    d = 0
    while d < len(header) and header[d] == f"x{d + 1}":
        d += 1
    return d


def load_labeled_csv(path, num_classes=None) -> LabeledSample:
    """Read a labeled sample: columns x1..xd, then y or y_class.

    Optional trailing columns yhat or p1..pC attach per-row imputations for
    paired rectifiers.
    """
    header, rows = _read_rows(path)
    d = _x_columns(header)
    rest = header[d:]
    if not rest or rest[0] not in ("y", "y_class"):
        raise IngestionError("expected a y or y_class column after x1..xd", line=1)
    kind = rest[0]
    imp_cols = rest[1:]
    if imp_cols and imp_cols != ["yhat"] and imp_cols != [f"p{j + 1}" for j in range(len(imp_cols))]:
        raise IngestionError("imputation columns must be yhat or p1..pC", line=1)
    if kind == "y_class" and num_classes is None:
        if imp_cols and imp_cols[0].startswith("p"):
            num_classes = len(imp_cols)
        else:
            raise IngestionError("class outcomes need a declared number of classes", line=1)

    xs, ys, imps = [], [], []
    for i, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise IngestionError(f"expected {len(header)} cells, got {len(row)}", line=i)
        xs.append([_parse_float(c, i) for c in row[:d]])
        ys.append(_parse_float(row[d], i))
        if imp_cols:
            imps.append([_parse_float(c, i) for c in row[d + 1:]])
    x = np.asarray(xs, dtype=float).reshape(len(rows), d)
    imputed = None
    if imp_cols == ["yhat"]:
        imputed = Outcomes.real([v[0] for v in imps])
    elif imp_cols:
        imputed = Outcomes.probs(_renorm_probs(np.asarray(imps)))
    if kind == "y":
        outcomes = Outcomes.real(ys)
    else:
        labels = np.asarray(ys)
        if np.any(labels != np.round(labels)):
            raise IngestionError("y_class entries must be integers", line=2)
        outcomes = Outcomes.classes(labels.astype(int), num_classes)
    return LabeledSample(x, outcomes, imputed)


def _renorm_probs(p):
    sums = p.sum(axis=1)
    bad = np.nonzero(sums <= 0)[0]
    if bad.size:
        raise IngestionError("probability row sums to zero", line=int(bad[0]) + 2)
    return p / sums[:, None]


def load_base_csv(path) -> AtomicMeasure:
    """Read a base measure: columns x1..xd plus yhat or p1..pC, uniform weights."""
    header, rows = _read_rows(path)
    d = _x_columns(header)
    rest = header[d:]
    if rest == ["yhat"]:
        kind = "real"
    elif rest and rest == [f"p{j + 1}" for j in range(len(rest))]:
        kind = "probs"
    else:
        raise IngestionError("expected yhat or p1..pC columns after x1..xd", line=1)
    xs, vals = [], []
    for i, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise IngestionError(f"expected {len(header)} cells, got {len(row)}", line=i)
        xs.append([_parse_float(c, i) for c in row[:d]])
        vals.append([_parse_float(c, i) for c in row[d:]])
    x = np.asarray(xs, dtype=float).reshape(len(rows), d)
    if kind == "real":
        outcomes = Outcomes.real([v[0] for v in vals])
    else:
        outcomes = Outcomes.probs(_renorm_probs(np.asarray(vals)))
    return AtomicMeasure(x, outcomes)


def write_labeled_csv(path, labeled: LabeledSample):
    d = labeled.d_x
    header = [f"x{j + 1}" for j in range(d)]
    header.append("y" if labeled.outcomes.kind == "real" else "y_class")
    if labeled.imputed is not None:
        if labeled.imputed.kind == "real":
            header.append("yhat")
        else:
            header.extend(f"p{j + 1}" for j in range(labeled.imputed.num_classes))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(labeled.n):
            row = [_fmt(v) for v in labeled.covariates[i]]
            if labeled.outcomes.kind == "real":
                row.append(_fmt(labeled.outcomes.values[i]))
            else:
                row.append(str(int(labeled.outcomes.values[i])))
            if labeled.imputed is not None:
                vals = np.atleast_1d(labeled.imputed.values[i])
                row.extend(_fmt(v) for v in vals)
            w.writerow(row)


def write_base_csv(path, base: AtomicMeasure):
    d = base.covariates.shape[1]
    header = [f"x{j + 1}" for j in range(d)]
    if base.outcomes.kind == "real":
        header.append("yhat")
    else:
        header.extend(f"p{j + 1}" for j in range(base.outcomes.num_classes))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(base.k):
            row = [_fmt(v) for v in base.covariates[i]]
            row.extend(_fmt(v) for v in np.atleast_1d(base.outcomes.values[i]))
            w.writerow(row)


# ---------------------------------------------------------------------------
# benchmark runner
# ---------------------------------------------------------------------------

BENCH_METHODS = ("classical", "bayes-bootstrap", "raw-ai", "rectified-ai")


@dataclass(frozen=True)
class RunConfig:
    """Configuration of a replication benchmark.

    Exactly one of scenario or (labeled, base) must be given.  In data mode
    each replication subsamples n labeled rows without replacement from the
    provided pool, and the truth defaults to the full-pool ERM.
    """

    loss: LossSpec
    scenario: ScenarioSpec | None = None
    labeled: LabeledSample | None = None
    base: AtomicMeasure | None = None
    n: int | None = None
    rectifier: RectifierSpec = field(default_factory=Identity)
    strategy: CalibrationStrategy = field(default_factory=Npb)
    gamma: float = 1.0
    draws: int = 500
    level: float = 0.9
    replications: int = 100
    seed: int = 0
    threads: int = 1
    methods: tuple = BENCH_METHODS

    def __post_init__(self):
        if (self.scenario is None) == (self.labeled is None):
            raise ParameterError("exactly one of scenario or data must be configured")
        if self.labeled is not None and self.base is None:
            raise ParameterError("data mode needs a base measure")
        if self.replications < 1:
            raise ParameterError("replications must be positive")


def _sub_seed(seed, replication, slot):
    return int(np.random.SeedSequence(seed, spawn_key=(replication, slot)).generate_state(1)[0])


def run_bench(config: RunConfig) -> list[BenchRecord]:
    """Run the four-method replication benchmark and return one record per
    (replication, method) at the scenario's target coordinate."""
    if is_classification(config.loss):
        raise CapabilityError("interval benchmark requires a real-valued loss")
    beta = 1.0 - config.level
    records = []
    if config.scenario is not None:
        coord = config.scenario.target_coord
    else:
        coord = 0
        pool_theta0 = labeled_erm(config.labeled, config.loss)

    for rep in range(config.replications):
        if config.scenario is not None:
            spec = ScenarioSpec(**{**config.scenario.__dict__,
                                   "seed": _sub_seed(config.seed, rep, 0)})
            labeled, base, theta0_vec = generate_scenario(spec, config.loss)
        else:
            rng = RngStream(config.seed, (rep, 0)).generator()
            n = config.n or config.labeled.n
            if n > config.labeled.n:
                raise ParameterError("subsample size exceeds the labeled pool")
            idx = rng.choice(config.labeled.n, size=n, replace=False)
            labeled, base = config.labeled.take(idx), config.base
            theta0_vec = pool_theta0
        theta0 = float(theta0_vec[coord])

        for mi, method in enumerate(config.methods):
            if method == "classical":
                point_vec, ints = classical_interval(labeled, config.loss, config.level)
                point, (lo, hi) = float(point_vec[coord]), ints[coord]
            else:
                gamma = 0.0 if method == "bayes-bootstrap" else config.gamma
                rectifier = Identity() if method in ("bayes-bootstrap", "raw-ai") else config.rectifier
                pc = PriorConfig(gamma=gamma, draws=config.draws, level=config.level,
                                 strategy=config.strategy, rectifier=rectifier,
                                 seed=_sub_seed(config.seed, rep, mi + 1),
                                 threads=config.threads)
                run = run_posterior(labeled, base, config.loss, pc)
                point = float(run.point[coord])
                lo, hi = run.intervals[coord]
            lo, hi = float(lo), float(hi)
            records.append(BenchRecord(
                replication=rep, method=method, lower=lo, upper=hi, point=point,
                theta0=theta0, covered=bool(lo <= theta0 <= hi),
                score=interval_score(lo, hi, theta0, beta), width=hi - lo))
    return records


_BENCH_TAG = "rectiprior-bench-v1"
_BENCH_COLUMNS = ("replication", "method", "lower", "upper", "point",
                  "theta0", "covered", "score", "width")


def serialize_bench(records: list[BenchRecord]) -> str:
    lines = [_BENCH_TAG, "\t".join(_BENCH_COLUMNS)]
    for r in records:
        lines.append("\t".join([
            str(r.replication), r.method, _fmt(r.lower), _fmt(r.upper), _fmt(r.point),
            _fmt(r.theta0), str(int(r.covered)), _fmt(r.score), _fmt(r.width)]))
    return "\n".join(lines) + "\n"


def format_bench_summary(records: list[BenchRecord]) -> str:
    summaries = aggregate_bench(records)
    lines = ["method             bias (se)            score (se)           width (se)           coverage (se)"]
    for s in summaries.values():
        lines.append(f"{s.method:<18} {s.mean_bias:>8.4g} ({s.se_bias:.2g})  "
                     f"{s.mean_score:>8.4g} ({s.se_score:.2g})  "
                     f"{s.mean_width:>8.4g} ({s.se_width:.2g})  "
                     f"{s.coverage:.3f} ({s.se_coverage:.3f})")
    return "\n".join(lines)

import numpy as np
import pytest
from scipy.special import softmax

from rectiprior.exceptions import OutcomeTypeError, ParameterError
from rectiprior.losses import MeanLoss, loss_values, MultinomialLogisticLoss
from rectiprior.measures import AtomicMeasure, LabeledSample, Outcomes, RngStream
from rectiprior.rectifiers import (
    Fixed,
    Identity,
    Isotonic,
    MomentAffine,
    MomentShift,
    Npb,
    ProbRecalib,
    QuantileMap,
    Split,
    apply_rectifier,
    clamp_log_probs,
    fit_isotonic,
    fit_moment_affine,
    fit_moment_shift,
    fit_prob_recalib,
    fit_quantile_map,
    fit_rectifier,
    make_calibration_sample,
    parse_rectifier,
    pava,
    score_discrepancy,
    serialize_rectifier,
)


def real_sample(y, x=None, yhat=None):
    y = np.asarray(y, dtype=float)
    x = np.zeros((y.size, 1)) if x is None else np.asarray(x, dtype=float)
    imputed = None if yhat is None else Outcomes.real(yhat)
    return LabeledSample(x, Outcomes.real(y), imputed)


def real_base(yhat, x=None, weights=None):
    yhat = np.asarray(yhat, dtype=float)
    x = np.zeros((yhat.size, 1)) if x is None else np.asarray(x, dtype=float)
    return AtomicMeasure(x, Outcomes.real(yhat), weights)


def reference_pava(values, weights):
    """O(n^2) sequential pooling: rescan after every merge."""
    vals = list(map(float, values))
    ws = list(map(float, weights))
    lens = [1] * len(vals)
    changed = True
    while changed:
        changed = False
        for i in range(len(vals) - 1):
            if vals[i] > vals[i + 1]:
                merged = (ws[i] * vals[i] + ws[i + 1] * vals[i + 1]) / (ws[i] + ws[i + 1])
                vals[i:i + 2] = [merged]
                ws[i:i + 2] = [ws[i] + ws[i + 1]]
                lens[i:i + 2] = [lens[i] + lens[i + 1]]
                changed = True
                break
    return np.repeat(vals, lens)


class TestCalibrationStrategies:
    def test_fixed_returns_input_twice(self):
        s = real_sample(np.arange(10.0))
        calib, inf = make_calibration_sample(s, Fixed(), RngStream(0))
        assert calib is s and inf is s

    def test_split_partition(self):
        s = real_sample(np.arange(10.0))
        calib, inf = make_calibration_sample(s, Split(0.5), RngStream(1))
        assert calib.n == 5 and inf.n == 5
        assert not set(calib.outcomes.values) & set(inf.outcomes.values)

    def test_split_empty_part_rejected(self):
        s = real_sample([1.0])
        with pytest.raises(ParameterError):
            make_calibration_sample(s, Split(0.5), RngStream(0))

    def test_npb_single_row(self):
        s = real_sample([4.0])
        calib, inf = make_calibration_sample(s, Npb(), RngStream(0))
        assert calib.outcomes.values[0] == 4.0 and inf is s


class TestQuantileMap:
    def test_identity_on_grid_points(self):
        r = fit_quantile_map([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        base = real_base([2.0])
        assert apply_rectifier(r, base).outcomes.values[0] == 2.0

    def test_hand_evaluation(self):
        r = fit_quantile_map([1.0, 2.0, 3.0], [10.0, 20.0, 30.0])
        out = apply_rectifier(r, real_base([20.0, 5.0, 35.0])).outcomes.values
        assert out[0] == 2.0   # Fhat(20) = 2/3, 2nd order statistic
        assert out[1] == 1.0   # below grid clamps to minimum
        assert out[2] == 3.0   # above grid clamps to maximum

    def test_monotone_in_argument(self):
        rng = np.random.default_rng(0)
        r = fit_quantile_map(rng.normal(size=50), rng.normal(size=50))
        ys = np.sort(rng.normal(size=200) * 2)
        out = apply_rectifier(r, real_base(ys)).outcomes.values
        assert np.all(np.diff(out) >= 0)

    def test_length_mismatch(self):
        with pytest.raises(ParameterError):
            fit_quantile_map([1.0], [1.0, 2.0])


class TestIsotonic:
    def test_monotone_input_is_noop(self):
        r = fit_isotonic([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert np.allclose(r.state["fitted"], [1, 2, 3])

    def test_single_violation_pools(self):
        r = fit_isotonic([1.0, 2.0, 3.0], [1.0, 3.0, 2.0])
        assert np.allclose(r.state["fitted"], [1.0, 2.5, 2.5])

    def test_constant_true(self):
        r = fit_isotonic([1.0, 2.0, 3.0], [4.0, 4.0, 4.0])
        out = apply_rectifier(r, real_base([-5.0, 2.5, 9.0])).outcomes.values
        assert np.all(out == 4.0)

    def test_pava_matches_reference(self):
        rng = np.random.default_rng(11)
        for _ in range(500):
            n = int(rng.integers(1, 201))
            v = rng.normal(size=n)
            w = rng.uniform(0.1, 3.0, size=n)
            assert np.allclose(pava(v, w), reference_pava(v, w), atol=1e-10)

    def test_fitted_values_nondecreasing(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(2, 60))
            r = fit_isotonic(rng.normal(size=n), rng.normal(size=n))
            assert np.all(np.diff(r.state["fitted"]) >= -1e-12)


class TestMomentMatching:
    def test_shift_arithmetic(self):
        calib = real_sample([2.0, 2.0])
        base = real_base([5.0, 5.0])
        r = fit_moment_shift(calib, base)
        assert r.state["shift"] == pytest.approx(-3.0)
        out = apply_rectifier(r, base)
        assert np.average(out.outcomes.values, weights=out.weights) == pytest.approx(2.0)

    def test_shift_identity_when_matched(self):
        calib = real_sample([1.0, 3.0])
        base = real_base([0.0, 4.0])
        assert fit_moment_shift(calib, base).state["shift"] == pytest.approx(0.0)

    def test_single_atom_base(self):
        r = fit_moment_shift(real_sample([7.0, 9.0]), real_base([0.0]))
        assert apply_rectifier(r, real_base([0.0])).outcomes.values[0] == pytest.approx(8.0)

    def test_affine_identity_when_matched(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(200, 1))
        y = 2 * x[:, 0] + rng.normal(size=200)
        calib = real_sample(y, x=x, yhat=y)
        base = AtomicMeasure(x, Outcomes.real(y))
        r = fit_moment_affine(calib, base)
        assert r.state["a"] == pytest.approx(0.0, abs=1e-10)
        assert r.state["b"] == pytest.approx(1.0, abs=1e-10)

    def test_affine_recovers_half_slope(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(5000, 1))
        y0 = x[:, 0] + 0.1 * rng.normal(size=5000)
        calib = real_sample(y0, x=x)
        base = AtomicMeasure(x, Outcomes.real(2.0 * y0))
        r = fit_moment_affine(calib, base)
        assert r.state["b"] == pytest.approx(0.5, abs=0.05)

    def test_affine_constant_x_falls_back_to_shift(self):
        x = np.ones((4, 1))
        calib = real_sample([1.0, 2.0, 3.0, 4.0], x=x)
        base = AtomicMeasure(x, Outcomes.real([10.0, 10.0, 10.0, 10.0]))
        r = fit_moment_affine(calib, base)
        assert r.state["b"] == 1.0
        assert r.state["a"] == pytest.approx(2.5 - 10.0)

    def test_affine_residual_orthogonality(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(50, 3))
        calib = real_sample(rng.normal(size=50), x=x)
        base = AtomicMeasure(rng.normal(size=(40, 3)), Outcomes.real(rng.normal(size=40)))
        r = fit_moment_affine(calib, base)
        yhat = base.outcomes.values
        rows = [[1.0, np.average(yhat, weights=base.weights)]]
        rhs = [calib.outcomes.values.mean()]
        for j in range(3):
            rows.append([np.average(base.covariates[:, j], weights=base.weights),
                         np.average(base.covariates[:, j] * yhat, weights=base.weights)])
            rhs.append(np.mean(calib.covariates[:, j] * calib.outcomes.values))
        A, b = np.asarray(rows), np.asarray(rhs)
        resid = A @ [r.state["a"], r.state["b"]] - b
        assert np.max(np.abs(A.T @ resid)) < 1e-8


class TestProbRecalib:
    def test_identity_map_recovers_probs(self):
        # W = [I | 0], b = 0 inverts the log link exactly
        rng = np.random.default_rng(0)
        p = rng.dirichlet(np.ones(3), size=20)
        base = AtomicMeasure(rng.normal(size=(20, 2)), Outcomes.probs(p))
        w = np.hstack([np.eye(3), np.zeros((3, 2))])
        from rectiprior.rectifiers import FittedRectifier
        r = FittedRectifier(ProbRecalib(clamp=1e-6), {"W": w, "b": np.zeros(3)})
        out = apply_rectifier(r, base).outcomes.values
        assert np.max(np.abs(out - p)) < 1e-9

    def test_fit_beats_or_matches_identity(self):
        rng = np.random.default_rng(1)
        n, c = 400, 3
        p = rng.dirichlet(np.ones(c), size=n)
        labels = np.array([rng.choice(c, p=row) for row in p])
        calib = LabeledSample(rng.normal(size=(n, 2)), Outcomes.classes(labels, c), Outcomes.probs(p))
        r = fit_prob_recalib(calib, ProbRecalib(ridge=1e-8))
        fitted_probs = apply_rectifier(r, AtomicMeasure(calib.covariates, calib.imputed)).outcomes.values
        ce_fit = -np.log(fitted_probs[np.arange(n), labels]).mean()
        ce_id = -np.log(np.clip(p[np.arange(n), labels], 1e-12, None)).mean()
        assert ce_fit <= ce_id + 1e-6

    def test_recovers_generating_map(self):
        rng = np.random.default_rng(2)
        m, c, dx = 2000, 3, 2
        p = rng.dirichlet(np.ones(c), size=m)
        x = rng.normal(size=(m, dx))
        w_true = rng.normal(size=(c, c + dx)) * 0.8
        b_true = rng.normal(size=c) * 0.5
        feats = np.column_stack([clamp_log_probs(p, 1e-6), x])
        probs = softmax(feats @ w_true.T + b_true, axis=1)
        labels = np.array([rng.choice(c, p=row) for row in probs])
        calib = LabeledSample(x, Outcomes.classes(labels, c), Outcomes.probs(p))
        r = fit_prob_recalib(calib, ProbRecalib(ridge=1e-6))
        # held-out comparison
        p2 = rng.dirichlet(np.ones(c), size=m)
        x2 = rng.normal(size=(m, dx))
        feats2 = np.column_stack([clamp_log_probs(p2, 1e-6), x2])
        probs2 = softmax(feats2 @ w_true.T + b_true, axis=1)
        labels2 = np.array([rng.choice(c, p=row) for row in probs2])
        fitted = softmax(feats2 @ r.state["W"].T + r.state["b"], axis=1)
        ce_fit = -np.log(fitted[np.arange(m), labels2]).mean()
        ce_gen = -np.log(probs2[np.arange(m), labels2]).mean()
        assert abs(ce_fit - ce_gen) < 0.02

    def test_outputs_on_simplex(self):
        rng = np.random.default_rng(3)
        p = rng.dirichlet(np.full(4, 0.3), size=50)
        base = AtomicMeasure(rng.normal(size=(50, 2)), Outcomes.probs(p))
        labels = rng.integers(0, 4, 100)
        calib = LabeledSample(rng.normal(size=(100, 2)), Outcomes.classes(labels, 4),
                              Outcomes.probs(rng.dirichlet(np.ones(4), size=100)))
        r = fit_prob_recalib(calib, ProbRecalib())
        out = apply_rectifier(r, base).outcomes.values
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-9)


class TestApplyAndDiscrepancy:
    def test_identity_returns_same_measure(self):
        base = real_base([1.0, 2.0])
        assert apply_rectifier(fit_rectifier(Identity(), real_sample([0.0]), base), base) is base

    def test_shift_application(self):
        from rectiprior.rectifiers import FittedRectifier
        r = FittedRectifier(MomentShift(), {"shift": 1.0})
        out = apply_rectifier(r, real_base([0.0, 2.0])).outcomes.values
        assert np.allclose(out, [1.0, 3.0])

    def test_weights_and_covariates_unchanged(self):
        rng = np.random.default_rng(8)
        w = rng.dirichlet(np.ones(5))
        base = real_base(rng.normal(size=5), x=rng.normal(size=(5, 2)), weights=w)
        r = fit_quantile_map(rng.normal(size=9), rng.normal(size=9))
        out = apply_rectifier(r, base)
        assert np.array_equal(out.weights, base.weights)
        assert np.array_equal(out.covariates, base.covariates)

    def test_discrepancy_zero_for_same_measure(self):
        base = real_base([1.0, 2.0, 3.0])
        assert score_discrepancy(base, base, MeanLoss(), [0.7])[0] == 0.0

    def test_discrepancy_mean_loss(self):
        base = real_base([5.0])
        ref = real_base([2.0])
        assert score_discrepancy(base, ref, MeanLoss(), [11.0])[0] == pytest.approx(3.0)

    def test_discrepancy_vanishes_after_moment_shift(self):
        rng = np.random.default_rng(9)
        calib = real_sample(rng.normal(size=30))
        base = real_base(rng.normal(size=20) + 2.0)
        rect = apply_rectifier(fit_moment_shift(calib, base), base)
        from rectiprior.measures import empirical_measure
        d = score_discrepancy(rect, empirical_measure(calib), MeanLoss(), [0.3])
        assert abs(d[0]) < 1e-12

    def test_variant_mismatch(self):
        base = AtomicMeasure(np.zeros((2, 1)), Outcomes.probs(np.full((2, 2), 0.5)))
        r = fit_quantile_map([1.0], [1.0])
        with pytest.raises(OutcomeTypeError):
            apply_rectifier(r, base)


class TestNpbVariability:
    def test_different_streams_give_different_rectifiers(self):
        rng = np.random.default_rng(10)
        y = rng.normal(size=50)
        s = real_sample(y, yhat=y + rng.normal(size=50))
        base = real_base(rng.normal(size=30))
        fits = []
        for stream in (0, 1):
            calib, _ = make_calibration_sample(s, Npb(), RngStream(3, (stream,)))
            fits.append(fit_rectifier(QuantileMap(), calib, base))
        assert not np.array_equal(fits[0].state["true_grid"], fits[1].state["true_grid"])


class TestSerialization:
    @pytest.mark.parametrize("make", [
        lambda: fit_quantile_map([1.0, 2.5], [0.5, 3.5]),
        lambda: fit_isotonic([1.0, 2.0, 3.0], [1.0, 3.0, 2.0]),
        lambda: fit_moment_shift(real_sample([2.0]), real_base([5.0])),
    ])
    def test_round_trip(self, make):
        r = make()
        r2 = parse_rectifier(serialize_rectifier(r))
        assert type(r2.spec) is type(r.spec)
        for key, val in r.state.items():
            assert np.array_equal(np.atleast_1d(r2.state[key]), np.atleast_1d(val))

    def test_prob_recalib_round_trip(self):
        rng = np.random.default_rng(12)
        labels = rng.integers(0, 3, 60)
        calib = LabeledSample(rng.normal(size=(60, 2)), Outcomes.classes(labels, 3),
                              Outcomes.probs(rng.dirichlet(np.ones(3), size=60)))
        r = fit_prob_recalib(calib, ProbRecalib(ridge=1e-3, clamp=1e-5))
        r2 = parse_rectifier(serialize_rectifier(r))
        assert r2.spec == r.spec
        assert np.array_equal(r2.state["W"], r.state["W"])
        assert np.array_equal(r2.state["b"], r.state["b"])

    def test_bad_format_rejected(self):
        with pytest.raises(ParameterError):
            parse_rectifier("something-else\n")

import numpy as np
import pytest

from rectiprior.exceptions import ParameterError, RectipriorError
from rectiprior.losses import MeanLoss, QuantileLoss, MultinomialLogisticLoss, WeightedProblem, solve_weighted
from rectiprior.measures import (
    AtomicMeasure,
    LabeledSample,
    Outcomes,
    RngStream,
    sample_dirichlet_weights,
    sample_uniform_dirichlet,
)
from rectiprior.posterior import (
    PosteriorRun,
    PriorConfig,
    credible_interval,
    posterior_draw,
    posterior_predict_class,
    run_posterior,
    serialize_run,
    summarize_run,
)
from rectiprior.rectifiers import Identity, MomentShift, Npb, Split


def make_real_data(n=40, k=20, shift=0.0, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=n)
    labeled = LabeledSample(np.zeros((n, 1)), Outcomes.real(y))
    base = AtomicMeasure(np.zeros((k, 1)), Outcomes.real(rng.normal(size=k) + shift))
    return labeled, base


class TestCredibleInterval:
    def test_linear_interpolation_example(self):
        lo, hi = credible_interval(np.arange(1.0, 101.0), 0.9)
        assert lo == pytest.approx(5.95)
        assert hi == pytest.approx(95.05)

    def test_matches_sorted_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            s = rng.normal(size=int(rng.integers(2, 200)))
            level = float(rng.uniform(0.5, 0.99))
            lo, hi = credible_interval(s, level)
            beta = 1 - level
            srt = np.sort(s)

            def ref(q):
                h = q * (srt.size - 1)
                i = int(np.floor(h))
                frac = h - i
                return srt[i] if i + 1 == srt.size else srt[i] * (1 - frac) + srt[i + 1] * frac

            assert lo == pytest.approx(ref(beta / 2), abs=1e-12)
            assert hi == pytest.approx(ref(1 - beta / 2), abs=1e-12)

    def test_contains_median_mass(self):
        lo, hi = credible_interval([1.0, 2.0, 3.0, 4.0], 0.5)
        assert lo < 2.5 < hi

    def test_parameter_errors(self):
        with pytest.raises(ParameterError):
            credible_interval([1.0], 0.9)
        with pytest.raises(ParameterError):
            credible_interval([1.0, 2.0], 1.0)


class TestPosteriorDraw:
    def test_gamma_zero_matches_bayesian_bootstrap_reimplementation(self):
        labeled, _ = make_real_data(n=25)
        config = PriorConfig(gamma=0.0, seed=11)
        for b in range(20):
            theta = posterior_draw(labeled, None, MeanLoss(), config, b)
            w = sample_uniform_dirichlet(labeled.n, RngStream(11, (b, 2)))
            want = np.average(labeled.outcomes.values, weights=w)
            assert theta[0] == pytest.approx(want, abs=1e-12)

    def test_gamma_zero_ignores_base(self):
        labeled, base = make_real_data()
        config = PriorConfig(gamma=0.0, seed=3)
        a = posterior_draw(labeled, base, MeanLoss(), config, 0)
        b = posterior_draw(labeled, None, MeanLoss(), config, 0)
        assert np.array_equal(a, b)

    def test_mean_draw_matches_logged_weights(self):
        # reconstruct the draw from the same streams and check the closed form
        labeled, base = make_real_data(n=12, k=7, seed=4)
        config = PriorConfig(gamma=1.5, seed=6)
        theta = posterior_draw(labeled, base, MeanLoss(), config, 9)
        rng = RngStream(6, (9,))
        dw = sample_dirichlet_weights(12, 7, 1.5 * 12, rng.child(2))
        vals = np.concatenate([labeled.outcomes.values, base.outcomes.values])
        w = np.concatenate([dw.labeled_w, dw.base_w * base.weights * 7])
        assert theta[0] == pytest.approx(np.average(vals, weights=w), abs=1e-12)

    def test_gamma_positive_requires_base(self):
        labeled, _ = make_real_data()
        with pytest.raises(ParameterError):
            posterior_draw(labeled, None, MeanLoss(), PriorConfig(gamma=1.0), 0)

    def test_determinism(self):
        labeled, base = make_real_data(seed=2)
        config = PriorConfig(gamma=1.0, rectifier=MomentShift(), seed=7)
        a = posterior_draw(labeled, base, MeanLoss(), config, 5)
        b = posterior_draw(labeled, base, MeanLoss(), config, 5)
        assert np.array_equal(a, b)


class TestRunPosterior:
    def test_repeat_runs_identical(self):
        labeled, base = make_real_data()
        config = PriorConfig(gamma=1.0, draws=50, rectifier=MomentShift(), seed=1)
        a = run_posterior(labeled, base, MeanLoss(), config)
        b = run_posterior(labeled, base, MeanLoss(), config)
        assert np.array_equal(a.samples, b.samples)
        assert np.array_equal(a.intervals, b.intervals)

    @pytest.mark.parametrize("strategy", [Split(0.5), Npb()])
    def test_thread_count_invariance(self, strategy):
        labeled, base = make_real_data(n=30, k=15, shift=1.0, seed=5)
        thetas = {}
        for threads in (1, 4):
            config = PriorConfig(gamma=1.0, draws=40, strategy=strategy,
                                 rectifier=MomentShift(), seed=9, threads=threads)
            thetas[threads] = run_posterior(labeled, base, MeanLoss(), config).samples
        assert np.array_equal(thetas[1], thetas[4])

    def test_posterior_mean_between_data_and_prior(self):
        labeled, base = make_real_data(n=200, k=200, shift=5.0, seed=8)
        ybar = labeled.outcomes.values.mean()
        bbar = base.outcomes.values.mean()
        config = PriorConfig(gamma=1.0, draws=300, seed=2)
        point = run_posterior(labeled, base, MeanLoss(), config).point[0]
        assert min(ybar, bbar) < point < max(ybar, bbar)
        assert point == pytest.approx((ybar + bbar) / 2, abs=0.1)

    def test_prior_influence_monotone_in_gamma(self):
        # pull toward the shifted base mean should grow with gamma
        labeled, base = make_real_data(n=150, k=150, shift=4.0, seed=12)
        points = []
        for gamma in (0.5, 1.0, 2.0, 4.0):
            config = PriorConfig(gamma=gamma, draws=400, seed=3)
            points.append(run_posterior(labeled, base, MeanLoss(), config).point[0])
        assert all(b > a for a, b in zip(points, points[1:]))

    def test_degenerate_data_gives_point_mass(self):
        labeled = LabeledSample(np.zeros((10, 1)), Outcomes.real(np.full(10, 3.0)))
        base = AtomicMeasure(np.zeros((5, 1)), Outcomes.real(np.full(5, 3.0)))
        run = run_posterior(labeled, base, MeanLoss(), PriorConfig(gamma=1.0, draws=50))
        assert np.allclose(run.samples, 3.0, atol=1e-12)
        assert np.allclose(run.intervals, 3.0, atol=1e-12)

    def test_quantile_loss_run(self):
        labeled, base = make_real_data(n=60, k=30)
        run = run_posterior(labeled, base, QuantileLoss(0.5), PriorConfig(gamma=0.5, draws=100))
        pool = np.concatenate([labeled.outcomes.values, base.outcomes.values])
        assert pool.min() <= run.point[0] <= pool.max()

    def test_failure_fraction_aborts(self):
        # rank-deficient regression fails every draw
        from rectiprior.losses import LinearRegressionLoss
        x = np.column_stack([np.ones(10), np.ones(10)])
        labeled = LabeledSample(x, Outcomes.real(np.arange(10.0)))
        base = AtomicMeasure(x[:5], Outcomes.real(np.arange(5.0)))
        config = PriorConfig(gamma=1.0, draws=20)
        with pytest.raises(RectipriorError):
            run_posterior(labeled, base, LinearRegressionLoss(intercept=False), config)


class TestPredictClass:
    def test_separable_problem_predicts_sign(self):
        rng = np.random.default_rng(0)
        n = 120
        x = rng.normal(size=(n, 1))
        labels = (x[:, 0] > 0).astype(int)
        labeled = LabeledSample(x, Outcomes.classes(labels, 2))
        xb = rng.normal(size=(40, 1))
        pb = np.column_stack([xb[:, 0] < 0, xb[:, 0] >= 0]).astype(float)
        pb = np.clip(pb, 0.02, 0.98)
        pb /= pb.sum(axis=1, keepdims=True)
        base = AtomicMeasure(xb, Outcomes.probs(pb))
        loss = MultinomialLogisticLoss(num_classes=2, ridge=1e-4)
        run = run_posterior(labeled, base, loss, PriorConfig(gamma=1.0, draws=40, seed=4))
        assert posterior_predict_class(run, loss, [2.0]) == 1
        assert posterior_predict_class(run, loss, [-2.0]) == 0

    def test_requires_classification_loss(self):
        labeled, base = make_real_data()
        run = run_posterior(labeled, base, MeanLoss(), PriorConfig(gamma=0.0, draws=10))
        with pytest.raises(ParameterError):
            posterior_predict_class(run, MeanLoss(), [0.0])


class TestSerialization:
    def test_header_and_draw_lines(self):
        labeled, base = make_real_data()
        run = run_posterior(labeled, base, MeanLoss(), PriorConfig(gamma=1.0, draws=10, seed=5))
        text = serialize_run(run)
        lines = text.strip().split("\n")
        assert lines[0] == "rectiprior-posterior-v1"
        assert lines[1].startswith("config gamma=1.0 draws=10")
        assert sum(1 for l in lines if l.startswith("draw ")) == 10
        assert lines[-1].startswith("summary point=")

    def test_floats_round_trip_bytes(self):
        labeled, base = make_real_data()
        run = run_posterior(labeled, base, MeanLoss(), PriorConfig(gamma=1.0, draws=10, seed=5))
        for line in serialize_run(run).strip().split("\n"):
            if line.startswith("draw ") and " ok " in line:
                b = int(line.split()[1])
                val = float(line.split(" ok ")[1])
                assert repr(val) == line.split(" ok ")[1]

    def test_summary_mentions_interval(self):
        labeled, base = make_real_data()
        run = run_posterior(labeled, base, MeanLoss(), PriorConfig(gamma=1.0, draws=10))
        assert "90% CI" in summarize_run(run)


class TestConfigValidation:
    @pytest.mark.parametrize("kwargs", [
        {"gamma": -1.0},
        {"gamma": 1.0, "draws": 1},
        {"gamma": 1.0, "level": 0.0},
        {"gamma": 1.0, "threads": 0},
    ])
    def test_rejected(self, kwargs):
        with pytest.raises(ParameterError):
            PriorConfig(**kwargs)

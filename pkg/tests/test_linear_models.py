import numpy as np
import pytest

from subcat.linear_models import (
    CrammerSingerSVM,
    L2LossSVR,
    LinearSVM,
    ScoreNormalizer,
    load_model,
    model_from_json_dict,
    save_model,
)


def blobs(rng, centers, n_per, spread=0.3):
    X, y = [], []
    for label, c in enumerate(centers):
        X.append(rng.normal(0, spread, size=(n_per, len(c))) + np.asarray(c))
        y.extend([label] * n_per)
    return np.vstack(X), np.asarray(y)


class TestLinearSVM:
    def test_1d_boundary_via_grid_oracle(self):
        X = np.array([[1.0], [1.2], [0.8], [-1.0], [-1.2], [-0.8]])
        y = np.array([1, 1, 1, -1, -1, -1.0])
        svm = LinearSVM(C=1.0, epochs=2000, tol=1e-10).fit(X, y)
        # grid-search oracle over (w, b): the objective is symmetric, so the
        # best boundary -b/w sits at 0
        ws = np.linspace(0.1, 3, 60)
        bs = np.linspace(-1, 1, 81)
        best = min(
            ((w, b) for w in ws for b in bs),
            key=lambda wb: 0.5 * wb[0] ** 2
            + np.maximum(0, 1 - y * (X[:, 0] * wb[0] + wb[1])).sum(),
        )
        assert abs(best[1] / best[0]) < 1e-6
        boundary = -svm.intercept_ / svm.coef_[0]
        assert abs(boundary) < 1e-2

    def test_separable_2d_perfect(self):
        rng = np.random.default_rng(0)
        X, y01 = blobs(rng, [(-3, -3), (3, 3)], 40)
        y = np.where(y01 == 1, 1.0, -1.0)
        svm = LinearSVM(C=1.0, epochs=500).fit(X, y)
        assert np.all(svm.predict(X) == y)

    def test_duplicated_rows_half_C_same_model(self):
        rng = np.random.default_rng(1)
        X, y01 = blobs(rng, [(-1.5, 0), (1.5, 0)], 25)
        y = np.where(y01 == 1, 1.0, -1.0)
        a = LinearSVM(C=1.0, epochs=4000, tol=1e-12).fit(X, y)
        X2 = np.vstack([X, X])
        y2 = np.concatenate([y, y])
        b = LinearSVM(C=0.5, epochs=4000, tol=1e-12).fit(X2, y2)
        assert np.allclose(a.coef_, b.coef_, atol=1e-6)
        assert a.intercept_ == pytest.approx(b.intercept_, abs=1e-6)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            LinearSVM().fit(np.eye(3), np.ones(3))

    def test_deterministic_bit_identical(self):
        rng = np.random.default_rng(2)
        X, y01 = blobs(rng, [(-1, 0), (1, 0)], 30)
        y = np.where(y01 == 1, 1.0, -1.0)
        a = LinearSVM(C=2.0, epochs=50, random_state=7).fit(X, y)
        b = LinearSVM(C=2.0, epochs=50, random_state=7).fit(X, y)
        assert np.array_equal(a.coef_, b.coef_)
        assert a.intercept_ == b.intercept_

    def test_dual_objective_monotone_and_primal_decreases(self):
        """The dual (the optimized objective) never regresses; the primal,
        evaluated each epoch, ends below its start and converges onto the
        dual (small remaining gap)."""
        rng = np.random.default_rng(3)
        X, y01 = blobs(rng, [(-1, 1), (1, -1)], 40, spread=0.8)
        y = np.where(y01 == 1, 1.0, -1.0)
        svm = LinearSVM(C=1.0, epochs=200, tol=0.0).fit(X, y)
        dual = svm.dual_objective_history_
        assert np.all(np.diff(dual) >= -1e-9)
        primal = svm.objective_history_
        assert primal[-1] <= primal[0]
        assert primal[-1] - dual[-1] <= 1e-4 * max(1.0, abs(primal[-1]))

    def test_complementary_slackness(self):
        rng = np.random.default_rng(4)
        X, y01 = blobs(rng, [(-2, 0), (2, 0)], 50, spread=1.0)
        y = np.where(y01 == 1, 1.0, -1.0)
        svm = LinearSVM(C=1.0, epochs=5000, tol=1e-10).fit(X, y)
        margins = y * svm.decision_function(X)
        interior = (svm.dual_coef_ > 1e-6) & (svm.dual_coef_ < 1.0 - 1e-6)
        assert interior.any()
        assert np.allclose(margins[interior], 1.0, atol=1e-2)

    def test_scaling_margin_linearity(self):
        rng = np.random.default_rng(5)
        X, y01 = blobs(rng, [(-2, 1), (2, -1)], 20)
        y = np.where(y01 == 1, 1.0, -1.0)
        svm = LinearSVM(epochs=200).fit(X, y)
        svm.intercept_ = 0.0
        assert np.allclose(
            svm.decision_function(3.0 * X), 3.0 * svm.decision_function(X)
        )


class TestCrammerSinger:
    def test_binary_agreement_with_linear_svm(self):
        rng = np.random.default_rng(10)
        X, y = blobs(rng, [(-3, 0), (3, 0)], 40)
        cs = CrammerSingerSVM(C=1.0, epochs=300).fit(X, y)
        svm = LinearSVM(C=1.0, epochs=300).fit(X, np.where(y == 1, 1.0, -1.0))
        pred_cs = cs.predict(X)
        pred_b = (svm.predict(X) > 0).astype(int)
        assert np.array_equal(pred_cs, pred_b)

    def test_three_blobs_perfect(self):
        rng = np.random.default_rng(11)
        X, y = blobs(rng, [(-4, 0), (4, 0), (0, 5)], 30)
        cs = CrammerSingerSVM(C=1.0, epochs=500).fit(X, y)
        assert np.all(cs.predict(X) == y)

    def test_label_permutation_symmetry(self):
        rng = np.random.default_rng(12)
        X, y = blobs(rng, [(-4, 0), (4, 0), (0, 5)], 25)
        perm = {0: 2, 1: 0, 2: 1}
        y_perm = np.array([perm[v] for v in y])
        a = CrammerSingerSVM(C=1.0, epochs=400, random_state=3).fit(X, y)
        b = CrammerSingerSVM(C=1.0, epochs=400, random_state=3).fit(X, y_perm)
        assert np.array_equal(
            np.array([perm[v] for v in a.predict(X)]), b.predict(X)
        )

    def test_missing_class_rejected(self):
        X = np.eye(4)
        y = np.array([0, 0, 2, 2])
        with pytest.raises(ValueError):
            CrammerSingerSVM(n_classes=3).fit(X, y)

    def test_argmax_invariant_to_common_shift(self):
        rng = np.random.default_rng(13)
        X, y = blobs(rng, [(-3, 1), (3, 1), (0, -4)], 20)
        cs = CrammerSingerSVM(epochs=300).fit(X, y)
        before = cs.predict(X)
        cs.coef_ = cs.coef_ + rng.normal(size=(1, X.shape[1]))
        assert np.array_equal(cs.predict(X), before)

    def test_tie_breaks_to_lowest_class(self):
        cs = CrammerSingerSVM()
        cs.coef_ = np.zeros((3, 2))
        cs.classes_ = np.array([0, 1, 2])
        assert cs.predict(np.array([[1.0, 2.0]]))[0] == 0

    def test_objective_history_recorded(self):
        rng = np.random.default_rng(14)
        X, y = blobs(rng, [(-3, 0), (3, 0), (0, 4)], 20)
        cs = CrammerSingerSVM(epochs=50, tol=0.0).fit(X, y)
        assert len(cs.objective_history_) == 50
        assert cs.objective_history_[-1] <= cs.objective_history_[0]
        assert np.all(np.diff(cs.dual_objective_history_) <= 1e-9)


class TestSVR:
    def test_exact_line_recovery(self):
        X = np.linspace(-2, 2, 30).reshape(-1, 1)
        y = 2.0 * X[:, 0] + 1.0
        svr = L2LossSVR(C=1e4, epsilon=0.0, epochs=3000, tol=1e-12).fit(X, y)
        # closed-form least-squares oracle for the noiseless line
        A = np.hstack([X, np.ones((len(X), 1))])
        w_ls, b_ls = np.linalg.lstsq(A, y, rcond=None)[0]
        assert w_ls == pytest.approx(2.0, abs=1e-9)
        assert b_ls == pytest.approx(1.0, abs=1e-9)
        assert svr.coef_[0] == pytest.approx(2.0, abs=1e-2)
        assert svr.intercept_ == pytest.approx(1.0, abs=1e-2)

    def test_constant_targets(self):
        rng = np.random.default_rng(20)
        X = rng.normal(size=(50, 3))
        y = np.full(50, 5.0)
        svr = L2LossSVR(C=100.0, epsilon=0.01, epochs=2000).fit(X, y)
        # the regularized bias shrinks the intercept slightly below the mean
        assert np.allclose(svr.coef_, 0.0, atol=1e-2)
        assert svr.intercept_ == pytest.approx(5.0, abs=0.05)

    def test_wide_epsilon_zero_solution(self):
        X = np.linspace(0, 1, 20).reshape(-1, 1)
        y = 0.1 * X[:, 0]
        svr = L2LossSVR(C=1.0, epsilon=10.0, epochs=200).fit(X, y)
        assert np.allclose(svr.coef_, 0.0, atol=1e-9)
        assert svr.intercept_ == pytest.approx(0.0, abs=1e-9)

    def test_dual_objective_monotone(self):
        rng = np.random.default_rng(21)
        X = rng.normal(size=(40, 2))
        y = X @ np.array([1.0, -2.0]) + rng.normal(0, 0.1, 40)
        svr = L2LossSVR(C=10.0, epochs=50, tol=0.0).fit(X, y)
        assert np.all(np.diff(svr.dual_objective_history_) <= 1e-9)
        assert svr.objective_history_[-1] <= svr.objective_history_[0]


class TestPredictContracts:
    def test_zero_weights_give_bias(self):
        svm = LinearSVM()
        svm.coef_ = np.zeros(3)
        svm.intercept_ = 0.7
        assert np.allclose(svm.decision_function(np.eye(3)), 0.7)

    def test_zero_input_gives_bias(self):
        svr = L2LossSVR()
        svr.coef_ = np.array([1.0, 2.0])
        svr.intercept_ = -0.5
        assert svr.predict(np.zeros((1, 2)))[0] == -0.5

    def test_dimension_mismatch(self):
        svm = LinearSVM()
        svm.coef_ = np.zeros(3)
        svm.intercept_ = 0.0
        with pytest.raises(ValueError):
            svm.decision_function(np.zeros((2, 4)))


class TestSerialization:
    def test_binary_round_trip(self, tmp_path):
        rng = np.random.default_rng(30)
        X, y01 = blobs(rng, [(-2, 0), (2, 0)], 20)
        y = np.where(y01 == 1, 1.0, -1.0)
        svm = LinearSVM(C=3.0, epochs=100).fit(X, y)
        path = tmp_path / "svm.json"
        save_model(path, svm)
        again = load_model(path)
        assert np.array_equal(again.coef_, svm.coef_)
        assert again.intercept_ == svm.intercept_
        assert again.C == 3.0

    def test_multiclass_round_trip(self):
        rng = np.random.default_rng(31)
        X, y = blobs(rng, [(-3, 0), (3, 0), (0, 4)], 15)
        cs = CrammerSingerSVM(epochs=100).fit(X, y)
        again = model_from_json_dict(cs.to_json_dict())
        assert np.array_equal(again.predict(X), cs.predict(X))

    def test_normalizer_round_trip(self):
        rng = np.random.default_rng(32)
        V = rng.uniform(-3, 5, size=(20, 4))
        norm = ScoreNormalizer().fit(V)
        again = ScoreNormalizer.from_json_dict(norm.to_json_dict())
        assert np.array_equal(norm.transform(V), again.transform(V))
        t = norm.transform(V)
        assert t.min() == pytest.approx(0.0, abs=1e-12)
        assert t.max() == pytest.approx(1.0, abs=1e-12)

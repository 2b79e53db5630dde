import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from svqlab.errors import DivergenceError, ParameterError, ShapeError
from svqlab.solvers import (
    SparseRegressionProblem, default_step, fista_solve, flops_estimate, gram_spectral_norm,
    ista_solve, ista_solve_batch, nonneg_threshold, objective, one_step_weights, reconstruct,
    soft_threshold, svq_raw_quantize,
)
from svqlab.tensor import make_rng


def coordinate_descent(Z, x, lam, nonneg, tol=1e-10, max_sweeps=100000):
    """Exact coordinate minimization of the lasso objective."""
    m = Z.shape[1]
    w = np.zeros(m)
    col_sq = np.sum(Z * Z, axis=0)
    r = x - Z @ w
    for _ in range(max_sweeps):
        biggest = 0.0
        for i in range(m):
            if col_sq[i] == 0:
                continue
            rho = Z[:, i] @ r + col_sq[i] * w[i]
            if nonneg:
                new = max(rho - lam, 0.0) / col_sq[i]
            else:
                new = np.sign(rho) * max(abs(rho) - lam, 0.0) / col_sq[i]
            r += Z[:, i] * (w[i] - new)
            biggest = max(biggest, abs(new - w[i]))
            w[i] = new
        if biggest < tol:
            break
    return w


def random_instance(rng, max_d=8, max_m=12):
    d = int(rng.integers(1, max_d + 1))
    m = int(rng.integers(1, max_m + 1))
    Z = rng.standard_normal((d, m))
    x = rng.standard_normal(d)
    lam = float(rng.uniform(0.01, 0.5))
    return Z, x, lam


class TestThresholds:
    @pytest.mark.parametrize("a,t,want", [(0.5, 0.2, 0.3), (-0.5, 0.2, -0.3), (0.1, 0.2, 0.0)])
    def test_soft(self, a, t, want):
        assert soft_threshold(a, t) == pytest.approx(want)

    @pytest.mark.parametrize("a,t,want", [(0.5, 0.2, 0.3), (-0.5, 0.2, 0.0), (0.2, 0.2, 0.0)])
    def test_nonneg(self, a, t, want):
        assert nonneg_threshold(a, t) == pytest.approx(want)

    def test_negative_threshold(self):
        with pytest.raises(ParameterError):
            soft_threshold(1.0, -0.1)
        with pytest.raises(ParameterError):
            nonneg_threshold(1.0, -0.1)


class TestProblem:
    def test_validation(self):
        with pytest.raises(ParameterError):
            SparseRegressionProblem(np.eye(2), np.ones(2), lam=-1)
        with pytest.raises(ParameterError):
            SparseRegressionProblem(np.eye(2), np.ones(2), eta=0.0)
        with pytest.raises(ShapeError):
            SparseRegressionProblem(np.eye(2), np.ones(3))
        with pytest.raises(ParameterError):
            SparseRegressionProblem(np.array([[np.nan]]), np.ones(1))

    def test_default_step_below_bound(self, rng):
        for _ in range(50):
            Z = rng.standard_normal((6, 10))
            assert default_step(Z) <= 1.0 / np.linalg.eigvalsh(Z.T @ Z)[-1] * (1 + 1e-9)

    def test_spectral_norm(self, rng):
        Z = rng.standard_normal((5, 7))
        assert gram_spectral_norm(Z, iters=200) == pytest.approx(np.linalg.eigvalsh(Z.T @ Z)[-1], rel=1e-6)


class TestObjective:
    def test_zero_weights(self):
        assert objective(np.eye(2), [3.0, 4.0], np.zeros(2), 1.0) == 12.5

    def test_exact_fit(self):
        assert objective(np.eye(3), [1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 0.0) == 0.0

    def test_random_matches_formula(self, rng):
        Z = rng.standard_normal((4, 6))
        x = rng.standard_normal(4)
        w = rng.standard_normal(6)
        r = x - sum(w[i] * Z[:, i] for i in range(6))
        want = 0.5 * sum(v * v for v in r) + 0.3 * sum(abs(v) for v in w)
        assert objective(Z, x, w, 0.3) == pytest.approx(want, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            reconstruct(np.eye(2), np.ones(3))


class TestIsta:
    def test_orthonormal_closed_form(self):
        rep = ista_solve(SparseRegressionProblem(np.eye(2), [1.0, 0.1], 0.2, 1.0, True))
        np.testing.assert_allclose(rep.w, [0.8, 0.0])
        assert rep.converged

    def test_least_squares_limit(self, rng):
        Z = np.eye(3) + 0.1 * rng.standard_normal((3, 3))
        x = rng.standard_normal(3)
        rep = ista_solve(SparseRegressionProblem(Z, x, 0.0, nonneg=False), max_iters=100000, tol=1e-12)
        np.testing.assert_allclose(Z @ rep.w, x, atol=1e-9)

    def test_full_shrinkage(self, rng):
        Z = rng.standard_normal((3, 5))
        x = rng.standard_normal(3)
        lam = float(np.max(np.abs(Z.T @ x)))
        for nonneg in (True, False):
            rep = ista_solve(SparseRegressionProblem(Z, x, lam, nonneg=nonneg))
            np.testing.assert_array_equal(rep.w, 0.0)

    def test_divergence_names_bound(self):
        p = SparseRegressionProblem(np.eye(2) * 10, [1.0, 1.0], 0.0, eta=10.0, nonneg=False)
        with pytest.raises(DivergenceError, match="sigma_max"):
            ista_solve(p, max_iters=5000)

    def test_bad_arguments(self):
        p = SparseRegressionProblem(np.eye(2), [1.0, 1.0])
        with pytest.raises(ParameterError):
            ista_solve(p, max_iters=0)
        with pytest.raises(ParameterError):
            ista_solve(p, tol=0)

    @pytest.mark.parametrize("nonneg", [True, False])
    def test_matches_coordinate_descent(self, nonneg):
        rng = make_rng(7)
        for _ in range(60):
            Z, x, lam = random_instance(rng)
            p = SparseRegressionProblem(Z, x, lam, nonneg=nonneg)
            rep = ista_solve(p, max_iters=200000, tol=1e-12)
            oracle = coordinate_descent(Z, x, lam, nonneg)
            assert rep.objective_trace[-1] <= objective(Z, x, oracle, lam) + 1e-6

    def test_monotone_trace(self):
        rng = make_rng(8)
        for _ in range(100):
            Z, x, lam = random_instance(rng)
            rep = ista_solve(SparseRegressionProblem(Z, x, lam, nonneg=bool(rng.integers(2))), max_iters=300)
            assert np.all(np.diff(rep.objective_trace) <= 1e-12)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_support_shrinks_with_lambda(self, seed):
        # with orthogonal columns the support is {i : z_i^T x > lam} and nests in lam;
        # correlated overcomplete designs can grow the support along the path
        rng = make_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((8, 6)))
        Z = q * rng.uniform(0.5, 2.0, size=6)
        x = rng.standard_normal(8)
        lams = [0.01, 0.03, 0.1, 0.3, 1.0, 3.0]
        counts = [np.count_nonzero(ista_solve(SparseRegressionProblem(Z, x, lam, nonneg=True),
                                              max_iters=100000, tol=1e-12).w) for lam in lams]
        assert counts == sorted(counts, reverse=True)

class TestFista:
    @pytest.mark.parametrize("Z,x,lam", [
        (np.eye(2), [1.0, 0.1], 0.2),
        (np.array([[1.0, 0.5], [0.2, 1.0]]), [0.7, -0.3], 0.05),
        (np.array([[2.0, 0.0, 1.0], [0.0, 1.0, 1.0]]), [1.0, 2.0], 0.1),
    ])
    def test_agrees_with_ista(self, Z, x, lam):
        tol = 1e-10
        p = SparseRegressionProblem(Z, x, lam, nonneg=True)
        a = ista_solve(p, max_iters=100000, tol=tol).w
        b = fista_solve(p, max_iters=100000, tol=tol).w
        np.testing.assert_allclose(a, b, atol=10 * tol * 1e3)

    def test_median_objective_not_worse(self):
        rng = make_rng(10)
        fi, ist = [], []
        for _ in range(50):
            Z = rng.standard_normal((8, 12))
            x = rng.standard_normal(8)
            p = SparseRegressionProblem(Z, x, 0.05, nonneg=False)
            ist.append(ista_solve(p, max_iters=100, tol=1e-15).objective_trace[-1])
            fi.append(fista_solve(p, max_iters=100, tol=1e-15).objective_trace[-1])
        assert np.median(fi) <= np.median(ist)

    def test_fixed_point_start(self):
        p = SparseRegressionProblem(np.eye(2), [1.0, 0.1], 0.2, 1.0)
        rep = fista_solve(p, w0=[0.8, 0.0])
        assert rep.iterations == 1 and rep.converged


class TestOneStep:
    def test_orthonormal(self):
        np.testing.assert_allclose(one_step_weights(np.eye(2), [1.0, 0.1], 0.2, 1.0), [0.8, 0.0])

    def test_no_shrinkage(self, rng):
        Z = rng.standard_normal((3, 4))
        x = rng.standard_normal(3)
        w = one_step_weights(Z, x, 0.0, 0.3, nonneg=False)
        np.testing.assert_array_equal(w, 0.3 * (Z.T @ x))

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), nonneg=st.booleans())
    def test_equals_one_ista_iteration(self, seed, nonneg):
        rng = make_rng(seed)
        Z, x, lam = random_instance(rng)
        eta = float(rng.uniform(0.01, 1.0))
        a = one_step_weights(Z, x, lam, eta, nonneg)
        b = ista_solve(SparseRegressionProblem(Z, x, lam, eta, nonneg), max_iters=1).w
        assert a.tobytes() == b.tobytes()


class TestBatchAndRaw:
    @pytest.mark.parametrize("m", [3, 20])
    def test_batch_matches_single(self, rng, m):
        Z = rng.standard_normal((4, m))
        X = rng.standard_normal((5, 4))
        W, _ = ista_solve_batch(Z, X, 0.1, max_iters=5000, tol=1e-12, nonneg=False)
        for b in range(5):
            single = ista_solve(SparseRegressionProblem(Z, X[b], 0.1, nonneg=False), 5000, 1e-12).w
            np.testing.assert_allclose(W[b], single, atol=1e-9)

    def test_code_column_reconstructs(self, rng):
        Z = rng.standard_normal((4, 6))
        q, _ = svq_raw_quantize(Z[:, 2], Z, 1e-8, iters=200000, tol=1e-14)
        assert np.linalg.norm(q[0] - Z[:, 2]) < 1e-6

    def test_full_shrinkage_gives_zero(self, rng):
        Z = rng.standard_normal((3, 5))
        X = rng.standard_normal((4, 3))
        q, w = svq_raw_quantize(X, Z, float(np.max(np.abs(X @ Z))))
        np.testing.assert_array_equal(q, 0.0)
        np.testing.assert_array_equal(w, 0.0)

    def test_batch_of_one(self, rng):
        Z = rng.standard_normal((3, 5))
        x = rng.standard_normal(3)
        q, w = svq_raw_quantize(x[None], Z, 0.1, iters=50)
        rep = ista_solve(SparseRegressionProblem(Z, x, 0.1, nonneg=False), 50, 1e-8)
        np.testing.assert_array_equal(w[0], rep.w)
        np.testing.assert_array_equal(q[0], Z @ rep.w)

    def test_iters_must_be_positive(self):
        with pytest.raises(ParameterError):
            svq_raw_quantize(np.ones((1, 2)), np.eye(2), 0.1, iters=0)


class TestFlops:
    def test_svq_mlp_count(self):
        assert flops_estimate("svq_mlp", 32, 1024, hidden=128) == 2 * (32 * 128 + 128 * 1024 + 1024 * 32)
        assert flops_estimate("svq_mlp", 32, 1024, hidden=128) == 335_872

    def test_svq_raw_quadratic(self):
        a = flops_estimate("svq_raw", 256, 256, iters=10)
        b = flops_estimate("svq_raw", 512, 512, iters=10)
        assert b / a == pytest.approx(4.0, rel=0.01)

    def test_lookup(self):
        assert flops_estimate("lookup", 32, 1024, levels=8) == 8 * 2 * 32 * 1024

    def test_degenerate(self):
        with pytest.raises(ParameterError):
            flops_estimate("svq_mlp", 32, 1024, hidden=0)
        with pytest.raises(ParameterError):
            flops_estimate("magic", 32, 1024)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfopt import ConfigError
from sfopt.hessian import (HessianEstimate, SubfunctionRecord, append_history, bfgs_chain,
                           enforce_positive_definite, init_beta, initial_hessian_no_history, median)


def dense_beta(dX, dG):
    """Oracle: assemble Q^2 = (dX^+)^T dG^T dG dX^+ explicitly in K dims."""
    P = np.linalg.pinv(dX, rcond=1e-10)
    Q2 = P.T @ dG.T @ dG @ P
    lam = np.sqrt(np.clip(np.linalg.eigvalsh(0.5 * (Q2 + Q2.T)), 0, None))
    # rank(Q^2) <= rank(dX); the rest are roundoff zeros
    lam = np.sort(lam)[::-1][: np.linalg.matrix_rank(dX)]
    return lam[lam > 1e-12 * lam.max()].min()


def dense_bfgs(dX, dG, beta):
    """Oracle: textbook dense BFGS from beta * I."""
    B = beta * np.eye(dX.shape[0])
    for s, y in zip(dX.T, dG.T):
        Bs = B @ s
        B = B + np.outer(y, y) / (y @ s) - np.outer(Bs, Bs) / (s @ Bs)
    return B


def conjugate_steps(A, rng):
    """Columns that are mutually A-conjugate (Gram-Schmidt in the A inner product)."""
    K = A.shape[0]
    S = []
    for v in rng.standard_normal((K, K)):
        for s in S:
            v = v - (s @ A @ v) / (s @ A @ s) * s
        S.append(v)
    return np.array(S).T


def quadratic_history(rng, K, c, cond=10.0):
    Q = np.linalg.qr(rng.standard_normal((K, K)))[0]
    A = (Q * np.geomspace(1.0, cond, K)) @ Q.T
    dX = rng.standard_normal((K, c))
    return A, dX, A @ dX


class TestAppendHistory:
    def test_linear_gradient(self):
        rec = SubfunctionRecord(K=1)
        append_history(rec, [1.0], [3.0])
        assert append_history(rec, [2.0], [6.0])
        np.testing.assert_array_equal(rec.delta_x, [[1.0]])
        np.testing.assert_array_equal(rec.delta_g, [[3.0]])

    def test_negative_curvature_discarded(self):
        rec = SubfunctionRecord(K=1)
        append_history(rec, [0.0], [0.0])
        assert not append_history(rec, [1.0], [-1.0])
        assert rec.history_count == 0 and rec.eval_count == 2

    def test_repeat_position_discarded(self):
        rec = SubfunctionRecord(K=2)
        append_history(rec, [1.0, 1.0], [0.0, 1.0])
        assert not append_history(rec, [1.0, 1.0], [0.0, 2.0])

    def test_truncation(self):
        rec = SubfunctionRecord(K=1, L=10)
        for t in range(13):
            append_history(rec, [float(t)], [2.0 * t + t * t / 10])
        assert rec.history_count == 10
        # first two differences (from evals 0->1 and 1->2) are gone
        np.testing.assert_allclose(rec.delta_g[0, 0], (2 * 3 + 0.9) - (2 * 2 + 0.4))


class TestBFGSChain:
    def test_closed_form(self):
        est = bfgs_chain(np.array([[1.0], [0.0]]), np.array([[2.0], [0.0]]), 1.0)
        assert np.max(np.abs(est.matrix - np.diag([2.0, 1.0]))) <= 1e-12

    def test_recovers_quadratic(self):
        # with A-conjugate steps BFGS keeps every earlier secant equation, so
        # K pairs spanning the space pin down H = A
        rng = np.random.default_rng(0)
        K = 6
        A, _, _ = quadratic_history(rng, K, 1)
        dX = conjugate_steps(A, rng)
        dG = A @ dX
        H = bfgs_chain(dX, dG, init_beta(dX, dG)).matrix
        for s, y in zip(dX.T, dG.T):
            assert np.linalg.norm(H @ s - y) <= 1e-8 * np.linalg.norm(y)
        np.testing.assert_allclose(H, A, rtol=1e-8, atol=1e-8)

    def test_generic_steps_keep_only_last_secant(self):
        # without conjugacy the hereditary property fails: earlier secant
        # equations are not preserved, only the newest one is exact
        rng = np.random.default_rng(0)
        A, dX, dG = quadratic_history(rng, 6, 6)
        H = bfgs_chain(dX, dG, init_beta(dX, dG)).matrix
        res = [np.linalg.norm(H @ s - y) / np.linalg.norm(y) for s, y in zip(dX.T, dG.T)]
        assert res[-1] <= 1e-10 and max(res[:-1]) > 1e-3

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(1)
        A, dX, dG = quadratic_history(rng, 12, 4)
        beta = init_beta(dX, dG)
        np.testing.assert_allclose(bfgs_chain(dX, dG, beta).matrix, dense_bfgs(dX, dG, beta), rtol=1e-10, atol=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), K=st.integers(1, 15), c=st.integers(1, 10))
    def test_last_secant_exact(self, seed, K, c):
        rng = np.random.default_rng(seed)
        _, dX, dG = quadratic_history(rng, K, c, cond=100.0)
        est = bfgs_chain(dX, dG, init_beta(dX, dG))
        s, y = dX[:, -1], dG[:, -1]
        assert np.linalg.norm(est.apply(s) - y) <= 1e-10 * np.linalg.norm(y)

    def test_beta_on_complement(self):
        rng = np.random.default_rng(2)
        _, dX, dG = quadratic_history(rng, 8, 2)
        est = bfgs_chain(dX, dG, 0.7)
        basis = np.linalg.qr(np.hstack([dX, dG]))[0]
        v = rng.standard_normal(8)
        v -= basis @ (basis.T @ v)
        np.testing.assert_allclose(est.apply(v), 0.7 * v, atol=1e-12)

    def test_non_positive_beta(self):
        with pytest.raises(ConfigError):
            bfgs_chain(np.ones((1, 1)), np.ones((1, 1)), 0.0)


class TestInitBeta:
    def test_scalar_secant(self):
        assert abs(init_beta(np.array([[1.0]]), np.array([[3.0]])) - 3.0) <= 1e-12

    def test_scalar_secant_in_subspace(self):
        e1 = np.eye(4)[:, :1]
        assert abs(init_beta(e1, 3.0 * e1) - 3.0) <= 1e-12

    def test_two_orthogonal_pairs(self):
        dX = np.eye(3)[:, :2]
        dG = dX * np.array([2.0, 5.0])
        assert init_beta(dX, dG) == pytest.approx(2.0, abs=1e-12)

    def test_against_dense_eigensolve(self):
        rng = np.random.default_rng(3)
        _, dX, dG = quadratic_history(rng, 12, 4, cond=50.0)
        assert init_beta(dX, dG) == pytest.approx(dense_beta(dX, dG), rel=1e-8)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), K=st.integers(2, 14), c=st.integers(1, 8))
    def test_against_dense_eigensolve_random(self, seed, K, c):
        rng = np.random.default_rng(seed)
        dX = rng.standard_normal((K, c))
        dG = rng.standard_normal((K, c))
        assert init_beta(dX, dG) == pytest.approx(dense_beta(dX, dG), rel=1e-8)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), K=st.integers(1, 10), c=st.integers(1, 6))
    def test_rotation_invariant(self, seed, K, c):
        rng = np.random.default_rng(seed)
        _, dX, dG = quadratic_history(rng, K, c)
        R = np.linalg.qr(rng.standard_normal((K, K)))[0]
        assert init_beta(R @ dX, R @ dG) == pytest.approx(init_beta(dX, dG), rel=1e-9)

    def test_empty_history(self):
        with pytest.raises(ValueError):
            init_beta(np.zeros((3, 0)), np.zeros((3, 0)))


class TestNoHistory:
    def test_first_subfunction(self):
        np.testing.assert_array_equal(initial_hessian_no_history(2).matrix, 1e6 * np.eye(2))

    def test_odd_median(self):
        est = initial_hessian_no_history(3, np.diag([1.0, 4.0, 9.0]), 2)
        np.testing.assert_allclose(est.matrix, 4.0 * np.eye(3))

    def test_even_median(self):
        est = initial_hessian_no_history(2, np.diag([1.0, 4.0]), 1)
        np.testing.assert_allclose(est.matrix, 2.5 * np.eye(2))

    def test_accepts_estimate(self):
        mean = HessianEstimate(2.0, np.eye(4)[:, :1], np.array([[8.0]]))   # eigenvalues 2, 2, 2, 10
        assert initial_hessian_no_history(4, mean, 3).diag == 2.0


class TestEnforcePositiveDefinite:
    def rotated(self, eig, seed=0):
        V = np.linalg.qr(np.random.default_rng(seed).standard_normal((len(eig), len(eig))))[0]
        return (V * np.asarray(eig, dtype=float)) @ V.T, V

    def test_median_fill(self):
        H, V = self.rotated([4.0, 1.0, -0.5])
        out = enforce_positive_definite(H, gamma=1e-8)
        np.testing.assert_allclose(np.linalg.eigvalsh(out.matrix), [1.0, 2.5, 4.0], atol=1e-12)
        # eigenvectors are kept
        np.testing.assert_allclose(out.matrix @ V[:, 2], 2.5 * V[:, 2], atol=1e-12)
        assert out.clipped == 1

    def test_already_pd_unchanged(self):
        H, _ = self.rotated([3.0, 1e-3, 7.0])
        out = enforce_positive_definite(H)
        assert np.max(np.abs(out.matrix - H)) <= 1e-12 and out.clipped == 0

    def test_all_negative(self):
        H, _ = self.rotated([-1.0, -2.0, -3.0])
        np.testing.assert_allclose(enforce_positive_definite(H).matrix, np.eye(3), atol=1e-15)

    def test_asymmetric(self):
        with pytest.raises(ValueError):
            enforce_positive_definite(np.array([[1.0, 1.0], [0.0, 1.0]]))

    def test_low_rank_clips_diag(self):
        # beta far below gamma * lambda_max: the complement gets the median too
        est = HessianEstimate(1e-12, np.eye(4)[:, :1], np.array([[10.0 - 1e-12]]))
        out = enforce_positive_definite(est, gamma=1e-8)
        # the median positive eigenvalue is itself tiny here: the invariant is
        # "at least gamma * lambda_max, or equal to the median"
        assert out.diag == median([10.0, 1e-12, 1e-12, 1e-12]) and out.clipped == 3
        assert np.linalg.eigvalsh(out.matrix)[0] > 0

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), K=st.integers(1, 10))
    def test_always_pd_and_symmetric(self, seed, K):
        rng = np.random.default_rng(seed)
        eig = rng.standard_normal(K) * 10.0 ** rng.uniform(-12, 3, K)
        H, _ = self.rotated(eig, seed)
        out = enforce_positive_definite(0.5 * (H + H.T), gamma=1e-8).matrix
        assert np.max(np.abs(out - out.T)) <= 1e-12 * max(1.0, np.abs(out).max())
        assert np.linalg.eigvalsh(out)[0] > 0


def test_median_midpoint():
    assert median([1.0, 4.0]) == 2.5
    assert median([1.0, 4.0, 9.0]) == 4.0


def test_quadratic_model_predicts_next_iterate():
    """Full-rank (conjugate) history of a quadratic spanning the space: the
    model built from bfgs_chain predicts f at a new point to 1e-6 relative."""
    rng = np.random.default_rng(5)
    K = 5
    A, _, _ = quadratic_history(rng, K, 1, cond=20.0)
    c = rng.standard_normal(K)
    f = lambda x: 0.5 * (x - c) @ A @ (x - c)
    grad = lambda x: A @ (x - c)
    rec = SubfunctionRecord(K=K)
    xs = [rng.standard_normal(K)]
    for s in conjugate_steps(A, rng).T:
        xs.append(xs[-1] + s)
    for x in xs:
        append_history(rec, x, grad(x))
    H = bfgs_chain(rec.delta_x, rec.delta_g, init_beta(rec.delta_x, rec.delta_g)).matrix
    x0, x1 = xs[-1], rng.standard_normal(K)
    d = x1 - x0
    model = f(x0) + grad(x0) @ d + 0.5 * d @ H @ d
    assert abs(model - f(x1)) <= 1e-6 * abs(f(x1))

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfopt import ConfigError, DomainError
from sfopt.problem import (BUILTIN_PROBLEMS, DatasetSplit, ObjectiveProblem, QuadraticEnsemble, build_problem,
                           check_gradient, eval_subfunction, full_objective, logistic_reference_optimum,
                           make_logistic_regression, make_quadratic_ensemble, suggest_minibatch_count)


def quad(centers, hessians=None):
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    N, M = centers.shape
    if hessians is None:
        hessians = np.stack([np.eye(M)] * N)
    return QuadraticEnsemble(hessians, centers)


class TestEvalSubfunction:
    def test_centered_quadratic_minimum(self):
        p = quad([[0.0, 0.0]])
        f, g = eval_subfunction(p, 0, np.zeros(2))
        assert f == 0.0
        np.testing.assert_array_equal(g, [0.0, 0.0])

    def test_shifted_quadratic(self):
        p = quad([[1.0, 0.0]])
        f, g = eval_subfunction(p, 0, np.zeros(2))
        assert f == 0.5
        np.testing.assert_array_equal(g, [-1.0, 0.0])

    def test_logistic_three_sample_minibatch_at_zero(self):
        # one minibatch of three samples: the per-minibatch loss is the mean
        # log-loss, ln 2 at x = 0 whatever the data
        p = make_logistic_regression(seed=5, D=3, feature_dim=4, N=1, l2_coefficient=0.0)
        f, _ = p.eval_subfunction(0, np.zeros(4))
        assert f == pytest.approx(3 * math.log(2) / 3, rel=1e-15)
        assert check_gradient(p, 0, np.random.default_rng(0).standard_normal(4), step=1e-6) <= 1e-5

    def test_index_out_of_range(self):
        p = quad([[0.0]])
        with pytest.raises(IndexError):
            p.eval_subfunction(1, np.zeros(1))
        with pytest.raises(IndexError):
            p.eval_subfunction(-1, np.zeros(1))

    def test_non_finite_input(self):
        p = quad([[0.0, 0.0]])
        with pytest.raises(DomainError):
            p.eval_subfunction(0, np.array([np.nan, 0.0]))
        with pytest.raises(DomainError):
            p.eval_subfunction(0, np.zeros(3))

    def test_non_finite_output_propagates(self):
        p = ObjectiveProblem(1, 1, lambda i, x: (np.inf, np.array([np.nan])))
        f, g = p.eval_subfunction(0, np.zeros(1))
        assert f == np.inf and np.isnan(g[0])

    def test_deterministic(self):
        p = make_logistic_regression(seed=1, D=100, feature_dim=5, N=4)
        x = np.random.default_rng(2).standard_normal(5)
        a, b = p.eval_subfunction(2, x), p.eval_subfunction(2, x)
        assert a[0] == b[0]
        np.testing.assert_array_equal(a[1], b[1])


class TestFullObjective:
    def test_symmetric_pair(self):
        p = quad([[1.0], [-1.0]])
        f, g = full_objective(p, np.zeros(1))
        assert f == 1.0 and g[0] == 0.0

    def test_pair_at_two(self):
        p = quad([[1.0], [-1.0]])
        f, g = full_objective(p, np.array([2.0]))
        assert f == 5.0 and g[0] == 4.0

    def test_equals_sum_of_subfunctions(self):
        p = make_quadratic_ensemble(seed=4, M=6, N=10)
        x = np.random.default_rng(0).standard_normal(6)
        total, grad = 0.0, np.zeros(6)
        for i in range(10):
            f, g = p.eval_subfunction(i, x)
            total += f
            grad += g
        F, G = p.full_objective(x)
        assert F == total
        np.testing.assert_array_equal(G, grad)


class TestQuadraticEnsemble:
    def test_symmetric_scalar_case(self):
        p = quad([[1.0], [-1.0]])
        x_star, F_star = p.analytic_optimum
        assert x_star[0] == pytest.approx(0.0, abs=1e-15)
        assert F_star == pytest.approx(1.0)

    def test_single_quadratic(self):
        p = quad([[3.0, 4.0]])
        np.testing.assert_allclose(p.analytic_optimum[0], [3.0, 4.0], atol=1e-14)

    def test_optimum_against_dense_solve(self):
        p = make_quadratic_ensemble(seed=7, M=20, N=10)
        A, c = p.hessians, p.centers
        lhs = A.sum(axis=0)
        rhs = np.einsum("nij,nj->i", A, c)
        x_star = p.analytic_optimum[0]
        assert np.linalg.norm(lhs @ x_star - rhs) <= 1e-10
        np.testing.assert_allclose(x_star, np.linalg.solve(lhs, rhs), rtol=1e-10, atol=1e-12)

    def test_spectrum_spans_condition_number(self):
        p = make_quadratic_ensemble(seed=1, M=8, N=3, condition_number=50.0)
        for A in p.hessians:
            np.testing.assert_allclose(A, A.T, atol=0)
            w = np.linalg.eigvalsh(A)
            assert w[0] == pytest.approx(1.0, rel=1e-10)
            assert w[-1] == pytest.approx(50.0, rel=1e-10)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000), M=st.integers(1, 12), N=st.integers(1, 6))
    def test_gradient_vanishes_at_optimum(self, seed, M, N):
        p = make_quadratic_ensemble(seed=seed, M=M, N=N)
        _, g = p.full_objective(p.analytic_optimum[0])
        assert np.linalg.norm(g) <= 1e-8

    def test_same_seed_identical(self):
        a = make_quadratic_ensemble(seed=9, M=5, N=3)
        b = make_quadratic_ensemble(seed=9, M=5, N=3)
        np.testing.assert_array_equal(a.hessians, b.hessians)
        np.testing.assert_array_equal(a.centers, b.centers)

    @pytest.mark.parametrize("kwargs", [dict(M=0, N=1), dict(M=1, N=0), dict(M=2, N=2, condition_number=0.5)])
    def test_invalid_sizes(self, kwargs):
        with pytest.raises(ConfigError):
            make_quadratic_ensemble(seed=0, **kwargs)


class TestLogisticRegression:
    def test_each_minibatch_is_ln2_at_zero(self):
        p = make_logistic_regression(seed=0, D=50, feature_dim=3, N=5)
        for i in range(5):
            assert p.eval_subfunction(i, np.zeros(3))[0] == pytest.approx(math.log(2), rel=1e-15)

    def test_strong_convexity_floor(self):
        l2, N = 0.5, 4
        p = make_logistic_regression(seed=2, D=40, feature_dim=3, N=N, l2_coefficient=l2)
        x = np.random.default_rng(0).standard_normal(3)
        h = 1e-5
        for i in range(N):
            Hi = np.stack([(p.eval_subfunction(i, x + h * e)[1] - p.eval_subfunction(i, x - h * e)[1]) / (2 * h)
                           for e in np.eye(3)])
            assert np.linalg.eigvalsh(0.5 * (Hi + Hi.T))[0] >= 2 * l2 / N - 1e-6

    def test_minibatches_partition_samples(self):
        p = make_logistic_regression(seed=3, D=103, feature_dim=2, N=10)
        sizes = [len(b) for b in p.split.batches]
        assert sum(sizes) == 103 and max(sizes) - min(sizes) <= 1
        assert sorted(np.concatenate(p.split.batches).tolist()) == list(range(103))

    def test_reference_optimum_stationary(self):
        p = make_logistic_regression(seed=3, D=200, feature_dim=10, N=4)
        x, f = logistic_reference_optimum(p)
        _, g = p.full_objective(x)
        assert np.linalg.norm(g) <= 1e-10
        assert f == p.full_objective(x)[0]

    def test_reference_optimum_desk_problem(self):
        p = make_logistic_regression(seed=3, D=2000, feature_dim=100, N=20)
        x, f = logistic_reference_optimum(p)
        assert np.linalg.norm(p.full_objective(x)[1]) <= 1e-10
        # strictly convex: nearby points are no better
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert p.full_objective(x + 1e-3 * rng.standard_normal(100))[0] >= f

    def test_too_few_samples(self):
        with pytest.raises(ConfigError):
            make_logistic_regression(seed=0, D=3, feature_dim=2, N=4)

    def test_csv_dump(self, tmp_path):
        p = make_logistic_regression(seed=0, D=6, feature_dim=2, N=2)
        path = tmp_path / "data.csv"
        p.split.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "x0,x1,label" and len(lines) == 7
        assert lines[1].split(",")[-1] in ("1", "-1")

    def test_dataset_split_from_assignment(self):
        s = DatasetSplit.from_assignment(np.zeros((4, 1)), np.ones(4), [1, 0, 1, 0])
        assert [b.tolist() for b in s.batches] == [[1, 3], [0, 2]]


class TestCheckGradient:
    def test_quadratic_exact(self):
        p = make_quadratic_ensemble(seed=0, M=10, N=2)
        assert check_gradient(p, 0, np.random.default_rng(1).standard_normal(10), step=1e-6) <= 1e-7

    def test_logistic(self):
        p = make_logistic_regression(seed=0, D=100, feature_dim=10, N=5)
        assert check_gradient(p, 3, np.random.default_rng(1).standard_normal(10), step=1e-6) <= 1e-5

    def test_detects_corrupted_gradient(self):
        # unit-scale gradient, so a 0.1 fault is a 10% error
        inner = quad([[1.0, -0.5, 0.25, 0.0, 2.0]])

        def bad(i, x):
            f, g = inner.eval_subfunction(i, x)
            g = g.copy()
            g[2] += 0.1
            return f, g

        p = ObjectiveProblem(5, 1, bad)
        assert check_gradient(p, 0, np.zeros(5)) >= 1e-2
        assert check_gradient(inner, 0, np.zeros(5)) <= 1e-7

    def test_bad_step(self):
        with pytest.raises(ConfigError):
            check_gradient(quad([[0.0]]), 0, np.zeros(1), step=0.0)

    @pytest.mark.parametrize("kind", BUILTIN_PROBLEMS)
    def test_builtins_at_random_points(self, kind):
        p = build_problem({"kind": kind, "seed": 1, "M": 12, "feature_dim": 12, "D": 200, "N": 5})
        rng = np.random.default_rng(3)
        for _ in range(100):
            assert check_gradient(p, int(rng.integers(p.N)), rng.standard_normal(p.M)) <= 1e-5


class TestSuggestMinibatchCount:
    @pytest.mark.parametrize("D,prop,expected", [(10_000, 1, 100), (4, 1, 2), (50, 10, 50), (1, 0.01, 1)])
    def test_examples(self, D, prop, expected):
        assert suggest_minibatch_count(D, proportionality=prop) == expected

    def test_invalid(self):
        with pytest.raises(ConfigError):
            suggest_minibatch_count(0)


def test_build_problem_unknown_kind():
    with pytest.raises(ConfigError):
        build_problem({"kind": "mnist"})

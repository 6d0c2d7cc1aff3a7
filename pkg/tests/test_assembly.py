import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grangernet.assembly import (
    ConstraintStructure, DifferenceD, Partition, ProjectionP, assemble, build_difference, build_projection,
    difference_matrix, dump_patterns, gram_factorize, pair_list,
)
from grangernet.exceptions import ValidationError
from grangernet.var_core import VarPanel, coefs_to_groups, groups_to_coefs, least_squares


def make_panel(n=3, p=2, K=2, T=30, seed=0):
    rng = np.random.default_rng(seed)
    return VarPanel.from_series([rng.normal(size=(n, T)) for _ in range(K)], p)


class TestAssemble:
    def test_objective_equivalence(self):
        panel = make_panel()
        problem = assemble(panel)
        rng = np.random.default_rng(1)
        X = rng.normal(size=(3, 3, 2, 2))
        coefs = groups_to_coefs(X)
        direct = sum(np.sum((Y - np.hstack(list(coefs[k])) @ H) ** 2)
                     for k, (Y, H) in enumerate(zip(panel.Y, panel.H)))
        assert problem.residual_sq(X) == pytest.approx(direct, rel=1e-10)
        G, b = problem.dense()
        assert np.sum((G @ X.ravel() - b) ** 2) == pytest.approx(direct, rel=1e-10)

    def test_ls_stationarity(self):
        panel = make_panel(seed=2)
        problem = assemble(panel)
        X = coefs_to_groups(least_squares(panel).coefs)
        G, b = problem.dense()
        assert np.abs(G.T @ (G @ X.ravel() - b)).max() < 1e-9 * np.abs(G.T @ b).max()
        assert np.abs(problem.gradient(X)).max() < 1e-10

    def test_dimensions(self):
        panel = make_panel(n=5, p=10, K=3, T=40)
        problem = assemble(panel)
        N = 30
        assert problem.shape == (5 * N * 3, 10 * 3 * 25)

    def test_gram_matches_dense(self):
        problem = assemble(make_panel(seed=3))
        G, _ = problem.dense()
        np.testing.assert_allclose(problem.gram_dense(), G.T @ G, atol=1e-10)

    def test_gram_block_structure(self):
        # G^T G couples coordinates only within the same equation i and model k
        problem = assemble(make_panel(n=3, p=2, K=2))
        M = problem.gram_dense()
        idx = np.arange(M.shape[0]).reshape(3, 3, 2, 2)
        eq = np.broadcast_to(np.arange(3)[:, None, None, None], idx.shape).ravel()
        model = np.broadcast_to(np.arange(2)[None, None, :, None], idx.shape).ravel()
        same = (eq[:, None] == eq[None]) & (model[:, None] == model[None])
        assert np.all(M[~same] == 0)

    def test_gradient_matches_dense(self):
        problem = assemble(make_panel(seed=4))
        G, b = problem.dense()
        X = np.random.default_rng(0).normal(size=(3, 3, 2, 2))
        np.testing.assert_allclose(problem.gradient(X).ravel(), G.T @ (G @ X.ravel() - b) / problem.N,
                                   atol=1e-10)

    def test_dense_budget(self):
        problem = assemble(make_panel())
        with pytest.raises(ValidationError):
            problem.dense(budget=10)


class TestProjection:
    def test_n2_example(self):
        P = build_projection(2, 1, 2)
        X = np.arange(8.0).reshape(2, 2, 2, 1)
        V = P.apply(X)
        np.testing.assert_array_equal(V.reshape(2, -1), [X[0, 1].ravel(), X[1, 0].ravel()])

    def test_n1_has_no_rows(self):
        assert build_projection(1, 2, 3).shape == (0, 6)

    def test_shape_and_rows(self):
        P = build_projection(4, 2, 3)
        assert P.shape == (12 * 6, 16 * 6)
        M = P.matrix().toarray()
        assert np.all(M.sum(axis=1) == 1)
        np.testing.assert_array_equal(M @ M.T, np.eye(M.shape[0]))
        diag_cols = np.eye(4, dtype=bool)[:, :, None].repeat(6, axis=2).ravel()
        assert np.all(M[:, diag_cols] == 0)

    @given(st.integers(0, 1000))
    def test_adjoint_and_nonexpansive(self, seed):
        rng = np.random.default_rng(seed)
        P = ProjectionP(3, 2, 2)
        X = rng.normal(size=(3, 3, 2, 2))
        V = rng.normal(size=(6, 2, 2))
        assert np.sum(P.apply(X) * V) == pytest.approx(np.sum(X * P.adjoint(V)))
        assert np.sum(P.apply(X) ** 2) <= np.sum(X ** 2) + 1e-12
        np.testing.assert_allclose(P.matrix() @ X.ravel(), P.apply(X).ravel())


class TestDifference:
    def test_k3_matrix(self):
        np.testing.assert_array_equal(difference_matrix(3), [[1, -1, 0], [1, 0, -1], [0, 1, -1]])
        assert pair_list(3) == [(0, 1), (0, 2), (1, 2)]

    def test_k_lt_2_rejected(self):
        with pytest.raises(ValidationError):
            build_difference(3, 1, 1)

    def test_row_count(self):
        assert build_difference(5, 10, 3).shape[0] == 600

    def test_identical_models_give_zero(self):
        rng = np.random.default_rng(0)
        X = np.repeat(rng.normal(size=(4, 4, 1, 2)), 3, axis=2)
        assert np.all(build_difference(4, 2, 3).apply(X) == 0)

    def test_operator_matches_factored_matrix(self):
        rng = np.random.default_rng(1)
        D = DifferenceD(3, 2, 3)
        X = rng.normal(size=(3, 3, 3, 2))
        np.testing.assert_allclose(D.matrix() @ X.ravel(), D.apply(X).ravel())
        W = rng.normal(size=D.apply(X).shape)
        assert np.sum(D.apply(X) * W) == pytest.approx(np.sum(X * D.adjoint(W)))

    def test_pair_order(self):
        X = np.zeros((2, 2, 3, 1))
        X[0, 1, :, 0] = [1.0, 2.0, 4.0]
        V = DifferenceD(2, 1, 3).apply(X)
        np.testing.assert_array_equal(V[0, :, 0], [-1.0, -3.0, -2.0])


class TestFactorization:
    @pytest.mark.parametrize("structure", [ConstraintStructure(1, 0), ConstraintStructure(2, 0),
                                           ConstraintStructure(1, 1)])
    def test_matches_dense_solve(self, structure):
        problem = assemble(make_panel(n=3, p=2, K=3, T=40, seed=5))
        fact = gram_factorize(problem, structure, 0.7)
        rhs = np.random.default_rng(0).normal(size=problem.zeros().shape)
        ref = np.linalg.solve(fact.matrix_dense(), rhs.ravel())
        np.testing.assert_allclose(fact.solve(rhs).ravel(), ref, rtol=1e-8, atol=1e-10)

    def test_block_counts(self):
        problem = assemble(make_panel(n=3, p=2, K=3, T=40))
        assert gram_factorize(problem, ConstraintStructure(1, 0), 1.0).block_count == 9
        assert gram_factorize(problem, ConstraintStructure(1, 1), 1.0).block_count == 3

    def test_small_rho_limit_is_least_squares(self):
        panel = make_panel(seed=6)
        problem = assemble(panel)
        fact = gram_factorize(problem, ConstraintStructure(1, 0), 1e-12)
        X = fact.solve(problem.Gtb() / problem.N)
        np.testing.assert_allclose(X, coefs_to_groups(least_squares(panel).coefs), atol=1e-8)

    def test_rho_must_be_positive(self):
        with pytest.raises(ValidationError):
            gram_factorize(assemble(make_panel()), ConstraintStructure(1, 0), 0.0)


def test_partition():
    part = Partition(12, 3)
    assert part.count == 4
    covered = sorted(i for b in part.blocks() for i in b)
    assert covered == list(range(12))
    with pytest.raises(ValidationError):
        Partition(10, 3)


def test_dump_patterns(tmp_path):
    files = dump_patterns(assemble(make_panel()), tmp_path)
    names = {f.name for f in files}
    assert {"G.coo.txt", "P.coo.txt", "D.coo.txt", "GtG.coo.txt"} <= names
    rows = np.loadtxt(tmp_path / "P.coo.txt", ndmin=2)
    assert len(rows) == 6 * 4

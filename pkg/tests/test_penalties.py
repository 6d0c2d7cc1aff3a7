import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grangernet.assembly import assemble
from grangernet.exceptions import ValidationError
from grangernet.penalties import (
    GRID_SPAN, Kind, PenaltySpec, Weights, compute_weights, critical_lambda, evaluate_penalty, lambda_anchors,
    lambda_grid, log_grid, make_penalty,
)
from grangernet.solver import SolverOptions, solve
from grangernet.var_core import LeastSquaresFit, VarPanel, coefs_to_groups, least_squares


def make_panel(n=4, p=2, K=2, T=60, seed=0):
    rng = np.random.default_rng(seed)
    return VarPanel.from_series([rng.normal(size=(n, T)) for _ in range(K)], p)


def fake_fit(coefs):
    return LeastSquaresFit(coefs, np.linalg.norm(coefs, axis=1), np.linalg.norm(coefs, axis=(0, 1)))


class TestWeights:
    def test_pooled_weight_example(self):
        # ||C~_01|| = 4 with q = 1/2 -> v = 1/2
        coefs = np.ones((2, 1, 2, 2))
        coefs[:, 0, 0, 1] = [4.0 / np.sqrt(2)] * 2
        coefs[:, 0, 1, 0] = [1.0, 1.0]
        w = compute_weights(fake_fit(coefs), q=0.5)
        assert w.pooled[0] == pytest.approx(0.5)

    def test_unit_lag_weight(self):
        coefs = np.zeros((2, 1, 2, 2))
        coefs[0, 0, 0, 1] = 1.0
        coefs[1, 0, 0, 1] = 3.0
        coefs[:, 0, 1, 0] = 2.0
        w = compute_weights(fake_fit(coefs), q=0.5)
        assert w.lag[0, 0] == pytest.approx(1.0)
        # literal DGN weights carry no exponent; the uniform option applies q
        assert w.lag[0, 1] == pytest.approx(1 / 3)
        assert compute_weights(fake_fit(coefs), q=0.5, uniform_exponent=True).lag[0, 1] == pytest.approx(3 ** -0.5)

    def test_equal_models_hit_the_cap(self):
        rng = np.random.default_rng(0)
        base = rng.normal(size=(1, 1, 4, 4))
        coefs = np.repeat(base, 3, axis=0)
        coefs[1, 0, 0, 1] += 1.0  # one pair differs so the median is positive
        w = compute_weights(fake_fit(coefs), q=1.0)
        assert np.all(np.isfinite(w.fused))
        assert w.fused.max() == pytest.approx(w.fused[w.fused > 0].max())
        assert w.fused[1, 2] > 1e6

    def test_unit_weights(self):
        w = Weights.unit(3, 2)
        assert w.pooled.shape == (6,) and w.lag.shape == (6, 2) and w.fused.shape == (6, 1)


class TestEvaluatePenalty:
    def test_zero(self):
        spec = PenaltySpec("dgn", 1.0, 1.0, 1.0, Weights.unit(3, 2))
        assert evaluate_penalty(spec, np.zeros((3, 3, 2, 1))) == 0.0

    def test_cgn_example(self):
        # single nonzero C_01 with ||C_01|| = 2, lambda = 3 -> g = 6
        X = np.zeros((2, 2, 2, 1))
        X[0, 1, :, 0] = [np.sqrt(2), np.sqrt(2)]
        spec = PenaltySpec("cgn", 1.0, 3.0, 0.0, Weights.unit(2, 2))
        assert evaluate_penalty(spec, X) == pytest.approx(6.0)

    def test_dgn_lam2_zero_is_separable(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(3, 3, 2, 2))
        spec = PenaltySpec("dgn", 1.0, 0.7, 0.0, Weights.unit(3, 2))
        off = ~np.eye(3, dtype=bool)
        expected = 0.7 * np.linalg.norm(X[off], axis=2).sum()
        assert evaluate_penalty(spec, X) == pytest.approx(expected)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 1000), t=st.floats(0.1, 10), q=st.sampled_from([1.0, 0.5]))
    def test_homogeneity_and_diagonal_invariance(self, seed, t, q):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(3, 3, 2, 2))
        spec = PenaltySpec("cgn", q, 1.3, 0.0, Weights.unit(3, 2))
        Y = X.copy()
        Y[0, 1] *= t
        delta = evaluate_penalty(spec, Y) - evaluate_penalty(spec, X)
        g01 = 1.3 * np.linalg.norm(X[0, 1]) ** q
        assert delta == pytest.approx(g01 * (t ** q - 1), rel=1e-9, abs=1e-12)
        Z = X.copy()
        Z[np.arange(3), np.arange(3)] = rng.normal(size=(3, 2, 2))
        assert evaluate_penalty(spec, Z) == pytest.approx(evaluate_penalty(spec, X))

    def test_fused_term_zero_iff_models_agree(self):
        rng = np.random.default_rng(2)
        X = np.repeat(rng.normal(size=(3, 3, 1, 2)), 3, axis=2)
        spec = PenaltySpec("fgn", 1.0, 0.0, 1.0, Weights.unit(3, 3))
        assert evaluate_penalty(spec, X) == 0.0
        X[2, 0, 1, 0] += 0.1
        assert evaluate_penalty(spec, X) > 0.0

    def test_invalid_q_and_lambda(self):
        with pytest.raises(ValidationError):
            PenaltySpec("cgn", 0.7)
        with pytest.raises(ValidationError):
            PenaltySpec("cgn", 1.0, -1.0)
        with pytest.raises(ValidationError):
            Kind.parse("xgn")


class TestCriticalLambda:
    @pytest.mark.parametrize("kind", ["cgn", "dgn"])
    def test_zero_at_lambda_max_nonzero_below(self, kind):
        panel = make_panel(seed=3)
        problem = assemble(panel)
        spec = make_penalty(least_squares(panel), kind, 1.0)
        lam1, _ = lambda_anchors(problem, spec)
        at = solve(problem, spec.with_lambdas(lam1, 0.0), SolverOptions(eps_rel=1e-8, eps_abs=1e-10))
        assert not at.support.any()
        below = solve(problem, spec.with_lambdas(0.9 * lam1, 0.0), SolverOptions(eps_rel=1e-8, eps_abs=1e-10))
        assert below.support.any()

    def test_dgn_lam2_anchor_is_pooled_critical_value(self):
        panel = make_panel(seed=4)
        problem = assemble(panel)
        spec = make_penalty(least_squares(panel), "dgn", 1.0)
        _, lam2 = lambda_anchors(problem, spec)
        assert lam2 == pytest.approx(critical_lambda(problem, spec.weights.pooled, "pooled"))
        res = solve(problem, spec.with_lambdas(0.0, lam2), SolverOptions(eps_rel=1e-8, eps_abs=1e-10))
        assert not res.support.any()

    def test_fgn_lam2_anchor_fuses_models(self):
        panel = make_panel(n=3, p=1, K=3, T=80, seed=5)
        problem = assemble(panel)
        spec = make_penalty(least_squares(panel), "fgn", 1.0)
        _, lam2 = lambda_anchors(problem, spec)
        fused = solve(problem, spec.with_lambdas(0.0, lam2)).fusion
        assert fused.all()
        # the search brackets the anchor within a factor two
        assert not solve(problem, spec.with_lambdas(0.0, lam2 / 2)).fusion.all()

    def test_zero_lambdas_give_least_squares(self):
        panel = make_panel(seed=6)
        problem = assemble(panel)
        spec = make_penalty(least_squares(panel), "dgn", 1.0)
        res = solve(problem, spec.with_lambdas(0.0, 0.0))
        X_ls = coefs_to_groups(least_squares(panel).coefs)
        assert np.linalg.norm(res.X - X_ls) / np.linalg.norm(X_ls) < 1e-4


class TestGrid:
    def test_log_grid_audit(self):
        g = log_grid(2.0, 30)
        assert len(g) == 30
        assert g[0] == pytest.approx(2.0) and g[-1] == pytest.approx(2.0 * GRID_SPAN)
        ratios = g[1:] / g[:-1]
        np.testing.assert_allclose(ratios, ratios[0])

    def test_cgn_and_dgn_layout(self):
        panel = make_panel(seed=7)
        problem = assemble(panel)
        ls = least_squares(panel)
        cgn = lambda_grid(problem, make_penalty(ls, "cgn"), 5)
        assert len(cgn) == 5 and all(b == 0.0 for _, b in cgn)
        dgn = lambda_grid(problem, make_penalty(ls, "dgn"), 4, lam2_size=3)
        assert len(dgn) == 12
        # lam2-major, lam1 descending within each row
        lam2s = [b for _, b in dgn]
        assert lam2s == sorted(lam2s, reverse=True)
        for r in range(3):
            row = [a for a, _ in dgn[4 * r:4 * r + 4]]
            assert row == sorted(row, reverse=True)

    def test_penalty_round_trip(self):
        spec = PenaltySpec("fgn", 0.5, 0.1, 0.2, uniform_exponent=True)
        assert PenaltySpec.from_dict(spec.to_dict()) == spec

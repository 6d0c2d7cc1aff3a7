"""eBIC model selection over a penalty grid with constrained refitting."""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .assembly import StackedProblem, assemble, pair_list
from .exceptions import NumericalError, ValidationError
from .penalties import GRID_SPAN, Kind, PenaltySpec, lambda_grid, make_penalty
from .solver import SolveResult, SolverOptions, solve
from .var_core import LeastSquaresFit, VarPanel, least_squares, offdiag_mask

logger = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.5


@dataclass
class Refit:
    coefs: np.ndarray   # (K, p, n, n)
    loglik: float
    ridge: bool = False


def fusion_classes(support: np.ndarray, fusion: np.ndarray | None) -> list[list[list[int]]]:
    """Per off-diagonal pair, the models grouped into classes sharing coefficients.

    Only models where the pair is in the support take part; two models are
    joined when their difference block is exactly zero.  Returns, for every
    off-diagonal pair in row-major order, a list of model-index classes.
    """
    K, n, _ = support.shape
    S = support[:, offdiag_mask(n)].T  # (m, K)
    pairs = pair_list(K)
    out = []
    for m in range(S.shape[0]):
        active = [k for k in range(K) if S[m, k]]
        parent = {k: k for k in active}

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        if fusion is not None:
            for q, (k, l) in enumerate(pairs):
                if fusion[m, q] and k in parent and l in parent:
                    parent[find(l)] = find(k)
        classes: dict[int, list[int]] = {}
        for k in active:
            classes.setdefault(find(k), []).append(k)
        out.append(sorted(classes.values()))
    return out


def _gaussian_loglik(panel: VarPanel, coefs: np.ndarray) -> float:
    n, N = panel.n, panel.N
    total = 0.0
    for k, (Y, H) in enumerate(zip(panel.Y, panel.H)):
        A = coefs[k].transpose(1, 0, 2).reshape(n, -1)  # (n, np), lag-major columns
        E = Y - A @ H
        sigma = E @ E.T / N
        sigma = sigma + 1e-8 * np.trace(sigma) / n * np.eye(n)
        sign, logdet = np.linalg.slogdet(sigma)
        if sign <= 0:
            raise NumericalError("residual covariance is not positive definite")
        total += -0.5 * N * (n * math.log(2 * math.pi) + logdet + n)
    return total


def refit_constrained(panel: VarPanel, support: np.ndarray, fusion: np.ndarray | None = None,
                      problem: StackedProblem | None = None) -> Refit:
    """Least squares restricted to ``support`` (self-lags always free).

    With ``fusion`` (FGN) the models of a fused class share one coefficient
    vector for that pair, fitted jointly across the class.
    """
    problem = problem or assemble(panel)
    n, p, K = problem.n, problem.p, problem.K
    support = np.asarray(support, dtype=bool)
    if support.shape != (K, n, n):
        raise ValidationError(f"support must have shape {(K, n, n)}")
    coefs = np.zeros((K, p, n, n))
    ridge = False
    pairs = np.argwhere(offdiag_mask(n))
    classes = fusion_classes(support, fusion) if fusion is not None else None

    for i in range(n):
        # parameter groups: (models sharing it, source channel j)
        groups: list[tuple[list[int], int]] = [([k], i) for k in range(K)]
        if classes is None:
            for j in range(n):
                if j != i:
                    groups += [([k], j) for k in range(K) if support[k, i, j]]
        else:
            for m in np.flatnonzero(pairs[:, 0] == i):
                j = int(pairs[m, 1])
                groups += [(cls, j) for cls in classes[m]]
        if classes is None or all(len(g[0]) == 1 for g in groups):
            ridge |= _refit_unfused(problem, i, groups, coefs)
        else:
            ridge |= _refit_fused(problem, i, groups, coefs)
    return Refit(coefs, _gaussian_loglik(panel, coefs), ridge)


def _solve_normal(M: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, bool]:
    try:
        np.linalg.cholesky(M)
        return np.linalg.solve(M, rhs), False
    except np.linalg.LinAlgError:
        lam = 1e-6 * np.trace(M) / max(len(M), 1)
        return np.linalg.solve(M + lam * np.eye(len(M)), rhs), True


def _refit_unfused(problem, i, groups, coefs) -> bool:
    p = problem.p
    ridge = False
    for k in range(problem.K):
        js = sorted(j for models, j in groups if models[0] == k)
        idx = np.concatenate([np.arange(j * p, (j + 1) * p) for j in js])
        beta, flag = _solve_normal(problem.gram[k][np.ix_(idx, idx)], problem.cross[k, i, idx])
        ridge |= flag
        for t, j in enumerate(js):
            coefs[k, :, i, j] = beta[t * p:(t + 1) * p]
    return ridge


def _refit_fused(problem, i, groups, coefs) -> bool:
    p = problem.p
    G = len(groups)
    M = np.zeros((G * p, G * p))
    rhs = np.zeros(G * p)
    sets = [set(models) for models, _ in groups]
    for a, (models_a, ja) in enumerate(groups):
        sa = slice(ja * p, (ja + 1) * p)
        for k in models_a:
            rhs[a * p:(a + 1) * p] += problem.cross[k, i, sa]
        for b in range(a, G):
            shared = sets[a] & sets[b]
            if not shared:
                continue
            jb = groups[b][1]
            sb = slice(jb * p, (jb + 1) * p)
            block = sum(problem.gram[k][sa, sb] for k in shared)
            M[a * p:(a + 1) * p, b * p:(b + 1) * p] = block
            M[b * p:(b + 1) * p, a * p:(a + 1) * p] = block.T
    beta, ridge = _solve_normal(M, rhs)
    for a, (models, j) in enumerate(groups):
        for k in models:
            coefs[k, :, i, j] = beta[a * p:(a + 1) * p]
    return ridge


def degrees_of_freedom(result: SolveResult, kind, ls: LeastSquaresFit | None = None) -> float:
    """Effective parameter count of a penalised solution, self-lags included.

    CGN: each nonzero pooled group counts ``1 + (pK - 1) ||C^|| / ||C~||``.
    DGN: nonzero lag-group coefficients.  FGN: as DGN with each fused class
    counted once.
    """
    kind = Kind.parse(kind)
    K, n, _ = result.support.shape
    p = result.X.shape[3]
    diag = n * p * K
    if kind is Kind.CGN:
        if ls is None:
            raise ValidationError("CGN degrees of freedom need the LS fit")
        norms = result.pooled_z()
        ls_norms = ls.pooled_norms[offdiag_mask(n)]
        nz = norms > 0
        df = float(np.sum(nz)) + float(np.sum(norms[nz] / ls_norms[nz])) * (p * K - 1)
        return min(df + diag, float(n * n * p * K))
    if kind is Kind.DGN or result.fusion is None:
        return float(p * result.support.sum() + diag)
    classes = fusion_classes(result.support, result.fusion)
    return float(p * sum(len(c) for c in classes) + diag)


def log_binomial(total: int, df: float) -> float:
    return float(gammaln(total + 1) - gammaln(df + 1) - gammaln(total - df + 1))


def ebic_score(loglik: float, df: float, n: int, p: int, K: int, T: int, gamma: float = DEFAULT_GAMMA) -> float:
    """``-2 L + df log(T - p) + 2 gamma log C(n^2 p K, df)``."""
    total = n * n * p * K
    if not 0 <= df <= total:
        raise ValidationError(f"df={df} outside [0, {total}]")
    if not 0 <= gamma <= 1:
        raise ValidationError("gamma must lie in [0, 1]")
    return -2.0 * loglik + df * math.log(T - p) + 2.0 * gamma * log_binomial(total, df)


def support_hash(support: np.ndarray, fusion: np.ndarray | None = None) -> str:
    h = hashlib.sha1(np.packbits(np.asarray(support, dtype=bool)).tobytes())
    if fusion is not None:
        h.update(np.packbits(np.asarray(fusion, dtype=bool)).tobytes())
    return h.hexdigest()[:12]


@dataclass
class ModelCandidate:
    lam1: float
    lam2: float
    support: np.ndarray
    fusion: np.ndarray | None
    refit: Refit | None
    df: float
    loglik: float
    ebic: float
    converged: bool
    iterations: int = 0
    failed: bool = False
    solution: SolveResult | None = field(default=None, repr=False)

    def row(self) -> dict:
        return {"lam1": self.lam1, "lam2": self.lam2, "df": self.df, "loglik": self.loglik,
                "ebic": self.ebic, "converged": self.converged, "failed": self.failed,
                "iterations": self.iterations, "support_hash": support_hash(self.support, self.fusion)}


@dataclass
class Selection:
    best: ModelCandidate
    candidates: list
    penalty: PenaltySpec
    gamma: float

    def table(self) -> list[dict]:
        return [c.row() for c in self.candidates]


def _rank_key(c: ModelCandidate):
    # eBIC, then sparser, then larger lam1
    return (c.ebic, c.df, -c.lam1)


def evaluate_candidate(panel, problem, result, kind, ls, gamma) -> ModelCandidate:
    refit = refit_constrained(panel, result.support, result.fusion if Kind.parse(kind) is Kind.FGN else None,
                              problem)
    df = degrees_of_freedom(result, kind, ls)
    score = ebic_score(refit.loglik, df, panel.n, panel.p, panel.K, panel.T, gamma)
    return ModelCandidate(result.spec.lam1, result.spec.lam2, result.support, result.fusion, refit, df,
                          refit.loglik, score, result.converged, result.iterations, solution=result)


def sweep(panel: VarPanel, penalty: PenaltySpec, grid, *, gamma: float = DEFAULT_GAMMA,
          options: SolverOptions | None = None, problem: StackedProblem | None = None,
          ls: LeastSquaresFit | None = None, keep_solutions: bool = False, callback=None) -> list[ModelCandidate]:
    """Solve, refit and score every grid pair with warm starts along each ``lam2`` row."""
    options = options or SolverOptions()
    problem = problem or assemble(panel)
    ls = ls or least_squares(panel)
    grid = list(grid)
    out = []
    warm = None
    prev_lam2 = None
    for lam1, lam2 in grid:
        if lam2 != prev_lam2:
            warm = None
            prev_lam2 = lam2
        spec = penalty.with_lambdas(lam1, lam2)
        try:
            res = solve(problem, spec, dataclasses.replace(options, warm_start=warm))
        except NumericalError as exc:
            logger.warning("grid point (%.4g, %.4g) failed: %s", lam1, lam2, exc)
            out.append(ModelCandidate(lam1, lam2, np.zeros((panel.K, panel.n, panel.n), bool), None, None,
                                      math.nan, math.nan, math.inf, False, failed=True))
            warm = None
            continue
        warm = res
        cand = evaluate_candidate(panel, problem, res, penalty.kind, ls, gamma)
        if callback is not None:
            callback(cand)
        if not keep_solutions:
            cand.solution = None
        out.append(cand)
    return out


def _row_sweep(args):
    panel, penalty, row, gamma, options = args
    best = {}

    def keep(c):
        if math.isfinite(c.ebic) and ("c" not in best or _rank_key(c) < _rank_key(best["c"])):
            best["c"], best["solution"] = c, c.solution

    cands = sweep(panel, penalty, row, gamma=gamma, options=options, callback=keep)
    return cands, best.get("solution")


def _grid_rows(grid) -> list[list]:
    rows: dict = {}
    for pair in grid:
        rows.setdefault(pair[1], []).append(pair)
    return list(rows.values())


def select_model(panel: VarPanel, kind, q: float = 1.0, grid=None, gamma: float = DEFAULT_GAMMA, *,
                 grid_size: int = 30, lam2_size: int | None = None, span: float = GRID_SPAN,
                 options: SolverOptions | None = None, penalty: PenaltySpec | None = None, keep_solutions: bool = False,
                 workers: int = 1) -> Selection:
    """Grid solve, refit and eBIC selection for one formulation.

    ``grid`` defaults to :func:`~grangernet.penalties.lambda_grid` of the given
    sizes.  With ``workers > 1`` the ``lam2`` rows (each a warm-started
    ``lam1`` path) are solved in separate processes; results are identical to
    the serial sweep.  The returned best candidate keeps its
    :class:`SolveResult`.
    """
    problem = assemble(panel)
    ls = least_squares(panel)
    penalty = penalty or make_penalty(ls, kind, q)
    if grid is None:
        grid = lambda_grid(problem, penalty, grid_size, lam2_size=lam2_size, span=span, options=options)
    grid = list(grid)
    if not grid:
        raise ValidationError("penalty grid is empty")

    if workers > 1:
        jobs = [(panel, penalty, row, gamma, options) for row in _grid_rows(grid)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_row_sweep, jobs))
        cands = [c for part, _ in parts for c in part]
        best = min((c for c in cands if math.isfinite(c.ebic)), key=_rank_key, default=None)
        if best is None:
            raise NumericalError("every grid point failed")
        # the winning row's best candidate is that row's stored solution
        for part, sol in parts:
            if any(c is best for c in part):
                best.solution = sol
        return Selection(best, cands, penalty, gamma)

    best_holder = {}

    def keep_best(c):
        if not math.isfinite(c.ebic):
            return
        cur = best_holder.get("best")
        if cur is None or _rank_key(c) < _rank_key(cur):
            best_holder["best"] = c
            best_holder["solution"] = c.solution

    cands = sweep(panel, penalty, grid, gamma=gamma, options=options, problem=problem, ls=ls,
                  keep_solutions=keep_solutions, callback=keep_best)
    if "best" not in best_holder:
        raise NumericalError("every grid point failed")
    best = best_holder["best"]
    best.solution = best_holder["solution"]
    return Selection(best, cands, penalty, gamma)

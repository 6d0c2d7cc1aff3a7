"""ADMM for ``min (1/2N)||Gx - b||^2 + lam1 h(L1 x) + lam2 h(L2 x)``.

Splitting ``z_t = L_t x`` gives the iteration

    x+ = (rho A^T A + G^T G / N)^{-1} (G^T b / N + A^T (y + rho z))
    z+ = prox_{lam_t h_t / rho}(L_t x+ - y_t / rho)
    y+ = y + rho (z+ - A x+)

with ``rho`` adapted every ``period`` iterations: a safeguarded spectral
(Barzilai-Borwein) rule for convex penalties and doubling until the primal
residual settles for ``q = 1/2``.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .assembly import GramFactorization, StackedProblem
from .exceptions import NumericalError, ValidationError
from .penalties import PenaltySpec, block_norms, evaluate_penalty, term_operator
from .prox import block_scale
from .var_core import groups_to_coefs, least_squares, offdiag_mask, coefs_to_groups

logger = logging.getLogger(__name__)

MODES = ("spectral", "heuristic", "fixed")


@dataclass(frozen=True)
class SolverOptions:
    eps_abs: float = 1e-7
    eps_rel: float = 1e-5
    period: int = 10
    max_iter: int = 50_000
    rho0: float | None = None      # 1 for spectral, 0.01 for heuristic
    mode: str | None = None        # default: spectral if q == 1 else heuristic
    eps_corr: float = 0.2
    divergence: float = 1e12
    warm_start: object = None      # a previous SolveResult
    trace: bool = False

    def __post_init__(self):
        if self.eps_abs <= 0 or self.eps_rel <= 0:
            raise ValidationError("tolerances must be positive")
        if self.period < 1:
            raise ValidationError("rho update period must be >= 1")
        if self.mode is not None and self.mode not in MODES:
            raise ValidationError(f"unknown solver mode {self.mode!r}")

    def resolved_mode(self, q: float) -> str:
        return self.mode or ("spectral" if q == 1.0 else "heuristic")

    def resolved_rho0(self, mode: str) -> float:
        if self.rho0 is not None:
            return self.rho0
        return 0.01 if mode == "heuristic" else 1.0


@dataclass
class SolveResult:
    X: np.ndarray                  # raw iterate, group layout (n, n, K, p)
    z: list
    y: list
    rho: float
    support: np.ndarray            # (K, n, n) bool, off-diagonal
    fusion: np.ndarray | None      # (n^2-n, C(K,2)) True where two models are fused
    iterations: int
    converged: bool
    primal_only: bool
    objective: float
    spec: PenaltySpec = field(repr=False)
    history: dict = field(default_factory=dict, repr=False)

    @property
    def coefs(self) -> np.ndarray:
        """(K, p, n, n) estimate with every unsupported GC group set exactly to zero."""
        Xs = self.X.copy()
        n = Xs.shape[0]
        mask = offdiag_mask(n)
        Xs[mask] *= self.support.transpose(1, 2, 0)[mask][:, :, None]
        return groups_to_coefs(Xs)

    @property
    def group_norms(self) -> np.ndarray:
        """(K, n, n) matrix of ``||B_ij^(k)||`` of the sparse estimate."""
        return np.linalg.norm(coefs_to_groups(self.coefs), axis=3).transpose(2, 0, 1)

    def pooled_z(self) -> np.ndarray | None:
        """Pooled-group block norms of the first pooled P-term (CGN df), if any."""
        for term, zt in zip(self.spec.terms(), self.z):
            if term.op == "P" and term.block == "pooled":
                return block_norms(zt, "pooled")
        return None

    def write_trace(self, path) -> None:
        keys = ["iteration", "r_norm", "s_norm", "rho", "objective"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(keys)
            h = self.history
            for it in range(len(h.get("r_norm", []))):
                writer.writerow([it + 1, h["r_norm"][it], h["s_norm"][it], h["rho"][it],
                                 h["objective"][it] if h.get("objective") else ""])


@dataclass
class AdmmState:
    X: np.ndarray
    z: list
    y: list
    rho: float
    k: int = 0


class _Maps:
    """The stacked constraint map ``A = [L1; L2]`` for one penalty spec."""

    def __init__(self, problem: StackedProblem, spec: PenaltySpec):
        self.terms = spec.terms()
        self.q = spec.q
        self.ops = [term_operator(t.op, problem.n, problem.p, problem.K) for t in self.terms]

    def apply(self, X):
        return [op.apply(X) for op in self.ops]

    def adjoint(self, V):
        out = self.ops[0].adjoint(V[0])
        for op, v in zip(self.ops[1:], V[1:]):
            out = out + op.adjoint(v)
        return out


def _norm(parts) -> float:
    return math.sqrt(sum(float(np.vdot(v, v)) for v in parts))


def _dot(a, b) -> float:
    return sum(float(np.vdot(u, v)) for u, v in zip(a, b))


def x_update(state: AdmmState, factorization: GramFactorization, problem: StackedProblem, maps: _Maps,
             Gtb: np.ndarray | None = None) -> np.ndarray:
    """Exact minimisation of the augmented Lagrangian over ``x``."""
    if factorization.rho != state.rho:
        raise ValidationError(f"stale factorization (rho {factorization.rho} != state rho {state.rho})")
    if Gtb is None:
        Gtb = problem.Gtb() / problem.N
    rhs = Gtb + maps.adjoint([y + state.rho * z for y, z in zip(state.y, state.z)])
    return factorization.solve(rhs)


def z_update(AX: list, state: AdmmState, maps: _Maps) -> list:
    """Blockwise prox of every penalty term at ``L_t x - y_t / rho``."""
    out = []
    for term, ax, y in zip(maps.terms, AX, state.y):
        V = ax - y / state.rho
        if term.lam == 0.0:
            out.append(V)
            continue
        norms = block_norms(V, term.block)
        scale = block_scale(norms, (term.lam / state.rho) * term.weights, maps.q)
        out.append(V * (scale[:, None, None] if term.block == "pooled" else scale[:, :, None]))
    return out


def _spectral_step(dF, dH) -> tuple[float, float, float]:
    """Hybrid spectral step and correlation from ``(Delta F, Delta y)``."""
    FH = _dot(dF, dH)
    FF = _dot(dF, dF)
    HH = _dot(dH, dH)
    if FF <= 0.0 or HH <= 0.0 or FH == 0.0:
        return 0.0, 0.0, 0.0
    mg = FH / FF
    sd = HH / FH
    step = mg if 2.0 * mg > sd else sd - 0.5 * mg
    return step, FH / math.sqrt(FF * HH), FF


def spectral_rho_update(rho: float, AX_new, z_old, y_old, z_new, y_new, cached: dict, eps_corr: float = 0.2):
    """Safeguarded spectral penalty update; returns ``(rho+, new_cache)``.

    ``cached`` holds ``AX``, ``yhat``, ``y`` and ``z`` from the previous update.
    """
    yhat = [y + rho * (z - ax) for y, z, ax in zip(y_old, z_old, AX_new)]
    dF = [a - b for a, b in zip(AX_new, cached["AX"])]
    dyhat = [a - b for a, b in zip(yhat, cached["yhat"])]
    dy = [a - b for a, b in zip(y_new, cached["y"])]
    dG = [b - a for a, b in zip(z_new, cached["z"])]
    a, c1, _ = _spectral_step(dF, dyhat)
    b, c2, _ = _spectral_step(dG, dy)
    ok1 = c1 > eps_corr and a > 0 and math.isfinite(a)
    ok2 = c2 > eps_corr and b > 0 and math.isfinite(b)
    if ok1 and ok2:
        new = math.sqrt(a * b)
    elif ok1:
        new = a
    elif ok2:
        new = b
    else:
        new = rho
    cache = {"AX": AX_new, "yhat": yhat, "y": y_new, "z": z_new}
    return new, cache


def heuristic_rho_update(rho: float, r_norm: float, eps_pri: float) -> float:
    """Double ``rho`` while the primal residual is above tolerance."""
    return 2.0 * rho if r_norm >= eps_pri else rho


def objective(problem: StackedProblem, spec: PenaltySpec, X: np.ndarray) -> float:
    return problem.loss(X) + evaluate_penalty(spec, X)


def _support(problem: StackedProblem, maps: _Maps, z: list):
    n, K = problem.n, problem.K
    m = n * n - n
    nz = np.ones((m, K), dtype=bool)
    fusion = None
    for term, zt in zip(maps.terms, z):
        if term.op == "P":
            if term.block == "pooled":
                nz &= (block_norms(zt, "pooled") > 0)[:, None]
            else:
                nz &= block_norms(zt, "lag") > 0
        else:
            fusion = block_norms(zt, "lag") == 0
    support = np.zeros((K, n, n), dtype=bool)
    support[:, offdiag_mask(n)] = nz.T
    return support, fusion


def initial_point(problem: StackedProblem) -> np.ndarray:
    if problem.panel is not None:
        return coefs_to_groups(least_squares(problem.panel).coefs)
    R = np.linalg.solve(problem.gram[:, None], problem.cross[..., None])[..., 0]
    return R.reshape(problem.K, problem.n, problem.n, problem.p).transpose(1, 2, 0, 3)


def solve(problem: StackedProblem, spec: PenaltySpec, options: SolverOptions | None = None) -> SolveResult:
    """Run the adaptive ADMM to the residual tolerances.

    Starts from the least-squares fit (``z = A x``, ``y = 0``) unless
    ``options.warm_start`` supplies a previous result.  Stops when both the
    primal and the dual residual fall below their tolerances.  Hitting
    ``max_iter`` returns the last iterate with ``converged=False``; for
    ``q = 1/2`` the ``primal_only`` flag records a primal-converged run.
    """
    options = options or SolverOptions()
    mode = options.resolved_mode(spec.q)
    maps = _Maps(problem, spec)
    structure = spec.structure()
    warm = options.warm_start
    if warm is not None:
        X = warm.X.copy()
        z = [v.copy() for v in warm.z]
        y = [v.copy() for v in warm.y]
        rho = warm.rho if mode == "spectral" else options.resolved_rho0(mode)
        if len(z) != len(maps.terms):
            raise ValidationError("warm start does not match the penalty structure")
    else:
        X = initial_point(problem)
        z = maps.apply(X)
        y = [np.zeros_like(v) for v in z]
        rho = options.resolved_rho0(mode)
    state = AdmmState(X, z, y, rho)

    Gtb = problem.Gtb() / problem.N
    fact = GramFactorization(problem, structure, rho)
    dim_z = sum(v.size for v in z)
    sqrt_z = math.sqrt(dim_z) * options.eps_abs
    sqrt_x = math.sqrt(problem.n_vars) * options.eps_abs
    cache = {"AX": maps.apply(X), "yhat": y, "y": y, "z": z}
    frozen = False
    hist = {"r_norm": [], "s_norm": [], "rho": [], "objective": []}
    converged = primal_ok = False
    r_norm = s_norm = math.inf

    it = 0
    for it in range(1, options.max_iter + 1):
        state.k = it
        X = x_update(state, fact, problem, maps, Gtb)
        AX = maps.apply(X)
        z_new = z_update(AX, state, maps)
        r = [zn - ax for zn, ax in zip(z_new, AX)]
        y_new = [yy + rho * rr for yy, rr in zip(state.y, r)]
        r_norm = _norm(r)
        s_norm = rho * _norm([maps.adjoint([zn - zo for zn, zo in zip(z_new, state.z)])])
        eps_pri = sqrt_z + options.eps_rel * max(_norm(AX), _norm(z_new))
        eps_dual = sqrt_x + options.eps_rel * _norm([maps.adjoint(y_new)])
        hist["r_norm"].append(r_norm)
        hist["s_norm"].append(s_norm)
        hist["rho"].append(rho)
        if options.trace:
            hist["objective"].append(objective(problem, spec, X))
        if not (math.isfinite(r_norm) and r_norm < options.divergence):
            raise NumericalError(f"ADMM diverged at iteration {it}: primal residual {r_norm:.3g}")

        z_old, y_old = state.z, state.y
        state.X, state.z, state.y = X, z_new, y_new
        primal_ok = r_norm < eps_pri
        if primal_ok and s_norm < eps_dual:
            converged = True
            break

        if it % options.period == 0 and mode != "fixed":
            if mode == "spectral":
                new_rho, cache = spectral_rho_update(rho, AX, z_old, y_old, z_new, y_new, cache,
                                                     options.eps_corr)
            elif not frozen:
                new_rho = heuristic_rho_update(rho, r_norm, eps_pri)
                frozen = new_rho == rho
            else:
                new_rho = rho
            if new_rho != rho:
                rho = new_rho
                state.rho = rho
                fact = GramFactorization(problem, structure, rho)

    support, fusion = _support(problem, maps, state.z)
    if not converged:
        logger.debug("ADMM stopped at max_iter=%d (r=%.3g, s=%.3g)", options.max_iter, r_norm, s_norm)
    return SolveResult(
        X=state.X, z=state.z, y=state.y, rho=rho, support=support, fusion=fusion,
        iterations=it, converged=converged, primal_only=(not converged and primal_ok and spec.q != 1.0),
        objective=objective(problem, spec, state.X), spec=spec, history=hist,
    )

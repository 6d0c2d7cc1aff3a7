"""Penalty formulations CGN, DGN and FGN over the stacked coefficient vector.

Every formulation is a sum of weighted group norms ``lam * h(L x; partition)``
where ``L`` is the off-diagonal projection ``P`` or the pairwise difference
map ``D`` and the partition splits ``L x`` into lag groups (size ``p``) or
pooled groups (size ``pK``):

====  ===========================  ===========================
kind  first term (``lam1``)        second term (``lam2``)
====  ===========================  ===========================
CGN   ``P x``, pooled, ``v``       --
DGN   ``P x``, lag, ``w``          ``P x``, pooled, ``v``
FGN   ``P x``, lag, ``w``          ``D x``, lag, ``u``
====  ===========================  ===========================
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .assembly import ConstraintStructure, DifferenceD, ProjectionP, StackedProblem
from .exceptions import ValidationError
from .var_core import LeastSquaresFit, coefs_to_groups, offdiag_mask

logger = logging.getLogger(__name__)

WEIGHT_CAP_RATIO = 1e-8
GRID_SPAN = 1e-3


class Kind(str, Enum):
    CGN = "cgn"
    DGN = "dgn"
    FGN = "fgn"

    @classmethod
    def parse(cls, value) -> "Kind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValidationError(f"unknown formulation {value!r}; expected cgn, dgn or fgn") from None


@dataclass(frozen=True)
class Weights:
    """Adaptive weights over off-diagonal pairs in row-major order.

    ``pooled`` has shape (n^2-n,), ``lag`` (n^2-n, K) and ``fused``
    (n^2-n, C(K,2)).
    """

    pooled: np.ndarray
    lag: np.ndarray
    fused: np.ndarray | None = None

    @classmethod
    def unit(cls, n: int, K: int) -> "Weights":
        m = n * n - n
        return cls(np.ones(m), np.ones((m, K)), np.ones((m, K * (K - 1) // 2)) if K > 1 else None)


def _capped_inverse(norms: np.ndarray, q: float) -> np.ndarray:
    norms = np.asarray(norms, dtype=float)
    floor = WEIGHT_CAP_RATIO * float(np.median(norms)) if norms.size else 0.0
    if floor <= 0.0:
        floor = np.finfo(float).tiny
    return 1.0 / np.maximum(norms, floor) ** q


def compute_weights(ls: LeastSquaresFit, q: float = 1.0, *, uniform_exponent: bool = False) -> Weights:
    """Inverse-LS weights ``v = 1/||C~||^q``, ``w = 1/||B~||`` and ``u = 1/||B~k - B~l||^q``.

    ``w`` carries no exponent unless ``uniform_exponent`` is set.  Denominators
    below ``1e-8`` times the median norm of their table are clamped there.
    """
    K, p, n, _ = ls.coefs.shape
    mask = offdiag_mask(n)
    X = coefs_to_groups(ls.coefs)[mask]  # (m, K, p)
    pooled = _capped_inverse(np.linalg.norm(X.reshape(len(X), -1), axis=1), q)
    lag = _capped_inverse(np.linalg.norm(X, axis=2), q if uniform_exponent else 1.0)
    fused = None
    if K > 1:
        D = DifferenceD(n, p, K)
        diffs = np.einsum("qk,mkr->mqr", D.DK, X)
        fused = _capped_inverse(np.linalg.norm(diffs, axis=2), q)
    return Weights(pooled, lag, fused)


@dataclass(frozen=True)
class Term:
    lam: float
    op: str      # "P" or "D"
    block: str   # "lag" or "pooled"
    weights: np.ndarray


@dataclass(frozen=True)
class PenaltySpec:
    kind: Kind
    q: float = 1.0
    lam1: float = 0.0
    lam2: float = 0.0
    weights: Weights | None = field(default=None, repr=False)
    uniform_exponent: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind.parse(self.kind))
        if self.q not in (1.0, 0.5):
            raise ValidationError(f"q must be 1 or 0.5, got {self.q}")
        if self.lam1 < 0 or self.lam2 < 0:
            raise ValidationError("penalty parameters must be nonnegative")
        if self.weights is not None:
            for arr in (self.weights.pooled, self.weights.lag):
                if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
                    raise ValidationError("weights must be positive and finite")

    @property
    def convex(self) -> bool:
        return self.q == 1.0

    def with_lambdas(self, lam1: float, lam2: float = 0.0) -> "PenaltySpec":
        return dataclasses.replace(self, lam1=float(lam1), lam2=float(lam2))

    def structure(self) -> ConstraintStructure:
        return {
            Kind.CGN: ConstraintStructure(proj=1, diff=0),
            Kind.DGN: ConstraintStructure(proj=2, diff=0),
            Kind.FGN: ConstraintStructure(proj=1, diff=1),
        }[self.kind]

    def terms(self) -> list[Term]:
        if self.weights is None:
            raise ValidationError("penalty weights have not been computed")
        W = self.weights
        if self.kind is Kind.CGN:
            return [Term(self.lam1, "P", "pooled", W.pooled)]
        if self.kind is Kind.DGN:
            return [Term(self.lam1, "P", "lag", W.lag), Term(self.lam2, "P", "pooled", W.pooled)]
        if W.fused is None:
            raise ValidationError("FGN needs K >= 2")
        return [Term(self.lam1, "P", "lag", W.lag), Term(self.lam2, "D", "lag", W.fused)]

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "q": self.q, "lam1": self.lam1, "lam2": self.lam2,
                "uniform_exponent": self.uniform_exponent}

    @classmethod
    def from_dict(cls, data: dict, weights: Weights | None = None) -> "PenaltySpec":
        return cls(kind=data["kind"], q=float(data.get("q", 1.0)), lam1=float(data.get("lam1", 0.0)),
                   lam2=float(data.get("lam2", 0.0)), weights=weights,
                   uniform_exponent=bool(data.get("uniform_exponent", False)))


def make_penalty(ls: LeastSquaresFit, kind, q: float = 1.0, *, weight_mode: str = "adaptive",
                 uniform_exponent: bool = False) -> PenaltySpec:
    """Penalty template (lambdas zero) with weights from an LS fit or unit weights."""
    if weight_mode == "adaptive":
        weights = compute_weights(ls, q, uniform_exponent=uniform_exponent)
    elif weight_mode == "unit":
        weights = Weights.unit(ls.coefs.shape[2], ls.coefs.shape[0])
    else:
        raise ValidationError(f"unknown weight mode {weight_mode!r}")
    return PenaltySpec(kind, q, weights=weights, uniform_exponent=uniform_exponent)


def block_norms(V: np.ndarray, block: str) -> np.ndarray:
    """Norms of the blocks of an ``L x`` array of shape (m, groups, p)."""
    if block == "pooled":
        return np.sqrt(np.einsum("mkr,mkr->m", V, V))
    return np.sqrt(np.einsum("mkr,mkr->mk", V, V))


def term_operator(op: str, n: int, p: int, K: int):
    return ProjectionP(n, p, K) if op == "P" else DifferenceD(n, p, K)


def evaluate_penalty(spec: PenaltySpec, X: np.ndarray) -> float:
    """``g(x)`` for a coefficient array in group layout ``(n, n, K, p)``."""
    n, _, K, p = X.shape
    total = 0.0
    for term in spec.terms():
        if term.lam == 0.0:
            continue
        V = term_operator(term.op, n, p, K).apply(X)
        norms = block_norms(V, term.block)
        total += term.lam * float(np.sum(term.weights * norms ** spec.q))
    return total


def diagonal_fit(problem: StackedProblem) -> np.ndarray:
    """Minimiser of the loss over self-lag coefficients only (all GC groups zero)."""
    n, p, K = problem.n, problem.p, problem.K
    X = problem.zeros()
    for i in range(n):
        idx = np.arange(i * p, (i + 1) * p)
        for k in range(K):
            Q = problem.gram[k][np.ix_(idx, idx)]
            X[i, i, k] = np.linalg.solve(Q, problem.cross[k, i, idx])
    return X


# absorbs round-off for the group whose KKT condition binds at lam_max
CRITICAL_MARGIN = 1e-8


def critical_lambda(problem: StackedProblem, weights: np.ndarray, block: str) -> float:
    """Smallest ``lam`` zeroing every off-diagonal group of ``lam h(Px; block)`` (q = 1).

    From the optimality condition at the self-lag-only fit ``x0``:
    ``lam_max = max_g ||grad_g f(x0)|| / w_g``, raised by a relative
    ``CRITICAL_MARGIN`` so the binding group is not left on the threshold.
    """
    grad = ProjectionP(problem.n, problem.p, problem.K).apply(problem.gradient(diagonal_fit(problem)))
    return float(np.max(block_norms(grad, block) / weights)) * (1.0 + CRITICAL_MARGIN)


def lambda_anchors(problem: StackedProblem, spec: PenaltySpec, *, options=None) -> tuple[float, float]:
    """Upper ends ``(lam1_max, lam2_max)`` of the penalty grid.

    ``lam1_max`` is the critical value of the first term alone.  ``lam2_max``
    comes from the second term alone (``lam1 = 0``): closed form for DGN,
    doubling with the solver for FGN until the difference blocks vanish.
    """
    W = spec.weights
    if spec.kind is Kind.CGN:
        return critical_lambda(problem, W.pooled, "pooled"), 0.0
    lam1 = critical_lambda(problem, W.lag, "lag")
    if spec.kind is Kind.DGN:
        return lam1, critical_lambda(problem, W.pooled, "pooled")
    return lam1, fused_zero_lambda(problem, spec, start=lam1, options=options)


def fused_zero_lambda(problem: StackedProblem, spec: PenaltySpec, *, start: float, options=None,
                      max_steps: int = 40) -> float:
    """Smallest power-of-two multiple of ``start`` at which every difference block vanishes.

    Doubles from ``start`` while the models differ; if they are already fused
    at ``start`` it halves instead, so the anchor is tight within a factor 2.
    """
    from .solver import SolverOptions, solve

    options = options or SolverOptions()

    def fused(lam, warm):
        res = solve(problem, spec.with_lambdas(0.0, lam), dataclasses.replace(options, warm_start=warm))
        return res.fusion is not None and bool(np.all(res.fusion)), res

    lam = max(start, np.finfo(float).eps)
    ok, warm = fused(lam, None)
    step = 0.5 if ok else 2.0
    for _ in range(max_steps):
        nxt = lam * step
        ok_next, warm = fused(nxt, warm)
        if step < 1.0 and not ok_next:
            return lam
        if step > 1.0 and ok_next:
            return nxt
        lam = nxt
    logger.warning("fused anchor search did not bracket after %d steps", max_steps)
    return lam


def log_grid(top: float, size: int, span: float = GRID_SPAN) -> np.ndarray:
    """``size`` values log-spaced from ``top`` down to ``span * top``."""
    if size < 1:
        raise ValidationError("grid size must be >= 1")
    if size == 1:
        return np.array([top])
    return top * np.logspace(0.0, np.log10(span), size)


def lambda_grid(problem: StackedProblem, spec: PenaltySpec, grid_size: int, *, lam2_size: int | None = None,
                span: float = GRID_SPAN, lam2_span: float | None = None,
                options=None) -> list[tuple[float, float]]:
    """Penalty pairs, ``lam2``-major with ``lam1`` descending inside each row.

    The descending ``lam1`` order within a row is what warm starts follow.
    ``lam2_span`` (default ``span``) sets the depth of the ``lam2`` axis.
    CGN pairs carry ``lam2 = 0``.
    """
    lam1_max, lam2_max = lambda_anchors(problem, spec, options=options)
    lam1s = log_grid(lam1_max, grid_size, span)
    if spec.kind is Kind.CGN:
        return [(float(a), 0.0) for a in lam1s]
    lam2s = log_grid(lam2_max, lam2_size or grid_size, span if lam2_span is None else lam2_span)
    return [(float(a), float(b)) for b in lam2s for a in lam1s]

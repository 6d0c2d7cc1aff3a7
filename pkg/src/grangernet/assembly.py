"""Vectorised joint least-squares problem and its structured linear maps.

The optimisation vector is the group layout ``X`` of shape ``(n, n, K, p)``
(see :mod:`grangernet.var_core`); ``x = X.ravel()``.  The data term
``||Gx - b||^2 = sum_k ||Y^(k) - A^(k) H^(k)||_F^2`` separates over the
equation index ``i`` and the model ``k``: the coefficients ``X[i, :, k, :]``
(ordered channel-major, lag-minor) only meet the Gram matrix
``Q_k[(j, r), (j', r')] = (H^(k) H^(k)T)[r n + j, r' n + j']``.  ``G`` is
therefore never formed except on request for small problems.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .exceptions import NumericalError, ValidationError
from .var_core import VarPanel, offdiag_mask

DENSE_BUDGET = 5_000_000  # max entries of a materialised G


@dataclass(frozen=True)
class Partition:
    """Uniform partition of ``range(length)`` into consecutive blocks."""

    length: int
    size: int

    def __post_init__(self):
        if self.size < 1 or self.length % self.size:
            raise ValidationError(f"block size {self.size} does not divide length {self.length}")

    @property
    def count(self) -> int:
        return self.length // self.size

    def blocks(self):
        return [range(s, s + self.size) for s in range(0, self.length, self.size)]


def pair_list(K: int) -> list[tuple[int, int]]:
    """Model pairs ``k < l`` in lexicographic order."""
    return list(itertools.combinations(range(K), 2))


def difference_matrix(K: int) -> np.ndarray:
    """The ``C(K,2) x K`` matrix taking every pairwise difference ``e_k - e_l``."""
    if K < 2:
        raise ValidationError("pairwise differences need K >= 2")
    pairs = pair_list(K)
    DK = np.zeros((len(pairs), K))
    for q, (k, l) in enumerate(pairs):
        DK[q, k] = 1.0
        DK[q, l] = -1.0
    return DK


class ProjectionP:
    """Selects the off-diagonal pooled groups ``C_ij`` (row-major, ``i != j``)."""

    def __init__(self, n: int, p: int, K: int):
        self.n, self.p, self.K = n, p, K
        self.mask = offdiag_mask(n)
        self.m_off = n * n - n

    @property
    def shape(self) -> tuple[int, int]:
        return (self.m_off * self.p * self.K, self.n * self.n * self.p * self.K)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """``X`` (n, n, K, p) -> (n^2-n, K, p)."""
        return X[self.mask]

    def adjoint(self, V: np.ndarray) -> np.ndarray:
        out = np.zeros((self.n, self.n, self.K, self.p))
        out[self.mask] = V.reshape(self.m_off, self.K, self.p)
        return out

    def matrix(self) -> sp.csr_matrix:
        cols = np.arange(self.n * self.n * self.K * self.p).reshape(self.n, self.n, -1)[self.mask].ravel()
        rows = np.arange(cols.size)
        return sp.csr_matrix((np.ones(cols.size), (rows, cols)), shape=self.shape)


class DifferenceD:
    """Pairwise model differences of off-diagonal lag groups, ``D = Dtilde P``.

    Applied as an operator; the composite matrix is only built for inspection.
    """

    def __init__(self, n: int, p: int, K: int):
        self.n, self.p, self.K = n, p, K
        self.P = ProjectionP(n, p, K)
        self.DK = difference_matrix(K)
        self.pairs = pair_list(K)

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_pairs * self.P.m_off * self.p, self.P.shape[1])

    def apply(self, X: np.ndarray) -> np.ndarray:
        """``X`` (n, n, K, p) -> (n^2-n, C(K,2), p)."""
        return self.DK @ self.P.apply(X)

    def adjoint(self, W: np.ndarray) -> np.ndarray:
        W = W.reshape(self.P.m_off, self.n_pairs, self.p)
        return self.P.adjoint(self.DK.T @ W)

    def matrix(self) -> sp.csr_matrix:
        block = sp.kron(sp.csr_matrix(self.DK), sp.identity(self.p))
        Dtilde = sp.block_diag([block] * self.P.m_off, format="csr")
        return (Dtilde @ self.P.matrix()).tocsr()


def build_projection(n: int, p: int, K: int) -> ProjectionP:
    return ProjectionP(n, p, K)


def build_difference(n: int, p: int, K: int) -> DifferenceD:
    return DifferenceD(n, p, K)


@dataclass(frozen=True)
class StackedProblem:
    """Joint problem ``min (1/2N)||Gx - b||^2 + g(x)`` in Gram form.

    Attributes
    ----------
    gram : (K, np, np)
        ``Q_k`` reindexed to (channel, lag) order.
    cross : (K, n, np)
        ``cross[k, i] = H^(k) Y_i^(k)T`` in the same order.
    yy : (K, n)
        Squared norms of the target rows.
    """

    n: int
    p: int
    K: int
    N: int
    gram: np.ndarray
    cross: np.ndarray
    yy: np.ndarray
    panel: VarPanel | None = None
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def T(self) -> int:
        return self.N + self.p

    @property
    def n_vars(self) -> int:
        return self.n * self.n * self.K * self.p

    @property
    def n_rows(self) -> int:
        return self.n * self.N * self.K

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_vars)

    def zeros(self) -> np.ndarray:
        return np.zeros((self.n, self.n, self.K, self.p))

    def _rows(self, X: np.ndarray) -> np.ndarray:
        # (n, n, K, p) -> (K, n, np): coefficient vector of equation i in model k
        return X.transpose(2, 0, 1, 3).reshape(self.K, self.n, self.n * self.p)

    def _unrows(self, R: np.ndarray) -> np.ndarray:
        return R.reshape(self.K, self.n, self.n, self.p).transpose(1, 2, 0, 3)

    def residual_sq(self, X: np.ndarray) -> float:
        """``||Gx - b||^2`` (unscaled)."""
        R = self._rows(X)
        quad = np.einsum("kia,kab,kib->", R, self.gram, R)
        lin = np.einsum("kia,kia->", R, self.cross)
        return float(quad - 2.0 * lin + self.yy.sum())

    def loss(self, X: np.ndarray) -> float:
        """``(1/2N)||Gx - b||^2``."""
        return 0.5 * self.residual_sq(X) / self.N

    def gram_apply(self, X: np.ndarray) -> np.ndarray:
        """``G^T G x`` in group layout (unscaled)."""
        R = self._rows(X)
        return self._unrows(np.einsum("kab,kib->kia", self.gram, R))

    def Gtb(self) -> np.ndarray:
        return self._unrows(self.cross)

    def gradient(self, X: np.ndarray) -> np.ndarray:
        """Gradient of :meth:`loss`."""
        R = self._rows(X)
        return self._unrows(np.einsum("kab,kib->kia", self.gram, R) - self.cross) / self.N

    def dense(self, budget: int = DENSE_BUDGET) -> tuple[np.ndarray, np.ndarray]:
        """Materialise ``(G, b)``; rows ordered (model, equation, time)."""
        if self.panel is None:
            raise ValidationError("dense G needs the originating panel")
        m, nv = self.shape
        if m * nv > budget:
            raise ValidationError(f"dense G of {m}x{nv} exceeds the budget of {budget} entries")
        n, p, K, N = self.n, self.p, self.K, self.N
        G = np.zeros((K, n, N, n, n, K, p))
        for k, H in enumerate(self.panel.H):
            Hjr = H.reshape(p, n, N).transpose(2, 1, 0)  # (N, j, r)
            for i in range(n):
                G[k, i, :, i, :, k, :] = Hjr
        b = np.stack(self.panel.Y).reshape(-1)
        return G.reshape(m, nv), b

    def gram_dense(self) -> np.ndarray:
        """``G^T G`` in x order, assembled blockwise from the ``Q_k``."""
        n, p, K = self.n, self.p, self.K
        M = np.zeros((n, n, K, p, n, n, K, p))
        Q = self.gram.reshape(K, n, p, n, p)
        for i in range(n):
            for k in range(K):
                M[i, :, k, :, i, :, k, :] = Q[k]
        return M.reshape(self.n_vars, self.n_vars)


def assemble(panel: VarPanel) -> StackedProblem:
    n, p, K, N = panel.n, panel.p, panel.K, panel.N
    gram = np.empty((K, n * p, n * p))
    cross = np.empty((K, n, n * p))
    yy = np.empty((K, n))
    # H rows are (lag, channel); reorder to (channel, lag)
    perm = np.arange(n * p).reshape(p, n).T.ravel()
    for k, (Y, H) in enumerate(zip(panel.Y, panel.H)):
        if Y.shape != (n, N) or H.shape != (n * p, N):
            raise ValidationError(f"model {k}: inconsistent regression shapes {Y.shape}, {H.shape}")
        Hp = H[perm]
        gram[k] = Hp @ Hp.T
        cross[k] = Y @ Hp.T
        yy[k] = np.einsum("it,it->i", Y, Y)
    return StackedProblem(n, p, K, N, gram, cross, yy, panel)


# Structure of A^T A = sum over penalty maps of L^T L, restricted to the
# off-diagonal coordinates: `proj` copies of P^T P and `diff` copies of D^T D.
@dataclass(frozen=True)
class ConstraintStructure:
    proj: int
    diff: int

    @property
    def couples_models(self) -> bool:
        return self.diff > 0


class GramFactorization:
    """Blockwise inverse of ``rho A^T A + G^T G / N`` for one value of ``rho``.

    Without difference maps the system splits into ``n K`` blocks of size
    ``np`` (one per equation and model); with ``D`` present the models of an
    equation are coupled, leaving ``n`` blocks of size ``npK``.

    Each block ``Q + rho S`` is handled through the generalised eigenproblem
    ``S w = mu Q w``: with ``W^T Q W = I`` and ``W^T S W = diag(mu)`` the
    inverse is ``W diag(1 / (1 + rho mu)) W^T``.  The decomposition depends
    only on the data and the structure, so it is cached on the problem and a
    change of ``rho`` costs one batched product.
    """

    def __init__(self, problem: StackedProblem, structure: ConstraintStructure, rho: float):
        if not rho > 0:
            raise ValidationError("rho must be positive")
        self.problem = problem
        self.structure = structure
        self.rho = float(rho)
        n, K = problem.n, problem.K
        spectrum = _block_spectrum(problem, structure)
        if spectrum is not None:
            W, mu = spectrum
            self.inverse = (W / (1.0 + self.rho * mu)[..., None, :]) @ np.swapaxes(W, -1, -2)
        else:
            Q, S = _block_system(problem, structure)
            self.inverse = self._invert(Q + self.rho * S)
        self.block_count = n * K if not structure.couples_models else n
        self.block_size = self.inverse.shape[-1]

    @staticmethod
    def _invert(M: np.ndarray) -> np.ndarray:
        try:
            np.linalg.cholesky(M)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("x-update system is not positive definite") from exc
        inv = np.linalg.inv(M)
        return 0.5 * (inv + np.swapaxes(inv, -1, -2))

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve for ``x`` given a right-hand side in group layout."""
        pb = self.problem
        n, p, K = pb.n, pb.p, pb.K
        if not self.structure.couples_models:
            R = rhs.transpose(0, 2, 1, 3).reshape(n, K, n * p, 1)
        else:
            R = rhs.transpose(0, 2, 1, 3).reshape(n, K * n * p, 1)
        S = self.inverse @ R
        return S.reshape(n, K, n, p).transpose(0, 2, 1, 3)

    def matrix_dense(self) -> np.ndarray:
        """The assembled system matrix in x order (small problems only)."""
        pb = self.problem
        P = ProjectionP(pb.n, pb.p, pb.K).matrix()
        AtA = self.structure.proj * (P.T @ P)
        if self.structure.diff:
            D = DifferenceD(pb.n, pb.p, pb.K).matrix()
            AtA = AtA + self.structure.diff * (D.T @ D)
        return self.rho * AtA.toarray() + pb.gram_dense() / pb.N


def _block_system(problem: StackedProblem, structure: ConstraintStructure) -> tuple[np.ndarray, np.ndarray]:
    """Per-block data matrix ``Q`` and penalty matrix ``S`` (``M = Q + rho S``)."""
    n, p, K, N = problem.n, problem.p, problem.K, problem.N
    np_ = n * p
    # penalised coordinate indicator for equation i in (channel, lag) order
    mask = np.repeat(offdiag_mask(n), p, axis=1).astype(float)  # (n, np)
    if not structure.couples_models:
        Q = np.broadcast_to(problem.gram[None] / N, (n, K, np_, np_))
        S = structure.proj * mask[:, None, :, None] * np.eye(np_)[None, None]
        return Q, np.broadcast_to(S, Q.shape)
    LK = structure.diff * (K * np.eye(K) - np.ones((K, K))) + structure.proj * np.eye(K)
    Q = np.zeros((n, K, np_, K, np_))
    for k in range(K):
        Q[:, k, :, k, :] = problem.gram[k] / N
    S = LK[None, :, None, :, None] * (mask[:, None, :, None, None] * np.eye(np_)[None, None, :, None, :])
    shape = (n, K * np_, K * np_)
    return Q.reshape(shape), np.broadcast_to(S, (n, K, np_, K, np_)).reshape(shape)


_COND_LIMIT = 1e10


def _block_spectrum(problem: StackedProblem, structure: ConstraintStructure):
    """Cached ``(W, mu)`` of the generalised eigenproblem, or None if ``Q`` is ill conditioned."""
    key = (structure.proj, structure.diff)
    cache = problem.cache
    if key not in cache:
        Q, S = _block_system(problem, structure)
        try:
            L = np.linalg.cholesky(Q)
        except np.linalg.LinAlgError:
            cache[key] = None
            return None
        d = np.diagonal(L, axis1=-2, axis2=-1)
        if d.min() <= 0 or (d.max() / d.min()) ** 2 > _COND_LIMIT:
            cache[key] = None
            return None
        Linv = np.linalg.inv(L)
        C = Linv @ S @ np.swapaxes(Linv, -1, -2)
        mu, U = np.linalg.eigh(0.5 * (C + np.swapaxes(C, -1, -2)))
        cache[key] = (np.swapaxes(Linv, -1, -2) @ U, np.maximum(mu, 0.0))
    return cache[key]


def gram_factorize(problem: StackedProblem, structure: ConstraintStructure, rho: float) -> GramFactorization:
    return GramFactorization(problem, structure, rho)


def dump_patterns(problem: StackedProblem, directory, *, with_difference: bool = True) -> list[Path]:
    """Write the sparsity of G, P, D and G^T G as ``row col`` coordinate lists."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n, p, K = problem.n, problem.p, problem.K
    mats = {"P": ProjectionP(n, p, K).matrix(), "GtG": sp.csr_matrix(problem.gram_dense())}
    if problem.panel is not None:
        G, _ = problem.dense()
        mats["G"] = sp.csr_matrix(G)
    if with_difference and K >= 2:
        mats["D"] = DifferenceD(n, p, K).matrix()
    written = []
    for name, M in mats.items():
        coo = M.tocoo()
        path = directory / f"{name}.coo.txt"
        with open(path, "w") as fh:
            fh.write(f"# {name} shape {M.shape[0]} {M.shape[1]}\n")
            for r, c in zip(coo.row, coo.col):
                fh.write(f"{r} {c}\n")
        written.append(path)
    return written

"""VAR models: simulation, regression stacking, least squares and ground truth.

Coefficient arrays follow two conventions:

* ``coefs`` of shape ``(p, n, n)`` for one model, ``coefs[r]`` being the
  lag-``r+1`` matrix; a panel of models is ``(K, p, n, n)``.
* the *group layout* ``X`` of shape ``(n, n, K, p)`` with
  ``X[i, j, k, r] = coefs[k, r, i, j]``.  Flattening ``X`` in C order gives the
  stacked optimisation vector whose blocks of size ``pK`` are the pooled
  groups ``C_ij`` and whose blocks of size ``p`` are the lag groups ``B_ij^(k)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import UnstableModelError, ValidationError

logger = logging.getLogger(__name__)

BURN_IN = 500
COEF_RANGE = (0.3, 1.0)
TARGET_RADIUS = 0.7


def coefs_to_groups(coefs: np.ndarray) -> np.ndarray:
    """``(K, p, n, n)`` lag matrices -> ``(n, n, K, p)`` group layout."""
    coefs = np.asarray(coefs, dtype=float)
    if coefs.ndim == 3:
        coefs = coefs[None]
    return np.ascontiguousarray(coefs.transpose(2, 3, 0, 1))


def groups_to_coefs(X: np.ndarray) -> np.ndarray:
    """Inverse of :func:`coefs_to_groups`."""
    return np.ascontiguousarray(np.asarray(X).transpose(2, 3, 0, 1))


def offdiag_mask(n: int) -> np.ndarray:
    return ~np.eye(n, dtype=bool)


def companion(coefs: np.ndarray) -> np.ndarray:
    """Companion matrix of a single VAR(p) with ``coefs`` of shape (p, n, n)."""
    p, n, _ = coefs.shape
    top = np.concatenate(list(coefs), axis=1)
    if p == 1:
        return top
    bottom = np.eye(n * (p - 1), n * p)
    return np.vstack([top, bottom])


def spectral_radius(coefs: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(companion(np.asarray(coefs, dtype=float))))))


@dataclass(frozen=True)
class VarModel:
    """A VAR(p) model ``y(t) = sum_r A_r y(t-r) + e(t)``."""

    coefs: np.ndarray  # (p, n, n)

    def __post_init__(self):
        coefs = np.asarray(self.coefs, dtype=float)
        if coefs.ndim == 2:
            coefs = coefs[None]
        if coefs.ndim != 3 or coefs.shape[1] != coefs.shape[2] or coefs.shape[0] < 1:
            raise ValidationError(f"lag matrices must have shape (p, n, n), got {coefs.shape}")
        coefs.setflags(write=False)
        object.__setattr__(self, "coefs", coefs)

    @property
    def n(self) -> int:
        return self.coefs.shape[1]

    @property
    def p(self) -> int:
        return self.coefs.shape[0]

    def is_stable(self) -> bool:
        return spectral_radius(self.coefs) < 1.0


def simulate_var(
    model: VarModel,
    T: int,
    seed=None,
    *,
    burn_in: int = BURN_IN,
    noise_scale: float = 1.0,
    initial: np.ndarray | None = None,
) -> np.ndarray:
    """Simulate ``T`` samples of ``model`` driven by N(0, I) noise.

    Parameters
    ----------
    model : VarModel
    T : int
        Number of returned samples; must exceed ``p``.
    seed : int, Generator or None
    burn_in : int
        Samples generated and discarded before the returned window.
    noise_scale : float
        Multiplier on the innovations; 0 gives the deterministic recursion.
    initial : array (n, p), optional
        Presample values ``y(0), y(-1), ...`` ordered most recent first;
        zeros by default.

    Returns
    -------
    ndarray of shape (n, T)
    """
    if T <= model.p:
        raise ValidationError(f"T={T} must exceed the lag order p={model.p}")
    if noise_scale > 0 and not model.is_stable():
        raise UnstableModelError(
            f"model is unstable (spectral radius {spectral_radius(model.coefs):.4g} >= 1)")
    rng = np.random.default_rng(seed)
    n, p = model.n, model.p
    total = burn_in + T
    y = np.zeros((n, p + total))
    if initial is not None:
        init = np.asarray(initial, dtype=float).reshape(n, p)
        # column p-1 is the most recent presample value
        y[:, :p] = init[:, ::-1]
    noise = rng.standard_normal((n, total)) * noise_scale
    A = model.coefs
    for t in range(p, p + total):
        acc = noise[:, t - p].copy()
        for r in range(p):
            acc += A[r] @ y[:, t - 1 - r]
        y[:, t] = acc
    return y[:, p + burn_in:]


def build_regression(series: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack a series (n, T) into targets ``Y`` (n, T-p) and lags ``H`` (np, T-p).

    Row block ``r`` of ``H`` (rows ``r*n`` to ``(r+1)*n``) holds lag ``r+1``.
    """
    series = np.asarray(series, dtype=float)
    if series.ndim == 1:
        series = series[None]
    n, T = series.shape
    if p < 1:
        raise ValidationError("lag order p must be >= 1")
    if T <= p:
        raise ValidationError(f"series length T={T} must exceed p={p}")
    Y = series[:, p:]
    H = np.vstack([series[:, p - r - 1:T - r - 1] for r in range(p)])
    return Y.copy(), H


@dataclass(frozen=True)
class VarPanel:
    """K multivariate series with their stacked regression pairs."""

    series: tuple
    p: int
    Y: tuple = field(repr=False)
    H: tuple = field(repr=False)

    @classmethod
    def from_series(cls, series: Sequence[np.ndarray], p: int, *, center: bool = True) -> "VarPanel":
        arrays = []
        for s in series:
            s = np.asarray(s, dtype=float)
            if s.ndim != 2:
                raise ValidationError("each series must be an (n, T) array")
            if center:
                s = s - s.mean(axis=1, keepdims=True)
            arrays.append(s)
        if not arrays:
            raise ValidationError("panel needs at least one series")
        shapes = {a.shape for a in arrays}
        if len(shapes) != 1:
            raise ValidationError(f"all series must share (n, T); got {sorted(shapes)}")
        pairs = [build_regression(a, p) for a in arrays]
        return cls(tuple(arrays), p, tuple(Y for Y, _ in pairs), tuple(H for _, H in pairs))

    @property
    def K(self) -> int:
        return len(self.series)

    @property
    def n(self) -> int:
        return self.series[0].shape[0]

    @property
    def T(self) -> int:
        return self.series[0].shape[1]

    @property
    def N(self) -> int:
        return self.T - self.p


@dataclass(frozen=True)
class LeastSquaresFit:
    coefs: np.ndarray        # (K, p, n, n)
    group_norms: np.ndarray  # (K, n, n): ||B_ij^(k)||
    pooled_norms: np.ndarray  # (n, n): ||C_ij||
    ridge: bool = False

    @property
    def groups(self) -> np.ndarray:
        return coefs_to_groups(self.coefs)


def _ls_single(Y: np.ndarray, H: np.ndarray) -> tuple[np.ndarray, bool]:
    gram = H @ H.T
    rank = np.linalg.matrix_rank(gram)
    ridge = rank < gram.shape[0]
    if ridge:
        lam = 1e-6 * np.trace(gram) / gram.shape[0]
        if lam <= 0.0:  # all-zero regressors
            lam = 1.0
        gram = gram + lam * np.eye(gram.shape[0])
    A = np.linalg.solve(gram, H @ Y.T).T
    return A, ridge


def least_squares(panel: VarPanel) -> LeastSquaresFit:
    """Per-model unpenalised LS fit ``A = Y H^T (H H^T)^{-1}``.

    A rank-deficient ``H H^T`` falls back to a small ridge (``1e-6`` times the
    mean eigenvalue) and the fit is flagged.
    """
    n, p = panel.n, panel.p
    coefs = np.empty((panel.K, p, n, n))
    any_ridge = False
    for k, (Y, H) in enumerate(zip(panel.Y, panel.H)):
        A, ridge = _ls_single(Y, H)
        if ridge:
            logger.warning("model %d: rank-deficient regressor, ridge fallback engaged", k)
            any_ridge = True
        coefs[k] = A.reshape(n, p, n).transpose(1, 0, 2)
    X = coefs_to_groups(coefs)
    return LeastSquaresFit(
        coefs=coefs,
        group_norms=np.linalg.norm(X, axis=3).transpose(2, 0, 1),
        pooled_norms=np.linalg.norm(X.reshape(n, n, -1), axis=2),
        ridge=any_ridge,
    )


@dataclass(frozen=True)
class GroundTruthSpec:
    n: int
    p: int
    K: int
    T: int
    common_density: float = 0.1
    differential_density: float = 0.05
    fused: bool = False
    seed: int | None = None
    self_lags: bool = False
    target_radius: float = TARGET_RADIUS

    def validate(self):
        for name in ("n", "p", "K", "T"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        for name in ("common_density", "differential_density"):
            d = getattr(self, name)
            if not 0.0 <= d <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {d}")
        if self.common_density + self.differential_density > 1.0 + 1e-12:
            raise ValidationError(
                "infeasible densities: common_density + differential_density must be <= 1 "
                f"(got {self.common_density} + {self.differential_density})")
        if self.T <= self.p:
            raise ValidationError("T must exceed p")
        if not 0.0 < self.target_radius < 1.0:
            raise ValidationError("target_radius must lie in (0, 1)")


@dataclass(frozen=True)
class GroundTruth:
    spec: GroundTruthSpec
    coefs: np.ndarray         # (K, p, n, n)
    common: np.ndarray        # (n, n) bool, off-diagonal only
    differential: np.ndarray  # (K, n, n) bool

    @property
    def support(self) -> np.ndarray:
        """(K, n, n) boolean total off-diagonal support."""
        return self.common[None] | self.differential

    @property
    def models(self) -> list[VarModel]:
        return [VarModel(c) for c in self.coefs]

    def to_json_dict(self) -> dict:
        def adjacency(mask):
            return {str(i): [int(j) for j in np.flatnonzero(mask[i])] for i in range(mask.shape[0])}
        return {
            "n": self.spec.n, "p": self.spec.p, "K": self.spec.K,
            "common": adjacency(self.common),
            "models": {str(k): adjacency(self.support[k]) for k in range(self.spec.K)},
            "differential": {str(k): adjacency(self.differential[k]) for k in range(self.spec.K)},
        }


def _draw_magnitudes(rng, shape):
    lo, hi = COEF_RANGE
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _rescale(coefs: np.ndarray, factor: float) -> np.ndarray:
    # scaling lag r by factor**r scales every companion eigenvalue by factor
    powers = factor ** np.arange(1, coefs.shape[-3] + 1)
    return coefs * powers[:, None, None]


def generate_ground_truth(spec: GroundTruthSpec, seed=None) -> GroundTruth:
    """Draw K sparse stable VAR models sharing a common GC support.

    ``round(d_c (n^2-n))`` off-diagonal groups form the common support and, per
    model, ``round(d_d (n^2-n))`` further groups are drawn from the remaining
    off-diagonal pairs.  Self-lag groups are zero unless ``self_lags`` is set.  Nonzero entries
    are uniform on +-[0.3, 1]; each model is then rescaled so that its
    companion spectral radius is ``target_radius`` (fused truths share one factor across
    models so the common coefficients stay identical).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    n, p, K = spec.n, spec.p, spec.K
    pairs = np.argwhere(offdiag_mask(n))
    m = len(pairs)
    n_common = int(round(spec.common_density * m))
    n_diff = int(round(spec.differential_density * m))

    order = rng.permutation(m)
    common_idx = order[:n_common]
    rest = order[n_common:]
    common = np.zeros((n, n), dtype=bool)
    common[pairs[common_idx, 0], pairs[common_idx, 1]] = True
    differential = np.zeros((K, n, n), dtype=bool)
    for k in range(K):
        pick = rng.choice(rest, size=min(n_diff, len(rest)), replace=False)
        differential[k, pairs[pick, 0], pairs[pick, 1]] = True

    coefs = np.zeros((K, p, n, n))
    shared = _draw_magnitudes(rng, (p, n, n))
    eye = np.eye(n, dtype=bool) if spec.self_lags else np.zeros((n, n), dtype=bool)
    for k in range(K):
        own = _draw_magnitudes(rng, (p, n, n))
        mask_c = common if spec.fused else np.zeros_like(common)
        coefs[k] = np.where(mask_c, shared, 0.0)
        free = (common & ~mask_c) | differential[k] | eye
        coefs[k] = np.where(free, own, coefs[k])

    radii = np.array([spectral_radius(c) for c in coefs])
    # nilpotent or empty models have radius 0 and are left as drawn
    if spec.fused:
        if radii.max() > 0:
            coefs = _rescale(coefs, spec.target_radius / radii.max())
    else:
        for k in range(K):
            if radii[k] > 0:
                coefs[k] = _rescale(coefs[k], spec.target_radius / radii[k])
    return GroundTruth(spec, coefs, common, differential)


def simulate_panel(truth: GroundTruth, seed=None) -> list[np.ndarray]:
    """Simulate one (n, T) series per ground-truth model with independent noise."""
    rng = np.random.default_rng(seed)
    children = rng.spawn(truth.spec.K)
    return [simulate_var(m, truth.spec.T, g) for m, g in zip(truth.models, children)]

"""Proximal operators of weighted group norms ``h(u) = sum_l w_l ||u_l||_2^q``.

Both operators act blockwise on a flat vector split by a uniform
:class:`~grangernet.assembly.Partition` (or simply a block size) and return a
nonnegative rescaling of every block, with exact zeros below the threshold.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembly import Partition
from .exceptions import ValidationError

SUPPORTED_Q = (1.0, 0.5)


def _blocks(u: np.ndarray, partition) -> np.ndarray:
    size = partition.size if isinstance(partition, Partition) else int(partition)
    u = np.asarray(u, dtype=float)
    if u.size % size:
        raise ValidationError(f"block size {size} does not divide vector length {u.size}")
    return u.reshape(-1, size)


def _thresholds(alpha, w, count):
    w = np.asarray(w, dtype=float).ravel()
    if w.size == 1:
        w = np.full(count, w[0])
    if w.size != count:
        raise ValidationError(f"expected {count} block weights, got {w.size}")
    return alpha * w


def group_l1_scale(norms: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Multipliers ``(1 - t/||u_l||)_+`` of block soft thresholding."""
    scale = np.zeros_like(norms)
    keep = norms > t
    scale[keep] = 1.0 - t[keep] / norms[keep]
    return scale


def group_lhalf_scale(norms: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Multipliers of the closed-form ``l_{2,1/2}`` prox (zero at or below the threshold)."""
    scale = np.zeros_like(norms)
    keep = norms > 1.5 * np.cbrt(t * t)
    if np.any(keep):
        nu = norms[keep]
        tk = t[keep]
        nu32 = nu * np.sqrt(nu)
        arg = np.clip(tk / 4.0 * (3.0 / nu) ** 1.5, -1.0, 1.0)
        c3 = np.cos(np.pi / 3.0 - np.arccos(arg) / 3.0) ** 3
        scale[keep] = 16.0 * nu32 * c3 / (3.0 * np.sqrt(3.0) * tk + 16.0 * nu32 * c3)
    return scale


def prox_group_l1(u, partition, w, alpha: float) -> np.ndarray:
    """Weighted block soft thresholding, the prox of ``alpha * sum_l w_l ||u_l||``."""
    if alpha < 0:
        raise ValidationError("alpha must be nonnegative")
    B = _blocks(u, partition)
    norms = np.linalg.norm(B, axis=1)
    scale = group_l1_scale(norms, _thresholds(alpha, w, len(B)))
    return (B * scale[:, None]).ravel()


def prox_group_lhalf(u, partition, w, alpha: float) -> np.ndarray:
    """Prox of ``alpha * sum_l w_l ||u_l||^(1/2)`` (global minimiser, closed form)."""
    if alpha < 0:
        raise ValidationError("alpha must be nonnegative")
    B = _blocks(u, partition)
    norms = np.linalg.norm(B, axis=1)
    scale = group_lhalf_scale(norms, _thresholds(alpha, w, len(B)))
    return (B * scale[:, None]).ravel()


@dataclass(frozen=True)
class ProxRequest:
    u: np.ndarray
    partition: object  # Partition or block size
    weights: object
    alpha: float
    q: float = 1.0


def prox_dispatch(request) -> np.ndarray:
    """Route a request (or a sequence of them, concatenated) to the matching prox."""
    if isinstance(request, (list, tuple)):
        return np.concatenate([prox_dispatch(r) for r in request])
    if request.q == 1.0:
        return prox_group_l1(request.u, request.partition, request.weights, request.alpha)
    if request.q == 0.5:
        return prox_group_lhalf(request.u, request.partition, request.weights, request.alpha)
    raise ValidationError(f"unsupported exponent q={request.q}; expected one of {SUPPORTED_Q}")


def block_scale(norms: np.ndarray, t: np.ndarray, q: float) -> np.ndarray:
    """Per-block multipliers for precomputed norms and thresholds ``t = alpha w``."""
    if q == 1.0:
        return group_l1_scale(norms, t)
    if q == 0.5:
        return group_lhalf_scale(norms, t)
    raise ValidationError(f"unsupported exponent q={q}")

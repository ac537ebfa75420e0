"""Sliced Wasserstein distance between equal-size point sets, with gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ProjectionBank:
    directions: np.ndarray  # (L, F), unit rows
    seed: int | None = None


@dataclass
class SwdResult:
    distance: float
    grad_a: np.ndarray


def sample_projections(dim, num, rng) -> ProjectionBank:
    if num < 1 or dim < 1:
        raise ValueError("need at least one projection of dimension >= 1")
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    theta = rng.normal(size=(num, dim))
    norms = np.linalg.norm(theta, axis=1)
    # a zero draw has probability zero; redraw just in case
    while np.any(norms == 0):
        bad = norms == 0
        theta[bad] = rng.normal(size=(int(bad.sum()), dim))
        norms = np.linalg.norm(theta, axis=1)
    return ProjectionBank(theta / norms[:, None], seed)


def swd(a, b, bank: ProjectionBank) -> SwdResult:
    """Squared sliced 2-Wasserstein estimate and its gradient w.r.t. ``a``.

    Each slice pairs the sorted projections of ``a`` and ``b``; ties keep the
    original point order, which fixes a deterministic subgradient.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"point sets must be (M, F) with matching F, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"cardinality mismatch: {a.shape[0]} vs {b.shape[0]}")
    m = a.shape[0]
    if m == 0:
        raise ValueError("point sets are empty")
    theta = bank.directions
    L = theta.shape[0]
    pa = theta @ a.T  # (L, M)
    pb = theta @ b.T
    sa = np.argsort(pa, axis=1, kind="stable")
    sb = np.argsort(pb, axis=1, kind="stable")
    diff = np.take_along_axis(pa, sa, axis=1) - np.take_along_axis(pb, sb, axis=1)
    distance = float(np.mean(diff * diff))
    # scatter paired differences back to a's original order
    coef = np.empty_like(diff)
    np.put_along_axis(coef, sa, diff, axis=1)
    grad_a = (2.0 / (L * m)) * (coef.T @ theta)
    return SwdResult(distance, grad_a)


def latent_field_to_points(latent, m, rng, mask=None):
    """Subsample ``m`` pixel embeddings from a latent field without replacement.

    ``latent`` is (..., F); all leading axes are flattened row-major. If ``mask``
    is given, only pixels where it is true are eligible. Returns ``(points, index)``
    with ``index`` into the flattened pixel axis, sorted ascending.
    """
    latent = np.asarray(latent)
    f = latent.shape[-1]
    flat = latent.reshape(-1, f)
    eligible = np.arange(flat.shape[0]) if mask is None else np.flatnonzero(np.asarray(mask).reshape(-1))
    if m > eligible.size:
        raise ValueError(f"cannot draw {m} points from {eligible.size} pixels")
    if m == eligible.size:
        index = eligible
    else:
        index = np.sort(rng.choice(eligible, size=m, replace=False))
    return flat[index], index


def scatter_points_grad(grad_points, index, latent_shape):
    """Place per-point gradients back into a zero latent-shaped array."""
    out = np.zeros((int(np.prod(latent_shape[:-1])), latent_shape[-1]))
    out[index] = grad_points
    return out.reshape(latent_shape)

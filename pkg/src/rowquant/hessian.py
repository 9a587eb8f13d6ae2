"""Top Hessian eigenvalue per filter by power iteration on Hessian-vector products."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

MAX_ITER = 20


@dataclass(frozen=True)
class HessianEstimate:
    filter_id: tuple
    eigenvalue: float
    iterations_used: int
    converged: bool


def _ritz_top(vs: list, hvs: list):
    """Largest-magnitude Ritz pair of H on span(vs), plus its residual norm."""
    V = np.array(vs).T
    HV = np.array(hvs).T
    U, S, Zt = np.linalg.svd(V, full_matrices=False)
    r = int(np.sum(S > S[0] * 1e-10))
    Q = U[:, :r]
    HQ = HV @ Zt[:r].T / S[:r]
    Tm = Q.T @ HQ
    theta, Y = np.linalg.eigh(0.5 * (Tm + Tm.T))
    j = int(np.argmax(np.abs(theta)))
    y = Y[:, j]
    residual = float(np.linalg.norm(HQ @ y - theta[j] * (Q @ y)))
    return float(theta[j]), residual


def power_iteration(
    hvp: Callable[[np.ndarray], np.ndarray],
    dim: int,
    max_iter: int = MAX_ITER,
    seed=0,
    tol: float = 1e-4,
    estimator: str = "ritz",
):
    """Dominant eigenvalue of a symmetric operator given only ``hvp``.

    Iterates v ← H·v / ‖H·v‖ from a seeded Gaussian start, at most ``max_iter``
    products. ``estimator="ritz"`` reads the eigenvalue off the Rayleigh-Ritz
    projection onto all iterates so far and stops once the Ritz residual is
    below ``tol``·|λ|. ``estimator="rayleigh"`` uses vᵀHv of the latest unit
    iterate and stops when it changes by less than ``tol`` relative.

    Returns (eigenvalue, iterations_used, converged).
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if estimator not in ("ritz", "rayleigh"):
        raise ValueError(f"unknown estimator {estimator!r}")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    vs, hvs = [], []
    lam, prev = 0.0, None
    for k in range(1, max_iter + 1):
        hv = np.asarray(hvp(v), dtype=np.float64).reshape(dim)
        norm = float(np.linalg.norm(hv))
        if norm == 0.0:
            if k == 1:
                return 0.0, 1, True
            return lam, k, False
        if estimator == "ritz":
            vs.append(v)
            hvs.append(hv)
            lam, residual = _ritz_top(vs, hvs)
            if residual <= tol * abs(lam):
                return lam, k, True
        else:
            lam = float(v @ hv)
            if prev is not None and abs(lam - prev) < tol * abs(lam):
                return lam, k, True
            prev = lam
        v = hv / norm
    return lam, max_iter, False


def row_hvp(gradient: Tensor, param: Tensor, row: Optional[int] = None):
    """H·v restricted to one row (filter) of ``param``, ignoring cross-row blocks.

    ``gradient`` must be d(loss)/d(param) computed with ``create_graph=True``.
    """
    shape = param.shape
    if row is None:
        def hvp(v):
            (hv,) = T.grad(T.sum(T.mul(gradient, v.reshape(shape))), [param])
            return hv.data.reshape(-1)
        return hvp

    def hvp(v):
        full = np.zeros(shape)
        full[row] = v.reshape(shape[1:])
        (hv,) = T.grad(T.sum(T.mul(gradient, full)), [param])
        return hv.data[row].reshape(-1)

    return hvp


def top_eigenvalue(
    loss_fn: Callable[[], Tensor],
    filter_weights: Tensor,
    max_iter: int = MAX_ITER,
    seed=0,
    row: Optional[int] = None,
    filter_id: tuple = (),
    estimator: str = "ritz",
) -> HessianEstimate:
    """Dominant eigenvalue of the loss Hessian w.r.t. ``filter_weights``.

    With ``row`` set, only that row's diagonal block of the Hessian is used.
    A loss whose gradient does not depend on the weights yields λ = 0.
    """
    loss = loss_fn()
    (g,) = T.grad(loss, [filter_weights], create_graph=True)
    dim = filter_weights.size if row is None else int(np.prod(filter_weights.shape[1:]))
    if not g.requires_grad:
        return HessianEstimate(tuple(filter_id), 0.0, 1, True)
    lam, iters, conv = power_iteration(
        row_hvp(g, filter_weights, row), dim, max_iter=max_iter, seed=seed, estimator=estimator
    )
    return HessianEstimate(tuple(filter_id), lam, iters, conv)

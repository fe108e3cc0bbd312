"""
Classic PARAFAC2-ALS
Alternates orthogonal P_k with one CP-ALS sweep on the projected tensor
Y_k = X_k P_k. Unconstrained and uncoupled; used as a reference solver.
"""

import logging
from typing import Optional

import numpy as np
import scipy.linalg as sla

from aofusion.driver.ao import FitDivergedError, OuterSettings
from aofusion.model.spec import DecompositionFactors, DecompositionKind, FactorSet
from aofusion.tensor.containers import RaggedTensor
from aofusion.tensor.kernels import mttkrp, procrustes_orthogonal, solve_normal_equations

logger = logging.getLogger(__name__)


class RankTooLargeError(ValueError):
    """Raised when the requested rank exceeds a slice or row dimension"""
    pass


def _als_update(Y: np.ndarray, F2: np.ndarray, F3: np.ndarray, mode: int) -> np.ndarray:
    gram = (F2.T @ F2) * (F3.T @ F3)
    return solve_normal_equations(gram, mttkrp(Y, F2, F3, mode))


def _fit(X: RaggedTensor, A: np.ndarray, Ps, delta_B: np.ndarray, C: np.ndarray) -> float:
    error = sum(np.sum((Xk - (A * C[k]) @ (P @ delta_B).T) ** 2) for k, (Xk, P) in enumerate(zip(X, Ps)))
    return 100.0 * (1.0 - error / X.norm() ** 2)


def parafac2_als_baseline(X: RaggedTensor, R: int, settings: Optional[OuterSettings] = None) -> FactorSet:
    settings = settings or OuterSettings()
    if R > X.n_rows or R > min(X.slice_sizes):
        raise RankTooLargeError(
            f"rank {R} exceeds min(I, J_k) = {min(X.n_rows, min(X.slice_sizes))}"
        )
    if X.norm() == 0:
        raise ValueError("PARAFAC2-ALS is undefined for an all-zero tensor")

    # leading eigenvectors of sum_k X_k X_k^T
    cross = sum(Xk @ Xk.T for Xk in X)
    _, eigvecs = sla.eigh(cross)
    A = eigvecs[:, ::-1][:, :R].copy()
    delta_B = np.eye(R)
    C = np.ones((X.n_slices, R))
    Ps = []

    fit_prev = None
    for iteration in range(1, max(settings.max_outer_iters, 1) + 1):
        Ps = [procrustes_orthogonal(Xk.T @ (A * C[k]) @ delta_B.T) for k, Xk in enumerate(X)]
        Y = np.stack([Xk @ P for Xk, P in zip(X, Ps)], axis=2)
        A = _als_update(Y, delta_B, C, 0)
        delta_B = _als_update(Y, A, C, 1)
        C = _als_update(Y, A, delta_B, 2)

        fit = _fit(X, A, Ps, delta_B, C)
        if not np.isfinite(fit):
            raise FitDivergedError(f"PARAFAC2-ALS produced a non-finite fit at iteration {iteration}")
        logger.debug("PARAFAC2-ALS iteration %d: fit %.6f", iteration, fit)
        if fit_prev is not None and abs(fit - fit_prev) < settings.outer_rel_tol * abs(fit_prev):
            break
        fit_prev = fit

    Bs = [P @ delta_B for P in Ps]
    return FactorSet([DecompositionFactors(DecompositionKind.PARAFAC2, [A, Bs, C])])

"""
Projection onto the PARAFAC2 constraint set
Finds orthonormal P_k and a shared Delta_B with targets_k close to P_k Delta_B
"""

from typing import List, Optional, Sequence, Tuple

import numpy as np

from aofusion.tensor.kernels import procrustes_orthogonal, symmetric_sqrt


def initial_delta_B(targets: Sequence[np.ndarray]) -> np.ndarray:
    """Square root of the mean cross-product; exact for feasible targets"""
    return symmetric_sqrt(sum(T.T @ T for T in targets) / len(targets))


def project_parafac2(
    targets: Sequence[np.ndarray],
    weights: Optional[Sequence[float]] = None,
    delta_B: Optional[np.ndarray] = None,
    max_rounds: int = 5,
    tol: float = 1e-8,
) -> Tuple[List[np.ndarray], np.ndarray, int]:
    """
    Alternate K orthogonal Procrustes problems with a weighted mean for Delta_B.

    Returns the projections, Delta_B and the number of rounds used.
    """
    weights = np.ones(len(targets)) if weights is None else np.asarray(weights, dtype=np.float64)
    delta_B = initial_delta_B(targets) if delta_B is None else delta_B
    projections: List[np.ndarray] = []
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        projections = [procrustes_orthogonal(T @ delta_B.T) for T in targets]
        updated = sum(w * P.T @ T for w, P, T in zip(weights, projections, targets)) / weights.sum()
        change = np.linalg.norm(updated - delta_B)
        scale = np.linalg.norm(updated)
        delta_B = updated
        if change <= tol * max(scale, np.finfo(float).tiny):
            break
    return projections, delta_B, rounds

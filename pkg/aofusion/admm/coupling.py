"""
Linear coupling constraints
Each coupled factor X_i satisfies forward_i(X_i) = delta_side_i(Delta):

    case 1    X = Delta
    case 2a   H X = Delta
    case 2b   X = H Delta
    case 3a   X H = Delta
    case 3b   X = Delta H
"""

from typing import List, Optional, Sequence, Union

import numpy as np
import scipy.linalg as sla

from aofusion.model.spec import CouplingCase

Weights = Union[float, np.ndarray]


class CouplingLink:
    """One member's view of a coupling constraint"""

    def __init__(self, case: CouplingCase, transform: Optional[np.ndarray], rank: int):
        self.case = case
        self.H = transform
        self.rank = rank

    def forward(self, X: np.ndarray) -> np.ndarray:
        if self.case == CouplingCase.MODE_LEFT:
            return self.H @ X
        if self.case == CouplingCase.COMPONENT_LEFT:
            return X @ self.H
        return X

    def delta_side(self, delta: np.ndarray) -> np.ndarray:
        if self.case == CouplingCase.MODE_GENERATED:
            return self.H @ delta
        if self.case == CouplingCase.COMPONENT_GENERATED:
            return delta @ self.H
        return delta

    def adjoint(self, Y: np.ndarray) -> np.ndarray:
        """Adjoint of forward"""
        if self.case == CouplingCase.MODE_LEFT:
            return self.H.T @ Y
        if self.case == CouplingCase.COMPONENT_LEFT:
            return Y @ self.H.T
        return Y

    def residual(self, X: np.ndarray, delta: np.ndarray) -> np.ndarray:
        return self.forward(X) - self.delta_side(delta)

    def target(self, delta: np.ndarray, dual: np.ndarray) -> np.ndarray:
        """Coupling contribution to the primal right-hand side (without rho/2)"""
        return self.adjoint(self.delta_side(delta) - dual)

    def right_gram(self) -> Optional[np.ndarray]:
        """R x R term multiplying X from the right in the primal system; None for case 2a"""
        if self.case == CouplingCase.MODE_LEFT:
            return None
        if self.case == CouplingCase.COMPONENT_LEFT:
            return self.H @ self.H.T
        return np.eye(self.rank)

    def left_gram(self) -> Optional[np.ndarray]:
        """n x n term multiplying X from the left (case 2a only)"""
        if self.case == CouplingCase.MODE_LEFT:
            return self.H.T @ self.H
        return None


def _as_column(weights: Weights, rows: int) -> np.ndarray:
    if np.isscalar(weights):
        return np.full((rows, 1), float(weights))
    return np.asarray(weights, dtype=np.float64).reshape(rows, 1)


class DeltaUpdater:
    """
    Minimizes sum_i ||W_i^(1/2) (forward_i(X_i) - delta_side_i(Delta) + mu_i)||^2
    over Delta, where W_i holds member i's step sizes (one per row for the
    PARAFAC2 C mode). Factorizations are built once per subproblem.
    """

    def __init__(self, case: CouplingCase, links: Sequence[CouplingLink], weights: Sequence[Weights], delta_shape):
        self.case = case
        self.links = list(links)
        self.delta_shape = tuple(delta_shape)
        rows = self.delta_shape[0]
        self._row_factors: Optional[List] = None
        self._factor = None

        if case in (CouplingCase.EXACT, CouplingCase.MODE_LEFT, CouplingCase.COMPONENT_LEFT):
            self.weights = [_as_column(w, rows) for w in weights]
            self.total = sum(self.weights)
        elif case == CouplingCase.MODE_GENERATED:
            self.weights = [_as_column(w, link.H.shape[0]) for w, link in zip(weights, self.links)]
            normal = sum(link.H.T @ (w * link.H) for w, link in zip(self.weights, self.links))
            self._factor = sla.cho_factor(normal, lower=True)
        else:
            self.weights = [_as_column(w, rows) for w in weights]
            grams = [link.H @ link.H.T for link in self.links]
            stacked = np.stack([w[:, 0] for w in self.weights], axis=1)
            if np.all(stacked == stacked[0]):
                normal = sum(w * g for w, g in zip(stacked[0], grams))
                self._factor = sla.cho_factor(normal, lower=True)
            else:
                self._row_factors = [
                    sla.cho_factor(sum(w * g for w, g in zip(row, grams)), lower=True)
                    for row in stacked
                ]

    def solve(self, factors: Sequence[np.ndarray], duals: Sequence[np.ndarray]) -> np.ndarray:
        if self.case in (CouplingCase.EXACT, CouplingCase.MODE_LEFT, CouplingCase.COMPONENT_LEFT):
            numerator = sum(
                w * (link.forward(X) + mu) for w, link, X, mu in zip(self.weights, self.links, factors, duals)
            )
            return numerator / self.total

        if self.case == CouplingCase.MODE_GENERATED:
            rhs = sum(
                link.H.T @ (w * (X + mu)) for w, link, X, mu in zip(self.weights, self.links, factors, duals)
            )
            return sla.cho_solve(self._factor, rhs)

        rhs = sum(w * (X + mu) @ link.H.T for w, link, X, mu in zip(self.weights, self.links, factors, duals))
        if self._factor is not None:
            return sla.cho_solve(self._factor, rhs.T).T
        return np.vstack([sla.cho_solve(factor, row) for factor, row in zip(self._row_factors, rhs)])

"""
Regularizer registry for AO-ADMM split variables
Each regularizer g enters the solver only through prox and penalty_value

Conventions: prox(X, rho) = argmin_U g(U) + (rho/2)||X - U||_F^2 and ridge is
g(X) = lambda ||X||_F^2, so its prox scales by rho / (rho + 2 lambda).
"""

import math
from abc import ABC, abstractmethod
from collections import OrderedDict
from enum import Enum
from typing import Dict, Optional, Tuple, Type, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp


class RegularizerKind(Enum):
    """Built-in regularizer kinds"""
    NONE = "none"
    NONNEG = "nonneg"
    RIDGE = "ridge"
    UNIT_BALL = "unit_l2_ball_columns"
    GRAPH_LAPLACIAN = "graph_laplacian_smooth"


class RegularizerError(ValueError):
    """Raised for invalid regularizer parameters or prox arguments"""
    pass


FEASIBILITY_TOL = 1e-9


class RegularizerSpec:
    """Kind and parameters of one mode's regularizer"""

    def __init__(
        self,
        kind: Union[str, RegularizerKind] = RegularizerKind.NONE,
        strength: float = 0.0,
        laplacian: Optional[np.ndarray] = None,
        nonneg: bool = False,
    ):
        self.kind = kind.value if isinstance(kind, RegularizerKind) else str(kind)
        if self.kind not in REGISTRY:
            raise RegularizerError(f"Unknown regularizer kind '{self.kind}'")
        if not np.isfinite(strength) or strength < 0:
            raise RegularizerError(f"Regularization strength must be >= 0, got {strength}")
        self.strength = float(strength)
        self.laplacian = None if laplacian is None else _check_laplacian(laplacian)
        self.nonneg = bool(nonneg)
        self._operator: Optional["ProxOperator"] = None

    @classmethod
    def none(cls) -> "RegularizerSpec":
        return cls(RegularizerKind.NONE)

    @property
    def is_none(self) -> bool:
        return self.kind == RegularizerKind.NONE.value

    @property
    def operator(self) -> "ProxOperator":
        if self._operator is None:
            self._operator = REGISTRY.get(self.kind)(self)
        return self._operator

    @property
    def is_hard_constraint(self) -> bool:
        return self.operator.hard_constraint

    def __eq__(self, other):
        if not isinstance(other, RegularizerSpec):
            return False
        same_laplacian = (self.laplacian is None and other.laplacian is None) or (
            self.laplacian is not None and other.laplacian is not None
            and np.array_equal(self.laplacian, other.laplacian)
        )
        return (self.kind, self.strength, self.nonneg) == (other.kind, other.strength, other.nonneg) and same_laplacian

    def __hash__(self):
        return hash((self.kind, self.strength, self.nonneg))

    def __repr__(self):
        parts = [self.kind]
        if self.strength:
            parts.append(f"lambda={self.strength:g}")
        if self.nonneg and self.kind != RegularizerKind.NONNEG.value:
            parts.append("nonneg")
        if self.laplacian is not None:
            parts.append(f"L={self.laplacian.shape[0]}x{self.laplacian.shape[1]}")
        return f"RegularizerSpec({', '.join(parts)})"


def _check_laplacian(L) -> np.ndarray:
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise RegularizerError(f"Laplacian must be square, got shape {L.shape}")
    if not np.allclose(L, L.T):
        raise RegularizerError("Laplacian must be symmetric")
    scale = max(np.abs(L).max(initial=0.0), 1.0)
    if L.size and sla.eigvalsh(L)[0] < -1e-10 * scale:
        raise RegularizerError("Laplacian must be positive semidefinite")
    return L


def path_graph_laplacian(n: int) -> np.ndarray:
    """Laplacian of the path graph on n nodes (second-difference operator)"""
    if n == 1:
        return np.zeros((1, 1))
    degree = np.full(n, 2.0)
    degree[[0, -1]] = 1.0
    off = -np.ones(n - 1)
    return sp.diags([off, degree, off], [-1, 0, 1]).toarray()


class ProxOperator(ABC):
    """Base class for proximal operators"""

    hard_constraint = False

    def __init__(self, spec: RegularizerSpec):
        self.spec = spec

    @abstractmethod
    def prox(self, X: np.ndarray, step: float) -> np.ndarray:
        pass

    @abstractmethod
    def soft_penalty(self, X: np.ndarray) -> float:
        """Value of the finite part of g, ignoring any indicator"""
        pass

    def is_feasible(self, X: np.ndarray, tol: float = FEASIBILITY_TOL) -> bool:
        return True

    def penalty(self, X: np.ndarray) -> float:
        if self.hard_constraint and not self.is_feasible(X):
            return math.inf
        return self.soft_penalty(X)


def _nonneg_feasible(X: np.ndarray, tol: float) -> bool:
    return bool(np.all(X >= -tol))


class NoRegularization(ProxOperator):

    def prox(self, X, step):
        return X.copy()

    def soft_penalty(self, X):
        return 0.0


class Nonnegativity(ProxOperator):
    hard_constraint = True

    def prox(self, X, step):
        return np.maximum(X, 0.0)

    def soft_penalty(self, X):
        return 0.0

    def is_feasible(self, X, tol=FEASIBILITY_TOL):
        return _nonneg_feasible(X, tol)


class Ridge(ProxOperator):

    def __init__(self, spec):
        super().__init__(spec)
        self.hard_constraint = spec.nonneg

    def prox(self, X, step):
        shrink = step / (step + 2.0 * self.spec.strength)
        if self.spec.nonneg:
            return np.maximum(X, 0.0) * shrink
        return X * shrink

    def soft_penalty(self, X):
        return self.spec.strength * float(np.sum(X * X))

    def is_feasible(self, X, tol=FEASIBILITY_TOL):
        return not self.spec.nonneg or _nonneg_feasible(X, tol)


class UnitBallColumns(ProxOperator):
    """Projection of every column into the unit l2 ball (optionally nonnegative)"""
    hard_constraint = True

    def prox(self, X, step):
        if self.spec.nonneg:
            X = np.maximum(X, 0.0)
        norms = np.linalg.norm(X, axis=0)
        scale = np.ones_like(norms)
        outside = norms > 1.0
        scale[outside] = 1.0 / norms[outside]
        return X * scale

    def soft_penalty(self, X):
        return 0.0

    def is_feasible(self, X, tol=FEASIBILITY_TOL):
        if self.spec.nonneg and not _nonneg_feasible(X, tol):
            return False
        return bool(np.all(np.linalg.norm(X, axis=0) <= 1.0 + tol))


class GraphLaplacianSmoothing(ProxOperator):
    """g(X) = lambda * sum_r x_r^T L x_r, path-graph L unless one is given"""

    max_cached_factors = 256

    def __init__(self, spec):
        super().__init__(spec)
        self._factors: "OrderedDict[Tuple[int, float], Tuple[np.ndarray, bool]]" = OrderedDict()

    def _laplacian(self, n: int) -> np.ndarray:
        if self.spec.laplacian is None:
            return path_graph_laplacian(n)
        if self.spec.laplacian.shape[0] != n:
            raise RegularizerError(
                f"Laplacian is {self.spec.laplacian.shape[0]}x{self.spec.laplacian.shape[0]}, factor has {n} rows"
            )
        return self.spec.laplacian

    def _factor(self, n: int, step: float):
        key = (n, float(step))
        factor = self._factors.get(key)
        if factor is None:
            system = step * np.eye(n) + 2.0 * self.spec.strength * self._laplacian(n)
            factor = sla.cho_factor(system, lower=True)
            self._factors[key] = factor
            if len(self._factors) > self.max_cached_factors:
                self._factors.popitem(last=False)
        return factor

    def prox(self, X, step):
        if self.spec.strength == 0.0:
            self._laplacian(X.shape[0])
            return X.copy()
        return sla.cho_solve(self._factor(X.shape[0], step), step * X)

    def soft_penalty(self, X):
        L = self._laplacian(X.shape[0])
        return self.spec.strength * float(np.sum(X * (L @ X)))


class RegularizerRegistry:
    """Maps regularizer kind names to operator classes"""

    def __init__(self):
        self.operators: Dict[str, Type[ProxOperator]] = {}

    def register(self, kind: str, operator: Type[ProxOperator]):
        if not issubclass(operator, ProxOperator):
            raise RegularizerError(f"{operator!r} is not a ProxOperator")
        self.operators[kind] = operator

    def get(self, kind: str) -> Type[ProxOperator]:
        try:
            return self.operators[kind]
        except KeyError:
            raise RegularizerError(f"Unknown regularizer kind '{kind}'") from None

    def __contains__(self, kind: str) -> bool:
        return kind in self.operators

    def kinds(self):
        return sorted(self.operators)


REGISTRY = RegularizerRegistry()
REGISTRY.register(RegularizerKind.NONE.value, NoRegularization)
REGISTRY.register(RegularizerKind.NONNEG.value, Nonnegativity)
REGISTRY.register(RegularizerKind.RIDGE.value, Ridge)
REGISTRY.register(RegularizerKind.UNIT_BALL.value, UnitBallColumns)
REGISTRY.register(RegularizerKind.GRAPH_LAPLACIAN.value, GraphLaplacianSmoothing)


def register_regularizer(kind: str, operator: Type[ProxOperator]):
    """Add a regularizer kind; solvers pick it up through RegularizerSpec"""
    REGISTRY.register(kind, operator)


def prox(spec: RegularizerSpec, X: np.ndarray, step: float) -> np.ndarray:
    if not step > 0:
        raise RegularizerError(f"prox step must be positive, got {step}")
    return spec.operator.prox(X, step)


def penalty_value(spec: RegularizerSpec, X: np.ndarray) -> float:
    """g(X); hard constraints give 0 when satisfied and math.inf otherwise"""
    return spec.operator.penalty(X)


def soft_penalty_value(spec: RegularizerSpec, X: np.ndarray) -> float:
    return spec.operator.soft_penalty(X)


def is_feasible(spec: RegularizerSpec, X: np.ndarray, tol: float = FEASIBILITY_TOL) -> bool:
    return spec.operator.is_feasible(X, tol)

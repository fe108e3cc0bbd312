"""
Solver state for AO-ADMM
Factors, split variables, scaled duals, coupling variables and cached Grams
"""

import math
import warnings
from typing import Dict, List, Optional, Union

import numpy as np

from aofusion.model.spec import Factor, FactorSet, Member, ModelSpec


class AdmmSettings:
    """Inner ADMM tolerances and budgets"""

    def __init__(
        self,
        abs_tol: float = 1e-5,
        rel_tol: float = 1e-5,
        max_inner_iters: int = 5,
        projection_max_rounds: int = 5,
        projection_tol: float = 1e-8,
        weighted_projection: bool = True,
    ):
        if not (abs_tol > 0 and rel_tol > 0 and projection_tol > 0):
            raise ValueError("ADMM tolerances must be positive")
        if max_inner_iters < 1 or projection_max_rounds < 1:
            raise ValueError("ADMM iteration budgets must be >= 1")
        self.abs_tol = float(abs_tol)
        self.rel_tol = float(rel_tol)
        self.max_inner_iters = int(max_inner_iters)
        self.projection_max_rounds = int(projection_max_rounds)
        self.projection_tol = float(projection_tol)
        self.weighted_projection = bool(weighted_projection)

    def __repr__(self):
        return (
            f"AdmmSettings(abs_tol={self.abs_tol:g}, rel_tol={self.rel_tol:g}, "
            f"max_inner_iters={self.max_inner_iters})"
        )


class ResidualScales:
    """
    Quantities entering the tolerances of one constraint Ax + Bz = c.

    dual_norm is ||A^T mu|| for the scaled dual mu.
    """

    def __init__(
        self,
        constraint_length: int,
        primal_length: int,
        ax_norm: float,
        bz_norm: float,
        rho: float,
        dual_norm: float,
        c_norm: float = 0.0,
    ):
        self.constraint_length = constraint_length
        self.primal_length = primal_length
        self.ax_norm = ax_norm
        self.bz_norm = bz_norm
        self.c_norm = c_norm
        self.rho = rho
        self.dual_norm = dual_norm

    def primal_tolerance(self, settings: AdmmSettings) -> float:
        return (
            math.sqrt(self.constraint_length) * settings.abs_tol
            + settings.rel_tol * max(self.ax_norm, self.bz_norm, self.c_norm)
        )

    def dual_tolerance(self, settings: AdmmSettings) -> float:
        return math.sqrt(self.primal_length) * settings.abs_tol + settings.rel_tol * self.rho * self.dual_norm


def stop_check(r_norm: float, s_norm: float, scales: ResidualScales, settings: Optional[AdmmSettings] = None) -> bool:
    """True when both the primal and the dual residual are within tolerance"""
    settings = settings or AdmmSettings()
    return r_norm <= scales.primal_tolerance(settings) and s_norm <= scales.dual_tolerance(settings)


class SplitVariables:
    """Split Z carrying the regularizer and its scaled dual; lists for PARAFAC2 B"""

    def __init__(self, Z: Factor, mu: Factor):
        self.Z = Z
        self.mu = mu


class CouplingVariables:
    """Generating variable Delta of one coupling and one scaled dual per member"""

    def __init__(self, delta: np.ndarray, duals: List[np.ndarray]):
        self.delta = delta
        self.duals = duals


class Parafac2Variables:
    """B_k = P_k Delta_B split: orthonormal P_k, shared Delta_B, duals per slice"""

    def __init__(self, projections: List[np.ndarray], delta_B: np.ndarray, duals: List[np.ndarray]):
        self.projections = projections
        self.delta_B = delta_B
        self.duals = duals


class SolverState:
    """Everything the inner solvers read and write during one fit"""

    def __init__(self, model: ModelSpec, factors: FactorSet, settings: Optional[AdmmSettings] = None):
        self.model = model
        self.factors = factors
        self.settings = settings or AdmmSettings()
        self.splits: Dict[Member, SplitVariables] = {}
        self.couplings: List[Optional[CouplingVariables]] = [None] * len(model.couplings)
        self.parafac2: Dict[int, Parafac2Variables] = {}
        self.grams: Dict[Member, Union[np.ndarray, List[np.ndarray]]] = {}
        self.cholesky: Dict[Member, object] = {}
        self.rho: Dict[Member, Union[float, np.ndarray]] = {}
        self.diagnostics: Dict[str, Dict[str, float]] = {}
        for d, decomposition in enumerate(model.decompositions):
            for m in range(decomposition.n_modes):
                self.grams[(d, m)] = compute_gram(factors[d][m])

    def factor(self, member: Member) -> Factor:
        d, m = member
        return self.factors[d][m]

    def set_factor(self, member: Member, value: Factor):
        d, m = member
        self.factors[d][m] = value


def compute_gram(factor: Factor):
    if isinstance(factor, list):
        return [Bk.T @ Bk for Bk in factor]
    return factor.T @ factor


def refresh_caches(state: SolverState, member: Member) -> SolverState:
    """Recompute the Gram of a just-updated mode and drop Cholesky factors that depend on it"""
    d, m = member
    state.grams[member] = compute_gram(state.factor(member))
    for other in range(state.model.decompositions[d].n_modes):
        if other != m:
            state.cholesky.pop((d, other), None)
    return state


def step_size(trace: float, rank: int, label: str) -> float:
    """rho = trace(Gram) / R, falling back to 1 for an all-zero Gram"""
    if trace > 0 and np.isfinite(trace):
        return trace / rank
    warnings.warn(f"Gram trace of {label} is {trace}; using rho = 1", RuntimeWarning, stacklevel=3)
    return 1.0

"""
Random initialization of factors and ADMM auxiliaries
"""

from typing import Optional

import numpy as np

from aofusion.admm.state import (
    AdmmSettings, CouplingVariables, Parafac2Variables, SolverState, SplitVariables,
)
from aofusion.model.spec import (
    CouplingCase, DecompositionFactors, DecompositionKind, FactorSet, ModelSpec, MODE_B,
)
from aofusion.prox.registry import RegularizerKind, prox
from aofusion.tensor.kernels import procrustes_orthogonal


def _normalized_columns(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=0)
    norms[norms == 0] = 1.0
    return X / norms


def _draw_factor(rng: np.random.Generator, rows: int, rank: int, nonneg: bool) -> np.ndarray:
    values = rng.uniform(size=(rows, rank)) if nonneg else rng.standard_normal((rows, rank))
    return _normalized_columns(values)


def random_factors(model: ModelSpec, rng: np.random.Generator) -> FactorSet:
    """Standard normal factors (uniform on nonneg modes) with unit-norm columns"""
    decompositions = []
    for d, decomposition in enumerate(model.decompositions):
        factors = []
        for m in range(decomposition.n_modes):
            regularizer = decomposition.regularizers[m]
            nonneg = regularizer.nonneg or regularizer.kind == RegularizerKind.NONNEG.value
            rows, rank = model.factor_shape(d, m)
            if isinstance(rows, tuple):
                factors.append([_draw_factor(rng, J, rank, nonneg) for J in rows])
            else:
                factors.append(_draw_factor(rng, rows, rank, nonneg))
        decompositions.append(DecompositionFactors(decomposition.kind, factors))
    return FactorSet(decompositions)


def _feasible_split(rng: np.random.Generator, regularizer, shape) -> np.ndarray:
    Z = rng.uniform(size=shape)
    if regularizer.is_hard_constraint:
        Z = prox(regularizer, Z, 1.0)
    return Z


def draw_auxiliaries(state: SolverState, rng: np.random.Generator, duals_only: bool = False) -> SolverState:
    """
    Uniform [0, 1) splits, duals and generating variables; hard-constraint
    splits are projected so they are feasible from the start.
    """
    model = state.model
    for d, decomposition in enumerate(model.decompositions):
        for m in range(decomposition.n_modes):
            regularizer = decomposition.regularizers[m]
            if regularizer.is_none:
                continue
            factor = state.factors[d][m]
            ragged = isinstance(factor, list)
            shapes = [Bk.shape for Bk in factor] if ragged else [factor.shape]
            Z = None if duals_only else [_feasible_split(rng, regularizer, s) for s in shapes]
            mu = [rng.uniform(size=s) for s in shapes]
            if not ragged:
                Z = None if Z is None else Z[0]
                mu = mu[0]
            if duals_only:
                state.splits[(d, m)].mu = mu
            else:
                state.splits[(d, m)] = SplitVariables(Z, mu)

        if decomposition.kind == DecompositionKind.PARAFAC2:
            sizes, rank = model.factor_shape(d, MODE_B)
            duals = [rng.uniform(size=(J, rank)) for J in sizes]
            if duals_only:
                state.parafac2[d].duals = duals
            else:
                projections = [procrustes_orthogonal(rng.uniform(size=(J, rank))) for J in sizes]
                state.parafac2[d] = Parafac2Variables(projections, rng.uniform(size=(rank, rank)), duals)

    for c, coupling in enumerate(model.couplings):
        delta_shape = model.delta_shape(c)
        duals = []
        for d, m in coupling.members:
            if coupling.case in (CouplingCase.MODE_LEFT, CouplingCase.COMPONENT_LEFT):
                duals.append(rng.uniform(size=delta_shape))
            else:
                duals.append(rng.uniform(size=model.factor_shape(d, m)))
        if duals_only:
            state.couplings[c].duals = duals
        else:
            state.couplings[c] = CouplingVariables(rng.uniform(size=delta_shape), duals)
    return state


def initialize_state(
    model: ModelSpec,
    factors: FactorSet,
    rng: np.random.Generator,
    settings: Optional[AdmmSettings] = None,
) -> SolverState:
    """SolverState around given factors with freshly drawn auxiliaries"""
    state = SolverState(model, factors, settings)
    return draw_auxiliaries(state, rng)


def random_init(model: ModelSpec, seed, settings: Optional[AdmmSettings] = None) -> SolverState:
    """Seeded random factors and auxiliaries; state.factors holds the FactorSet"""
    rng = np.random.default_rng(seed)
    factors = random_factors(model, rng)
    return initialize_state(model, factors, rng, settings)

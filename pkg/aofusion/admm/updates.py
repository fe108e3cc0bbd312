"""
ADMM mode updates
Uncoupled static modes, coupled blocks (static and PARAFAC2 C members sharing
one Delta) and the double-split PARAFAC2 B mode
"""

import logging
import math
from typing import List, Optional

import numpy as np
import scipy.linalg as sla

from aofusion.admm.coupling import CouplingLink, DeltaUpdater
from aofusion.admm.projection import project_parafac2
from aofusion.admm.state import ResidualScales, SolverState, step_size, stop_check
from aofusion.admm.subproblems import FactorSubproblem, Parafac2CSubproblem, StaticSubproblem
from aofusion.model.spec import DecompositionKind, Member, MODE_A, MODE_B, MODE_C
from aofusion.prox.registry import prox

logger = logging.getLogger(__name__)


class UnsupportedCouplingError(ValueError):
    """Raised when a coupling involves a mode the solver cannot couple"""
    pass


def _norm(X) -> float:
    return float(np.linalg.norm(X))


def _make_subproblem(state: SolverState, member: Member, link: Optional[CouplingLink]) -> FactorSubproblem:
    d, m = member
    decomposition = state.model.decompositions[d]
    if decomposition.kind == DecompositionKind.PARAFAC2:
        if m == MODE_C:
            return Parafac2CSubproblem(state, member, link)
        if m == MODE_B:
            raise UnsupportedCouplingError("the PARAFAC2 B mode is updated by update_parafac2_B_mode")
    return StaticSubproblem(state, member, link)


def _split_converged(state: SolverState, member: Member, X: np.ndarray, Z_prev: np.ndarray, rho: float) -> bool:
    split = state.splits[member]
    scales = ResidualScales(
        constraint_length=X.size,
        primal_length=X.size,
        ax_norm=_norm(X),
        bz_norm=_norm(split.Z),
        rho=rho,
        dual_norm=_norm(split.mu),
    )
    return stop_check(_norm(X - split.Z), rho * _norm(split.Z - Z_prev), scales, state.settings)


def _run_block(state: SolverState, subproblems: List[FactorSubproblem], coupling_index: Optional[int], label: str):
    """Inner ADMM on one block until every constraint passes stop_check or the budget ends"""
    for sub in subproblems:
        sub.prepare()

    if len(subproblems) == 1 and not subproblems[0].has_split_terms:
        subproblems[0].solve(None, None)
        state.diagnostics[label] = {"inner_iterations": 0}
        return

    couple = state.couplings[coupling_index] if coupling_index is not None else None
    updater = None
    if couple is not None:
        coupling = state.model.couplings[coupling_index]
        updater = DeltaUpdater(
            coupling.case,
            [sub.link for sub in subproblems],
            [sub.coupling_weights() for sub in subproblems],
            couple.delta.shape,
        )

    iterations = 0
    converged = False
    for iterations in range(1, state.settings.max_inner_iters + 1):
        factors = []
        for i, sub in enumerate(subproblems):
            split = state.splits.get(sub.member)
            split_target = split.Z - split.mu if split is not None else None
            coupling_target = sub.link.target(couple.delta, couple.duals[i]) if couple is not None else None
            factors.append(sub.solve(split_target, coupling_target))

        delta_prev = None
        if couple is not None:
            delta_prev = couple.delta
            couple.delta = updater.solve(factors, couple.duals)

        converged = True
        for i, (sub, X) in enumerate(zip(subproblems, factors)):
            split = state.splits.get(sub.member)
            if split is not None:
                Z_prev = split.Z
                split.Z = prox(sub.regularizer, X + split.mu, sub.prox_step())
                split.mu = split.mu + X - split.Z
                converged &= _split_converged(state, sub.member, X, Z_prev, sub.prox_step())
            if couple is not None:
                link = sub.link
                residual = link.residual(X, couple.delta)
                couple.duals[i] = couple.duals[i] + residual
                rho = sub.prox_step()
                scales = ResidualScales(
                    constraint_length=residual.size,
                    primal_length=X.size,
                    ax_norm=_norm(link.forward(X)),
                    bz_norm=_norm(link.delta_side(couple.delta)),
                    rho=rho,
                    dual_norm=_norm(link.adjoint(couple.duals[i])),
                )
                s_norm = rho * _norm(link.adjoint(link.delta_side(couple.delta - delta_prev)))
                converged &= stop_check(_norm(residual), s_norm, scales, state.settings)
        if converged:
            break

    state.diagnostics[label] = {"inner_iterations": iterations, "converged": converged}


def update_coupled_modes(state: SolverState, coupling_index: int) -> SolverState:
    """Joint ADMM subproblem for every member of one coupling"""
    coupling = state.model.couplings[coupling_index]
    subproblems = []
    for (d, m), H in zip(coupling.members, coupling.transforms):
        link = CouplingLink(coupling.case, H, state.model.decompositions[d].rank)
        subproblems.append(_make_subproblem(state, (d, m), link))
    _run_block(state, subproblems, coupling_index, f"coupling[{coupling_index}]")
    return state


def update_static_mode(state: SolverState, d: int, m: int) -> SolverState:
    """ADMM update of a static mode; coupled modes are solved jointly with their partners"""
    decomposition = state.model.decompositions[d]
    if decomposition.kind == DecompositionKind.PARAFAC2 and m != MODE_A:
        raise ValueError(f"mode {m} of a PARAFAC2 decomposition is not a static mode")
    coupling_index = state.model.coupling_of(d, m)
    if coupling_index is not None:
        return update_coupled_modes(state, coupling_index)
    _run_block(state, [StaticSubproblem(state, (d, m))], None, state.model.labels()[(d, m)])
    return state


def update_parafac2_C_mode(state: SolverState, d: int) -> SolverState:
    """Row-wise ADMM update of the C mode of PARAFAC2 decomposition d"""
    if state.model.decompositions[d].kind != DecompositionKind.PARAFAC2:
        raise ValueError(f"decomposition {d} is not a PARAFAC2 decomposition")
    coupling_index = state.model.coupling_of(d, MODE_C)
    if coupling_index is not None:
        return update_coupled_modes(state, coupling_index)
    _run_block(state, [Parafac2CSubproblem(state, (d, MODE_C))], None, state.model.labels()[(d, MODE_C)])
    return state


def update_parafac2_B_mode(state: SolverState, d: int) -> SolverState:
    """
    Double-split update of the varying mode: B_k = Z_k carries the regularizer
    and B_k = P_k Delta_B the PARAFAC2 constraint. Per slice the primal system is

        B_k [w D_k A^T A D_k + (rho_k / 2) n I] = w X_k^T A D_k
            + (rho_k / 2) [(Z_k - mu_Z_k) + (P_k Delta_B - mu_Delta_k)]

    with n the number of active constraints (1 or 2).
    """
    member = (d, MODE_B)
    decomposition = state.model.decompositions[d]
    data = state.model.datasets[d]
    settings = state.settings
    factors = state.factors[d]
    A = factors[MODE_A]
    C = factors[MODE_C]
    R = decomposition.rank
    weight = state.model.weight(d)
    regularizer = decomposition.regularizers[MODE_B]
    split = state.splits.get(member)
    aux = state.parafac2[d]
    label = state.model.labels()[member]

    AtA = state.grams[(d, MODE_A)]
    grams = [AtA * np.outer(c, c) for c in C]
    products = [(Xk.T @ A) * c for Xk, c in zip(data, C)]
    rhos = np.array([step_size(float(np.trace(G)), R, f"{label}[{k}]") for k, G in enumerate(grams)])
    state.rho[member] = rhos
    n_terms = 2 if split is not None else 1
    chol = [sla.cho_factor(weight * G + (rho / 2.0) * n_terms * np.eye(R), lower=True) for G, rho in zip(grams, rhos)]
    state.cholesky[member] = chol

    iterations = 0
    converged = False
    for iterations in range(1, settings.max_inner_iters + 1):
        Bs = []
        for k, (L, M, rho) in enumerate(zip(chol, products, rhos)):
            rhs = weight * M + (rho / 2.0) * (aux.projections[k] @ aux.delta_B - aux.duals[k])
            if split is not None:
                rhs = rhs + (rho / 2.0) * (split.Z[k] - split.mu[k])
            Bs.append(sla.cho_solve(L, rhs.T).T)
        state.set_factor(member, Bs)

        feasible_prev = [P @ aux.delta_B for P in aux.projections]
        targets = [Bk + mu for Bk, mu in zip(Bs, aux.duals)]
        aux.projections, aux.delta_B, _ = project_parafac2(
            targets,
            weights=rhos if settings.weighted_projection else None,
            delta_B=aux.delta_B,
            max_rounds=settings.projection_max_rounds,
            tol=settings.projection_tol,
        )
        feasible = [P @ aux.delta_B for P in aux.projections]

        converged = True
        if split is not None:
            Z_prev = split.Z
            split.Z = [prox(regularizer, Bk + mu, rho) for Bk, mu, rho in zip(Bs, split.mu, rhos)]
            split.mu = [mu + Bk - Zk for mu, Bk, Zk in zip(split.mu, Bs, split.Z)]
            scales = ResidualScales(
                constraint_length=sum(Bk.size for Bk in Bs),
                primal_length=sum(Bk.size for Bk in Bs),
                ax_norm=math.sqrt(sum(_norm(Bk) ** 2 for Bk in Bs)),
                bz_norm=math.sqrt(sum(_norm(Zk) ** 2 for Zk in split.Z)),
                rho=1.0,
                dual_norm=math.sqrt(sum((rho * _norm(mu)) ** 2 for rho, mu in zip(rhos, split.mu))),
            )
            r_norm = math.sqrt(sum(_norm(Bk - Zk) ** 2 for Bk, Zk in zip(Bs, split.Z)))
            s_norm = math.sqrt(sum((rho * _norm(Zk - Zp)) ** 2 for rho, Zk, Zp in zip(rhos, split.Z, Z_prev)))
            converged &= stop_check(r_norm, s_norm, scales, settings)

        aux.duals = [mu + Bk - F for mu, Bk, F in zip(aux.duals, Bs, feasible)]
        scales = ResidualScales(
            constraint_length=sum(Bk.size for Bk in Bs),
            primal_length=sum(Bk.size for Bk in Bs),
            ax_norm=math.sqrt(sum(_norm(Bk) ** 2 for Bk in Bs)),
            bz_norm=math.sqrt(sum(_norm(F) ** 2 for F in feasible)),
            rho=1.0,
            dual_norm=math.sqrt(sum((rho * _norm(mu)) ** 2 for rho, mu in zip(rhos, aux.duals))),
        )
        r_norm = math.sqrt(sum(_norm(Bk - F) ** 2 for Bk, F in zip(Bs, feasible)))
        s_norm = math.sqrt(sum((rho * _norm(F - Fp)) ** 2 for rho, F, Fp in zip(rhos, feasible, feasible_prev)))
        converged &= stop_check(r_norm, s_norm, scales, settings)
        if converged:
            break

    state.diagnostics[label] = {"inner_iterations": iterations, "converged": converged}
    logger.debug("%s: %d inner iterations, converged=%s", label, iterations, converged)
    return state

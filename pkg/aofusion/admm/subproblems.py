"""
Factor subproblems for the ADMM blocks
Normal equations, step sizes and primal solves for static modes and the
row-wise PARAFAC2 C mode. Every primal system has the form

    w * data term + (rho / 2) * (split term + coupling term)

with one (rho / 2) I per active split or coupling constraint.
"""

from abc import ABC, abstractmethod
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from aofusion.admm.coupling import CouplingLink
from aofusion.admm.state import SolverState, step_size
from aofusion.model.spec import DecompositionKind, Member, MODE_A, MODE_B, MODE_C
from aofusion.tensor.kernels import mttkrp, solve_normal_equations

# Largest K*R for which the case-2a block system is factorized densely
DENSE_BLOCK_LIMIT = 64


def normal_equations(state: SolverState, member: Member) -> Tuple[np.ndarray, np.ndarray]:
    """Gram matrix and MTTKRP of a static mode, from the cached Grams of the other modes"""
    d, m = member
    decomposition = state.model.decompositions[d]
    data = state.model.datasets[d]
    factors = state.factors[d]
    grams = state.grams

    if decomposition.kind == DecompositionKind.CP:
        low, high = [n for n in range(3) if n != m]
        gram = grams[(d, low)] * grams[(d, high)]
        return gram, mttkrp(data, factors[low], factors[high], m)

    if decomposition.kind == DecompositionKind.MATRIX:
        other = 1 - m
        product = data @ factors[other] if m == 0 else data.T @ factors[other]
        return grams[(d, other)], product

    if m != MODE_A:
        raise ValueError(f"mode {m} of a PARAFAC2 decomposition is not a static mode")
    C = factors[MODE_C]
    gram = sum(np.outer(c, c) * BtB for c, BtB in zip(C, grams[(d, MODE_B)]))
    product = sum((Xk @ Bk) * c for Xk, Bk, c in zip(data, factors[MODE_B], C))
    return gram, product


class FactorSubproblem(ABC):
    """One factor inside an ADMM block"""

    def __init__(self, state: SolverState, member: Member, link: Optional[CouplingLink] = None):
        self.state = state
        self.member = member
        self.link = link
        d, m = member
        self.decomposition = state.model.decompositions[d]
        self.weight = state.model.weight(d)
        self.regularizer = self.decomposition.regularizers[m]
        self.regularized = not self.regularizer.is_none
        self.rank = self.decomposition.rank
        self.label = state.model.labels()[member]

    @property
    def has_split_terms(self) -> bool:
        return self.regularized or self.link is not None

    @abstractmethod
    def prepare(self):
        """Normal equations, step sizes and factorizations for this subproblem"""
        pass

    @abstractmethod
    def solve(self, split_target: Optional[np.ndarray], coupling_target: Optional[np.ndarray]) -> np.ndarray:
        """
        Primal update given (Z - mu_Z) and the coupling target; stores and
        returns the new factor.
        """
        pass

    @abstractmethod
    def coupling_weights(self):
        """Step size(s) weighting this member in the Delta update"""
        pass

    @abstractmethod
    def prox_step(self) -> float:
        pass


class StaticSubproblem(FactorSubproblem):
    """Full-matrix update of a CP mode, a matrix mode or the PARAFAC2 A mode"""

    def prepare(self):
        self.gram, self.product = normal_equations(self.state, self.member)
        self.rho = step_size(float(np.trace(self.gram)), self.rank, self.label)
        self.state.rho[self.member] = self.rho
        half = self.rho / 2.0

        self._sylvester = None
        if not self.has_split_terms:
            self._lhs = self.weight * self.gram
            self.state.cholesky.pop(self.member, None)
            return

        right = self.weight * self.gram
        if self.regularized:
            right = right + half * np.eye(self.rank)
        left_gram = self.link.left_gram() if self.link is not None else None
        if left_gram is not None:
            self._sylvester = (half * left_gram, right)
            return
        if self.link is not None:
            right = right + half * self.link.right_gram()
        self._factor = sla.cho_factor(right, lower=True)
        self.state.cholesky[self.member] = self._factor

    def solve(self, split_target, coupling_target):
        half = self.rho / 2.0
        rhs = self.weight * self.product
        if not self.has_split_terms:
            X = solve_normal_equations(self._lhs, rhs)
        else:
            if split_target is not None:
                rhs = rhs + half * split_target
            if coupling_target is not None:
                rhs = rhs + half * coupling_target
            if self._sylvester is not None:
                left, right = self._sylvester
                X = sla.solve_sylvester(left, right, rhs)
            else:
                X = sla.cho_solve(self._factor, rhs.T).T
        self.state.set_factor(self.member, X)
        return X

    def coupling_weights(self):
        return self.rho

    def prox_step(self):
        return self.rho


def row_system_lhs(gram: np.ndarray, weight: float, rho: float, extra: Optional[np.ndarray]) -> np.ndarray:
    """w G_k + (rho_k / 2) * extra for one row of C"""
    lhs = weight * gram
    if extra is not None:
        lhs = lhs + (rho / 2.0) * extra
    return lhs


def assemble_block_system(
    grams: np.ndarray,
    weight: float,
    rho: float,
    transform_gram: np.ndarray,
    regularized: bool,
) -> sp.csc_matrix:
    """
    KR x KR system of case 2a in the row-stacked unknown vec(C^T):
    w blockdiag(G_k) + (rho / 2) (I [if regularized] + (H^T H kron I_R)).
    """
    K, R, _ = grams.shape
    system = sp.block_diag(list(weight * grams), format="csc")
    coupling = sp.kron(sp.csc_matrix(transform_gram), sp.identity(R), format="csc")
    extra = coupling + sp.identity(K * R, format="csc") if regularized else coupling
    return (system + (rho / 2.0) * extra).tocsc()


class Parafac2CSubproblem(FactorSubproblem):
    """Row-wise update of the PARAFAC2 C mode with one step size per row"""

    def prepare(self):
        d, _ = self.member
        data = self.state.model.datasets[d]
        factors = self.state.factors[d]
        A = factors[MODE_A]
        AtA = self.state.grams[(d, MODE_A)]
        self.grams = np.stack([AtA * BtB for BtB in self.state.grams[(d, MODE_B)]])
        self.products = np.stack([np.sum(A * (Xk @ Bk), axis=0) for Xk, Bk in zip(data, factors[MODE_B])])
        K = self.grams.shape[0]
        traces = np.trace(self.grams, axis1=1, axis2=2)

        self.block = self.link is not None and self.link.left_gram() is not None
        if self.block:
            rho = step_size(float(traces.sum()) / K, self.rank, self.label)
            self.rhos = np.full(K, rho)
        else:
            self.rhos = np.array([step_size(float(t), self.rank, f"{self.label}[{k}]") for k, t in enumerate(traces)])
        self.state.rho[self.member] = self.rhos

        if not self.has_split_terms:
            self._row_factors = None
            self.state.cholesky.pop(self.member, None)
            return

        if self.block:
            system = assemble_block_system(
                self.grams, self.weight, float(self.rhos[0]), self.link.left_gram(), self.regularized
            )
            if system.shape[0] <= DENSE_BLOCK_LIMIT:
                self._block_factor = ("dense", sla.cho_factor(system.toarray(), lower=True))
            else:
                self._block_factor = ("sparse", spla.splu(system))
            self.state.cholesky[self.member] = self._block_factor
            return

        extra = np.eye(self.rank) if self.regularized else np.zeros((self.rank, self.rank))
        if self.link is not None:
            extra = extra + self.link.right_gram()
        self._row_factors: List = [
            sla.cho_factor(row_system_lhs(G, self.weight, rho, extra), lower=True)
            for G, rho in zip(self.grams, self.rhos)
        ]
        self.state.cholesky[self.member] = self._row_factors

    def solve(self, split_target, coupling_target):
        rhs = self.weight * self.products
        if self.has_split_terms:
            half = (self.rhos / 2.0)[:, None]
            if split_target is not None:
                rhs = rhs + half * split_target
            if coupling_target is not None:
                rhs = rhs + half * coupling_target

        if not self.has_split_terms:
            C = np.vstack([solve_normal_equations(self.weight * G, row[None, :]) for G, row in zip(self.grams, rhs)])
        elif self.block:
            kind, factor = self._block_factor
            vector = rhs.ravel()
            solution = sla.cho_solve(factor, vector) if kind == "dense" else factor.solve(vector)
            C = solution.reshape(rhs.shape)
        else:
            C = np.vstack([sla.cho_solve(factor, row) for factor, row in zip(self._row_factors, rhs)])
        self.state.set_factor(self.member, C)
        return C

    def coupling_weights(self):
        if self.block:
            return float(self.rhos[0])
        return self.rhos

    def prox_step(self):
        return float(self.rhos.max())

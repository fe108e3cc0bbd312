"""
Numerical kernels for factor updates
Khatri-Rao and Gram identities, MTTKRP, Cholesky solves and Procrustes.

Unfoldings follow the Kolda-Bader convention: in the mode-n unfolding of an
I x J x K tensor the remaining indices run with the lowest mode fastest.
"""

import numpy as np
import scipy.linalg as sla


class ShapeMismatchError(ValueError):
    """Raised when kernel operands are not conformable"""
    pass


class NotPositiveDefiniteError(ValueError):
    """Raised when a Cholesky factorization is requested for a matrix that is not SPD"""
    pass


def _check_rank(left: np.ndarray, right: np.ndarray, what: str) -> int:
    if left.ndim != 2 or right.ndim != 2:
        raise ShapeMismatchError(f"{what}: expected matrices, got ndim {left.ndim} and {right.ndim}")
    if left.shape[1] != right.shape[1]:
        raise ShapeMismatchError(
            f"{what}: column count mismatch ({left.shape[1]} vs {right.shape[1]})"
        )
    return left.shape[1]


def khatri_rao(B: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Columnwise Kronecker product; column r is kron(B[:, r], A[:, r])"""
    _check_rank(B, A, "khatri_rao")
    return sla.khatri_rao(B, A)


def gram_hadamard(A: np.ndarray, Bk: np.ndarray) -> np.ndarray:
    """(A^T A) * (Bk^T Bk), the Gram matrix of khatri_rao(Bk, A)"""
    _check_rank(A, Bk, "gram_hadamard")
    return (A.T @ A) * (Bk.T @ Bk)


def unfold(Y: np.ndarray, mode: int) -> np.ndarray:
    """Mode-n unfolding (Kolda-Bader ordering)"""
    if Y.ndim != 3:
        raise ShapeMismatchError(f"unfold: expected a 3-way tensor, got ndim {Y.ndim}")
    return np.reshape(np.moveaxis(Y, mode, 0), (Y.shape[mode], -1), order="F")


_MTTKRP_SUBSCRIPTS = {
    0: "ijk,jr,kr->ir",
    1: "ijk,ir,kr->jr",
    2: "ijk,ir,jr->kr",
}


def mttkrp(Y: np.ndarray, F2: np.ndarray, F3: np.ndarray, mode: int) -> np.ndarray:
    """
    Y_(mode) (F3 kr F2) without forming the Khatri-Rao product.

    F2 is the factor of the lower non-target mode, F3 of the higher one.
    """
    if Y.ndim != 3:
        raise ShapeMismatchError(f"mttkrp: expected a 3-way tensor, got ndim {Y.ndim}")
    if mode not in _MTTKRP_SUBSCRIPTS:
        raise ShapeMismatchError(f"mttkrp: mode must be 0, 1 or 2, got {mode}")
    _check_rank(F2, F3, "mttkrp")
    others = [n for n in range(3) if n != mode]
    for factor, n in zip((F2, F3), others):
        if factor.shape[0] != Y.shape[n]:
            raise ShapeMismatchError(
                f"mttkrp: factor for mode {n} has {factor.shape[0]} rows, tensor has {Y.shape[n]}"
            )
    return np.einsum(_MTTKRP_SUBSCRIPTS[mode], Y, F2, F3, optimize=True)


def cholesky_factor(S: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L L^T = S"""
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeMismatchError(f"cholesky_factor: expected a square matrix, got {S.shape}")
    scale = max(np.abs(S).max(initial=0.0), 1.0)
    if not np.allclose(S, S.T, rtol=0.0, atol=1e-12 * scale):
        raise NotPositiveDefiniteError("cholesky_factor: matrix is not symmetric")
    try:
        return sla.cholesky(S, lower=True)
    except sla.LinAlgError as e:
        raise NotPositiveDefiniteError(f"cholesky_factor: {e}") from e


def cholesky_solve(L: np.ndarray, RHS: np.ndarray) -> np.ndarray:
    """Solve (L L^T) X = RHS by one forward and one backward substitution"""
    if RHS.shape[0] != L.shape[0]:
        raise ShapeMismatchError(
            f"cholesky_solve: factor is {L.shape[0]}x{L.shape[1]}, right-hand side has {RHS.shape[0]} rows"
        )
    return sla.cho_solve((L, True), RHS)


def procrustes_orthogonal(M: np.ndarray) -> np.ndarray:
    """
    P = U V^T from the thin SVD of M, maximizing trace(P^T M) over P^T P = I.

    For rank-deficient M the maximizer is not unique; any SVD gives a valid one.
    """
    if M.ndim != 2 or M.shape[0] < M.shape[1]:
        raise ShapeMismatchError(f"procrustes_orthogonal: need J >= R, got {M.shape}")
    U, _, Vh = sla.svd(M, full_matrices=False)
    return U @ Vh


def symmetric_sqrt(S: np.ndarray) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix"""
    eigvals, eigvecs = sla.eigh(S)
    return (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T



def solve_normal_equations(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """X with X gram = rhs for a symmetric PSD gram; minimum-norm lstsq when gram is singular"""
    if gram.ndim != 2 or gram.shape[0] != gram.shape[1] or rhs.shape[-1] != gram.shape[0]:
        raise ShapeMismatchError(
            f"solve_normal_equations: gram {gram.shape} does not match right-hand side {rhs.shape}"
        )
    try:
        return sla.solve(gram, rhs.T, assume_a="pos").T
    except sla.LinAlgError:
        return sla.lstsq(gram, rhs.T)[0].T

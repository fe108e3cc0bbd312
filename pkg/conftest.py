"""
Shared fixtures for the aofusion test suites
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from aofusion.model.spec import (  # noqa: E402
    DecompositionFactors, DecompositionKind, DecompositionSpec, FactorSet, ModelSpec,
)
from aofusion.tensor.containers import RaggedTensor  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end fits (deselect with -m 'not slow')")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_orthonormal(rng, rows: int, rank: int) -> np.ndarray:
    Q, _ = np.linalg.qr(rng.standard_normal((rows, rank)))
    return Q


def parafac2_factors(rng, I=8, sizes=(7, 9, 8, 10, 7), R=2, nonneg=False):
    """A, [B_k = P_k Delta_B], C of an exact PARAFAC2 model"""
    draw = rng.uniform if nonneg else rng.standard_normal
    A = draw(size=(I, R))
    delta_B = rng.uniform(0.5, 1.5, size=(R, R))
    Bs = [random_orthonormal(rng, J, R) @ delta_B for J in sizes]
    C = rng.uniform(0.5, 1.5, size=(len(sizes), R))
    return A, Bs, C


def parafac2_data(A, Bs, C) -> RaggedTensor:
    return RaggedTensor([(A * C[k]) @ Bk.T for k, Bk in enumerate(Bs)])


def cp_tensor(A, B, C) -> np.ndarray:
    return np.einsum("ir,jr,kr->ijk", A, B, C)


@pytest.fixture
def cp_model(rng):
    """Noise-free rank-2 CP tensor with its generating factors"""
    factors = [rng.standard_normal((n, 2)) for n in (6, 5, 4)]
    X = cp_tensor(*factors)
    X = X / np.linalg.norm(X)
    model = ModelSpec([X], [DecompositionSpec("cp", 2, 1.0)])
    return model, factors


@pytest.fixture
def parafac2_model(rng):
    """Noise-free rank-2 PARAFAC2 dataset with its truth"""
    A, Bs, C = parafac2_factors(rng)
    X = parafac2_data(A, Bs, C)
    scale = 1.0 / X.norm()
    A = A * scale
    truth = FactorSet([DecompositionFactors(DecompositionKind.PARAFAC2, [A, Bs, C])])
    model = ModelSpec([X.scaled(scale)], [DecompositionSpec("parafac2", 2, 1.0)])
    return model, truth

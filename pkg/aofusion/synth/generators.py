"""
Synthetic coupled datasets
Every generator is a pure function of its arguments and seed and returns a
SyntheticProblem: noisy normalized data, the clean data, the true factors
and the model the experiment fits.
"""

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from aofusion.model.spec import (
    CouplingCase, CouplingSpec, DecompositionFactors, DecompositionKind, DecompositionSpec,
    FactorSet, ModelSpec, MODE_A, MODE_C, selector_transform,
)
from aofusion.prox.registry import RegularizerKind, RegularizerSpec
from aofusion.tensor.containers import Dataset, RaggedTensor, dataset_norm

EXPERIMENTS = ("exp1a", "exp1b", "exp1c", "exp2a", "exp2b", "exp2c", "exp2d", "exp3", "exp4")

# Background noise on the exp3 network patterns
EXP3_PATTERN_NOISE = 0.03
# Cluster centres sit at (+-EXP3_CLUSTER_OFFSET, +-EXP3_CLUSTER_OFFSET)
EXP3_CLUSTER_OFFSET = 1.0
EXP3_CLUSTER_SPREAD = 0.1
EXP3_RIDGE = 1e-4
EXP4_SMOOTHNESS = 0.1


class UnknownExperimentError(ValueError):
    """Raised for an experiment id without a generator"""
    pass


class SyntheticProblem:
    """Generated datasets together with their ground truth and model"""

    def __init__(
        self,
        name: str,
        datasets: List[Dataset],
        clean: List[Dataset],
        truth: FactorSet,
        model: ModelSpec,
        seed: int,
        labels: Optional[np.ndarray] = None,
        sharing: Optional[Dict[str, List[bool]]] = None,
        clean_A: Optional[np.ndarray] = None,
    ):
        self.name = name
        self.datasets = datasets
        self.clean = clean
        self.truth = truth
        self.model = model
        self.seed = seed
        self.labels = labels
        self.sharing = sharing
        self.clean_A = clean_A

    def __repr__(self):
        return f"SyntheticProblem({self.name}, seed={self.seed}, datasets={len(self.datasets)})"


def add_noise(X: Dataset, eta: float, seed) -> Dataset:
    """X + eta * N * ||X|| / ||N|| with standard normal N, scaled to unit Frobenius norm"""
    if eta < 0:
        raise ValueError(f"noise level must be >= 0, got {eta}")
    norm = dataset_norm(X)
    if norm == 0:
        raise ValueError("cannot add relative noise to an all-zero dataset")
    rng = np.random.default_rng(seed)
    if isinstance(X, RaggedTensor):
        noise = [rng.standard_normal(Xk.shape) for Xk in X]
        scale = eta * norm / np.sqrt(sum(np.sum(N * N) for N in noise))
        noisy = RaggedTensor([Xk + scale * N for Xk, N in zip(X, noise)])
        return noisy.scaled(1.0 / noisy.norm())
    noise = rng.standard_normal(X.shape)
    noisy = X + eta * noise * norm / np.linalg.norm(noise.ravel())
    return noisy / np.linalg.norm(noisy.ravel())


def _check_rank(R: int, dims: Sequence[int]):
    if R < 1 or R > min(dims):
        raise ValueError(f"rank {R} must lie in [1, {min(dims)}] for dims {tuple(dims)}")


def _parafac2_slices(A: np.ndarray, Bs: Sequence[np.ndarray], C: np.ndarray) -> RaggedTensor:
    return RaggedTensor([(A * C[k]) @ Bk.T for k, Bk in enumerate(Bs)])


def _shifted_slices(rng: np.random.Generator, J: int, K: int, R: int) -> List[np.ndarray]:
    """Circular row shifts of one pattern; every B_k^T B_k is identical"""
    base = rng.uniform(size=(J, R))
    return [np.roll(base, k, axis=0) for k in range(K)]


def _nonneg() -> RegularizerSpec:
    return RegularizerSpec(RegularizerKind.NONNEG)


def _noisy(rng: np.random.Generator, clean: Sequence[Dataset], noise: Sequence[float]) -> List[Dataset]:
    seeds = rng.integers(0, 2 ** 32, size=len(clean))
    return [add_noise(X, eta, int(s)) for X, eta, s in zip(clean, noise, seeds)]


def gen_exp1(
    seed: int = 0,
    dims: Tuple[int, int, int] = (40, 60, 50),
    matrix_columns: int = 60,
    rank: int = 4,
    noise: Tuple[float, float] = (0.2, 0.2),
    name: str = "exp1a",
) -> SyntheticProblem:
    """Nonnegative PARAFAC2 tensor and matrix with C = E"""
    I, J, K = dims
    _check_rank(rank, (I, J, K, matrix_columns))
    rng = np.random.default_rng(seed)
    A = rng.uniform(size=(I, rank))
    Bs = _shifted_slices(rng, J, K, rank)
    C = rng.uniform(0.1, 1.1, size=(K, rank))
    F = rng.uniform(size=(matrix_columns, rank))
    E = C.copy()

    clean = [_parafac2_slices(A, Bs, C), E @ F.T]
    datasets = _noisy(rng, clean, noise)
    truth = FactorSet([
        DecompositionFactors(DecompositionKind.PARAFAC2, [A, Bs, C]),
        DecompositionFactors(DecompositionKind.MATRIX, [E, F]),
    ])
    model = ModelSpec(
        datasets,
        [
            DecompositionSpec("parafac2", rank, 0.5, [_nonneg(), _nonneg(), _nonneg()], name="X"),
            DecompositionSpec("matrix", rank, 0.5, [_nonneg(), _nonneg()], name="Y", mode_names=("E", "F")),
        ],
        [CouplingSpec([(0, MODE_C), (1, 0)], CouplingCase.EXACT)],
    )
    return SyntheticProblem(name, datasets, clean, truth, model, seed)


def gen_exp2(
    seed: int = 0,
    dims: Tuple[int, int, int] = (40, 60, 50),
    cp_dims: Tuple[int, int] = (60, 50),
    rank: int = 4,
    noise: Tuple[float, float] = (0.2, 0.2),
    name: str = "exp2a",
) -> SyntheticProblem:
    """Nonnegative PARAFAC2 tensor and CP tensor, C coupled to the first CP mode"""
    I, J, K = dims
    _check_rank(rank, (I, J, K) + tuple(cp_dims))
    rng = np.random.default_rng(seed)
    A = rng.uniform(size=(I, rank))
    Bs = _shifted_slices(rng, J, K, rank)
    C = rng.uniform(0.1, 1.1, size=(K, rank))
    E = C.copy()
    F = rng.uniform(size=(cp_dims[0], rank))
    G = rng.uniform(size=(cp_dims[1], rank))

    clean = [_parafac2_slices(A, Bs, C), np.einsum("ir,jr,kr->ijk", E, F, G)]
    datasets = _noisy(rng, clean, noise)
    truth = FactorSet([
        DecompositionFactors(DecompositionKind.PARAFAC2, [A, Bs, C]),
        DecompositionFactors(DecompositionKind.CP, [E, F, G]),
    ])
    model = ModelSpec(
        datasets,
        [
            DecompositionSpec("parafac2", rank, 0.5, [_nonneg(), _nonneg(), _nonneg()], name="X"),
            DecompositionSpec("cp", rank, 0.5, [_nonneg()] * 3, name="Y", mode_names=("E", "F", "G")),
        ],
        [CouplingSpec([(0, MODE_C), (1, 0)], CouplingCase.EXACT)],
    )
    return SyntheticProblem(name, datasets, clean, truth, model, seed)


def _window(J: int, start: float, length: float) -> np.ndarray:
    rows = np.arange(J)
    return ((rows >= round(start)) & (rows < round(start + length))).astype(np.float64)


def _evolving_networks(rng: np.random.Generator, J: int, K: int) -> List[np.ndarray]:
    """Shrinking, shifting and growing windows with Gaussian background"""
    Bs = []
    for k in range(K):
        t = k / max(K - 1, 1)
        shrinking = _window(J, 0, J / 3 * (1 - 0.5 * t))
        shifting = _window(J, J / 3 + J / 3 * t - J / 12, J / 6)
        growing = _window(J, 2 * J / 3, J / 6 + J / 6 * t)
        pattern = np.column_stack([shrinking, shifting, growing])
        Bs.append(pattern + EXP3_PATTERN_NOISE * rng.standard_normal(pattern.shape))
    return Bs


def _temporal_patterns(rng: np.random.Generator, K: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, K)
    exponential = np.exp(2.0 * t) / np.exp(2.0)
    sigmoid = 1.0 / (1.0 + np.exp(-12.0 * (t - 0.5)))
    return np.column_stack([exponential, sigmoid, rng.uniform(size=K)])


def cluster_labels(n_clusters: int = 4, per_cluster: int = 10) -> np.ndarray:
    return np.repeat(np.arange(n_clusters), per_cluster)


def gen_exp3(
    seed: int = 0,
    a_noise: float = 0.0,
    coupling: bool = True,
    ridge: bool = False,
    dims: Tuple[int, int, int] = (40, 120, 50),
    matrix_columns: int = 60,
    name: str = "exp3",
) -> SyntheticProblem:
    """
    Non-PARAFAC2 evolving networks fused with a static matrix through a shared
    clustered A. Noise only perturbs the A used to build the tensor.
    """
    I, J, K = dims
    rank = 3
    if I % 4:
        raise ValueError(f"exp3 needs a row count divisible by 4, got {I}")
    rng = np.random.default_rng(seed)
    labels = cluster_labels(4, I // 4)
    centers = EXP3_CLUSTER_OFFSET * np.array([[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]])
    A = np.column_stack([
        centers[labels] + EXP3_CLUSTER_SPREAD * rng.standard_normal((I, 2)),
        EXP3_CLUSTER_OFFSET * rng.standard_normal(I),
    ])
    Bs = _evolving_networks(rng, J, K)
    C = _temporal_patterns(rng, K)
    F = rng.uniform(size=(matrix_columns, rank))

    N = rng.standard_normal(A.shape)
    A_perturbed = A + a_noise * N * np.linalg.norm(A) / np.linalg.norm(N)
    E = A.copy()

    clean = [_parafac2_slices(A_perturbed, Bs, C), E @ F.T]
    datasets = _noisy(rng, clean, (0.0, 0.0))
    truth = FactorSet([
        DecompositionFactors(DecompositionKind.PARAFAC2, [A_perturbed, Bs, C]),
        DecompositionFactors(DecompositionKind.MATRIX, [E, F]),
    ])

    def regularizer(nonneg: bool) -> Optional[RegularizerSpec]:
        if ridge:
            return RegularizerSpec(RegularizerKind.RIDGE, EXP3_RIDGE, nonneg=nonneg)
        return _nonneg() if nonneg else None

    model = ModelSpec(
        datasets,
        [
            DecompositionSpec(
                "parafac2", rank, 0.5, [regularizer(False), regularizer(False), regularizer(True)], name="X",
            ),
            DecompositionSpec(
                "matrix", rank, 0.5, [regularizer(False), regularizer(True)], name="Y", mode_names=("E", "F"),
            ),
        ],
        [CouplingSpec([(0, MODE_A), (1, 0)], CouplingCase.EXACT)] if coupling else [],
    )
    return SyntheticProblem(name, datasets, clean, truth, model, seed, labels=labels, clean_A=A)


def _smooth_orthonormal(rng: np.random.Generator, J: int, R: int) -> np.ndarray:
    """Orthonormalized sums of three low-frequency sinusoids per column"""
    x = np.linspace(0.0, 1.0, J)[:, None]
    columns = []
    for _ in range(R):
        frequencies = rng.uniform(0.5, 2.0, size=3)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
        amplitudes = rng.uniform(0.5, 1.0, size=3)
        columns.append(np.sum(amplitudes * np.sin(2.0 * np.pi * frequencies * x + phases), axis=1))
    Q, _ = np.linalg.qr(np.column_stack(columns))
    return Q


def gen_exp4(
    seed: int = 0,
    dims: Tuple[int, int, int] = (30, 200, 30),
    cp_dims: Tuple[int, int] = (20, 50),
    noise: Tuple[float, float] = (0.5, 0.5),
    coupled_mode: str = "C",
    name: str = "exp4",
) -> SyntheticProblem:
    """
    Smooth PARAFAC2 tensor and CP tensor sharing two of three components
    through a four-column Delta. coupled_mode="A" couples A instead of C.
    """
    I, J, K = dims
    rank = 3
    if coupled_mode not in ("A", "C"):
        raise ValueError(f"coupled_mode must be 'A' or 'C', got {coupled_mode!r}")
    shared_rows = K if coupled_mode == "C" else I
    rng = np.random.default_rng(seed)

    delta = rng.uniform(size=(shared_rows, 4)) + 0.1
    H_X = selector_transform(4, [0, 1, 2])
    H_Y = selector_transform(4, [0, 1, 3])
    delta_B = rng.standard_normal((rank, rank))
    Bs = [_smooth_orthonormal(rng, J, rank) @ delta_B for _ in range(K)]
    F = rng.standard_normal((cp_dims[0], rank))
    G = rng.standard_normal((cp_dims[1], rank))
    if coupled_mode == "C":
        A = rng.standard_normal((I, rank))
        C = delta @ H_X
    else:
        A = delta @ H_X
        C = rng.uniform(size=(K, rank)) + 0.1
    E = delta @ H_Y

    clean = [_parafac2_slices(A, Bs, C), np.einsum("ir,jr,kr->ijk", E, F, G)]
    datasets = _noisy(rng, clean, noise)
    truth = FactorSet([
        DecompositionFactors(DecompositionKind.PARAFAC2, [A, Bs, C]),
        DecompositionFactors(DecompositionKind.CP, [E, F, G]),
    ])

    ball = RegularizerSpec(RegularizerKind.UNIT_BALL)
    nonneg_ball = RegularizerSpec(RegularizerKind.UNIT_BALL, nonneg=True)
    smooth = RegularizerSpec(RegularizerKind.GRAPH_LAPLACIAN, EXP4_SMOOTHNESS)
    member = (0, MODE_C) if coupled_mode == "C" else (0, MODE_A)
    if coupled_mode == "C":
        x_regularizers = [ball, smooth, nonneg_ball]
    else:
        x_regularizers = [nonneg_ball, smooth, nonneg_ball]
    model = ModelSpec(
        datasets,
        [
            DecompositionSpec("parafac2", rank, 0.5, x_regularizers, name="X"),
            DecompositionSpec("cp", rank, 0.5, [nonneg_ball, None, None], name="Y", mode_names=("E", "F", "G")),
        ],
        [CouplingSpec([member, (1, 0)], CouplingCase.COMPONENT_GENERATED, [H_X, H_Y])],
    )
    sharing = {
        f"X.{coupled_mode}": [True, True, False],
        "Y.E": [True, True, False],
    }
    return SyntheticProblem(name, datasets, clean, truth, model, seed, sharing=sharing)


_GENERATORS = {
    "exp1a": (gen_exp1, {}),
    "exp1b": (gen_exp1, {"dims": (200, 250, 200), "matrix_columns": 300}),
    "exp1c": (gen_exp1, {"noise": (0.8, 0.2)}),
    "exp2a": (gen_exp2, {}),
    "exp2b": (gen_exp2, {"dims": (200, 250, 200), "cp_dims": (300, 200)}),
    "exp2c": (gen_exp2, {"noise": (0.8, 0.2)}),
    "exp2d": (gen_exp2, {"rank": 10}),
    "exp3": (gen_exp3, {}),
    "exp4": (gen_exp4, {}),
}


def make_problem(experiment: str, seed: int = 0, **overrides) -> SyntheticProblem:
    """Generator of a named experiment with its canonical settings, updated by overrides"""
    if experiment not in _GENERATORS:
        raise UnknownExperimentError(
            f"Unknown experiment '{experiment}', expected one of {', '.join(EXPERIMENTS)}"
        )
    generator, defaults = _GENERATORS[experiment]
    kwargs = dict(defaults)
    kwargs.update(overrides)
    kwargs.setdefault("name", experiment)
    return generator(seed=seed, **kwargs)

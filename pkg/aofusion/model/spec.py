"""
Model description for coupled factorizations
Datasets, decompositions, per-mode regularizers, couplings and factor sets
"""

from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from aofusion.prox.registry import RegularizerSpec
from aofusion.tensor.containers import Dataset, RaggedTensor


class DecompositionKind(Enum):
    """Decomposition attached to one dataset"""
    CP = "cp"
    PARAFAC2 = "parafac2"
    MATRIX = "matrix"


class CouplingCase(Enum):
    """Linear coupling between factor matrices X_i and a generating variable Delta"""
    EXACT = "1"            # X = Delta
    MODE_LEFT = "2a"       # H X = Delta
    MODE_GENERATED = "2b"  # X = H Delta
    COMPONENT_LEFT = "3a"  # X H = Delta
    COMPONENT_GENERATED = "3b"  # X = Delta H


# PARAFAC2 mode ids
MODE_A = 0
MODE_B = 1
MODE_C = 2

N_MODES = {
    DecompositionKind.CP: 3,
    DecompositionKind.PARAFAC2: 3,
    DecompositionKind.MATRIX: 2,
}

DEFAULT_MODE_NAMES = {
    DecompositionKind.CP: ("A", "B", "C"),
    DecompositionKind.PARAFAC2: ("A", "B", "C"),
    DecompositionKind.MATRIX: ("A", "B"),
}

# B first so the C rows see fresh B_k Grams
UPDATE_ORDER = {
    DecompositionKind.CP: (0, 1, 2),
    DecompositionKind.PARAFAC2: (MODE_B, MODE_A, MODE_C),
    DecompositionKind.MATRIX: (0, 1),
}

Member = Tuple[int, int]
Factor = Union[np.ndarray, List[np.ndarray]]


class DecompositionSpec:
    """Kind, rank, weight and per-mode regularizers of one decomposition"""

    def __init__(
        self,
        kind: Union[str, DecompositionKind],
        rank: int,
        weight: Optional[float] = None,
        regularizers: Optional[Sequence[Optional[RegularizerSpec]]] = None,
        name: Optional[str] = None,
        mode_names: Optional[Sequence[str]] = None,
    ):
        self.kind = kind if isinstance(kind, DecompositionKind) else DecompositionKind(str(kind).lower())
        self.rank = int(rank)
        self.weight = None if weight is None else float(weight)
        n_modes = N_MODES[self.kind]
        regularizers = list(regularizers) if regularizers is not None else [None] * n_modes
        self.regularizers: List[RegularizerSpec] = [r if r is not None else RegularizerSpec.none() for r in regularizers]
        self.name = name
        self.mode_names = tuple(mode_names) if mode_names is not None else DEFAULT_MODE_NAMES[self.kind]

    @property
    def n_modes(self) -> int:
        return N_MODES[self.kind]

    @property
    def update_order(self) -> Tuple[int, ...]:
        return UPDATE_ORDER[self.kind]

    def is_varying_mode(self, mode: int) -> bool:
        return self.kind == DecompositionKind.PARAFAC2 and mode == MODE_B

    def is_regularized(self, mode: int) -> bool:
        return not self.regularizers[mode].is_none

    def __repr__(self):
        return f"DecompositionSpec({self.kind.value}, R={self.rank}, name={self.name})"


class CouplingSpec:
    """
    Members coupled through one generating variable Delta.

    transforms[i] is the matrix of member i: H (m1 x n_i) for 2a, H (n_i x m1)
    for 2b, H (R_i x m2) for 3a, H (m2 x R_i) for 3b; unused for case 1.
    """

    def __init__(
        self,
        members: Sequence[Member],
        case: Union[str, CouplingCase] = CouplingCase.EXACT,
        transforms: Optional[Sequence[Optional[np.ndarray]]] = None,
        delta_shape: Optional[Tuple[int, int]] = None,
    ):
        self.members: List[Member] = [(int(d), int(m)) for d, m in members]
        self.case = case if isinstance(case, CouplingCase) else CouplingCase(str(case).lower())
        if transforms is None:
            transforms = [None] * len(self.members)
        self.transforms: List[Optional[np.ndarray]] = [
            None if t is None else np.asarray(t, dtype=np.float64) for t in transforms
        ]
        self.delta_shape = None if delta_shape is None else (int(delta_shape[0]), int(delta_shape[1]))

    def __repr__(self):
        return f"CouplingSpec(case={self.case.value}, members={self.members})"


def selector_transform(delta_columns: int, selected: Sequence[int]) -> np.ndarray:
    """
    Partial-sharing selector for case 3b: X = Delta H with H made of identity
    columns, so component r of X is column selected[r] of Delta.
    """
    H = np.zeros((delta_columns, len(selected)))
    for r, column in enumerate(selected):
        H[column, r] = 1.0
    return H


class ModelSpec:
    """Datasets with their decompositions and couplings"""

    def __init__(
        self,
        datasets: Sequence[Dataset],
        decompositions: Sequence[DecompositionSpec],
        couplings: Sequence[CouplingSpec] = (),
    ):
        self.datasets: List[Dataset] = list(datasets)
        self.decompositions: List[DecompositionSpec] = list(decompositions)
        self.couplings: List[CouplingSpec] = list(couplings)
        for d, decomposition in enumerate(self.decompositions):
            if decomposition.name is None:
                decomposition.name = f"X{d}"

    def weight(self, d: int) -> float:
        w = self.decompositions[d].weight
        return w if w is not None else 1.0 / len(self.decompositions)

    def coupling_of(self, d: int, m: int) -> Optional[int]:
        for c, coupling in enumerate(self.couplings):
            if (d, m) in coupling.members:
                return c
        return None

    def factor_shape(self, d: int, m: int) -> Tuple:
        """(rows, rank); rows is a tuple of J_k for the PARAFAC2 B mode"""
        decomposition = self.decompositions[d]
        data = self.datasets[d]
        R = decomposition.rank
        if decomposition.kind == DecompositionKind.PARAFAC2:
            if m == MODE_A:
                return data.n_rows, R
            if m == MODE_B:
                return tuple(data.slice_sizes), R
            return data.n_slices, R
        return data.shape[m], R

    def delta_shape(self, c: int) -> Tuple[int, int]:
        """Shape of the generating variable of coupling c, inferred from its first member"""
        coupling = self.couplings[c]
        if coupling.delta_shape is not None:
            return coupling.delta_shape
        d, m = coupling.members[0]
        n, R = self.factor_shape(d, m)
        H = coupling.transforms[0]
        case = coupling.case
        if case == CouplingCase.EXACT:
            return n, R
        if case == CouplingCase.MODE_LEFT:
            return H.shape[0], R
        if case == CouplingCase.MODE_GENERATED:
            return H.shape[1], R
        if case == CouplingCase.COMPONENT_LEFT:
            return n, H.shape[1]
        return n, H.shape[0]

    def labels(self) -> Dict[Member, str]:
        return {
            (d, m): f"{dec.name}.{dec.mode_names[m]}"
            for d, dec in enumerate(self.decompositions)
            for m in range(dec.n_modes)
        }


class DecompositionFactors:
    """Factor matrices of one decomposition; PARAFAC2 mode B is a list of B_k"""

    def __init__(self, kind: DecompositionKind, factors: Sequence[Factor]):
        self.kind = kind
        self.factors: List[Factor] = list(factors)

    @property
    def rank(self) -> int:
        return self.factors[0].shape[1]

    def copy(self) -> "DecompositionFactors":
        return DecompositionFactors(
            self.kind,
            [[b.copy() for b in f] if isinstance(f, list) else f.copy() for f in self.factors],
        )

    def stacked(self, m: int) -> np.ndarray:
        """Factor of mode m as one matrix (B_k stacked vertically)"""
        factor = self.factors[m]
        return np.vstack(factor) if isinstance(factor, list) else factor

    def reconstruct(self) -> Dataset:
        if self.kind == DecompositionKind.CP:
            A, B, C = self.factors
            return np.einsum("ir,jr,kr->ijk", A, B, C)
        if self.kind == DecompositionKind.MATRIX:
            E, F = self.factors
            return E @ F.T
        A, Bs, C = self.factors
        return RaggedTensor([(A * C[k]) @ Bk.T for k, Bk in enumerate(Bs)])

    def __getitem__(self, m: int) -> Factor:
        return self.factors[m]

    def __setitem__(self, m: int, value: Factor):
        self.factors[m] = value

    def __len__(self) -> int:
        return len(self.factors)


class FactorSet:
    """Factors of every decomposition in a model"""

    def __init__(self, decompositions: Sequence[DecompositionFactors]):
        self.decompositions: List[DecompositionFactors] = list(decompositions)

    def copy(self) -> "FactorSet":
        return FactorSet([d.copy() for d in self.decompositions])

    def __getitem__(self, d: int) -> DecompositionFactors:
        return self.decompositions[d]

    def __len__(self) -> int:
        return len(self.decompositions)

    def __iter__(self):
        return iter(self.decompositions)

"""
Data containers
Dense matrices and 3-way tensors are plain float64 numpy arrays; a ragged
tensor is a list of frontal slices X_k (I x J_k) sharing the row dimension.
"""

from typing import Iterator, List, Sequence, Union

import numpy as np


class RaggedTensor:
    """K frontal slices of sizes I x J_k with a shared row count I"""

    def __init__(self, slices: Sequence[np.ndarray]):
        if len(slices) == 0:
            raise ValueError("RaggedTensor needs at least one slice")
        converted = [as_matrix(s, f"slice {k}") for k, s in enumerate(slices)]
        rows = {s.shape[0] for s in converted}
        if len(rows) != 1:
            raise ValueError(f"RaggedTensor slices must share their row count, got {sorted(rows)}")
        self.slices: List[np.ndarray] = converted

    @classmethod
    def from_dense(cls, tensor: np.ndarray) -> "RaggedTensor":
        """Split an I x J x K tensor into its K frontal slices"""
        tensor = as_tensor3(tensor)
        return cls([tensor[:, :, k] for k in range(tensor.shape[2])])

    @property
    def n_rows(self) -> int:
        return self.slices[0].shape[0]

    @property
    def n_slices(self) -> int:
        return len(self.slices)

    @property
    def slice_sizes(self) -> List[int]:
        return [s.shape[1] for s in self.slices]

    @property
    def size(self) -> int:
        return sum(s.size for s in self.slices)

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(s * s) for s in self.slices)))

    def scaled(self, factor: float) -> "RaggedTensor":
        return RaggedTensor([s * factor for s in self.slices])

    def is_regular(self) -> bool:
        return len(set(self.slice_sizes)) == 1

    def to_dense(self) -> np.ndarray:
        if not self.is_regular():
            raise ValueError("only a RaggedTensor with equal slice widths has a dense form")
        return np.stack(self.slices, axis=2)

    def __len__(self) -> int:
        return len(self.slices)

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.slices)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.slices[k]

    def __repr__(self) -> str:
        return f"RaggedTensor(I={self.n_rows}, K={self.n_slices}, J={self.slice_sizes})"


Dataset = Union[np.ndarray, RaggedTensor]


def _check_finite(values: np.ndarray, name: str):
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{name} contains non-finite entries")


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Validate and convert to a finite float64 matrix"""
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {array.shape}")
    _check_finite(array, name)
    return array


def as_tensor3(values, name: str = "tensor") -> np.ndarray:
    """Validate and convert to a finite float64 3-way array"""
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 3:
        raise ValueError(f"{name} must be 3-dimensional, got shape {array.shape}")
    _check_finite(array, name)
    return array


def dataset_norm(data: Dataset) -> float:
    if isinstance(data, RaggedTensor):
        return data.norm()
    return float(np.linalg.norm(data.ravel()))


def squared_distance(data: Dataset, reconstruction: Dataset) -> float:
    """||data - reconstruction||_F^2 for matching dense or ragged operands"""
    if isinstance(data, RaggedTensor):
        if not isinstance(reconstruction, RaggedTensor) or reconstruction.slice_sizes != data.slice_sizes:
            raise ValueError("reconstruction does not match the ragged data layout")
        return float(sum(np.sum((x - y) ** 2) for x, y in zip(data, reconstruction)))
    if np.shape(reconstruction) != data.shape:
        raise ValueError(f"shape mismatch: {data.shape} vs {np.shape(reconstruction)}")
    return float(np.sum((data - reconstruction) ** 2))

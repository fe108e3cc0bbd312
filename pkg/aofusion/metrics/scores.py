"""
Quality metrics for fitted factorizations
"""

import itertools
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans

from aofusion.admm.projection import project_parafac2
from aofusion.model.spec import DEFAULT_MODE_NAMES, FactorSet, ModelSpec
from aofusion.tensor.containers import Dataset, dataset_norm, squared_distance

# Largest rank for which every permutation is scored
EXHAUSTIVE_PERMUTATION_LIMIT = 8


def fit_percent(data: Dataset, reconstruction: Dataset) -> float:
    """100 * (1 - ||Z - Zhat||^2 / ||Z||^2)"""
    norm = dataset_norm(data)
    if norm == 0:
        raise ValueError("fit is undefined for an all-zero dataset")
    return 100.0 * (1.0 - squared_distance(data, reconstruction) / norm ** 2)


def parafac2_residual(Bs: Sequence[np.ndarray], tol: float = 1e-10, max_rounds: int = 1000) -> float:
    """Mean relative distance of the B_k from their projection onto the PARAFAC2 set"""
    if len(Bs) == 0:
        raise ValueError("need at least one B_k")
    norms = [np.linalg.norm(Bk) for Bk in Bs]
    if min(norms) == 0:
        raise ValueError("parafac2_residual is undefined for an all-zero B_k")
    projections, delta_B, _ = project_parafac2(Bs, max_rounds=max_rounds, tol=tol)
    return float(np.mean([
        np.linalg.norm(Bk - P @ delta_B) / norm for Bk, P, norm in zip(Bs, projections, norms)
    ]))


def congruence(truth: np.ndarray, estimate: np.ndarray) -> np.ndarray:
    """|cosine| between every truth column (rows) and estimate column (columns)"""
    if truth.shape != estimate.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {estimate.shape}")

    def normalized(X):
        norms = np.linalg.norm(X, axis=0)
        norms[norms == 0] = 1.0
        return X / norms

    return np.abs(normalized(truth).T @ normalized(estimate))


def best_permutation(scores: np.ndarray) -> np.ndarray:
    """Estimate component matched to each truth component, maximizing the summed score"""
    R = scores.shape[0]
    if R <= EXHAUSTIVE_PERMUTATION_LIMIT:
        candidates = np.array(list(itertools.permutations(range(R))))
        totals = scores[np.arange(R), candidates].sum(axis=1)
        return candidates[int(np.argmax(totals))]
    rows, cols = linear_sum_assignment(scores, maximize=True)
    return cols[np.argsort(rows)]


class FmsResult:
    """Factor match score with per-mode and per-decomposition parts"""

    def __init__(
        self,
        total: float,
        per_mode: Dict[str, float],
        per_decomposition: Dict[str, float],
        permutations: List[np.ndarray],
    ):
        self.total = total
        self.per_mode = per_mode
        self.per_decomposition = per_decomposition
        self.permutations = permutations

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "per_mode": self.per_mode,
            "per_decomposition": self.per_decomposition,
            "permutations": [p.tolist() for p in self.permutations],
        }

    def __repr__(self):
        return f"FmsResult(total={self.total:.4f}, per_mode={self.per_mode})"


def fms(
    truth: FactorSet,
    estimate: FactorSet,
    model: Optional[ModelSpec] = None,
    names: Optional[Sequence[str]] = None,
) -> FmsResult:
    """
    Permutation-matched factor match score. The PARAFAC2 B mode is scored on
    the vertical concatenation of all B_k; the total is the product over
    decompositions.
    """
    if len(truth) != len(estimate):
        raise ValueError(f"truth has {len(truth)} decompositions, estimate has {len(estimate)}")
    per_mode: Dict[str, float] = {}
    per_decomposition: Dict[str, float] = {}
    permutations: List[np.ndarray] = []
    total = 1.0
    for d, (true_factors, est_factors) in enumerate(zip(truth, estimate)):
        if model is not None:
            name = model.decompositions[d].name
            mode_names = model.decompositions[d].mode_names
        else:
            name = names[d] if names is not None else f"X{d}"
            mode_names = DEFAULT_MODE_NAMES[true_factors.kind]
        if (true_factors.kind, len(true_factors), true_factors.rank) != (
            est_factors.kind, len(est_factors), est_factors.rank
        ):
            raise ValueError(f"decomposition {name}: truth and estimate differ in kind, modes or rank")

        congruences = [congruence(true_factors.stacked(m), est_factors.stacked(m)) for m in range(len(true_factors))]
        product = np.prod(congruences, axis=0)
        permutation = best_permutation(product)
        R = product.shape[0]
        score = float(product[np.arange(R), permutation].mean())
        for m, cong in enumerate(congruences):
            per_mode[f"{name}.{mode_names[m]}"] = float(cong[np.arange(R), permutation].mean())
        per_decomposition[name] = score
        permutations.append(permutation)
        total *= score
    return FmsResult(total, per_mode, per_decomposition, permutations)


def clustering_accuracy(
    A: np.ndarray,
    labels: Sequence[int],
    k: int,
    columns: Optional[Sequence[int]] = (0, 1),
    seed: int = 0,
) -> float:
    """Percent of rows whose k-means cluster maps to their label under the best assignment"""
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > A.shape[0]:
        raise ValueError(f"k = {k} exceeds the number of rows {A.shape[0]}")
    if labels.shape[0] != A.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {A.shape[0]} rows")
    points = A if columns is None else A[:, list(columns)]
    clusters = KMeans(n_clusters=k, n_init=20, random_state=seed).fit_predict(points)
    classes, label_ids = np.unique(labels, return_inverse=True)
    confusion = np.zeros((k, classes.size))
    np.add.at(confusion, (clusters, label_ids), 1)
    rows, cols = linear_sum_assignment(confusion, maximize=True)
    return 100.0 * confusion[rows, cols].sum() / A.shape[0]

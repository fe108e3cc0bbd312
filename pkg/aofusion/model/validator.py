"""
Model validator for coupled factorizations
Checks dataset layouts, ranks, regularizers and coupling dimensions
"""

from typing import Dict, List, Optional, Set

import numpy as np

from aofusion.model.spec import (
    CouplingCase, CouplingSpec, DecompositionKind, Member, ModelSpec,
)
from aofusion.prox.registry import RegularizerKind
from aofusion.tensor.containers import RaggedTensor


class ModelValidationError(ValueError):
    """Raised when a model with violations is handed to the solver"""
    pass


class ModelValidator:
    """Collects every inconsistency of a ModelSpec with its location"""

    def __init__(self):
        self.violations: List[str] = []

    def validate(self, model: ModelSpec) -> List[str]:
        self.violations = []

        if len(model.datasets) != len(model.decompositions):
            self._violation(
                f"{len(model.datasets)} datasets but {len(model.decompositions)} decompositions",
                "model",
            )
            return self.violations

        shapes_ok = True
        for d in range(len(model.decompositions)):
            shapes_ok &= self._check_decomposition(model, d)

        if not shapes_ok:
            return self.violations

        claimed: Dict[Member, int] = {}
        for c, coupling in enumerate(model.couplings):
            self._check_coupling(model, c, coupling, claimed)

        return self.violations

    def _violation(self, message: str, location: str):
        self.violations.append(f"{location}: {message}")

    def _check_decomposition(self, model: ModelSpec, d: int) -> bool:
        decomposition = model.decompositions[d]
        data = model.datasets[d]
        location = f"decomposition[{d}]"

        if decomposition.rank < 1:
            self._violation(f"rank must be >= 1, got {decomposition.rank}", location)
        if decomposition.weight is not None and not decomposition.weight > 0:
            self._violation(f"weight must be > 0, got {decomposition.weight}", location)
        if len(decomposition.regularizers) != decomposition.n_modes:
            self._violation(
                f"{len(decomposition.regularizers)} regularizers for {decomposition.n_modes} modes",
                location,
            )
            return False

        kind = decomposition.kind
        if kind == DecompositionKind.PARAFAC2:
            if not isinstance(data, RaggedTensor):
                self._violation("PARAFAC2 data must be a RaggedTensor", location)
                return False
            if decomposition.rank > min(data.slice_sizes):
                self._violation(
                    f"rank {decomposition.rank} exceeds the narrowest slice width {min(data.slice_sizes)}",
                    location,
                )
        else:
            expected_ndim = 3 if kind == DecompositionKind.CP else 2
            if isinstance(data, RaggedTensor) or np.ndim(data) != expected_ndim:
                self._violation(
                    f"{kind.value} data must be a {expected_ndim}-way array, got {type(data).__name__} "
                    f"with shape {np.shape(data)}",
                    location,
                )
                return False
            if not np.all(np.isfinite(data)):
                self._violation("data contains non-finite entries", location)

        for m, regularizer in enumerate(decomposition.regularizers):
            if regularizer.kind != RegularizerKind.GRAPH_LAPLACIAN.value or regularizer.laplacian is None:
                continue
            rows, _ = model.factor_shape(d, m)
            sizes = set(rows) if isinstance(rows, tuple) else {rows}
            if sizes != {regularizer.laplacian.shape[0]}:
                self._violation(
                    f"Laplacian of size {regularizer.laplacian.shape[0]} does not match factor rows {sorted(sizes)}",
                    f"{location}.mode[{m}]",
                )
        return True

    def _check_coupling(self, model: ModelSpec, c: int, coupling: CouplingSpec, claimed: Dict[Member, int]):
        location = f"coupling[{c}]"
        if not coupling.members:
            self._violation("coupling has no members", location)
            return
        if len(coupling.transforms) != len(coupling.members):
            self._violation(
                f"{len(coupling.transforms)} transforms for {len(coupling.members)} members", location
            )
            return

        members_ok = True
        seen: Set[Member] = set()
        for i, (d, m) in enumerate(coupling.members):
            member_location = f"{location}.member[{i}]"
            if not 0 <= d < len(model.decompositions):
                self._violation(f"unknown decomposition {d}", member_location)
                members_ok = False
                continue
            decomposition = model.decompositions[d]
            if not 0 <= m < decomposition.n_modes:
                self._violation(f"decomposition {d} has no mode {m}", member_location)
                members_ok = False
                continue
            if decomposition.is_varying_mode(m):
                self._violation("the PARAFAC2 varying mode B cannot be coupled", member_location)
                members_ok = False
            if (d, m) in seen:
                self._violation(f"mode ({d}, {m}) listed twice", member_location)
            elif (d, m) in claimed:
                self._violation(
                    f"mode ({d}, {m}) already belongs to coupling[{claimed[(d, m)]}]", member_location
                )
            seen.add((d, m))
            claimed.setdefault((d, m), c)

        if members_ok:
            self._check_case(model, coupling, location)

    def _check_case(self, model: ModelSpec, coupling: CouplingSpec, location: str):
        case = coupling.case
        shapes = [model.factor_shape(d, m) for d, m in coupling.members]
        rows = [s[0] for s in shapes]
        ranks = [s[1] for s in shapes]

        if case in (CouplingCase.EXACT, CouplingCase.COMPONENT_LEFT, CouplingCase.COMPONENT_GENERATED):
            if len(set(rows)) > 1:
                self._violation(f"row mismatch between coupled factors: {rows}", location)
        if case in (CouplingCase.EXACT, CouplingCase.MODE_LEFT, CouplingCase.MODE_GENERATED):
            if len(set(ranks)) > 1:
                self._violation(f"rank mismatch between coupled factors: {ranks}", location)
        if case == CouplingCase.EXACT:
            self._check_delta_shape(coupling, (rows[0], ranks[0]), location)
            return

        delta_dims: List[int] = []
        for i, H in enumerate(coupling.transforms):
            member_location = f"{location}.member[{i}]"
            if H is None or H.ndim != 2:
                self._violation(f"case {case.value} needs a transform matrix", member_location)
                return
            if not np.all(np.isfinite(H)):
                self._violation("transform contains non-finite entries", member_location)
            # (required dimension, its position, delta dimension position)
            acts_on, pos, free = {
                CouplingCase.MODE_LEFT: (rows[i], 1, 0),
                CouplingCase.MODE_GENERATED: (rows[i], 0, 1),
                CouplingCase.COMPONENT_LEFT: (ranks[i], 0, 1),
                CouplingCase.COMPONENT_GENERATED: (ranks[i], 1, 0),
            }[case]
            if H.shape[pos] != acts_on:
                self._violation(
                    f"transform of shape {H.shape} does not act on dimension {acts_on}", member_location
                )
                return
            delta_dims.append(H.shape[free])

        if len(set(delta_dims)) > 1:
            self._violation(f"transforms disagree on the Delta dimension: {delta_dims}", location)
            return

        if case in (CouplingCase.MODE_LEFT, CouplingCase.MODE_GENERATED):
            expected = (delta_dims[0], ranks[0])
        else:
            expected = (rows[0], delta_dims[0])
        self._check_delta_shape(coupling, expected, location)

        if case == CouplingCase.MODE_GENERATED:
            normal = sum(H.T @ H for H in coupling.transforms)
            self._check_determined(normal, "rows", location)
        elif case == CouplingCase.COMPONENT_GENERATED:
            normal = sum(H @ H.T for H in coupling.transforms)
            self._check_determined(normal, "columns", location)

    def _check_delta_shape(self, coupling: CouplingSpec, expected, location: str):
        if coupling.delta_shape is not None and tuple(coupling.delta_shape) != tuple(expected):
            self._violation(
                f"delta_shape {coupling.delta_shape} inconsistent with transforms (expected {expected})",
                location,
            )

    def _check_determined(self, normal: np.ndarray, axis: str, location: str):
        unused = np.flatnonzero(np.abs(np.diag(normal)) == 0)
        if unused.size:
            self._violation(f"Delta {axis} {unused.tolist()} are not used by any member", location)
        elif np.linalg.matrix_rank(normal) < normal.shape[0]:
            self._violation("transforms do not determine Delta uniquely", location)


def validate(model: ModelSpec) -> List[str]:
    """All violations of the model; empty when it is valid"""
    return ModelValidator().validate(model)


def require_valid(model: ModelSpec, violations: Optional[List[str]] = None):
    violations = validate(model) if violations is None else violations
    if violations:
        raise ModelValidationError("\n".join(violations))

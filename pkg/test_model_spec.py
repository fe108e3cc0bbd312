"""
Tests for model descriptions, validation and initialization
"""

import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose

from aofusion.driver.ao import OuterSettings, fit
from aofusion.model.initialization import random_init
from aofusion.model.spec import (
    CouplingCase, CouplingSpec, DecompositionFactors, DecompositionKind, DecompositionSpec, ModelSpec,
    MODE_A, MODE_B, MODE_C, selector_transform,
)
from aofusion.model.validator import ModelValidationError, require_valid, validate
from aofusion.prox.registry import RegularizerKind, RegularizerSpec, is_feasible, path_graph_laplacian
from aofusion.tensor.containers import RaggedTensor


def ragged(rng, I=6, sizes=(5, 6, 7, 5)):
    return RaggedTensor([rng.standard_normal((I, J)) for J in sizes])


def coupled_model(rng, case=CouplingCase.EXACT, transforms=None, delta_shape=None, matrix_rows=4, rank=3):
    X = ragged(rng)
    Y = rng.standard_normal((matrix_rows, 9))
    return ModelSpec(
        [X, Y],
        [DecompositionSpec("parafac2", rank), DecompositionSpec("matrix", rank)],
        [CouplingSpec([(0, MODE_C), (1, 0)], case, transforms, delta_shape)],
    )


class TestModelSpec:

    def test_defaults(self, rng):
        model = coupled_model(rng)
        assert [d.name for d in model.decompositions] == ["X0", "X1"]
        assert model.weight(0) == pytest.approx(0.5)
        assert model.coupling_of(0, MODE_C) == 0
        assert model.coupling_of(0, MODE_A) is None
        assert model.labels()[(1, 1)] == "X1.B"

    def test_factor_shapes(self, rng):
        model = coupled_model(rng)
        assert model.factor_shape(0, MODE_A) == (6, 3)
        assert model.factor_shape(0, MODE_B) == ((5, 6, 7, 5), 3)
        assert model.factor_shape(0, MODE_C) == (4, 3)
        assert model.factor_shape(1, 1) == (9, 3)

    @pytest.mark.parametrize("case,transforms,expected", [
        (CouplingCase.EXACT, None, (4, 3)),
        (CouplingCase.MODE_LEFT, [np.ones((2, 4)), np.ones((2, 4))], (2, 3)),
        (CouplingCase.MODE_GENERATED, [np.ones((4, 2)), np.ones((4, 2))], (2, 3)),
        (CouplingCase.COMPONENT_LEFT, [np.ones((3, 2)), np.ones((3, 2))], (4, 2)),
        (CouplingCase.COMPONENT_GENERATED, [np.ones((5, 3)), np.ones((5, 3))], (4, 5)),
    ])
    def test_delta_shape(self, rng, case, transforms, expected):
        assert coupled_model(rng, case, transforms).delta_shape(0) == expected

    def test_selector_transform(self):
        H = selector_transform(4, [0, 1, 3])
        delta = np.arange(8.0).reshape(2, 4)
        assert_allclose(delta @ H, delta[:, [0, 1, 3]])

    def test_case_strings(self):
        assert CouplingSpec([(0, 0)], "2b").case == CouplingCase.MODE_GENERATED
        assert DecompositionSpec("PARAFAC2", 2).kind == DecompositionKind.PARAFAC2

    def test_reconstruct_parafac2(self, rng):
        A = rng.standard_normal((3, 2))
        Bs = [rng.standard_normal((J, 2)) for J in (4, 5)]
        C = rng.standard_normal((2, 2))
        X = DecompositionFactors(DecompositionKind.PARAFAC2, [A, Bs, C]).reconstruct()
        assert_allclose(X[1], A @ np.diag(C[1]) @ Bs[1].T)


class TestValidator:

    def test_valid_model(self, rng):
        assert validate(coupled_model(rng)) == []

    def test_dataset_count_mismatch(self, rng):
        model = ModelSpec([rng.standard_normal((3, 3))], [DecompositionSpec("matrix", 1)] * 2)
        assert "1 datasets but 2 decompositions" in validate(model)[0]

    def test_parafac2_needs_ragged_data(self, rng):
        model = ModelSpec([rng.standard_normal((3, 3, 3))], [DecompositionSpec("parafac2", 1)])
        assert any("RaggedTensor" in v for v in validate(model))

    def test_rank_exceeds_slice_width(self, rng):
        model = ModelSpec([ragged(rng, sizes=(2, 5))], [DecompositionSpec("parafac2", 3)])
        assert any("narrowest slice" in v for v in validate(model))

    def test_wrong_array_order(self, rng):
        model = ModelSpec([rng.standard_normal((3, 3))], [DecompositionSpec("cp", 1)])
        assert any("3-way array" in v for v in validate(model))

    def test_non_positive_weight(self, rng):
        model = ModelSpec([rng.standard_normal((3, 3))], [DecompositionSpec("matrix", 1, weight=0.0)])
        assert any("weight must be > 0" in v for v in validate(model))

    def test_varying_mode_cannot_be_coupled(self, rng):
        model = ModelSpec(
            [ragged(rng), rng.standard_normal((5, 3))],
            [DecompositionSpec("parafac2", 2), DecompositionSpec("matrix", 2)],
            [CouplingSpec([(0, MODE_B), (1, 0)])],
        )
        violations = validate(model)
        assert any("coupling[0].member[0]" in v and "varying mode" in v for v in violations)

    def test_exact_row_mismatch(self, rng):
        violations = validate(coupled_model(rng, matrix_rows=5))
        assert any("row mismatch" in v for v in violations)

    def test_mode_claimed_twice(self, rng):
        model = coupled_model(rng)
        model.couplings.append(CouplingSpec([(0, MODE_C), (1, 0)]))
        assert any("already belongs to coupling[0]" in v for v in validate(model))

    def test_transform_missing(self, rng):
        violations = validate(coupled_model(rng, CouplingCase.MODE_LEFT))
        assert any("needs a transform matrix" in v for v in violations)

    def test_transform_wrong_dimension(self, rng):
        model = coupled_model(rng, CouplingCase.MODE_LEFT, [np.ones((2, 5)), np.ones((2, 4))])
        assert any("does not act on dimension 4" in v for v in validate(model))

    def test_transforms_disagree(self, rng):
        model = coupled_model(rng, CouplingCase.MODE_LEFT, [np.ones((2, 4)), np.ones((3, 4))])
        assert any("disagree on the Delta dimension" in v for v in validate(model))

    def test_delta_shape_inconsistent(self, rng):
        model = coupled_model(rng, delta_shape=(5, 3))
        assert any("delta_shape (5, 3) inconsistent" in v for v in validate(model))

    def test_unused_delta_columns(self, rng):
        H = np.zeros((4, 3))
        H[[0, 1, 2], [0, 1, 2]] = 1.0
        model = coupled_model(rng, CouplingCase.COMPONENT_GENERATED, [H, H])
        assert any("Delta columns [3] are not used" in v for v in validate(model))

    def test_partial_sharing_determined(self, rng):
        model = coupled_model(
            rng, CouplingCase.COMPONENT_GENERATED,
            [selector_transform(4, [0, 1, 2]), selector_transform(4, [0, 1, 3])],
        )
        assert validate(model) == []

    def test_laplacian_size(self, rng):
        spec = RegularizerSpec("graph_laplacian_smooth", 1.0, laplacian=path_graph_laplacian(7))
        model = ModelSpec([ragged(rng)], [DecompositionSpec("parafac2", 2, regularizers=[None, spec, None])])
        assert any("mode[1]" in v and "Laplacian" in v for v in validate(model))

    def test_require_valid_joins_violations(self, rng):
        model = coupled_model(rng, matrix_rows=5, delta_shape=(9, 9))
        with pytest.raises(ModelValidationError) as info:
            require_valid(model)
        assert len(str(info.value).splitlines()) == len(validate(model))


class TestRandomInit:

    def test_hard_constraints_feasible(self, rng):
        nonneg = RegularizerSpec(RegularizerKind.NONNEG)
        ball = RegularizerSpec(RegularizerKind.UNIT_BALL, nonneg=True)
        model = ModelSpec(
            [ragged(rng), rng.standard_normal((4, 9))],
            [
                DecompositionSpec("parafac2", 3, regularizers=[nonneg, nonneg, ball]),
                DecompositionSpec("matrix", 3, regularizers=[ball, None]),
            ],
            [CouplingSpec([(0, MODE_C), (1, 0)])],
        )
        state = random_init(model, seed=7)
        for (d, m), split in state.splits.items():
            spec = model.decompositions[d].regularizers[m]
            parts = split.Z if isinstance(split.Z, list) else [split.Z]
            assert all(is_feasible(spec, Z) for Z in parts)
        A = state.factors[0][MODE_A]
        assert np.all(A >= 0)
        assert_allclose(np.linalg.norm(A, axis=0), 1.0)
        assert (1, 1) not in state.splits
        assert state.couplings[0].delta.shape == (4, 3)
        assert len(state.parafac2[0].projections) == 4

    def test_deterministic(self, rng):
        model = coupled_model(rng)
        first = random_init(model, seed=3)
        second = random_init(model, seed=3)
        assert_allclose(first.factors[1][1], second.factors[1][1])
        assert_allclose(first.couplings[0].delta, second.couplings[0].delta)


def random_regularizer(rng) -> RegularizerSpec:
    choice = int(rng.integers(5))
    if choice == 0:
        return RegularizerSpec.none()
    if choice == 1:
        return RegularizerSpec(RegularizerKind.NONNEG)
    if choice == 2:
        return RegularizerSpec(RegularizerKind.RIDGE, 0.1, nonneg=bool(rng.integers(2)))
    if choice == 3:
        return RegularizerSpec(RegularizerKind.UNIT_BALL, nonneg=bool(rng.integers(2)))
    return RegularizerSpec(RegularizerKind.GRAPH_LAPLACIAN, 0.2)


def random_coupled_model(rng) -> ModelSpec:
    """PARAFAC2 tensor coupled in A or C to a random mode of a matrix or CP tensor"""
    R = int(rng.integers(1, 4))
    I, K = (int(n) for n in rng.integers(R, 7, size=2))
    sizes = [int(J) for J in rng.integers(R, 8, size=K)]
    X = RaggedTensor([rng.standard_normal((I, J)) for J in sizes])
    mode = MODE_A if rng.integers(2) else MODE_C
    rows = I if mode == MODE_A else K

    case = list(CouplingCase)[int(rng.integers(len(CouplingCase)))]
    partner_rank = R
    partner_rows = rows
    transforms = None
    if case == CouplingCase.MODE_LEFT:
        m1 = int(rng.integers(1, rows + 1))
        partner_rows = int(rng.integers(1, 7))
        transforms = [rng.standard_normal((m1, rows)), rng.standard_normal((m1, partner_rows))]
    elif case == CouplingCase.MODE_GENERATED:
        m1 = int(rng.integers(1, rows + 1))
        partner_rows = int(rng.integers(1, 7))
        transforms = [rng.standard_normal((rows, m1)), rng.standard_normal((partner_rows, m1))]
    elif case == CouplingCase.COMPONENT_LEFT:
        partner_rank = int(rng.integers(1, 4))
        m2 = int(rng.integers(1, 4))
        transforms = [rng.standard_normal((R, m2)), rng.standard_normal((partner_rank, m2))]
    elif case == CouplingCase.COMPONENT_GENERATED:
        partner_rank = int(rng.integers(1, 4))
        m2 = int(rng.integers(1, R + partner_rank + 1))
        transforms = [rng.standard_normal((m2, R)), rng.standard_normal((m2, partner_rank))]

    kind = "cp" if rng.integers(2) else "matrix"
    n_modes = 3 if kind == "cp" else 2
    partner_mode = int(rng.integers(n_modes))
    dims = [int(n) for n in rng.integers(1, 6, size=n_modes)]
    dims[partner_mode] = partner_rows
    Y = rng.standard_normal(dims)
    return ModelSpec(
        [X, Y],
        [
            DecompositionSpec("parafac2", R, regularizers=[random_regularizer(rng) for _ in range(3)]),
            DecompositionSpec(kind, partner_rank, regularizers=[random_regularizer(rng) for _ in range(n_modes)]),
        ],
        [CouplingSpec([(0, mode), (1, partner_mode)], case, transforms)],
    )


def test_valid_random_models_run_through_the_solver():
    rng = np.random.default_rng(99)
    settings = OuterSettings(max_outer_iters=2, n_starts=1)
    for _ in range(200):
        model = random_coupled_model(rng)
        assert validate(model) == []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            report = fit(model, settings)
        assert len(report.records) >= 1
        assert len(report.factors[1].factors) == model.decompositions[1].n_modes

"""
Outer AO loop for coupled factorizations
Runs the mode updates in a fixed order with warm-started inner ADMM and
records one IterationRecord per outer iteration
"""

import logging
import math
import time
import warnings
from functools import partial
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from aofusion.admm.state import AdmmSettings, SolverState, refresh_caches
from aofusion.admm.coupling import CouplingLink
from aofusion.admm.updates import (
    update_coupled_modes, update_parafac2_B_mode, update_parafac2_C_mode, update_static_mode,
)
from aofusion.metrics.scores import fit_percent
from aofusion.model.initialization import draw_auxiliaries, initialize_state, random_factors
from aofusion.model.spec import DecompositionKind, FactorSet, Member, ModelSpec, MODE_B, MODE_C
from aofusion.model.validator import require_valid
from aofusion.prox.registry import is_feasible, soft_penalty_value
from aofusion.tensor.containers import dataset_norm, squared_distance
from aofusion.tensor.kernels import NotPositiveDefiniteError

logger = logging.getLogger(__name__)


class DegenerateDatasetError(ValueError):
    """Raised when a dataset is all zeros"""
    pass


class FitDivergedError(RuntimeError):
    """Raised when a fit produces a non-finite function value"""
    pass


class AllStartsDivergedError(RuntimeError):
    """Raised when every start of a multi-start fit diverged"""
    pass


class OuterSettings:
    """
    Outer-loop tolerances, budgets and multi-start options.

    outer_abs_tol bounds the change of the function value. For unit-norm datasets
    f is the weighted unexplained energy, so on noise-free data a slow stretch can
    stop a run short of exact recovery; use tolerances below the target error.
    """

    def __init__(
        self,
        outer_abs_tol: float = 1e-7,
        outer_rel_tol: float = 1e-8,
        max_outer_iters: int = 1000,
        n_starts: int = 10,
        seed: int = 0,
        time_budget: Optional[float] = None,
        feasibility_tol: float = 1e-5,
        warm_start: bool = True,
        threads: int = 1,
        admm: Optional[AdmmSettings] = None,
    ):
        if not (outer_abs_tol > 0 and outer_rel_tol > 0 and feasibility_tol > 0):
            raise ValueError("outer tolerances must be positive")
        if n_starts < 1:
            raise ValueError(f"n_starts must be >= 1, got {n_starts}")
        if max_outer_iters < 0:
            raise ValueError(f"max_outer_iters must be >= 0, got {max_outer_iters}")
        self.outer_abs_tol = float(outer_abs_tol)
        self.outer_rel_tol = float(outer_rel_tol)
        self.max_outer_iters = int(max_outer_iters)
        self.n_starts = int(n_starts)
        self.seed = int(seed)
        self.time_budget = time_budget
        self.feasibility_tol = float(feasibility_tol)
        self.warm_start = bool(warm_start)
        self.threads = max(int(threads), 1)
        self.admm = admm or AdmmSettings()

    def as_dict(self) -> dict:
        return {
            "outer_abs_tol": self.outer_abs_tol,
            "outer_rel_tol": self.outer_rel_tol,
            "max_outer_iters": self.max_outer_iters,
            "n_starts": self.n_starts,
            "seed": self.seed,
            "time_budget": self.time_budget,
            "feasibility_tol": self.feasibility_tol,
            "warm_start": self.warm_start,
            "threads": self.threads,
            "inner_abs_tol": self.admm.abs_tol,
            "inner_rel_tol": self.admm.rel_tol,
            "max_inner_iters": self.admm.max_inner_iters,
        }


class IterationRecord:
    """Metrics after one outer iteration (iteration 0 is the initialization)"""

    def __init__(
        self,
        iteration: int,
        function_value: float,
        fits: List[float],
        parafac2_residuals: Dict[int, float],
        coupling_residuals: List[float],
        feasibility_gap: float,
        seconds: float,
    ):
        self.iteration = iteration
        self.function_value = function_value
        self.fits = fits
        self.parafac2_residuals = parafac2_residuals
        self.coupling_residuals = coupling_residuals
        self.feasibility_gap = feasibility_gap
        self.seconds = seconds

    def as_row(self, model: ModelSpec) -> dict:
        row = {"iteration": self.iteration, "function_value": self.function_value}
        for d, fit in enumerate(self.fits):
            row[f"fit_{model.decompositions[d].name}"] = fit
        for d, residual in self.parafac2_residuals.items():
            row[f"parafac2_residual_{model.decompositions[d].name}"] = residual
        for c, residual in enumerate(self.coupling_residuals):
            row[f"coupling_residual_{c}"] = residual
        row["feasibility_gap"] = self.feasibility_gap
        row["seconds"] = self.seconds
        return row


class RunReport:
    """Trace and outcome of one start"""

    def __init__(self, start_id: int, seed: int, schedule: List[str]):
        self.start_id = start_id
        self.seed = seed
        self.schedule = schedule
        self.records: List[IterationRecord] = []
        self.status = "max_iterations"
        self.message = ""
        self.factors: Optional[FactorSet] = None
        self.state: Optional[SolverState] = None
        self.infeasible: List[str] = []

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    @property
    def final(self) -> IterationRecord:
        return self.records[-1]

    @property
    def function_value(self) -> float:
        if self.diverged or not self.records:
            return math.inf
        return self.final.function_value


class MultiStartResult:
    """Best start plus every start's report"""

    def __init__(self, best: RunReport, reports: List[RunReport]):
        self.best = best
        self.reports = reports

    @property
    def best_start(self) -> int:
        return self.best.start_id


class UpdateStep:
    """One entry of the outer update order"""

    def __init__(self, label: str, members: Sequence[Member], action: Callable[[SolverState], SolverState]):
        self.label = label
        self.members = list(members)
        self.action = action

    def run(self, state: SolverState):
        self.action(state)
        for member in self.members:
            refresh_caches(state, member)


def _static_update(state: SolverState, d: int, m: int) -> SolverState:
    return update_static_mode(state, d, m)


def build_schedule(model: ModelSpec) -> List[UpdateStep]:
    """Modes in decomposition order; a coupling is updated at its first member"""
    labels = model.labels()
    steps: List[UpdateStep] = []
    scheduled = set()
    for d, decomposition in enumerate(model.decompositions):
        for m in decomposition.update_order:
            c = model.coupling_of(d, m)
            if c is not None:
                if c in scheduled:
                    continue
                scheduled.add(c)
                members = model.couplings[c].members
                label = f"coupling[{c}]({', '.join(labels[member] for member in members)})"
                steps.append(UpdateStep(label, members, partial(update_coupled_modes, coupling_index=c)))
            elif decomposition.kind == DecompositionKind.PARAFAC2 and m == MODE_B:
                steps.append(UpdateStep(labels[(d, m)], [(d, m)], partial(update_parafac2_B_mode, d=d)))
            elif decomposition.kind == DecompositionKind.PARAFAC2 and m == MODE_C:
                steps.append(UpdateStep(labels[(d, m)], [(d, m)], partial(update_parafac2_C_mode, d=d)))
            else:
                steps.append(UpdateStep(labels[(d, m)], [(d, m)], partial(_static_update, d=d, m=m)))
    return steps


def function_value(model: ModelSpec, factors: FactorSet, infeasible: Optional[List[str]] = None) -> float:
    """
    sum_i w_i ||data_i - reconstruction_i||^2 + sum of penalties. Hard
    constraints count as 0; modes violating them beyond 1e-9 are appended
    to infeasible.
    """
    labels = model.labels()
    value = 0.0
    for d, decomposition in enumerate(model.decompositions):
        value += model.weight(d) * squared_distance(model.datasets[d], factors[d].reconstruct())
        for m, regularizer in enumerate(decomposition.regularizers):
            if regularizer.is_none:
                continue
            factor = factors[d][m]
            parts = factor if isinstance(factor, list) else [factor]
            value += sum(soft_penalty_value(regularizer, X) for X in parts)
            if infeasible is not None and not all(is_feasible(regularizer, X) for X in parts):
                infeasible.append(labels[(d, m)])
    return value


def _relative(numerator: float, denominator: float) -> float:
    return numerator / denominator if denominator > 0 else numerator


def _factors_finite(factors: FactorSet) -> bool:
    return all(
        np.all(np.isfinite(Xk))
        for decomposition in factors
        for factor in decomposition.factors
        for Xk in (factor if isinstance(factor, list) else [factor])
    )


def _feasibility(state: SolverState):
    """PARAFAC2 residuals, coupling residuals and the largest relative gap"""
    model = state.model
    gaps = [0.0]
    parafac2 = {}
    for d, aux in state.parafac2.items():
        Bs = state.factors[d][MODE_B]
        residual = float(np.mean([
            _relative(np.linalg.norm(Bk - P @ aux.delta_B), np.linalg.norm(Bk))
            for Bk, P in zip(Bs, aux.projections)
        ]))
        parafac2[d] = residual
        gaps.append(residual)

    couplings = []
    for c, coupling in enumerate(model.couplings):
        variables = state.couplings[c]
        worst = 0.0
        for (d, m), H in zip(coupling.members, coupling.transforms):
            link = CouplingLink(coupling.case, H, model.decompositions[d].rank)
            X = state.factors[d][m]
            worst = max(worst, _relative(
                np.linalg.norm(link.residual(X, variables.delta)), np.linalg.norm(link.forward(X))
            ))
        couplings.append(worst)
        gaps.append(worst)

    for (d, m), split in state.splits.items():
        X = state.factors[d][m]
        if isinstance(X, list):
            gap = math.sqrt(sum(np.sum((Bk - Zk) ** 2) for Bk, Zk in zip(X, split.Z)))
            norm = math.sqrt(sum(np.sum(Bk ** 2) for Bk in X))
        else:
            gap, norm = np.linalg.norm(X - split.Z), np.linalg.norm(X)
        gaps.append(_relative(gap, norm))
    return parafac2, couplings, float(max(gaps))


def _record(state: SolverState, iteration: int, started: float, infeasible: List[str]) -> IterationRecord:
    model = state.model
    f = function_value(model, state.factors, infeasible)
    fits = []
    for d in range(len(model.decompositions)):
        if np.isfinite(f):
            fits.append(fit_percent(model.datasets[d], state.factors[d].reconstruct()))
        else:
            fits.append(math.nan)
    parafac2, couplings, gap = _feasibility(state)
    return IterationRecord(iteration, f, fits, parafac2, couplings, gap, time.perf_counter() - started)


def check_datasets(model: ModelSpec):
    for d, data in enumerate(model.datasets):
        if dataset_norm(data) == 0:
            raise DegenerateDatasetError(f"dataset {model.decompositions[d].name} is all zeros")


def fit(
    model: ModelSpec,
    settings: Optional[OuterSettings] = None,
    init: Optional[FactorSet] = None,
    start_id: int = 0,
    seed: Optional[int] = None,
) -> RunReport:
    """One AO-ADMM run from a random (or given) initialization"""
    settings = settings or OuterSettings()
    require_valid(model)
    check_datasets(model)
    seed = settings.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    factors = random_factors(model, rng) if init is None else init.copy()
    state = initialize_state(model, factors, rng, settings.admm)
    schedule = build_schedule(model)
    report = RunReport(start_id, seed, [step.label for step in schedule])
    report.state = state

    started = time.perf_counter()
    infeasible: List[str] = []
    report.records.append(_record(state, 0, started, infeasible))
    f_prev = report.final.function_value

    for iteration in range(1, settings.max_outer_iters + 1):
        if not settings.warm_start:
            draw_auxiliaries(state, rng, duals_only=True)
        infeasible = []
        try:
            for step in schedule:
                step.run(state)
            record = _record(state, iteration, started, infeasible)
        except (np.linalg.LinAlgError, NotPositiveDefiniteError, FloatingPointError) as e:
            report.status = "diverged"
            report.message = f"numerical failure at outer iteration {iteration}: {e}"
            break
        except ValueError as e:
            # scipy raises ValueError on non-finite operands
            if _factors_finite(state.factors):
                raise
            report.status = "diverged"
            report.message = f"non-finite factors at outer iteration {iteration}: {e}"
            break
        if not np.isfinite(record.function_value):
            report.status = "diverged"
            report.message = f"non-finite function value at outer iteration {iteration}"
            break
        report.records.append(record)
        f = record.function_value
        logger.debug("start %d iteration %d: f=%.6e gap=%.2e", start_id, iteration, f, record.feasibility_gap)

        change = abs(f_prev - f)
        small_change = change < settings.outer_abs_tol or change < settings.outer_rel_tol * abs(f_prev)
        if small_change and record.feasibility_gap <= settings.feasibility_tol:
            report.status = "converged"
            break
        f_prev = f
        if settings.time_budget is not None and record.seconds >= settings.time_budget:
            report.status = "time_budget"
            break

    report.factors = state.factors
    report.infeasible = infeasible
    if infeasible and not report.diverged:
        warnings.warn(
            f"start {start_id}: hard constraints violated by the primal factors of {', '.join(infeasible)}",
            RuntimeWarning,
        )
    if report.diverged:
        logger.warning("start %d diverged: %s", start_id, report.message)
    else:
        logger.info(
            "start %d: %s after %d iterations, f=%.6e",
            start_id, report.status, report.final.iteration, report.final.function_value,
        )
    return report


def multi_start_fit(
    model: ModelSpec,
    settings: Optional[OuterSettings] = None,
    initial_factors: Optional[Sequence[FactorSet]] = None,
) -> MultiStartResult:
    """n_starts seeded fits (seed, seed + 1, ...); the lowest final function value wins"""
    settings = settings or OuterSettings()
    require_valid(model)
    check_datasets(model)
    inits = list(initial_factors or [])
    n_starts = max(settings.n_starts, len(inits))
    inits += [None] * (n_starts - len(inits))
    reports = Parallel(n_jobs=settings.threads)(
        delayed(fit)(model, settings, init=inits[i], start_id=i, seed=settings.seed + i)
        for i in range(n_starts)
    )
    candidates = [r for r in reports if not r.diverged]
    if not candidates:
        raise AllStartsDivergedError(
            "all starts diverged:\n" + "\n".join(f"start {r.start_id}: {r.message}" for r in reports)
        )
    best = min(candidates, key=lambda r: r.function_value)
    return MultiStartResult(best, list(reports))

"""
Replicate benchmarks over the synthetic experiments
One row per (arm, replicate) and a median/min/max summary per arm
"""

import copy
import logging
import time
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from aofusion.driver.ao import MultiStartResult, OuterSettings, multi_start_fit
from aofusion.metrics.scores import clustering_accuracy, congruence, fms, parafac2_residual
from aofusion.model.spec import DecompositionKind, MODE_B
from aofusion.synth.generators import EXPERIMENTS, SyntheticProblem, UnknownExperimentError, make_problem

logger = logging.getLogger(__name__)

EXP3_NOISE_LEVELS = (0.0, 0.5, 1.0)
# (coupling, ridge)
EXP3_ARMS = ((False, False), (True, False), (True, True))


def bench_arms(experiment: str) -> List[Dict]:
    """Generator overrides of every arm; exp3 runs the noise x coupling x ridge grid"""
    if experiment != "exp3":
        return [{}]
    return [
        {"a_noise": noise, "coupling": coupling, "ridge": ridge}
        for coupling, ridge in EXP3_ARMS
        for noise in EXP3_NOISE_LEVELS
    ]


def result_row(problem: SyntheticProblem, result: MultiStartResult) -> Dict:
    """Quality measures of the best start against the problem's truth"""
    model = problem.model
    best = result.best
    final = best.final
    row: Dict = {
        "status": best.status,
        "best_start": best.start_id,
        "iterations": final.iteration,
        "function_value": final.function_value,
        "feasibility_gap": final.feasibility_gap,
    }
    score = fms(problem.truth, best.factors, model)
    row["fms_total"] = score.total
    for key, value in score.per_mode.items():
        row[f"fms_{key}"] = value
    for d, decomposition in enumerate(model.decompositions):
        row[f"fit_{decomposition.name}"] = final.fits[d]
        if decomposition.kind == DecompositionKind.PARAFAC2:
            row[f"parafac2_residual_{decomposition.name}"] = parafac2_residual(best.factors[d][MODE_B])
    for c, residual in enumerate(final.coupling_residuals):
        row[f"coupling_residual_{c}"] = residual

    if problem.labels is not None:
        k = int(np.unique(problem.labels).size)
        for d, decomposition in enumerate(model.decompositions):
            A = best.factors[d][0][:, score.permutations[d]]
            label = f"{decomposition.name}.{decomposition.mode_names[0]}"
            row[f"clustering_{label}"] = clustering_accuracy(A, problem.labels, k, seed=problem.seed)
    if problem.clean_A is not None:
        A = best.factors[0][0]
        permutation = score.permutations[0]
        cong = congruence(problem.clean_A, A)
        row["fms_clean_A"] = float(cong[np.arange(A.shape[1]), permutation].mean())
    return row


def run_replicate(
    experiment: str,
    replicate: int,
    seed: int,
    settings: OuterSettings,
    overrides: Optional[Dict] = None,
) -> Dict:
    overrides = overrides or {}
    problem = make_problem(experiment, seed + replicate, **overrides)
    started = time.perf_counter()
    result = multi_start_fit(problem.model, settings)
    seconds = time.perf_counter() - started
    row = {"experiment": experiment, "replicate": replicate, "seed": seed + replicate}
    row.update(overrides)
    row.update(result_row(problem, result))
    row["seconds"] = seconds
    logger.info("%s replicate %d %s: fms=%.4f in %.1fs", experiment, replicate, overrides, row["fms_total"], seconds)
    return row


def run_bench(
    experiment: str,
    replicates: int,
    seed: int,
    settings: OuterSettings,
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """All replicates of every arm, parallel over replicates; starts inside a replicate run serially"""
    if replicates < 1:
        raise ValueError(f"replicates must be >= 1, got {replicates}")
    if experiment not in EXPERIMENTS:
        raise UnknownExperimentError(
            f"Unknown experiment '{experiment}', expected one of {', '.join(EXPERIMENTS)}"
        )
    arms = bench_arms(experiment)
    inner = copy.copy(settings)
    inner.threads = 1
    rows = Parallel(n_jobs=settings.threads)(
        delayed(run_replicate)(experiment, r, seed, inner, arm)
        for arm in arms
        for r in range(replicates)
    )
    frame = pd.DataFrame(rows)
    return frame, summarize(frame, ["experiment"] + list(arms[0].keys()))


def summarize(frame: pd.DataFrame, keys: List[str]) -> pd.DataFrame:
    """Median, min and max of every numeric column per arm"""
    numeric = [
        c for c in frame.columns
        if c not in keys and c not in ("replicate", "seed", "best_start") and pd.api.types.is_numeric_dtype(frame[c])
    ]
    summary = frame.groupby(keys, sort=False)[numeric].agg(["median", "min", "max"])
    summary.columns = [f"{column}_{stat}" for column, stat in summary.columns]
    summary.insert(0, "replicates", frame.groupby(keys, sort=False).size())
    return summary.reset_index()

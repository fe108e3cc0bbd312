"""
Config analysis for coupled factorization runs
Checks a ConfigFile tree and maps it onto a RunConfig
"""

from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from aofusion.admm.state import AdmmSettings
from aofusion.config.nodes import ConfigFile, Section, Value
from aofusion.config.parser import ConfigError, load_config_file
from aofusion.driver.ao import OuterSettings
from aofusion.model.spec import (
    CouplingCase, CouplingSpec, DecompositionKind, DecompositionSpec, FactorSet, ModelSpec,
    DEFAULT_MODE_NAMES, selector_transform,
)
from aofusion.model.validator import ModelValidator
from aofusion.prox.registry import REGISTRY, RegularizerError, RegularizerSpec
from aofusion.runtime.serialization import BundleFormatError, read_datasets, read_factors
from aofusion.synth.generators import EXPERIMENTS, SyntheticProblem, make_problem

OUTER_KEYS = {
    "outer_abs_tol": float, "outer_rel_tol": float, "max_outer_iters": int, "n_starts": int,
    "seed": int, "time_budget": float, "feasibility_tol": float, "warm_start": bool, "threads": int,
}
INNER_KEYS = {
    "inner_abs_tol": ("abs_tol", float), "inner_rel_tol": ("rel_tol", float),
    "max_inner_iters": ("max_inner_iters", int), "projection_max_rounds": ("projection_max_rounds", int),
    "projection_tol": ("projection_tol", float), "weighted_projection": ("weighted_projection", bool),
}
SYNTH_OVERRIDES = {
    "dims", "matrix_columns", "cp_dims", "rank", "noise", "a_noise", "coupling", "ridge", "coupled_mode",
}


class RunConfig:
    """Everything one run needs: the problem source, solver settings and output directory"""

    def __init__(
        self,
        settings: OuterSettings,
        output: Path,
        model: Optional[ModelSpec] = None,
        experiment: Optional[str] = None,
        synth_seed: int = 0,
        synth_overrides: Optional[Dict[str, Any]] = None,
        truth_path: Optional[Path] = None,
        path: Optional[Path] = None,
    ):
        self.settings = settings
        self.output = output
        self.model = model
        self.experiment = experiment
        self.synth_seed = synth_seed
        self.synth_overrides = synth_overrides or {}
        self.truth_path = truth_path
        self.path = path

    @property
    def is_synthetic(self) -> bool:
        return self.experiment is not None

    def problem(self) -> SyntheticProblem:
        return make_problem(self.experiment, self.synth_seed, **self.synth_overrides)

    def resolve(self) -> Tuple[ModelSpec, Optional[FactorSet]]:
        """Model to fit and the ground truth, when one is known"""
        if self.is_synthetic:
            problem = self.problem()
            return problem.model, problem.truth
        truth = read_factors(self.truth_path)[0] if self.truth_path is not None else None
        return self.model, truth


def _kind_name(value: Any) -> str:
    return "boolean" if isinstance(value, bool) else type(value).__name__


class ConfigAnalyzer:
    """Walks a ConfigFile, collecting every problem before raising ConfigError"""

    def __init__(self):
        self.errors: List[str] = []
        self.base = Path(".")

    def analyze(self, config: ConfigFile) -> RunConfig:
        self.errors = []
        self.base = Path(config.path).parent if config.path else Path(".")

        top = self._assignments(config, {"output", "truth"})
        sections = {"synth", "dataset", "decomposition", "coupling", "solver"}
        for section in config.sections:
            if section.name not in sections:
                self._error(f"Unknown section '{section.name}'", section.line, section.column)

        settings = self._solver([s for s in config.sections if s.name == "solver"])
        output = Path("runs") / Path(config.path or "run").stem
        if "output" in top:
            output = Path(self._typed(top["output"], str, "output") or output)
        truth = self._path(top["truth"]) if "truth" in top else None

        synth = [s for s in config.sections if s.name == "synth"]
        inline = [s for s in config.sections if s.name in ("dataset", "decomposition", "coupling")]
        run = None
        if synth and inline:
            self._error("A config uses either a synth section or dataset/decomposition sections, not both", 1, 1)
        elif len(synth) > 1:
            self._error("Duplicate synth section", synth[1].line, synth[1].column)
        elif synth:
            experiment, seed, overrides = self._synth(synth[0])
            run = RunConfig(settings, output, experiment=experiment, synth_seed=seed,
                            synth_overrides=overrides, truth_path=truth, path=config.path)
        elif inline:
            model = self._model(config.sections)
            run = RunConfig(settings, output, model=model, truth_path=truth, path=config.path)
        else:
            self._error("Config defines no problem: add a synth section or dataset/decomposition sections", 1, 1)

        if self.errors:
            raise ConfigError("\n".join(self.errors))
        return run

    def _assignments(self, section: Section, allowed) -> Dict[str, Value]:
        values: Dict[str, Value] = {}
        for item in section.assignments:
            if item.key not in allowed:
                self._error(f"Unknown key '{item.key}' in {section.name}", item.line, item.column)
            elif item.key in values:
                self._error(f"Duplicate key '{item.key}'", item.line, item.column)
            else:
                values[item.key] = item.value
        return values

    def _typed(self, value: Value, kind, key: str):
        raw = value.plain()
        if kind is float and isinstance(raw, (int, float)) and not isinstance(raw, bool):
            return float(raw)
        if kind is int and isinstance(raw, int) and not isinstance(raw, bool):
            return raw
        if kind is bool and isinstance(raw, bool):
            return raw
        if kind is str and isinstance(raw, str):
            return raw
        self._error(f"'{key}' expects {kind.__name__}, got {_kind_name(raw)}", value.line, value.column)
        return None

    def _path(self, value: Value) -> Optional[Path]:
        raw = self._typed(value, str, "path")
        if raw is None:
            return None
        path = Path(raw)
        return path if path.is_absolute() else self.base / path

    def _solver(self, sections: List[Section]) -> OuterSettings:
        if len(sections) > 1:
            self._error("Duplicate solver section", sections[1].line, sections[1].column)
        outer: Dict[str, Any] = {}
        inner: Dict[str, Any] = {}
        if sections:
            values = self._assignments(sections[0], set(OUTER_KEYS) | set(INNER_KEYS))
            for key, value in values.items():
                if key in OUTER_KEYS:
                    outer[key] = self._typed(value, OUTER_KEYS[key], key)
                else:
                    name, kind = INNER_KEYS[key]
                    inner[name] = self._typed(value, kind, key)
            outer = {k: v for k, v in outer.items() if v is not None}
            inner = {k: v for k, v in inner.items() if v is not None}
        try:
            return OuterSettings(admm=AdmmSettings(**inner), **outer)
        except ValueError as e:
            line, column = (sections[0].line, sections[0].column) if sections else (1, 1)
            self._error(str(e), line, column)
            return OuterSettings()

    def _synth(self, section: Section) -> Tuple[Optional[str], int, Dict[str, Any]]:
        values = self._assignments(section, {"experiment", "seed"} | SYNTH_OVERRIDES)
        experiment = None
        if "experiment" not in values:
            self._error("synth section needs 'experiment'", section.line, section.column)
        else:
            experiment = self._typed(values["experiment"], str, "experiment")
            if experiment is not None and experiment not in EXPERIMENTS:
                value = values["experiment"]
                self._error(
                    f"Unknown experiment '{experiment}', expected one of {', '.join(EXPERIMENTS)}",
                    value.line, value.column,
                )
        seed = self._typed(values["seed"], int, "seed") if "seed" in values else 0
        overrides = {}
        for key in SYNTH_OVERRIDES & values.keys():
            raw = values[key].plain()
            overrides[key] = tuple(raw) if isinstance(raw, list) else raw
        return experiment, seed or 0, overrides

    def _model(self, sections: List[Section]) -> Optional[ModelSpec]:
        datasets: Dict[str, Any] = {}
        for section in sections:
            if section.name == "dataset":
                self._dataset(section, datasets)

        decompositions: List[DecompositionSpec] = []
        data = []
        for section in sections:
            if section.name == "decomposition":
                decomposition = self._decomposition(section)
                if decomposition is None:
                    continue
                if decomposition.name not in datasets:
                    self._error(f"No dataset named '{decomposition.name}'", section.line, section.column)
                    continue
                decompositions.append(decomposition)
                data.append(datasets[decomposition.name])

        couplings = [
            coupling for coupling in (
                self._coupling(section, decompositions) for section in sections if section.name == "coupling"
            ) if coupling is not None
        ]
        if self.errors or not decompositions:
            if not decompositions and not self.errors:
                self._error("No decomposition sections", 1, 1)
            return None

        model = ModelSpec(data, decompositions, couplings)
        for violation in ModelValidator().validate(model):
            self._error(f"Invalid model: {violation}", 0, 0)
        return model

    def _dataset(self, section: Section, datasets: Dict[str, Any]):
        if section.label is None:
            self._error("dataset section needs a label: dataset [name] { ... }", section.line, section.column)
            return
        values = self._assignments(section, {"path", "entry"})
        if "path" not in values:
            self._error(f"dataset '{section.label}' needs 'path'", section.line, section.column)
            return
        path = self._path(values["path"])
        entry = self._typed(values["entry"], str, "entry") if "entry" in values else section.label
        if path is None or entry is None:
            return
        try:
            loaded, names = read_datasets(path)
        except (OSError, BundleFormatError) as e:
            self._error(f"Cannot read dataset bundle '{path}': {e}", values["path"].line, values["path"].column)
            return
        if entry not in names:
            self._error(f"Bundle '{path}' has no dataset '{entry}' (has {', '.join(names)})", section.line, section.column)
            return
        datasets[section.label] = loaded[names.index(entry)]

    def _decomposition(self, section: Section) -> Optional[DecompositionSpec]:
        if section.label is None:
            self._error("decomposition section needs a dataset label", section.line, section.column)
            return None
        values = self._assignments(section, {"kind", "rank", "weight", "modes"})
        if "kind" not in values or "rank" not in values:
            self._error(f"decomposition '{section.label}' needs 'kind' and 'rank'", section.line, section.column)
            return None
        name = self._typed(values["kind"], str, "kind")
        try:
            kind = DecompositionKind(name)
        except ValueError:
            value = values["kind"]
            self._error(f"Unknown decomposition kind '{name}'", value.line, value.column)
            return None
        rank = self._typed(values["rank"], int, "rank")
        weight = self._typed(values["weight"], float, "weight") if "weight" in values else None
        mode_names = DEFAULT_MODE_NAMES[kind]
        if "modes" in values:
            raw = values["modes"].plain()
            if not isinstance(raw, list) or len(raw) != len(mode_names):
                value = values["modes"]
                self._error(f"'modes' must list {len(mode_names)} names", value.line, value.column)
            else:
                mode_names = tuple(str(m) for m in raw)

        regularizers: List[Optional[RegularizerSpec]] = [None] * len(mode_names)
        for sub in section.sections:
            if sub.name != "regularizer":
                self._error(f"Unknown section '{sub.name}' in decomposition", sub.line, sub.column)
                continue
            if sub.label not in mode_names:
                self._error(f"regularizer label '{sub.label}' is not one of the modes {', '.join(mode_names)}",
                            sub.line, sub.column)
                continue
            regularizers[mode_names.index(sub.label)] = self._regularizer(sub)
        if rank is None:
            return None
        return DecompositionSpec(kind, rank, weight, regularizers, name=section.label, mode_names=mode_names)

    def _regularizer(self, section: Section) -> Optional[RegularizerSpec]:
        values = self._assignments(section, {"kind", "strength", "nonneg"})
        if "kind" not in values:
            self._error("regularizer needs 'kind'", section.line, section.column)
            return None
        kind = self._typed(values["kind"], str, "kind")
        if kind not in REGISTRY:
            self._error(f"Unknown regularizer kind '{kind}'", values["kind"].line, values["kind"].column)
            return None
        strength = self._typed(values["strength"], float, "strength") if "strength" in values else 0.0
        nonneg = self._typed(values["nonneg"], bool, "nonneg") if "nonneg" in values else False
        try:
            return RegularizerSpec(kind, strength or 0.0, nonneg=bool(nonneg))
        except RegularizerError as e:
            self._error(str(e), section.line, section.column)
            return None

    def _member(self, value: Value, decompositions: List[DecompositionSpec]) -> Optional[Tuple[int, int]]:
        raw = value.plain()
        if not isinstance(raw, str) or "." not in raw:
            self._error(f"Coupling member must look like \"dataset.mode\", got {raw!r}", value.line, value.column)
            return None
        name, mode = raw.split(".", 1)
        for d, decomposition in enumerate(decompositions):
            if decomposition.name == name:
                if mode in decomposition.mode_names:
                    return d, decomposition.mode_names.index(mode)
                self._error(f"Decomposition '{name}' has no mode '{mode}'", value.line, value.column)
                return None
        self._error(f"No decomposition named '{name}'", value.line, value.column)
        return None

    def _coupling(self, section: Section, decompositions: List[DecompositionSpec]) -> Optional[CouplingSpec]:
        values = self._assignments(section, {"case", "members", "delta_shape"})
        if "members" not in values:
            self._error("coupling needs 'members'", section.line, section.column)
            return None
        member_values = values["members"].value
        if not isinstance(member_values, list):
            self._error("'members' must be a list", values["members"].line, values["members"].column)
            return None
        members = [self._member(v, decompositions) for v in member_values]
        if any(m is None for m in members):
            return None
        labels = [v.plain() for v in member_values]

        case = CouplingCase.EXACT
        if "case" in values:
            raw = str(values["case"].plain())
            try:
                case = CouplingCase(raw)
            except ValueError:
                self._error(f"Unknown coupling case '{raw}'", values["case"].line, values["case"].column)
                return None

        transforms: List[Optional[np.ndarray]] = [None] * len(members)
        for sub in section.sections:
            if sub.name != "transform" or sub.label not in labels:
                self._error(f"Expected 'transform [member]' with a member of this coupling, got '{sub.name}'",
                            sub.line, sub.column)
                continue
            transforms[labels.index(sub.label)] = self._transform(sub)
        if case != CouplingCase.EXACT and any(t is None for t in transforms):
            self._error(f"Coupling case {case.value} needs a transform for every member", section.line, section.column)
            return None

        delta_shape = None
        if "delta_shape" in values:
            raw = values["delta_shape"].plain()
            if not (isinstance(raw, list) and len(raw) == 2 and all(isinstance(x, int) for x in raw)):
                self._error("'delta_shape' must be [rows, columns]", values["delta_shape"].line, values["delta_shape"].column)
            else:
                delta_shape = tuple(raw)
        return CouplingSpec(members, case, transforms, delta_shape)

    def _transform(self, section: Section) -> Optional[np.ndarray]:
        values = self._assignments(section, {"matrix", "selector", "columns"})
        if "matrix" in values:
            try:
                matrix = np.array(values["matrix"].plain(), dtype=np.float64)
            except (TypeError, ValueError):
                matrix = None
            if matrix is None or matrix.ndim != 2:
                self._error("'matrix' must be a list of equal-length rows", values["matrix"].line, values["matrix"].column)
                return None
            return matrix
        if "selector" in values and "columns" in values:
            selected = values["selector"].plain()
            columns = self._typed(values["columns"], int, "columns")
            if not isinstance(selected, list) or columns is None or not all(
                isinstance(c, int) and 0 <= c < columns for c in selected
            ):
                self._error("'selector' must list column indices below 'columns'",
                            values["selector"].line, values["selector"].column)
                return None
            return selector_transform(columns, selected)
        self._error("transform needs 'matrix' or 'selector' and 'columns'", section.line, section.column)
        return None

    def _error(self, message: str, line: int, column: int):
        """Record an error"""
        loc = f" at line {line}, column {column}" if line > 0 else ""
        self.errors.append(f"Error{loc}: {message}")


def load_run_config(path) -> RunConfig:
    return ConfigAnalyzer().analyze(load_config_file(path))

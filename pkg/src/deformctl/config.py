"""INI experiment configuration.

Every section maps onto a small dataclass; keys not declared there are
rejected, and values are converted using the type of the field default.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

MODES = ("solve", "ablate-icp", "ablate-broyden", "ablate-normal", "baseline-fixed-step", "oracle")
TARGET_KINDS = ("reachable", "unreachable", "flat_waist", "file")


class ConfigError(ValueError):
    pass


@dataclass
class PlantSection:
    preset: str = "mannequin4"
    grid_rows: int = 64
    grid_cols: int = 48
    noise: float = 0.0
    smoothing_passes: int = 4
    hysteresis: float = 0.0
    p_min: float = 0.0
    p_max: float = 30.0


@dataclass
class ObjectiveSection:
    normal_weight: float = 3.0e-3
    partition: str = "auto"  # auto | mannequin | halves


@dataclass
class BsplineSection:
    ctrl_u: int = 14
    ctrl_v: int = 14
    samples_u: int = 13
    samples_v: int = 25
    regularization: float = 1e-4


@dataclass
class IcpSection:
    enabled: bool = True
    period: int = 1
    max_iterations: int = 50
    tol_translation: float = 1e-4
    tol_rotation: float = 1e-6
    trim_fraction: float = 0.0


@dataclass
class SolverSection:
    a0: tuple = ()
    fd_delta: float = 0.25
    rel_tol: float = 0.01
    i_max: int = 25
    broyden: bool = True
    broyden_lambda: float = 0.1
    broyden_step_cap: int = 10
    ls_initial_step: float = 1.0
    ls_shrink: float = 0.5
    ls_expand: float = 2.0
    ls_max_probes: int = 8
    ls_refine: bool = True
    actuation_ms: float = 12500.0


@dataclass
class TargetSection:
    kind: str = "reachable"
    actuation: tuple = ()
    path: str = ""
    bump_amplitude: float = -12.0
    bump_center: tuple = (220.0, 160.0)
    bump_sigma: float = 30.0
    waist: tuple = (40.0, 270.0)
    rotate_deg: float = 0.0  # about the vertical (y) axis
    rotate_center: tuple = (150.0, 225.0, 40.0)
    translate: tuple = (0.0, 0.0, 0.0)


@dataclass
class RunSection:
    seed: int = 0
    output_dir: str = "out"
    mode: str = "solve"
    baseline_step: float = 1.0  # multiple of fd_delta
    baseline_max_evals: int = 400
    oracle_points: int = 21
    oracle_override: bool = False


@dataclass
class ExperimentConfig:
    plant: PlantSection = field(default_factory=PlantSection)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    bspline: BsplineSection = field(default_factory=BsplineSection)
    icp: IcpSection = field(default_factory=IcpSection)
    solver: SolverSection = field(default_factory=SolverSection)
    target: TargetSection = field(default_factory=TargetSection)
    run: RunSection = field(default_factory=RunSection)
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        validate(self)

    def with_(self, section: str, **kw) -> "ExperimentConfig":
        return replace(self, **{section: replace(getattr(self, section), **kw)})

    @property
    def target_path(self) -> Path:
        return (self.base_dir / self.target.path).resolve()

    @property
    def output_dir(self) -> Path:
        return (self.base_dir / self.run.output_dir).resolve()


SECTIONS = {f.name: f.default_factory for f in fields(ExperimentConfig) if f.name != "base_dir"}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(default, text: str):
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(float(x) for x in text.replace(",", " ").split())
    return text.strip()


def _section(name, items: dict, where: str):
    obj = SECTIONS[name]()
    known = {f.name for f in fields(obj)}
    kw = {}
    for key, text in items.items():
        if key not in known:
            raise ConfigError(f"{where}: unknown key [{name}] {key}")
        try:
            kw[key] = _convert(getattr(obj, key), text)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for [{name}] {key}: {exc}") from None
    return replace(obj, **kw)


def parse_config(text: str, base_dir=None, where: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=where)
    except configparser.Error as exc:
        raise ConfigError(f"{where}: {exc.message if hasattr(exc, 'message') else exc}") from None
    parts = {}
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"{where}: unknown section [{name}]")
        parts[name] = _section(name, dict(parser.items(name)), where)
    return ExperimentConfig(**parts, base_dir=Path(base_dir) if base_dir else Path.cwd())


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), path.parent.resolve(), str(path))


def validate(cfg: ExperimentConfig) -> None:
    if cfg.run.mode not in MODES:
        raise ConfigError(f"run.mode must be one of {', '.join(MODES)}")
    if cfg.target.kind not in TARGET_KINDS:
        raise ConfigError(f"target.kind must be one of {', '.join(TARGET_KINDS)}")
    if cfg.target.kind == "file":
        if not cfg.target.path:
            raise ConfigError("target.kind=file needs target.path")
        if not cfg.target_path.is_file():
            raise ConfigError(f"target mesh not found: {cfg.target_path}")
    if cfg.objective.partition not in ("auto", "mannequin", "halves"):
        raise ConfigError("objective.partition must be auto, mannequin or halves")
    if cfg.run.baseline_step not in (1.0, 1.5, 2.0):
        raise ConfigError("run.baseline_step must be 1.0, 1.5 or 2.0")
    if cfg.run.oracle_points < 2:
        raise ConfigError("run.oracle_points must be >= 2")
    for name, n in (("target.bump_center", 2), ("target.waist", 2),
                    ("target.rotate_center", 3), ("target.translate", 3)):
        section, key = name.split(".")
        if len(getattr(getattr(cfg, section), key)) != n:
            raise ConfigError(f"{name} needs {n} numbers")

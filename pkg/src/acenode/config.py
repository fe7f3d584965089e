"""Run configuration: INI-style ``[section]`` / ``key = value`` files.

Every field has a default, unknown sections or keys are rejected, and
:meth:`RunConfig.to_ini` writes the fully resolved configuration back out.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .model import MODEL_KINDS, TASKS
from .solvers import SolverConfig
from .tensor import ConfigurationError


@dataclass
class RunSection:
    task: str = "crossing"
    model: str = "ace_elementwise"
    output_dir: str = "runs"


@dataclass
class ModelSection:
    hidden: int = 32
    channels: int = 16
    t1: float = 1.0


@dataclass
class SolverSection:
    method: str = "dopri5"
    step_size: float = 0.1
    rtol: float = 1e-3
    atol: float = 1e-3
    max_steps: int = 10000
    min_step: float = 1e-12
    initial_step: float | None = None

    def to_solver(self) -> SolverConfig:
        return SolverConfig(**dataclasses.asdict(self))


@dataclass
class TrainingSection:
    lr: float = 1e-2
    # named lam in code; "lambda" in files
    lam: float = 0.0
    reg_norm: str = "L2sq"
    epochs: int = 100
    batch_size: int = 128
    seed: int = 0
    stop_at: float | None = None


@dataclass
class DataSection:
    seed: int = 0
    n: int = 200
    noise: float = 0.05
    d: int = 5
    length: int = 2000
    window: int = 8
    coupling: str = "structured"
    coupling_strength: float = 0.95
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    limit: int | None = 5000
    test_limit: int | None = 1000
    downsample: bool = True


_SECTIONS = {"run": RunSection, "model": ModelSection, "solver": SolverSection, "training": TrainingSection,
             "data": DataSection}
_ALIASES = {("training", "lambda"): "lam"}
_REVERSE = {(s, v): k for (s, k), v in _ALIASES.items()}
_COUPLINGS = ("structured", "zero", "diagonal")


def _parse_value(raw: str, typ, where: str):
    text = raw.strip()
    optional = "None" in str(typ)
    if optional and text.lower() in ("", "none"):
        return None
    base = str(typ).replace(" | None", "")
    try:
        if base in ("int", "<class 'int'>"):
            return int(text)
        if base in ("float", "<class 'float'>"):
            return float(text)
        if base in ("bool", "<class 'bool'>"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
    except ValueError:
        raise ConfigurationError(f"{where}: cannot parse {text!r} as {base}") from None
    return text


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelSection = field(default_factory=ModelSection)
    solver: SolverSection = field(default_factory=SolverSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    data: DataSection = field(default_factory=DataSection)

    def validate(self) -> "RunConfig":
        if self.run.task not in TASKS:
            raise ConfigurationError(f"run.task: {self.run.task!r} not in {TASKS}")
        if self.run.model not in MODEL_KINDS:
            raise ConfigurationError(f"run.model: {self.run.model!r} not in {MODEL_KINDS}")
        if self.training.reg_norm not in ("L1", "L2", "L2sq"):
            raise ConfigurationError(f"training.reg_norm: {self.training.reg_norm!r} not in L1, L2, L2sq")
        for name in ("lr",):
            if getattr(self.training, name) <= 0:
                raise ConfigurationError(f"training.{name} must be > 0")
        if self.training.lam < 0:
            raise ConfigurationError("training.lambda must be >= 0")
        if self.training.epochs < 0:
            raise ConfigurationError("training.epochs must be >= 0")
        if self.training.batch_size < 1:
            raise ConfigurationError("training.batch_size must be >= 1")
        if self.data.coupling not in _COUPLINGS:
            raise ConfigurationError(f"data.coupling: {self.data.coupling!r} not in {_COUPLINGS}")
        if self.model.t1 <= 0:
            raise ConfigurationError("model.t1 must be > 0")
        try:
            self.solver.to_solver()
        except ConfigurationError as err:
            raise ConfigurationError(f"solver: {err}") from None
        return self

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",),
                                           interpolation=None, default_section="__defaults__")
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as err:
            raise ConfigurationError(f"malformed config: {err}") from None
        cfg = cls()
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigurationError(f"unknown section [{section}]; expected one of {sorted(_SECTIONS)}")
            target = getattr(cfg, section)
            types = {f.name: f.type for f in dataclasses.fields(target)}
            for key, raw in parser.items(section):
                name = _ALIASES.get((section, key), key)
                if name not in types or (section, name) in _REVERSE and key == name:
                    raise ConfigurationError(f"unknown key {section}.{key}")
                setattr(target, name, _parse_value(raw, types[name], f"{section}.{key}"))
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file {path} not found")
        return cls.from_text(path.read_text(encoding="utf-8"))

    def to_ini(self) -> str:
        lines = []
        for section in _SECTIONS:
            lines.append(f"[{section}]")
            for f in dataclasses.fields(getattr(self, section)):
                key = _REVERSE.get((section, f.name), f.name)
                lines.append(f"{key} = {_format_value(getattr(getattr(self, section), f.name))}")
            lines.append("")
        return "\n".join(lines)

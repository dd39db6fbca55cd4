"""Strict INI experiment configuration.

Sections: ``[experiment]``, ``[data]``, ``[model]``, ``[federation]`` and an
optional ``[ablation]``. Every key is typed by the matching dataclass field;
unknown sections or keys are errors. ``dumps(loads(text))`` is canonical, so
parse -> serialize -> parse is a fixed point.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .federation import RoundConfig
from .models import ModelConfig


class ConfigError(ValueError):
    """Malformed, unknown or invalid configuration values."""


@dataclass(frozen=True)
class ExperimentSection:
    seeds: tuple = (0,)
    output_dir: str = "runs"
    record_timing: bool = False
    local_epochs_grid: tuple = ()  # empty: the single [federation] local_epochs


@dataclass(frozen=True)
class DataConfig:
    cuers: int = 4
    sentences: int = 200
    min_len: int = 4
    max_len: int = 10
    min_word: int = 1
    max_word: int = 3
    lexicon_size: int = 24
    n_lips: int = 10
    sigma: float = 0.1
    offset_scale: float = 0.3
    lag_set: tuple = (0, 1, 2)
    scale_min: float = 0.8
    scale_max: float = 1.2
    speed_min: float = 0.8
    speed_max: float = 1.2
    split_ratio: float = 0.8
    data_seed: int = 0

    def __post_init__(self):
        if self.cuers < 1 or self.sentences < 2:
            raise ValueError("need at least one cuer and two sentences")
        if not (1 <= self.min_len <= self.max_len and 1 <= self.min_word <= self.max_word):
            raise ValueError("invalid sentence or word length range")
        if self.sigma < 0 or self.offset_scale < 0:
            raise ValueError("sigma and offset_scale must be non-negative")
        if not self.lag_set or min(self.lag_set) < 0:
            raise ValueError("lag_set must be non-empty and non-negative")
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError("split_ratio must be in (0, 1)")


@dataclass(frozen=True)
class AblationCell:
    alpha: float
    beta: float
    gamma: float
    shared: bool = True

    @property
    def label(self) -> str:
        return f"a={self.alpha:g},b={self.beta:g},g={self.gamma:g},{'shared' if self.shared else 'unshared'}"


# the reference rows of the distillation-weight study
DEFAULT_CELLS = (
    AblationCell(0.0, 0.0, 0.0),
    AblationCell(0.005, 0.0, 0.5),
    AblationCell(0.005, 0.005, 0.0),
    AblationCell(0.0, 0.0, 0.5),
    AblationCell(0.005, 0.005, 0.5),
)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: RoundConfig = field(default_factory=RoundConfig)
    ablation: tuple = DEFAULT_CELLS

    def replace(self, section: str, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})


SECTIONS = {"experiment": ExperimentSection, "data": DataConfig, "model": ModelConfig,
            "federation": RoundConfig}


# ----------------------------------------------------------------------------
# value codecs

def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_value(raw: str, default):
    if isinstance(default, bool):
        return _parse_bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.replace(",", " ").split())
    return raw.strip()


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def parse_cells(text: str) -> tuple:
    """``"a,b,g[,shared|unshared]; ..."`` -> tuple of AblationCell."""
    cells = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = [p.strip() for p in chunk.split(",")]
        if len(parts) not in (3, 4):
            raise ConfigError(f"ablation cell {chunk!r} must be 'alpha, beta, gamma[, shared|unshared]'")
        shared = True
        if len(parts) == 4:
            if parts[3] not in ("shared", "unshared"):
                raise ConfigError(f"ablation cell flag must be shared or unshared, got {parts[3]!r}")
            shared = parts[3] == "shared"
        try:
            cells.append(AblationCell(float(parts[0]), float(parts[1]), float(parts[2]), shared))
        except ValueError as exc:
            raise ConfigError(f"bad ablation cell {chunk!r}: {exc}") from None
    if not cells:
        raise ConfigError("ablation grid is empty")
    return tuple(cells)


def format_cells(cells) -> str:
    return "; ".join(f"{c.alpha!r}, {c.beta!r}, {c.gamma!r}, {'shared' if c.shared else 'unshared'}"
                     for c in cells)


# ----------------------------------------------------------------------------
# parse / serialize

def loads(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, empty_lines_in_values=False)
    cp.optionxform = str  # keys are case-sensitive
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    unknown = set(cp.sections()) - set(SECTIONS) - {"ablation"}
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    built = {}
    for name, cls in SECTIONS.items():
        defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
        values = {}
        if cp.has_section(name):
            for key, raw in cp.items(name):
                if key not in defaults:
                    raise ConfigError(f"unknown key {key!r} in [{name}]")
                try:
                    values[key] = _parse_value(raw, defaults[key])
                except ValueError as exc:
                    raise ConfigError(f"[{name}] {key}: {exc}") from None
        try:
            built[name] = cls(**values)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{name}] {exc}") from None
    cells = DEFAULT_CELLS
    if cp.has_section("ablation"):
        keys = set(cp.options("ablation"))
        if keys - {"cells"}:
            raise ConfigError(f"unknown key(s) in [ablation]: {sorted(keys - {'cells'})}")
        if "cells" in keys:
            cells = parse_cells(cp.get("ablation", "cells"))
    cfg = ExperimentConfig(ablation=cells, **built)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig):
    if not cfg.experiment.seeds:
        raise ConfigError("[experiment] seeds must list at least one seed")
    if any(m < 1 for m in cfg.experiment.local_epochs_grid):
        raise ConfigError("[experiment] local_epochs_grid entries must be >= 1")
    if cfg.model.vocab > 40:
        raise ConfigError("[model] vocab must be <= 40 (8 hand shapes x 5 positions)")


def dumps(cfg: ExperimentConfig) -> str:
    lines = []
    for name in SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in dataclasses.fields(section):
            lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
        lines.append("")
    lines += ["[ablation]", f"cells = {format_cells(cfg.ablation)}", ""]
    return "\n".join(lines)


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)


def save(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(cfg))

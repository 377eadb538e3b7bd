"""Run configuration: one JSON document with a section per stage.

Loading is strict: unknown keys and type mismatches raise ConfigError with
the dotted path of the offending field, before any work starts.
"""

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .datagen import DatagenConfig, DegradeConfig
from .errors import ConfigError
from .model import RestorerConfig
from .pipeline import InferenceConfig, TrainConfig
from .turbsim import DEFAULT_RANGES, SimConfig


@dataclass(frozen=True)
class TurbRanges:
    D: tuple = DEFAULT_RANGES["D"]
    L: tuple = DEFAULT_RANGES["L"]
    Cn2: tuple = DEFAULT_RANGES["Cn2"]
    corr: tuple = DEFAULT_RANGES["corr"]

    def as_dict(self):
        return {k: tuple(v) for k, v in dataclasses.asdict(self).items()}


@dataclass(frozen=True)
class TurbsimSection:
    sim: SimConfig = field(default_factory=SimConfig)
    ranges: TurbRanges = field(default_factory=TurbRanges)
    wavelength: float = 550e-9


@dataclass(frozen=True)
class AblationConfig:
    repeats_sweep: list = field(default_factory=lambda: [1, 2, 5, 10, 20])
    max_rows: int = 6  # rows beyond this budget are reported as skipped
    time_budget_s: float = 0.0  # 0 disables the wall-clock budget
    eval_sequences: int = 8  # held-out sequences used per row
    eval_seed: int = 777


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    scene_dir: str = None
    datagen: DatagenConfig = field(default_factory=DatagenConfig)
    turbsim: TurbsimSection = field(default_factory=TurbsimSection)
    model: RestorerConfig = field(default_factory=RestorerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)


def _default_of(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def _coerce(value, default, path):
    """Check ``value`` against the type of ``default``; returns the converted value."""
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {type(value).__name__}")
        return build(type(default), value, path)
    if default is None:
        if value is not None and (isinstance(value, bool) or not isinstance(value, (int, str))):
            raise ConfigError(f"{path}: expected an integer, string or null")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, (tuple, list)):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if isinstance(default, tuple) and default and len(value) != len(default):
            raise ConfigError(f"{path}: expected {len(default)} entries, got {len(value)}")
        proto = default[0] if default else None
        items = [_coerce(v, proto, f"{path}[{i}]") if proto is not None else v
                 for i, v in enumerate(value)]
        return tuple(items) if isinstance(default, tuple) else items
    raise ConfigError(f"{path}: unsupported field type")


def build(cls, data, path=""):
    """Construct dataclass ``cls`` from a dict, rejecting unknown keys."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"{where}: unknown key")
    kwargs = {}
    for name, value in data.items():
        where = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(value, _default_of(fields[name]), where)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from None


def to_dict(cfg):
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def load_config(path=None):
    """Read a RunConfig from a JSON file (defaults when ``path`` is None)."""
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return build(RunConfig, data)


def bundled_config(name="desk"):
    """Path to a config shipped with the package."""
    ref = resources.files("turbmit") / "configs" / f"{name}.json"
    if not ref.is_file():
        raise ConfigError(f"no bundled config named {name!r}")
    return Path(str(ref))


__all__ = [
    "AblationConfig", "DegradeConfig", "RunConfig", "TurbRanges", "TurbsimSection",
    "build", "bundled_config", "load_config", "to_dict",
]

"""Run configuration: typed sections parsed from YAML or JSON with defaults.

Layout (every key optional)::

    seed: 0
    folds: 4
    output_dir: runs/default
    data:
      paths: []            # MGT1 files, one per class; excludes `synthesis`
      synthesis: {r: 16, v: 3, n_per_mode: 16, ...}
    fed:   {k: 3, t_max: 500, e: 2, participation: 0.6, ...}
    dgn:   {layer_dims: [36, 24, 5], filter_hidden: 64}
    rdgn:  {depth: 2, base_channels: 16}
    meta:  {regressor_epochs: 40, regressor_lr: 0.0005, ...}

Unknown keys, wrong types and violated bounds raise :class:`ConfigError`
naming the dotted key.
"""

from __future__ import annotations

import dataclasses
import json
import re
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .exceptions import ConfigError
from .federation import FedConfig, MetaSettings

DEFAULT_MODES = (((0.30, 0.50, 0.70), 0.08), ((0.45, 0.65, 0.85), 0.08), ((0.60, 0.80, 1.00), 0.08))


@dataclass(frozen=True)
class SynthesisConfig:
    """Synthetic classes: class ``c`` adds ``c * class_shift`` to every mode mean."""

    r: int = 16
    v: int = 3
    n_per_mode: int = 16
    modes: tuple = DEFAULT_MODES
    labels: tuple = ("A", "B")
    class_shift: float = 0.05

    def __post_init__(self):
        modes = tuple((tuple(float(x) for x in means), float(spread)) for means, spread in self.modes)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "labels", tuple(str(x) for x in self.labels))
        if self.r < 2 or self.v < 1 or self.n_per_mode < 1:
            raise ConfigError("synthesis needs r >= 2, v >= 1 and n_per_mode >= 1")
        if not modes:
            raise ConfigError("synthesis needs at least one mode")
        for means, spread in modes:
            if len(means) != self.v:
                raise ConfigError(f"every mode needs {self.v} view means, got {len(means)}")
            if spread <= 0:
                raise ConfigError(f"mode spread must be > 0, got {spread}")
        if not self.labels or len(set(self.labels)) != len(self.labels):
            raise ConfigError("class labels must be nonempty and distinct")


@dataclass(frozen=True)
class DataConfig:
    paths: tuple = ()
    labels: tuple = ()
    synthesis: SynthesisConfig | None = None

    def __post_init__(self):
        object.__setattr__(self, "paths", tuple(str(p) for p in self.paths))
        object.__setattr__(self, "labels", tuple(str(x) for x in self.labels))
        if self.paths and self.synthesis is not None:
            raise ConfigError("data: give either `paths` or `synthesis`, not both")
        if not self.paths and self.synthesis is None:
            object.__setattr__(self, "synthesis", SynthesisConfig())
        if self.labels and len(self.labels) != len(self.paths):
            raise ConfigError("data.labels must name every path")

    @property
    def class_labels(self):
        if self.paths:
            return self.labels or tuple(Path(p).stem for p in self.paths)
        return self.synthesis.labels


@dataclass(frozen=True)
class DgnSettings:
    layer_dims: tuple = (36, 24, 5)
    filter_hidden: int = 64

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if not self.layer_dims or min(self.layer_dims) < 1 or self.filter_hidden < 1:
            raise ConfigError("dgn widths must be >= 1 with at least one layer")


@dataclass(frozen=True)
class RdgnSettings:
    depth: int = 2
    base_channels: int = 16

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigError("rdgn depth and base_channels must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    folds: int = 4
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    dgn: DgnSettings = field(default_factory=DgnSettings)
    rdgn: RdgnSettings = field(default_factory=RdgnSettings)
    meta: MetaSettings = field(default_factory=MetaSettings)

    def __post_init__(self):
        if self.folds < 1:
            raise ConfigError(f"folds must be >= 1, got {self.folds}")

    def with_mode(self, mode):
        return dataclasses.replace(self, fed=dataclasses.replace(self.fed, mode=mode))

    def to_dict(self):
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# coercion

def _coerce(value, tp, key):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        for a in args:
            if a is not type(None):
                return _coerce(value, a, key)
    if dataclasses.is_dataclass(tp):
        return build(tp, value, key)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if tp is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def build(cls, values, prefix=""):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping, got {type(values).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(values) - names)
    if unknown:
        where = f"{prefix}." if prefix else ""
        raise ConfigError(f"unknown key {where}{unknown[0]}; expected one of {sorted(names)}")
    kwargs = {}
    for name, value in values.items():
        key = f"{prefix}.{name}" if prefix else name
        kwargs[name] = _coerce(value, hints[name], key)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from None


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (``1e-05``) as floats."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                   |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                   |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                   |[-+]?\.(?:inf|Inf|INF)
                   |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def load_yaml(text):
    return yaml.load(text, Loader=_Loader)


def _is_path(source):
    if isinstance(source, Path):
        return True
    return isinstance(source, str) and source.strip() != "" and "\n" not in source and Path(source).is_file()


def parse_config(source):
    """RunConfig from a path, a YAML/JSON string or a mapping. Empty input gives defaults."""
    if isinstance(source, dict):
        raw = source
    else:
        text = Path(source).read_text() if _is_path(source) else source
        try:
            raw = load_yaml(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML/JSON: {exc}") from None
    return build(RunConfig, raw or {})


def dump_config(cfg, fmt="yaml"):
    d = cfg.to_dict()
    if fmt == "json":
        return json.dumps(d, indent=2, sort_keys=True)
    return yaml.safe_dump(d, sort_keys=True)


def apply_overrides(raw, overrides):
    """Merge ``{"fed.t_max": "10"}`` style overrides into a raw mapping; values parse as YAML."""
    out = json.loads(json.dumps(raw or {}))
    for dotted, text in overrides.items():
        parts = dotted.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {dotted}: {p} is not a section")
        node[parts[-1]] = load_yaml(text) if isinstance(text, str) else text
    return out

"""Experiment configuration files and run bookkeeping.

A config is one YAML document with a section per module::

    data:     {root: ..., image_size: 64}
    model:    {encoder: {...}, projection: {...}, atrous: {...}}
    pretrain: {steps: 500, augment: {...}}
    finetune: {learning_rate: 0.057}
    sweep:    {fractions: [0.05, 1.0], seeds: [0, 1, 2, 3, 4]}
    synth:    {num_images: 500}

Every section is optional. Values are checked field by field against the
dataclass annotations before anything runs, and errors name the offending
field (``finetune.learning_rate: expected a number, got 'fast'``).
"""
from __future__ import annotations

import collections.abc
import dataclasses
import hashlib
import json
import os
import platform
import re
import sys
import types
import typing
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

import yaml

from . import __version__
from .checkpoint import FORMAT_VERSION
from .data import MANIFEST_CACHE_VERSION, taxonomy
from .eval import INIT_MODES
from .model import ArchitectureError, ModelConfig
from .synth import SynthConfig
from .train import FinetuneConfig, PretrainConfig

DATA_ROOT_ENV = "MARSSEG_DATA_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: Optional[str] = None  # falls back to $MARSSEG_DATA_ROOT
    image_size: int = 512
    workers: int = 4
    manifest_cache: Optional[str] = None

    def validate(self) -> None:
        if self.image_size < 1 or self.workers < 1:
            raise ValueError("image_size and workers must be positive")

    def resolved_root(self) -> Path:
        root = self.root or os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise ConfigError(f"data.root: not set and ${DATA_ROOT_ENV} is empty")
        return Path(root)


@dataclass
class SweepConfig:
    fractions: tuple[float, ...] = (0.01, 0.05, 0.1, 0.5, 1.0)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    init_modes: tuple[str, ...] = INIT_MODES

    def validate(self) -> None:
        if not self.fractions or not self.seeds:
            raise ValueError("fractions and seeds must be nonempty")
        bad = [f for f in self.fractions if not 0 < f <= 1]
        if bad:
            raise ValueError(f"fractions must lie in (0, 1], got {bad[0]}")
        unknown = [m for m in self.init_modes if m not in INIT_MODES]
        if unknown:
            raise ValueError(f"unknown init mode {unknown[0]!r}; expected one of {INIT_MODES}")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def hash(self) -> str:
        return config_digest(self.to_dict())


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def config_digest(obj: dict) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------

def _describe(v) -> str:
    return f"{type(v).__name__} {v!r}"


def _coerce(hint, value, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if dataclasses.is_dataclass(hint):
        return from_mapping(hint, value, where)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {_describe(value)}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {_describe(value)}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {_describe(value)}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {_describe(value)}")
        return value
    if origin in (tuple, list, collections.abc.Sequence):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {_describe(value)}")
        if origin is not tuple or (len(args) == 2 and args[1] is Ellipsis):
            return tuple(_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    raise ConfigError(f"{where}: unsupported field type {hint}")  # pragma: no cover


def from_mapping(cls, raw: Any, where: str = ""):
    """Build dataclass ``cls`` from a plain mapping, checking every field."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {_describe(raw)}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    for key in raw:
        if key not in names:
            raise ConfigError(f"{_join(where, key)}: unknown field (known: {', '.join(names)})")
    kwargs = {k: _coerce(hints[k], v, _join(where, k)) for k, v in raw.items()}
    try:
        obj = cls(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
    except (ValueError, ArchitectureError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where or 'config'}: {exc}") from None
    return obj


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads ``1e-4`` as a float (YAML 1.1 wants ``1.0e-4``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                |[-+]?\.(?:inf|Inf|INF)
                |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def _yaml(text: str):
    return yaml.load(text, Loader=_Loader)


def _join(where: str, key: str) -> str:
    return f"{where}.{key}" if where else key


def apply_override(raw: dict, assignment: str) -> None:
    """Apply ``section.field=value`` (value parsed as YAML) to a raw config mapping."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r}: expected key=value")
    path, text = assignment.split("=", 1)
    keys = path.strip().split(".")
    try:
        value = _yaml(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: unparseable value {text!r}: {exc}") from None
    node = raw
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{path}: {k} is not a section")
    node[keys[-1]] = value


def load_config(path: Optional[os.PathLike | str] = None, overrides: typing.Sequence[str] = ()) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = _yaml(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    for o in overrides:
        apply_override(raw, o)
    return from_mapping(ExperimentConfig, raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


# --------------------------------------------------------------------------
# run manifests
# --------------------------------------------------------------------------

def _utcnow() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def make_run_dir(base: os.PathLike | str, command: str, cfg: ExperimentConfig) -> Path:
    """``<base>/<command>-<UTC timestamp>-<config hash>``; a numeric suffix avoids collisions."""
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    run = Path(base) / f"{command}-{stamp}-{cfg.hash()}"
    candidate, n = run, 1
    while candidate.exists():
        candidate = run.with_name(f"{run.name}.{n}")
        n += 1
    candidate.mkdir(parents=True)
    return candidate


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    config_hash: str
    seed: int
    deterministic: bool
    started: str = field(default_factory=_utcnow)
    finished: Optional[str] = None
    status: str = "running"
    versions: dict = field(default_factory=lambda: {
        "marsseg": __version__,
        "checkpoint_format": FORMAT_VERSION,
        "manifest_cache": MANIFEST_CACHE_VERSION,
        "python": platform.python_version(),
        **_library_versions(),
    })
    taxonomy: dict = field(default_factory=taxonomy)
    outputs: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def finalize(self, run_dir: Path, status: str = "ok") -> None:
        """Hash every file in the run directory and write ``run_manifest.json``."""
        self.finished = _utcnow()
        self.status = status
        self.outputs = {str(p.relative_to(run_dir)): _sha256(p) for p in sorted(run_dir.rglob("*"))
                        if p.is_file() and p.name != "run_manifest.json"}
        self.write(run_dir)

    def write(self, run_dir: Path) -> None:
        (run_dir / "run_manifest.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _library_versions() -> dict:
    out = {}
    for name in ("numpy", "torch", "torchvision"):
        mod = sys.modules.get(name)
        if mod is not None:
            out[name] = getattr(mod, "__version__", "unknown")
    return out


def read_run_manifest(run_dir: os.PathLike | str) -> dict:
    path = Path(run_dir) / "run_manifest.json"
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{run_dir}: no run_manifest.json (not a run directory)") from None

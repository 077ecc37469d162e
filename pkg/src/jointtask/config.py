"""Plain-text experiment configuration.

Format: ``[section]`` headers followed by ``key = value`` lines. ``#`` starts a
comment line. Sequences are comma separated; ``none`` is the null value.

    [task]
    ops = add,prod
    modulus = 20

    [model]
    n_embed = 32

    [train]
    max_iters = 3000
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .errors import TypeMismatch, UnknownKey
from .train import CurriculumSchedule, Mixture, TrainConfig


@dataclass(frozen=True)
class ModelSettings:
    """ModelConfig minus vocab_size, which follows from the task."""

    n_embed: int = 32
    n_head: int = 1
    variant: str = "recurrent"
    n_steps: int = 4
    n_layers: int = 1
    context: int = 128
    ffn_mult: int = 4
    pos_every_step: bool = False

    def kwargs(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "n_embed"}


@dataclass(frozen=True)
class ExperimentSettings:
    out_dir: str = "runs"
    seeds: tuple = (0, 1, 2)
    embed_dims: tuple = (8, 16, 24, 32, 48, 64, 96, 128)
    jobs: int = 1
    pooled_fit: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    task: Mixture = field(default_factory=lambda: Mixture(("add",), modulus=10))
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    curriculum: Optional[CurriculumSchedule] = None
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)

    def to_text(self) -> str:
        return dump(self)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        return parse(text)

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """Apply flat ``key=value`` overrides (values may be strings or typed).

        Keys of one section are applied together, so interdependent fields
        such as ``family`` and ``ops`` can change at once.
        """
        grouped: dict = {}
        for key, value in overrides.items():
            section = _owner(key)
            if section is None:
                raise UnknownKey(key)
            grouped.setdefault(section, {})[key] = _coerce(section, key, value) if isinstance(value, str) else value
        cfg = self
        for section, values in grouped.items():
            cfg = _set_many(cfg, section, values)
        return _finish(cfg)


SECTIONS = {
    "task": Mixture,
    "model": ModelSettings,
    "train": TrainConfig,
    "curriculum": CurriculumSchedule,
    "experiment": ExperimentSettings,
}
_STR_TUPLES = {("task", "ops"), ("curriculum", "phase_a"), ("curriculum", "phase_b")}
_INT_TUPLES = {("experiment", "seeds"), ("experiment", "embed_dims")}


def _field_types(section: str) -> dict:
    return {f.name: f.type for f in fields(SECTIONS[section])}


def _owner(key: str) -> Optional[str]:
    for name in SECTIONS:
        if key in _field_types(name):
            return name
    return None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(section: str, key: str, raw: str):
    kind = str(_field_types(section)[key])
    raw = raw.strip()
    try:
        if (section, key) in _STR_TUPLES:
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        if (section, key) in _INT_TUPLES:
            return tuple(int(p) for p in raw.split(",") if p.strip())
        if kind.startswith("Optional"):
            if raw.lower() == "none":
                return None
            kind = kind[len("Optional["):-1]
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise TypeMismatch(f"{key}: cannot read {raw!r} as {kind}") from None


def _set_many(cfg: ExperimentConfig, section: str, values: dict) -> ExperimentConfig:
    current = getattr(cfg, section)
    if current is None:  # curriculum starts absent
        base = {"phase_a": ("add",), "phase_b": ("add",), "ramp_start": 10_000, "ramp_end": 20_000}
        return replace(cfg, curriculum=_Pending({**base, **values}))
    if isinstance(current, _Pending):
        current.values.update(values)
        return cfg
    try:
        return replace(cfg, **{section: replace(current, **values)})
    except (TypeError, ValueError) as exc:
        raise TypeMismatch(f"{', '.join(values)}: {exc}") from None


class _Pending:
    """Curriculum values collected before the section is complete."""

    def __init__(self, values: dict):
        self.values = values


def _finish(cfg: ExperimentConfig) -> ExperimentConfig:
    if isinstance(cfg.curriculum, _Pending):
        try:
            sched = CurriculumSchedule(**cfg.curriculum.values)
        except ValueError as exc:
            raise TypeMismatch(f"curriculum: {exc}") from None
        cfg = replace(cfg, curriculum=sched)
    return cfg


def parse(text: str) -> ExperimentConfig:
    grouped: dict = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise UnknownKey(f"[{section}]", lineno)
            continue
        key, eq, raw = line.partition("=")
        key = key.strip()
        if not eq:
            raise UnknownKey(key, lineno)
        owner = section if section is not None else _owner(key)
        if owner is None or key not in _field_types(owner):
            raise UnknownKey(key, lineno)
        grouped.setdefault(owner, {})[key] = _coerce(owner, key, raw)
    cfg = ExperimentConfig()
    for owner, values in grouped.items():
        cfg = _set_many(cfg, owner, values)
    return _finish(cfg)


def dump(cfg: ExperimentConfig) -> str:
    out = []
    for name in SECTIONS:
        obj = getattr(cfg, name)
        if obj is None:
            continue
        out.append(f"[{name}]")
        out += [f"{f.name} = {_format(getattr(obj, f.name))}" for f in fields(obj)]
        out.append("")
    return "\n".join(out)


def load(path) -> ExperimentConfig:
    return parse(Path(path).read_text(encoding="utf-8"))


def save(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(dump(cfg), encoding="utf-8")
    return path

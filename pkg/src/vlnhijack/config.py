"""Run configuration: INI-style ``key = value`` text with sections.

Sections and defaults::

    [run]       seed = 0
    [world]     n_worlds = 6, episodes_per_world = 240, heldout_fraction = 0.25,
                rooms_x = 3, rooms_y = 3, n_nodes = 19, room_size = 4.0,
                object_density = 2.0, atlas_size = 256, resolution = 32
    [agent]     dim = 64, epochs = 60, lr = 0.003, batch_size = 64,
                label_smoothing = 0.1, seed = 0
    [attack]    epsilon = 0.3, lr = 0.01, beta1 = 0.9, beta2 = 0.999,
                iterations = 300, batch_size = 16, checkpoint_every = 30,
                steps_rendered = 3, modes = stop, trajectory, max_instances = 12
    [ablation]  instances = 5, steps_rendered = 1, 2, 3, epsilon = 0.1, 0.3, 0.5,
                instructions_per_trajectory = 1, 2, 3, iterations = 300, 600, 900

Every value can be overridden from the environment as ``VHL_<SECTION>_<KEY>``
(for example ``VHL_ATTACK_EPSILON=0.5``).
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import os
from dataclasses import dataclass, field, fields

from .attack import MODES, AttackConfig
from .worldgen import WorldParams

ENV_PREFIX = "VHL_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSection:
    seed: int = 0


@dataclass(frozen=True)
class WorldSection:
    n_worlds: int = 6
    episodes_per_world: int = 240
    heldout_fraction: float = 0.25
    rooms_x: int = 3
    rooms_y: int = 3
    n_nodes: int = 19
    room_size: float = 4.0
    object_density: float = 2.0
    atlas_size: int = 256
    resolution: int = 32

    def params(self) -> WorldParams:
        return WorldParams(rooms_x=self.rooms_x, rooms_y=self.rooms_y, n_nodes=self.n_nodes,
                           room_size=self.room_size, object_density=self.object_density,
                           atlas_size=self.atlas_size)


@dataclass(frozen=True)
class AgentSection:
    dim: int = 64
    epochs: int = 60
    lr: float = 3e-3
    batch_size: int = 64
    label_smoothing: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class AttackSection:
    epsilon: float = 0.3
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    iterations: int = 300
    batch_size: int = 16
    checkpoint_every: int = 30
    steps_rendered: int = 3
    modes: tuple[str, ...] = MODES
    max_instances: int = 12

    def attack_config(self, mode: str, seed: int = 0, **overrides) -> AttackConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(AttackConfig) if hasattr(self, f.name)}
        kw.update(mode=mode, seed=seed, **overrides)
        return AttackConfig(**kw)


@dataclass(frozen=True)
class AblationSection:
    instances: int = 5
    steps_rendered: tuple[int, ...] = (1, 2, 3)
    epsilon: tuple[float, ...] = (0.1, 0.3, 0.5)
    instructions_per_trajectory: tuple[int, ...] = (1, 2, 3)
    iterations: tuple[int, ...] = (300, 600, 900)


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    world: WorldSection = field(default_factory=WorldSection)
    agent: AgentSection = field(default_factory=AgentSection)
    attack: AttackSection = field(default_factory=AttackSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def validate(self) -> None:
        w, a, k, b = self.world, self.agent, self.attack, self.ablation
        _check(w.n_worlds >= 1, "n_worlds out of range")
        _check(w.episodes_per_world >= 3, "episodes_per_world out of range")
        _check(0 < w.heldout_fraction < 1, "heldout_fraction out of range")
        _check(w.resolution >= 8 and w.resolution % 4 == 0, "resolution out of range")
        try:
            w.params().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        _check(a.dim >= 1, "dim out of range")
        _check(a.epochs >= 0, "epochs out of range")
        _check(a.lr >= 0, "lr out of range")
        _check(a.batch_size >= 1, "batch_size out of range")
        _check(0 <= a.label_smoothing < 1, "label_smoothing out of range")
        _check(0 < k.epsilon <= 1, "epsilon out of range")
        _check(k.max_instances >= 1, "max_instances out of range")
        _check(len(k.modes) >= 1 and all(m in MODES for m in k.modes), "modes out of range")
        for mode in k.modes:
            try:
                k.attack_config(mode).validate()
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        _check(b.instances >= 1, "ablation instances out of range")
        _check(all(s in (1, 2, 3) for s in b.steps_rendered), "ablation steps_rendered out of range")
        _check(all(0 <= e <= 1 for e in b.epsilon), "ablation epsilon out of range")
        _check(all(1 <= n <= 3 for n in b.instructions_per_trajectory),
               "ablation instructions_per_trajectory out of range")
        _check(all(n >= k.checkpoint_every and n % k.checkpoint_every == 0 for n in b.iterations),
               "ablation iterations out of range")


def _check(ok: bool, message: str) -> None:
    if not ok:
        raise ConfigError(message)


_SECTION_TYPES = {"run": RunSection, "world": WorldSection, "agent": AgentSection,
                  "attack": AttackSection, "ablation": AblationSection}


def _convert(cls, key: str, text: str):
    default = getattr(cls(), key)
    try:
        if isinstance(default, bool):
            return text.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(t) for t in items)
        return type(default)(text.strip())
    except ValueError:
        raise ConfigError(f"malformed value for {key}: {text!r}") from None


def parse_config(text: str, environ: dict | None = None) -> RunConfig:
    """Parse config text, apply ``VHL_`` environment overrides and validate."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values: dict[str, dict] = {name: {} for name in _SECTION_TYPES}
    for section in parser.sections():
        if section not in _SECTION_TYPES:
            raise ConfigError(f"unknown section [{section}]")
        cls = _SECTION_TYPES[section]
        known = {f.name for f in fields(cls)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {section}.{key}")
            values[section][key] = _convert(cls, key, raw)
    env = os.environ if environ is None else environ
    for section, cls in _SECTION_TYPES.items():
        for f in fields(cls):
            name = f"{ENV_PREFIX}{section}_{f.name}".upper()
            if name in env:
                values[section][f.name] = _convert(cls, f.name, env[name])
    cfg = RunConfig(**{s: _SECTION_TYPES[s](**values[s]) for s in _SECTION_TYPES})
    cfg.validate()
    return cfg


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for section in _SECTION_TYPES:
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()[:16]


def replace(cfg: RunConfig, section: str, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **changes)})

"""YAML run configuration.

The file is a tree with up to five top-level sections, every key optional::

    sim:      {horizon: 100, n_agents: 4, vertiports: [[0, 6000], ...], ...}
    uam:      {flight_speed: 73.762, ...}
    battery:  {capacity_kwh: 150, ...}
    reward:   {scaling_factor: 1.0, ...}
    trainer:  {gamma: 0.99, batch_size: 256, ...}

Missing keys keep their defaults. Unknown keys, wrongly typed values and
values that break an invariant are rejected with the offending line.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from uamrl.energy import BatterySpec, UamSpec
from uamrl.env import SimConfig
from uamrl.reward import RewardConfig
from uamrl.trainer import TrainerConfig

SECTIONS = {"sim": SimConfig, "uam": UamSpec, "battery": BatterySpec, "reward": RewardConfig, "trainer": TrainerConfig}
_NESTED = ("uam", "battery")


class ConfigFileError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    sim: SimConfig = field(default_factory=SimConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)

    def to_dict(self) -> dict:
        sim = dataclasses.asdict(self.sim)
        out = {
            "sim": {k: v for k, v in sim.items() if k not in _NESTED},
            "uam": sim["uam"],
            "battery": sim["battery"],
            "reward": dataclasses.asdict(self.reward),
            "trainer": dataclasses.asdict(self.trainer),
        }
        out["sim"]["vertiports"] = [list(v) for v in self.sim.vertiports]
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _line_index(text: str) -> dict[tuple[str, ...], int]:
    """Map key paths to 1-based line numbers."""
    lines: dict[tuple[str, ...], int] = {}
    root = yaml.compose(text)

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                p = path + (str(key.value),)
                lines[p] = key.start_mark.line + 1
                walk(value, p)

    if root is not None:
        walk(root, ())
    return lines


def _check_type(section: str, key: str, value, hint) -> None:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif hint is str:
        ok = isinstance(value, str)
    elif origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        ok = value is None if type(None) in args else False
        for a in args:
            if a is type(None):
                continue
            try:
                _check_type(section, key, value, a)
                ok = True
            except ConfigFileError:
                pass
    elif origin is tuple:
        ok = isinstance(value, list) and all(
            isinstance(v, list) and len(v) == 2 and all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in v)
            for v in value
        )
    else:
        ok = True
    if not ok:
        raise ConfigFileError(f"key '{section}.{key}': expected {hint}, got {type(value).__name__} {value!r}")


def build_config(tree: dict | None, source: str = "<config>", lines: dict | None = None) -> Config:
    tree = tree or {}
    lines = lines or {}

    def where(*path: str) -> str:
        for n in range(len(path), 0, -1):
            if path[:n] in lines:
                return f"{source}:{lines[path[:n]]}"
        return source

    if not isinstance(tree, dict):
        raise ConfigFileError(f"{source}: top level must be a mapping of sections")
    kwargs: dict[str, dict] = {}
    for section, body in tree.items():
        if section not in SECTIONS:
            raise ConfigFileError(f"{where(section)}: unknown section '{section}' (expected {sorted(SECTIONS)})")
        body = body or {}
        if not isinstance(body, dict):
            raise ConfigFileError(f"{where(section)}: section '{section}' must be a mapping")
        cls = SECTIONS[section]
        hints = typing.get_type_hints(cls)
        allowed = {f.name for f in dataclasses.fields(cls) if not (section == "sim" and f.name in _NESTED)}
        for key, value in body.items():
            if key not in allowed:
                raise ConfigFileError(f"{where(section, key)}: unknown key '{section}.{key}'")
            try:
                _check_type(section, key, value, hints[key])
            except ConfigFileError as exc:
                raise ConfigFileError(f"{where(section, key)}: {exc}") from None
        kwargs[section] = dict(body)

    def make(section: str, **extra):
        body = kwargs.get(section, {})
        try:
            return SECTIONS[section](**body, **extra)
        except (ValueError, TypeError) as exc:
            named = [k for k in body if k in str(exc)]
            loc = where(section, named[0]) if named else where(section)
            key = f"'{section}.{named[0]}'" if named else f"section '{section}'"
            raise ConfigFileError(f"{loc}: {key}: {exc}") from None

    uam = make("uam")
    battery = make("battery")
    sim_body = kwargs.get("sim", {})
    if "vertiports" in sim_body:
        sim_body["vertiports"] = tuple(tuple(v) for v in sim_body["vertiports"])
    sim = make("sim", uam=uam, battery=battery)
    reward_body = kwargs.setdefault("reward", {})
    reward_body.setdefault("energy_normalizer", battery.capacity_kwh)
    return Config(sim=sim, trainer=make("trainer"), reward=make("reward"))


def load_config(path: str | Path | None) -> Config:
    """Parse a YAML config; ``None`` gives the built-in defaults."""
    if path is None:
        return build_config({})
    path = Path(path)
    text = path.read_text()
    try:
        tree = yaml.safe_load(text)
        lines = _line_index(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f"{path}:{mark.line + 1}" if mark else str(path)
        raise ConfigFileError(f"{loc}: invalid YAML: {exc}") from None
    return build_config(tree, str(path), lines)

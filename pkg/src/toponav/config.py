"""Structured-text configuration: one INI section per module, typed round-trip.

Values map onto the per-module config dataclasses; `descriptor_dim` fields are
derived from the world/descriptor settings at build time and never stored.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import types
import typing
from dataclasses import dataclass, field, fields, replace

from . import datagen as dg
from . import distnet, localnav, targetnet
from . import simworld as sw
from .agent import AgentConfig


@dataclass(frozen=True)
class MasterConfig:
    seed: int = 7
    workers: int = 1


@dataclass(frozen=True)
class PipelineConfig:
    train_worlds: int = 10
    eval_worlds: int = 5
    videos_per_world: int = 5
    distance_per_world: int = 250
    pairs_per_world: int = 250
    episodes_per_cell: int = 10


@dataclass
class FullConfig:
    master: MasterConfig = field(default_factory=MasterConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    world: sw.WorldSpec = field(default_factory=sw.WorldSpec)
    sensor: sw.SensorConfig = field(default_factory=sw.SensorConfig)
    descriptor: sw.DescriptorConfig = field(default_factory=sw.DescriptorConfig)
    noise: sw.NoiseModel = field(default_factory=sw.NoiseModel)
    datagen: dg.DatagenConfig = field(default_factory=dg.DatagenConfig)
    distance_model: distnet.DistanceModelConfig = field(default_factory=distnet.DistanceModelConfig)
    distance_train: distnet.TrainConfig = field(default_factory=distnet.TrainConfig)
    target_model: targetnet.TargetModelConfig = field(default_factory=targetnet.TargetModelConfig)
    target_train: targetnet.TargetTrainConfig = field(default_factory=targetnet.TargetTrainConfig)
    localnav: localnav.LocalNavConfig = field(default_factory=localnav.LocalNavConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)

    def descriptor_dim(self) -> int:
        return self.descriptor.dim(self.world.color_count)

    def agent_with_noise(self) -> AgentConfig:
        return replace(self.agent, noise=self.noise)


_SECTIONS = ("master", "pipeline", "world", "sensor", "descriptor", "noise", "datagen",
             "distance_model", "distance_train", "target_model", "target_train",
             "localnav", "agent")

# derived or structured fields that never appear in the file
_SKIP_FIELDS = {
    "distance_model": {"descriptor_dim"},
    "target_model": {"descriptor_dim"},
    "agent": {"noise"},
}


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _parse_value(text: str, hint, section: str, key: str):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or origin is types.UnionType:
        if text.lower() in ("none", ""):
            return None
        inner = [a for a in args if a is not type(None)]
        return _parse_value(text, inner[0], section, key)
    try:
        if hint is bool:
            if text.lower() in ("true", "1", "yes", "on"):
                return True
            if text.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is tuple or origin is tuple:
            return tuple(float(v) for v in text.split(",") if v.strip())
        return text
    except ValueError as exc:
        raise ValueError(f"[{section}] {key}: {exc}") from exc


def render_config(cfg: FullConfig) -> str:
    out = io.StringIO()
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        out.write(f"[{section}]\n")
        for f in fields(obj):
            if f.name in _SKIP_FIELDS.get(section, set()):
                continue
            out.write(f"{f.name} = {_format_value(getattr(obj, f.name))}\n")
        out.write("\n")
    return out.getvalue()


def save_config(cfg: FullConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(render_config(cfg))


def _apply_section(obj, section: str, items: dict):
    hints = typing.get_type_hints(type(obj))
    updates = {}
    for key, raw in items.items():
        if key in _SKIP_FIELDS.get(section, set()):
            raise ValueError(f"[{section}] {key} is derived and cannot be set")
        if key not in hints:
            raise ValueError(f"[{section}] unknown key {key!r}")
        updates[key] = _parse_value(raw, hints[key], section, key)
    if dataclasses.is_dataclass(obj) and not getattr(type(obj), "__dataclass_params__").frozen:
        for k, v in updates.items():
            setattr(obj, k, v)
        return obj
    return replace(obj, **updates)


def load_config(path) -> FullConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh, source=str(path))
    except configparser.Error as exc:
        raise ValueError(f"config parse error: {exc}") from exc
    cfg = FullConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        updated = _apply_section(getattr(cfg, section), section, dict(parser.items(section)))
        setattr(cfg, section, updated)
    return cfg


def apply_overrides(cfg: FullConfig, overrides) -> FullConfig:
    """Apply 'section.key=value' strings on top of a loaded config."""
    for text in overrides:
        if "=" not in text or "." not in text.split("=", 1)[0]:
            raise ValueError(f"override must look like section.key=value, got {text!r}")
        target, value = text.split("=", 1)
        section, key = target.strip().split(".", 1)
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        updated = _apply_section(getattr(cfg, section), section, {key.strip(): value})
        setattr(cfg, section, updated)
    return cfg

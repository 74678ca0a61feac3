"""Flat key = value configuration files, one assignment per line.

Keys map onto the hyperparameter, network and synthetic-dataset dataclass
fields plus a handful of run-level paths.  ``dump_config`` prints every
effective value back out for provenance.
"""

from __future__ import annotations

import typing
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, get_args, get_origin

from .codespace import HyperParams
from .data import SynthSpec
from .errors import ConfigError
from .networks import NetConfig
from .training import JOINT_TASKS


@dataclass
class TrainConfig:
    hp: HyperParams
    net: NetConfig
    manifest: Optional[Path] = None
    manifest_eval: Optional[Path] = None
    out_dir: Path = Path("runs/default")
    joint_tasks: tuple[str, ...] = JOINT_TASKS
    synth: Optional[SynthSpec] = None


_RUN_KEYS = ("manifest", "manifest_eval", "out_dir", "joint_tasks")


def parse_kv_file(path: Path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(value: str, annot) -> object:
    origin = get_origin(annot)
    if origin is typing.Union:  # Optional[...]
        args = [a for a in get_args(annot) if a is not type(None)]
        return _coerce(value, args[0])
    if annot is bool:
        low = value.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if annot is int:
        return int(value)
    if annot is float:
        return float(value)
    if annot is Path:
        return Path(value)
    if origin is tuple:
        items = [v.strip() for v in value.split(",") if v.strip()]
        elem = get_args(annot)[0]
        return tuple(_coerce(v, elem) for v in items)
    return value


def _field_types(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def build_train_config(kv: dict[str, str]) -> TrainConfig:
    """Assemble a TrainConfig from flat keys, rejecting unknown ones."""
    hp_types = _field_types(HyperParams)
    net_types = _field_types(NetConfig)
    synth_types = _field_types(SynthSpec)

    hp_kwargs, net_kwargs, synth_kwargs = {}, {}, {}
    run_kwargs: dict[str, object] = {}
    for key, value in kv.items():
        if key in hp_types:
            hp_kwargs[key] = _coerce(value, hp_types[key])
        elif key in net_types:
            net_kwargs[key] = _coerce(value, net_types[key])
        elif key.startswith("synth_") and key[6:] in synth_types:
            synth_kwargs[key[6:]] = _coerce(value, synth_types[key[6:]])
        elif key in _RUN_KEYS:
            if key == "joint_tasks":
                run_kwargs[key] = tuple(v.strip() for v in value.split(","))
            else:
                run_kwargs[key] = Path(value)
        else:
            raise ConfigError(f"unknown config key {key!r}")

    hp = HyperParams(**hp_kwargs)
    # the normalization epsilon rides the hyperparameter key
    net_kwargs.setdefault("eps", hp.eps_adain)
    net = NetConfig(**net_kwargs)
    synth = None
    if synth_kwargs:
        synth_kwargs.setdefault("seed", hp.seed)
        synth_kwargs.setdefault("size", net.image_size)
        synth = SynthSpec(**synth_kwargs)
    return TrainConfig(hp=hp, net=net, synth=synth, **run_kwargs)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def dump_config(cfg: TrainConfig) -> str:
    """Every effective value, one key = value per line."""
    lines = []
    for name, value in asdict(cfg.hp).items():
        lines.append(f"{name} = {_fmt(value)}")
    for name, value in asdict(cfg.net).items():
        lines.append(f"{name} = {_fmt(value)}")
    for key in _RUN_KEYS:
        value = getattr(cfg, key)
        if value is not None:
            lines.append(f"{key} = {_fmt(value)}")
    if cfg.synth is not None:
        for name, value in asdict(cfg.synth).items():
            lines.append(f"synth_{name} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def load_train_config(path: Path) -> TrainConfig:
    return build_train_config(parse_kv_file(path))

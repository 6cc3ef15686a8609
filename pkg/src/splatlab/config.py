"""Run configuration: one INI file with key=value sections.

Every field has a default; unknown sections or keys are a hard error so
typos cannot silently fall back to defaults. The effective config is
echoed into each run directory and re-running from the echo reproduces
the run exactly.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .deformnet import DsamConfig, TamConfig
from .encoders import EncoderConfig
from .training import LossConfig, Schedule


class ConfigError(Exception):
    """Malformed config file or unknown section/key."""


@dataclass
class ModelConfig:
    use_nss: bool = True
    use_tam: bool = True
    use_dsam: bool = True
    freeze_stage1: bool = False
    hidden: int = 64


@dataclass
class SceneConfig:
    preset: str = "toy"
    image_format: str = "ppm"


@dataclass
class RunRefs:
    """Paths recorded into the config echo by the CLI."""

    data: str = ""
    out: str = ""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    tam: TamConfig = field(default_factory=TamConfig)
    dsam: DsamConfig = field(default_factory=DsamConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: Schedule = field(default_factory=Schedule)
    scene: SceneConfig = field(default_factory=SceneConfig)
    run: RunRefs = field(default_factory=RunRefs)


# INI key "lambda" maps onto the loss dataclass field "lam"
_ALIASES = {("loss", "lambda"): "lam"}
_REVERSE_ALIASES = {("loss", "lam"): "lambda"}


def _coerce(text, default):
    if isinstance(default, bool):
        low = text.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def parse_config(path=None, text=None):
    """Load a RunConfig; missing file sections/keys keep their defaults."""
    cfg = RunConfig()
    if path is None and text is None:
        return cfg
    cp = configparser.ConfigParser()
    try:
        if text is not None:
            cp.read_string(text)
        elif not cp.read(path):
            raise ConfigError(f"config file not found: {path}")
    except configparser.Error as e:
        raise ConfigError(str(e)) from e

    sections = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    for sec_name in cp.sections():
        if sec_name not in sections:
            raise ConfigError(f"unknown config section [{sec_name}]")
        sub = sections[sec_name]
        valid = {f.name: f for f in dataclasses.fields(sub)}
        for key, raw in cp[sec_name].items():
            fname = _ALIASES.get((sec_name, key), key)
            if fname not in valid:
                raise ConfigError(f"unknown key '{key}' in section [{sec_name}]")
            default = getattr(sub, fname)
            try:
                setattr(sub, fname, _coerce(raw, default))
            except ValueError as e:
                raise ConfigError(f"[{sec_name}] {key}: {e}") from e
    return cfg


def write_config(cfg: RunConfig, path):
    cp = configparser.ConfigParser()
    for f in dataclasses.fields(cfg):
        sub = getattr(cfg, f.name)
        sec = {}
        for sf in dataclasses.fields(sub):
            key = _REVERSE_ALIASES.get((f.name, sf.name), sf.name)
            sec[key] = repr(getattr(sub, sf.name)) if isinstance(
                getattr(sub, sf.name), float) else str(getattr(sub, sf.name))
        cp[f.name] = sec
    with open(path, "w") as fh:
        cp.write(fh)

"""Run configuration: one INI file drives every stage.

Sections are ``[run]``, ``[corpus]``, ``[pretrain]``, ``[autoencoder]``,
``[diffusion]`` and ``[eval]``; each maps onto a dataclass whose defaults are
the published hyperparameters.  Unset keys keep their defaults and unknown
keys are rejected.  ``dump_config`` writes the fully resolved config, which
loads back to an equal object.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import types
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from sgdiff.errors import ConfigError
from sgdiff.latent_ae import AEConfig
from sgdiff.pretrain import PretrainConfig
from sgdiff.diffusion import DiffusionConfig

PRESETS = ("desk", "paper")


@dataclass
class CorpusConfig:
    """Either a synthetic corpus (``source = synthetic``) or annotation manifests."""

    source: str = "synthetic"
    train_manifest: str = ""
    heldout_manifest: str = ""
    seed: int = 0
    num_scenes: int = 512
    heldout_scenes: int = 64
    image_size: int = 32
    max_objects: int = 5

    def __post_init__(self):
        if self.source not in ("synthetic", "manifest"):
            raise ValueError("corpus source must be 'synthetic' or 'manifest'")
        if self.source == "manifest" and not self.train_manifest:
            raise ValueError("manifest corpus needs train_manifest")


@dataclass
class EvalConfig:
    is_splits: int = 10
    num_samples: int = 256
    probe_samples: int = 64
    classifier_images: int = 4096
    classifier_steps: int = 1500
    classifier_width: int = 32
    feature_dim: int = 64


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    autoencoder: AEConfig = field(default_factory=AEConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def conditioning_mode(self) -> str:
        return self.diffusion.mode


_SECTIONS = ("corpus", "pretrain", "autoencoder", "diffusion", "eval")
_RUN_KEYS = ("seed", "out_dir")


def _parse_value(raw: str, hint, where: str):
    text = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        if text.lower() in ("none", ""):
            return None
        (hint,) = [a for a in args if a is not type(None)]
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    try:
        if hint is bool:
            lowered = text.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        if origin is tuple:
            parts = [p for p in text.replace(" ", "").split(",") if p]
            return tuple(_parse_value(p, args[0], where) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    raise ConfigError(f"{where}: unsupported field type {hint}")


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _build(cls, items: dict, section: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(items) - names)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    kwargs = {k: _parse_value(v, hints[k], f"[{section}] {k}") for k, v in items.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    extra = sorted(set(parser.sections()) - set(_SECTIONS) - {"run"})
    if extra:
        raise ConfigError(f"{source}: unknown sections: {', '.join(extra)}")
    run = dict(parser.items("run")) if parser.has_section("run") else {}
    unknown = sorted(set(run) - set(_RUN_KEYS))
    if unknown:
        raise ConfigError(f"[run] unknown keys: {', '.join(unknown)}")
    kwargs = {}
    if "seed" in run:
        kwargs["seed"] = _parse_value(run["seed"], int, "[run] seed")
    if "out_dir" in run:
        kwargs["out_dir"] = run["out_dir"].strip()
    classes = {"corpus": CorpusConfig, "pretrain": PretrainConfig, "autoencoder": AEConfig,
               "diffusion": DiffusionConfig, "eval": EvalConfig}
    for name, cls in classes.items():
        items = dict(parser.items(name)) if parser.has_section(name) else {}
        kwargs[name] = _build(cls, items, name)
    return RunConfig(**kwargs)


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def load_preset(name: str) -> RunConfig:
    return parse_config(preset_text(name), f"preset:{name}")


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    return resources.files("sgdiff.presets").joinpath(f"{name}.cfg").read_text()


def dump_config(cfg: RunConfig) -> str:
    """Every field of the effective config, one section per stage."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["run"] = {"seed": _format_value(cfg.seed), "out_dir": cfg.out_dir}
    for name in _SECTIONS:
        obj = getattr(cfg, name)
        parser[name] = {f.name: _format_value(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def section_dict(obj) -> dict:
    return dataclasses.asdict(obj)

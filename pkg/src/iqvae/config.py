"""Run configuration: typed dataclasses with a flat dotted-key TOML surface.

Files look like::

    seed = 7
    data.n_samples = 512
    gumbel.tau_start = 1.0

Loading starts from defaults and applies the file on top, so partial configs
are fine.  Unknown keys and type mismatches are errors naming the dotted key
path.  ``save_config(load_config(p))`` is byte-stable, which is what lets a
run directory's resolved config reproduce the run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10: same parser, published as tomli
    import tomli as tomllib


class ConfigError(ValueError):
    """Config file content does not match the schema."""


@dataclass
class DataConfig:
    n_samples: int = 512
    mode: str = "edge"
    shape_min: int = 1
    shape_max: int = 3
    intensity_min: float = 0.25
    intensity_max: float = 1.0
    geometry_pool: int = 64


@dataclass
class VaeConfig:
    patch: int = 4
    codebook_size: int = 32
    embed_dim: int = 16
    hidden_dim: int = 64
    beta_commit: float = 0.25
    lambda_reg: float = 1.0
    lambda_recon: float = 1.0
    lambda_quant: float = 1.0
    projections: int = 64
    epochs: int = 30
    batch_size: int = 16
    lr: float = 3e-3
    weight_decay: float = 1e-4


@dataclass
class ArConfig:
    blocks: int = 2
    width: int = 64
    heads: int = 4
    top_k: int = 8
    temperature: float = 1.0
    epochs: int = 30
    batch_size: int = 16
    lr: float = 3e-3
    weight_decay: float = 1e-4


@dataclass
class GumbelConfig:
    enabled: bool = True
    tau_start: float = 1.0
    tau_end: float = 0.1
    threshold: float = 0.9
    every: int = 4
    mix_max: float = 0.5


@dataclass
class EvalConfig:
    projections: int = 512
    holdout: int = 64
    samples_per_condition: int = 8


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    ar: ArConfig = field(default_factory=ArConfig)
    gumbel: GumbelConfig = field(default_factory=GumbelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        s = repr(v)
        # TOML floats need a dot or exponent; repr of inf/nan never appears
        # in valid configs (values are validated finite elsewhere).
        if "." not in s and "e" not in s and "E" not in s:
            s += ".0"
        return s
    if isinstance(v, str):
        return '"%s"' % v.replace("\\", "\\\\").replace('"', '\\"')
    raise ConfigError("unsupported config value type %r" % type(v).__name__)


def dump_config(cfg: RunConfig) -> str:
    lines = ["seed = %d" % cfg.seed]
    for section in fields(RunConfig):
        if section.name == "seed":
            continue
        sub = getattr(cfg, section.name)
        for f in fields(sub):
            lines.append("%s.%s = %s"
                         % (section.name, f.name, _format_value(getattr(sub, f.name))))
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))


def _coerce(path: str, value, target_type):
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError("%s: expected bool, got %r" % (path, value))
        return value
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("%s: expected int, got %r" % (path, value))
        return value
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("%s: expected float, got %r" % (path, value))
        return float(value)
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError("%s: expected string, got %r" % (path, value))
        return value
    raise ConfigError("%s: unsupported schema type" % path)


def apply_overrides(cfg: RunConfig, tree: dict) -> RunConfig:
    """New RunConfig with values from a nested dict applied over ``cfg``."""
    sections = {f.name: f for f in fields(RunConfig)}
    out = dataclasses.replace(cfg, **{
        f.name: dataclasses.replace(getattr(cfg, f.name))
        for f in fields(RunConfig) if f.name != "seed"
    })
    for key, value in tree.items():
        if key == "seed":
            out.seed = _coerce("seed", value, int)
            continue
        if key not in sections or key == "seed":
            raise ConfigError("unknown config section %r" % key)
        if not isinstance(value, dict):
            raise ConfigError("%s: expected a table of keys" % key)
        sub = dataclasses.replace(getattr(out, key))
        sub_fields = {f.name: f.type for f in fields(sub)}
        for name, v in value.items():
            dotted = "%s.%s" % (key, name)
            if name not in sub_fields:
                raise ConfigError("unknown config key %r" % dotted)
            ftype = sub_fields[name]
            if isinstance(ftype, str):
                ftype = {"int": int, "float": float, "str": str, "bool": bool}[ftype]
            setattr(sub, name, _coerce(dotted, v, ftype))
        setattr(out, key, sub)
    return out


def load_config(path: str) -> RunConfig:
    with open(path, "rb") as fh:
        try:
            tree = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError("config parse failure: %s" % e) from e
    return apply_overrides(RunConfig(), tree)

"""Run configuration.

Config files are flat ``key = value`` lines; dotted keys select a section
(``encoder.layers = 4``).  ``#`` starts a comment.  Unknown keys are errors.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .encoder3d import Encoder3DConfig
from .io import fnv1a64
from .mvagg import AggregatorConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_objects: int = 64
    n_classes: int = 6
    views: int = 12
    points: int = 2048
    dim: int = 64
    text: bool = True
    textureless: bool = False


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 60
    lr: float = 1e-3
    tau_init: float = 0.07
    tau_min: float = 0.01
    tau_max: float = 1.0
    min_views: int = 1
    max_views: int = 6

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for contrastive negatives")
        if not 0 < self.tau_min <= self.tau_init <= self.tau_max:
            raise ConfigError("need 0 < tau_min <= tau_init <= tau_max")
        if self.epochs < 0 or self.lr <= 0:
            raise ConfigError("epochs must be >= 0 and lr > 0")
        if not 1 <= self.min_views <= self.max_views:
            raise ConfigError("need 1 <= min_views <= max_views")


PROFILES = ("desk", "paper-shape")


@dataclass(frozen=True)
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    encoder: Encoder3DConfig = field(default_factory=Encoder3DConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=200))
    stage2: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=800, lr=3e-4))

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; expected one of {PROFILES}")
        if self.encoder.joint_dim != self.aggregator.dim:
            raise ConfigError("encoder.joint_dim must equal aggregator.dim")
        if self.data.dim != self.aggregator.dim:
            raise ConfigError("data.dim must equal aggregator.dim")

    def lines(self) -> list[str]:
        """Canonical ``key = value`` lines, sorted."""
        out = [f"profile = {self.profile}", f"seed = {self.seed}"]
        for section in ("data", "encoder", "aggregator", "stage1", "stage2"):
            obj = getattr(self, section)
            for f in fields(obj):
                out.append(f"{section}.{f.name} = {_fmt(getattr(obj, f.name))}")
        return sorted(out)

    def config_hash(self) -> int:
        return fnv1a64("\n".join(self.lines()).encode())

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _convert(raw: str, typ, key: str):
    typ = typ if isinstance(typ, type) else {"int": int, "float": float, "bool": bool, "str": str}.get(str(typ), str)
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None
    return raw.strip('"')


def profile_defaults(profile: str) -> RunConfig:
    if profile == "paper-shape":
        return RunConfig(
            profile=profile,
            data=DataConfig(dim=1280),
            encoder=Encoder3DConfig.full_scale(joint_dim=1280),
            aggregator=AggregatorConfig.full_scale(),
        )
    return RunConfig(profile=profile)


def parse_config(text: str) -> RunConfig:
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        pairs[key] = value
    profile = pairs.pop("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    base = profile_defaults(profile)
    top = {}
    sections: dict[str, dict] = {}
    for key, value in pairs.items():
        if "." in key:
            section, name = key.split(".", 1)
            obj = getattr(base, section, None)
            if section not in ("data", "encoder", "aggregator", "stage1", "stage2"):
                raise ConfigError(f"unknown config key {key!r}")
            ftypes = {f.name: f.type for f in fields(obj)}
            if name not in ftypes:
                raise ConfigError(f"unknown config key {key!r}")
            sections.setdefault(section, {})[name] = _convert(value, ftypes[name], key)
        elif key == "seed":
            top["seed"] = _convert(value, int, key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        updated = {s: replace(getattr(base, s), **kv) for s, kv in sections.items()}
        return replace(base, **top, **updated)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def dump_config(cfg: RunConfig) -> str:
    return "\n".join(cfg.lines()) + "\n"


__all__ = [
    "ConfigError", "DataConfig", "RunConfig", "TrainConfig",
    "dump_config", "load_config", "parse_config", "profile_defaults"
]

"""``key = value`` run configuration files.

Example::

    seed = 3

    [model]
    d = 32
    layers = 2

    [train]
    lr = 0.005
    total_steps = 800

    [schema]
    category = Airport, Food, Building
    category.rho_c = 1
    len_ratio = ratio

Top-level keys come before the first section.  ``#`` starts a comment.  Every
error message names the file and line it comes from.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .decoding import DecodeConfig
from .guidance import Attribute, AttributeSchema
from .prefix import PrefixConfig
from .training import TrainConfig
from .transformer import ModelConfig

VARIANTS = ("control_prefix", "control_tokens", "guidance_free")
AUTO_LABELS = "*"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    """Full training of the base model on guidance-free pairs before it is frozen."""

    total_steps: int = 0
    lr: float = 3e-3
    warmup_steps: int = 50
    batch: int = 32
    # fraction of pretraining inputs that carry a trailing length-bin token
    length_cues: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.length_cues <= 1.0:
            raise ValueError("length_cues must be in [0, 1]")
        if self.total_steps and not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")


@dataclass(frozen=True)
class DataConfig:
    val_fraction: float = 0.1
    variant: str = "control_prefix"
    special_tokens: tuple[str, ...] = ()
    base_checkpoint: str = ""


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    labels: tuple[str, ...] = ()  # empty + ratio=False means "collect from the data"
    ratio: bool = False
    rho_c: int = 1
    oov: bool = True

    def build(self, data_labels: typing.Iterable[str] = ()) -> Attribute:
        if self.ratio:
            return Attribute.length_ratio(self.name, self.rho_c, self.oov)
        labels = self.labels or tuple(sorted(set(data_labels)))
        return Attribute(self.name, labels, self.rho_c, self.oov)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    prefix: PrefixConfig = field(default_factory=PrefixConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    schema: tuple[AttributeSpec, ...] = ()

    def schema_for(self, examples) -> AttributeSchema:
        attrs = []
        for spec in self.schema:
            seen = [str(ex.attrs[spec.name]) for ex in examples if spec.name in ex.attrs]
            attrs.append(spec.build(seen))
        return AttributeSchema(tuple(attrs))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


SECTIONS = {
    "model": ModelConfig,
    "prefix": PrefixConfig,
    "train": TrainConfig,
    "decode": DecodeConfig,
    "pretrain": PretrainConfig,
    "data": DataConfig,
}
# vocab size comes from the data, and the seed is a top-level key
HIDDEN = {("model", "vocab"), ("train", "seed")}
TOP_LEVEL = {"seed": int}


def _convert(raw: str, typ, where: str):
    if typ is bool:
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if typ in (int, float):
        try:
            return typ(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected {typ.__name__}, got {raw!r}") from None
    if typing.get_origin(typ) is tuple:
        return tuple(raw.replace(",", " ").split())
    return raw


def _field_types(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def parse(text: str, source: str = "<config>") -> RunConfig:
    values: dict[str, dict] = {name: {} for name in SECTIONS}
    top: dict[str, object] = {}
    schema: dict[str, dict] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        where = f"{source}:{lineno}"
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {line!r}")
            section = line[1:-1].strip()
            if section not in SECTIONS and section != "schema":
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if not key or not raw:
            raise ConfigError(f"{where}: empty key or value")
        if section is None:
            if key not in TOP_LEVEL:
                raise ConfigError(f"{where}: unknown top-level key {key!r}")
            top[key] = _convert(raw, TOP_LEVEL[key], where)
        elif section == "schema":
            _schema_line(schema, key, raw, where)
        else:
            types = _field_types(SECTIONS[section])
            if key not in types or (section, key) in HIDDEN:
                raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
            if key in values[section]:
                raise ConfigError(f"{where}: duplicate key {key!r}")
            values[section][key] = (_convert(raw, types[key], where), where)

    seed = int(top.get("seed", 0))
    built = {}
    for name, cls in SECTIONS.items():
        kwargs = {k: v for k, (v, _) in values[name].items()}
        if name == "train":
            kwargs["seed"] = seed
        try:
            built[name] = cls(**kwargs)
        except (ValueError, TypeError) as exc:
            lines = ", ".join(w for _, w in values[name].values()) or source
            raise ConfigError(f"{lines}: invalid [{name}] settings: {exc}") from None
    if built["data"].variant not in VARIANTS:
        raise ConfigError(f"{values['data']['variant'][1]}: variant must be one of {VARIANTS}")
    specs = []
    for name, entry in schema.items():
        spec = entry.get("spec")
        if spec is None:
            raise ConfigError(f"{entry['where']}: attribute {name!r} has options but no labels")
        specs.append(dataclasses.replace(spec, **entry.get("options", {})))
    if len(specs) > 4:
        raise ConfigError(f"{source}: at most 4 attributes are supported")
    return RunConfig(seed=seed, schema=tuple(specs), **built)


def _schema_line(schema: dict, key: str, raw: str, where: str) -> None:
    name, _, option = key.partition(".")
    entry = schema.setdefault(name, {"where": where})
    if not option:
        if "spec" in entry:
            raise ConfigError(f"{where}: duplicate attribute {name!r}")
        if raw == "ratio":
            entry["spec"] = AttributeSpec(name, ratio=True, oov=False)
        elif raw == AUTO_LABELS:
            entry["spec"] = AttributeSpec(name)
        else:
            labels = tuple(s.strip() for s in raw.split(",") if s.strip())
            if len(set(labels)) != len(labels):
                raise ConfigError(f"{where}: duplicate labels for {name!r}")
            entry["spec"] = AttributeSpec(name, labels)
        return
    if option == "rho_c":
        value = _convert(raw, int, where)
        if value < 1:
            raise ConfigError(f"{where}: rho_c must be >= 1")
    elif option == "oov":
        value = _convert(raw, bool, where)
    else:
        raise ConfigError(f"{where}: unknown attribute option {option!r}")
    entry.setdefault("options", {})[option] = value


def load(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from None
    return parse(text, str(path))

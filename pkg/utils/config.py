"""
Run configuration: dataclasses, TOML loading, dotted overrides and validation.

Config files use four sections that mirror the pretraining and probing
recipe tables: ``[model]``, ``[data]``, ``[train]`` and ``[probe]``.
"""
import json
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, get_type_hints

from utils.errors import ConfigValidationError
from utils.logging_utils import logger

MODES = ("pilamim", "pixel_only", "latent_only", "pilamim_no_cls")
SOURCES = ("synthetic", "cifar-binary")
FEATURE_KINDS = ("cls", "mean_pool")
PROBE_OPTIMIZERS = ("lars", "sgd")

RESOLVED_CONFIG_NAME = "resolved_config.toml"


def masked_count(n_patches: int, ratio: float) -> int:
    """Number of masked patches, rounding k·N half-up"""
    return int(math.floor(ratio * n_patches + 0.5))


@dataclass
class ModelConfig:
    """Encoder/decoder geometry and training mode"""

    image_size: int = 32
    patch_size: int = 4
    in_chans: int = 3
    enc_depth: int = 4
    enc_dim: int = 128
    enc_heads: int = 4
    dec_depth: int = 2
    dec_dim: int = 64
    dec_heads: int = 4
    mlp_ratio: float = 4.0
    mask_ratio: float = 0.75
    mode: str = "pilamim"
    latent_only_cls: bool = True

    @property
    def grid(self) -> Tuple[int, int]:
        side = self.image_size // self.patch_size
        return side, side

    @property
    def n_patches(self) -> int:
        rows, cols = self.grid
        return rows * cols

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_chans

    @property
    def uses_pixel_decoder(self) -> bool:
        return self.mode != "latent_only"

    @property
    def uses_latent_decoder(self) -> bool:
        return self.mode != "pixel_only"

    @property
    def uses_cls_loss(self) -> bool:
        if self.mode == "pilamim":
            return True
        if self.mode == "latent_only":
            return self.latent_only_cls
        return False

    def validate(self):
        if self.mode not in MODES:
            raise ConfigValidationError("mode", f"must be one of {MODES}, got {self.mode!r}")
        for name in ("image_size", "patch_size", "in_chans", "enc_depth", "enc_dim",
                     "enc_heads", "dec_dim", "dec_heads"):
            if getattr(self, name) < 1:
                raise ConfigValidationError(name, f"must be >= 1, got {getattr(self, name)}")
        if self.dec_depth < 0:
            raise ConfigValidationError("dec_depth", f"must be >= 0, got {self.dec_depth}")
        if self.image_size % self.patch_size:
            raise ConfigValidationError(
                "image_size",
                f"{self.image_size} is not divisible by patch_size {self.patch_size}",
            )
        for dim, heads in (("enc_dim", "enc_heads"), ("dec_dim", "dec_heads")):
            if getattr(self, dim) % getattr(self, heads):
                raise ConfigValidationError(
                    dim, f"{getattr(self, dim)} is not divisible by {heads}={getattr(self, heads)}"
                )
            if getattr(self, dim) % 2:
                raise ConfigValidationError(
                    dim, f"sine/cosine positions need an even width, got {getattr(self, dim)}"
                )
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigValidationError("mask_ratio", f"must lie in (0, 1), got {self.mask_ratio}")
        n = self.n_patches
        m = masked_count(n, self.mask_ratio)
        if n < 2 or not 1 <= m <= n - 1:
            raise ConfigValidationError(
                "mask_ratio",
                f"{self.mask_ratio} masks {m} of {n} patches; need between 1 and {n - 1}",
            )
        if self.mlp_ratio <= 0:
            raise ConfigValidationError("mlp_ratio", f"must be positive, got {self.mlp_ratio}")


@dataclass
class DataConfig:
    """Where training/evaluation images come from (the dataset source)"""

    source: str = "synthetic"
    path: str = ""
    seed: int = 7
    count: int = 2000
    image_size: int = 32
    tasks: List[str] = field(default_factory=lambda: ["class", "count", "dist"])
    label_bytes: int = 1
    augment: bool = True
    crop_scale_lo: float = 0.2
    crop_scale_hi: float = 1.0
    hflip: bool = False

    def validate(self, patch_size: int):
        if self.source not in SOURCES:
            raise ConfigValidationError("source", f"must be one of {SOURCES}, got {self.source!r}")
        if self.source == "cifar-binary" and not self.path:
            raise ConfigValidationError("path", "cifar-binary source needs a file path")
        if self.source == "synthetic":
            if self.count < 1:
                raise ConfigValidationError("count", f"must be >= 1, got {self.count}")
            if self.image_size < 16:
                raise ConfigValidationError("image_size", f"must be >= 16, got {self.image_size}")
        if self.image_size % patch_size:
            raise ConfigValidationError(
                "image_size", f"{self.image_size} is not divisible by patch_size {patch_size}"
            )
        if self.label_bytes not in (1, 2):
            raise ConfigValidationError("label_bytes", f"must be 1 or 2, got {self.label_bytes}")
        if not self.tasks:
            raise ConfigValidationError("tasks", "at least one task is required")
        if not 0.0 < self.crop_scale_lo <= self.crop_scale_hi <= 1.0:
            raise ConfigValidationError(
                "crop_scale_lo",
                f"need 0 < crop_scale_lo <= crop_scale_hi <= 1, got "
                f"({self.crop_scale_lo}, {self.crop_scale_hi})",
            )


@dataclass
class TrainConfig:
    """Pretraining recipe"""

    epochs: int = 50
    batch_size: int = 64
    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_epochs: int = 5
    lambda_start: float = 0.996
    lambda_end: float = 1.0
    seed: int = 0
    checkpoint_every: int = 10
    prefetch_depth: int = 4

    @property
    def betas(self) -> Tuple[float, float]:
        return self.beta1, self.beta2

    def validate(self):
        if self.epochs < 1:
            raise ConfigValidationError("epochs", f"must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigValidationError("batch_size", f"must be >= 1, got {self.batch_size}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigValidationError(
                "warmup_epochs", f"must satisfy 0 <= warmup_epochs < epochs={self.epochs}"
            )
        if self.base_lr <= 0:
            raise ConfigValidationError("base_lr", f"must be positive, got {self.base_lr}")
        if self.weight_decay < 0:
            raise ConfigValidationError("weight_decay", f"must be >= 0, got {self.weight_decay}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigValidationError(name, f"must lie in [0, 1), got {getattr(self, name)}")
        if not 0.0 < self.lambda_start <= self.lambda_end <= 1.0:
            raise ConfigValidationError(
                "lambda_start",
                f"need 0 < lambda_start <= lambda_end <= 1, got "
                f"({self.lambda_start}, {self.lambda_end})",
            )
        if self.checkpoint_every < 0:
            raise ConfigValidationError("checkpoint_every", "must be >= 0 (0 disables)")
        if self.prefetch_depth < 1:
            raise ConfigValidationError("prefetch_depth", f"must be >= 1, got {self.prefetch_depth}")


@dataclass
class ProbeConfig:
    """Linear-probe recipe and evaluation options"""

    optimizer: str = "sgd"
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 256
    epochs: int = 30
    warmup_epochs: int = 10
    test_fraction: float = 0.2
    feature_kind: str = "cls"
    tasks: List[str] = field(default_factory=lambda: ["class", "count", "dist"])
    rankme_epsilon: float = 1e-7
    seed: int = 0

    def validate(self):
        if self.optimizer not in PROBE_OPTIMIZERS:
            raise ConfigValidationError(
                "optimizer", f"must be one of {PROBE_OPTIMIZERS}, got {self.optimizer!r}"
            )
        if self.feature_kind not in FEATURE_KINDS:
            raise ConfigValidationError(
                "feature_kind", f"must be one of {FEATURE_KINDS}, got {self.feature_kind!r}"
            )
        if self.epochs < 1:
            raise ConfigValidationError("epochs", f"must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigValidationError(
                "warmup_epochs", f"must satisfy 0 <= warmup_epochs < epochs={self.epochs}"
            )
        if self.base_lr <= 0:
            raise ConfigValidationError("base_lr", f"must be positive, got {self.base_lr}")
        if self.batch_size < 1:
            raise ConfigValidationError("batch_size", f"must be >= 1, got {self.batch_size}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigValidationError(
                "test_fraction", f"must lie in (0, 1), got {self.test_fraction}"
            )
        if self.rankme_epsilon <= 0:
            raise ConfigValidationError("rankme_epsilon", "must be positive")


@dataclass
class RunConfig:
    """Everything one CLI invocation needs"""

    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.data.validate(self.model.patch_size)
        if not self.data.augment and self.data.image_size != self.model.image_size:
            raise ConfigValidationError(
                "data.image_size",
                f"{self.data.image_size} differs from model.image_size {self.model.image_size} "
                "and augmentation (which resizes) is off",
            )
        self.train.validate()
        self.probe.validate()
        return self

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return asdict(self)


SECTIONS = {
    "model": ModelConfig,
    "data": DataConfig,
    "train": TrainConfig,
    "probe": ProbeConfig,
}


def _parse_literal(raw: str) -> Any:
    """Read a TOML literal; bare words fall back to plain strings"""
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def _coerce(section_cls, name: str, value: Any, key: str) -> Any:
    """Coerce a parsed value to the declared field type of ``section_cls.name``"""
    hint = get_type_hints(section_cls)[name]
    try:
        if hint is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
                return value.lower() in ("true", "1", "yes")
            raise TypeError(f"expected a boolean, got {value!r}")
        if hint is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError(f"expected an integer, got {value!r}")
            return int(value)
        if hint is float:
            if isinstance(value, bool):
                raise TypeError(f"expected a number, got {value!r}")
            return float(value)
        if hint is str:
            return str(value)
        if hint == List[str]:
            if isinstance(value, str):
                return [item.strip() for item in value.split(",") if item.strip()]
            return [str(item) for item in value]
    except (TypeError, ValueError) as exc:
        raise ConfigValidationError(key, str(exc))
    return value


def _resolve_key(key: str) -> Tuple[str, str]:
    """Map ``section.name`` or a bare unique ``name`` to (section, name)"""
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigValidationError(key, f"unknown section {section!r}")
        if name not in {f.name for f in fields(SECTIONS[section])}:
            raise ConfigValidationError(key, f"unknown key in [{section}]")
        return section, name

    owners = [s for s, cls in SECTIONS.items() if key in {f.name for f in fields(cls)}]
    if not owners:
        raise ConfigValidationError(key, "unknown configuration key")
    if len(owners) > 1:
        raise ConfigValidationError(
            key, f"ambiguous key, qualify it with one of {', '.join(owners)}"
        )
    return owners[0], key


def apply_overrides(config: RunConfig, overrides: Iterable[str]) -> RunConfig:
    """Apply ``key=value`` strings to a config, returning a new config"""
    sections = {name: getattr(config, name) for name in SECTIONS}
    for item in overrides:
        if "=" not in item:
            raise ConfigValidationError(item, "override must look like key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        section, name = _resolve_key(key)
        value = _coerce(SECTIONS[section], name, _parse_literal(raw.strip()), key)
        sections[section] = replace(sections[section], **{name: value})
        logger.debug(f"Override {section}.{name} = {value!r}")
    return RunConfig(**sections)


def config_from_dict(raw: Dict[str, Any]) -> RunConfig:
    """Build a RunConfig from parsed TOML, rejecting unknown sections/keys"""
    sections = {}
    for section, values in raw.items():
        if section not in SECTIONS:
            raise ConfigValidationError(section, "unknown config section")
        if not isinstance(values, dict):
            raise ConfigValidationError(section, "section must be a table")
    for section, cls in SECTIONS.items():
        values = raw.get(section, {})
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for name, value in values.items():
            key = f"{section}.{name}"
            if name not in known:
                raise ConfigValidationError(key, f"unknown key in [{section}]")
            kwargs[name] = _coerce(cls, name, value, key)
        sections[section] = cls(**kwargs)
    return RunConfig(**sections)


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """
    Load a TOML config file, apply overrides and validate the result.

    Args:
        path: TOML file; defaults are used when omitted
        overrides: ``key=value`` strings, dotted or bare keys

    Returns:
        Validated RunConfig
    """
    raw: Dict[str, Any] = {}
    if path:
        with open(path, "rb") as f:
            try:
                raw = tomllib.load(f)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigValidationError(str(path), f"invalid TOML: {exc}")
        logger.info(f"Loaded config from {path}")
    config = apply_overrides(config_from_dict(raw), overrides)
    return config.validate()


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot write {type(value).__name__} to TOML")


def to_toml(config: RunConfig) -> str:
    """Render a config as TOML that ``load_config`` reads back unchanged"""
    lines = []
    for section, values in config.to_dict().items():
        lines.append(f"[{section}]")
        lines.extend(f"{name} = {_toml_value(value)}" for name, value in values.items())
        lines.append("")
    return "\n".join(lines)


def save_resolved(config: RunConfig, out_dir) -> Path:
    """Write the resolved-config snapshot beside a run's outputs"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG_NAME
    path.write_text(to_toml(config))
    logger.info(f"Resolved config written to {path}")
    return path


def parse_data_spec(text: str, base: DataConfig) -> DataConfig:
    """
    Parse a compact ``--data`` argument.

    Accepted forms are ``synth:seed=7,count=2000[,size=32]`` and
    ``cifar:PATH`` (optionally ``cifar100:PATH`` for two label bytes).
    """
    kind, _, rest = text.partition(":")
    if kind in ("synth", "synthetic"):
        updates: Dict[str, Any] = {"source": "synthetic"}
        aliases = {"size": "image_size"}
        for part in filter(None, rest.split(",")):
            if "=" not in part:
                raise ConfigValidationError("data", f"expected key=value, got {part!r}")
            key, raw = part.split("=", 1)
            name = aliases.get(key.strip(), key.strip())
            if name not in ("seed", "count", "image_size"):
                raise ConfigValidationError(f"data.{name}", "unknown synthetic data option")
            updates[name] = _coerce(DataConfig, name, _parse_literal(raw), f"data.{name}")
        return replace(base, **updates)
    if kind in ("cifar", "cifar10", "cifar100"):
        if not rest:
            raise ConfigValidationError("data", "cifar data needs a path, e.g. cifar:data_batch_1.bin")
        label_bytes = 2 if kind == "cifar100" else base.label_bytes
        tasks = ["coarse", "class"] if label_bytes == 2 else ["class"]
        return replace(base, source="cifar-binary", path=rest, image_size=32,
                       label_bytes=label_bytes, tasks=tasks)
    raise ConfigValidationError("data", f"unknown data source {text!r}")

"""Flat key=value run configuration.

A config file is UTF-8 text, one ``key = value`` per line, ``#`` comments.
Every key is documented in the schema below; unknown keys are hard errors so
a typo cannot silently fall back to a default.  Keys under ``meta.`` are the
one exception: they are carried into run manifests verbatim.

Sections and keys (defaults in parentheses):

  model.backbone            tiny3 | tiny4                      (tiny3)
  model.branch_channels     int                                (8)
  model.fuse_channels       int                                (32)
  model.ami_channels        int                                (32)
  model.input_size          H,W                                (64,64)
  model.variant             full | without_mag | without_ami |
                            without_mag_ami | without_cas      (full)
  model.dtype               float32 | float64                  (float32)
  loss.lambda               float                              (1.75)
  loss.beta_sq              float                              (0.3)
  loss.eps                  float                              (1e-7)
  optim.learning_rate       float                              (8e-3)
  optim.momentum            float                              (0.9)
  optim.clip_norm           float, per-step gradient-norm cap  (20)
  schedule.patience         int                                (10)
  schedule.factor           float                              (10)
  data.n_train              int                                (240)
  data.n_test               int                                (500)
  data.canvas               H,W                                (64,64)
  data.kinds                comma list of disk|rectangle|blob  (all three)
  data.size_range           lo,hi                              (0.1,0.7)
  data.contrast_range       lo,hi                              (0.4,0.75)
  data.noise_amplitude      float                              (0.05)
  data.seed                 int                                (0)
  data.train_images         path; empty means synthetic        ()
  data.train_masks          path; empty means synthetic        ()
  augment.hflip_probability float                              (0.5)
  augment.rotation_range    lo,hi degrees                      (0,12)
  train.epochs              int                                (60)
  train.batch_size          int                                (8)
  train.loss                sharpening | cross_entropy         (sharpening)
  ablate.variants           comma list                         (all six)
  ablate.seeds              comma list of ints                 (0,1,2)
  sweep.values              comma list of floats               (nine, 0.5..2.5)

The training dtype defaults to float32 here (the 64-bit default of
DFNetConfig is for gradient checking, not experiments).
"""

from dataclasses import dataclass, field

from .data import AugmentConfig, SyntheticDatasetSpec
from .errors import ConfigError
from .losses import LossConfig
from .model import DFNetConfig, backbone_by_name
from .train import (ABLATION_VARIANTS, DEFAULT_LAMBDA_GRID, OptimState,
                    PlateauSchedule)


@dataclass
class RunConfig:
    model: DFNetConfig = field(
        default_factory=lambda: DFNetConfig(dtype="float32"))
    loss: LossConfig = field(default_factory=LossConfig)
    data: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    learning_rate: float = 8e-3
    momentum: float = 0.9
    clip_norm: float = 20.0
    patience: int = 10
    factor: float = 10.0
    epochs: int = 60
    batch_size: int = 8
    loss_kind: str = "sharpening"
    train_images: str = ""
    train_masks: str = ""
    variants: "tuple[str, ...]" = ABLATION_VARIANTS
    seeds: "tuple[int, ...]" = (0, 1, 2)
    lambda_values: "tuple[float, ...]" = DEFAULT_LAMBDA_GRID
    meta: dict = field(default_factory=dict)

    def make_optim(self) -> OptimState:
        return OptimState(learning_rate=self.learning_rate,
                          momentum=self.momentum)

    def make_schedule(self) -> PlateauSchedule:
        return PlateauSchedule(patience=self.patience, factor=self.factor)


def parse_config_text(text: str) -> "dict[str, str]":
    """Raw key -> value strings, in file order; duplicates are errors."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value, "
                              f"got {stripped!r}")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value.strip()
    return raw


def _int(key, value):
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from None


def _float(key, value):
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from None


def _split(value):
    return [part.strip() for part in value.split(",") if part.strip()]


def _ints(key, value):
    return tuple(_int(key, part) for part in _split(value))


def _floats(key, value):
    return tuple(_float(key, part) for part in _split(value))


def _strings(key, value):
    return tuple(_split(value))


def _pair(key, value, element):
    parts = _split(value)
    if len(parts) != 2:
        raise ConfigError(f"{key}: expected two comma-separated values, "
                          f"got {value!r}")
    return (element(key, parts[0]), element(key, parts[1]))


def _int_pair(key, value):
    return _pair(key, value, _int)


def _float_pair(key, value):
    return _pair(key, value, _float)


def _string(key, value):
    return value


# key -> (RunConfig section attr or None, target field name, parser)
_SCHEMA = {
    "model.backbone": ("model", "backbone", _string),
    "model.branch_channels": ("model", "branch_channels", _int),
    "model.fuse_channels": ("model", "fuse_channels", _int),
    "model.ami_channels": ("model", "ami_channels", _int),
    "model.input_size": ("model", "input_size", _int_pair),
    "model.variant": ("model", "variant", _string),
    "model.dtype": ("model", "dtype", _string),
    "loss.lambda": ("loss", "lam", _float),
    "loss.beta_sq": ("loss", "beta_sq", _float),
    "loss.eps": ("loss", "eps", _float),
    "optim.learning_rate": (None, "learning_rate", _float),
    "optim.momentum": (None, "momentum", _float),
    "schedule.patience": (None, "patience", _int),
    "schedule.factor": (None, "factor", _float),
    "data.n_train": ("data", "n_train", _int),
    "data.n_test": ("data", "n_test", _int),
    "data.canvas": ("data", "canvas", _int_pair),
    "data.kinds": ("data", "kinds", _strings),
    "data.size_range": ("data", "size_range", _float_pair),
    "data.contrast_range": ("data", "contrast_range", _float_pair),
    "data.noise_amplitude": ("data", "noise_amplitude", _float),
    "data.seed": ("data", "seed", _int),
    "data.train_images": (None, "train_images", _string),
    "data.train_masks": (None, "train_masks", _string),
    "augment.hflip_probability": ("augment", "hflip_probability", _float),
    "augment.rotation_range": ("augment", "rotation_range_degrees",
                               _float_pair),
    "train.epochs": (None, "epochs", _int),
    "train.batch_size": (None, "batch_size", _int),
    "train.loss": (None, "loss_kind", _string),
    "ablate.variants": (None, "variants", _strings),
    "ablate.seeds": (None, "seeds", _ints),
    "sweep.values": (None, "lambda_values", _floats),
}


def resolve_config(raw: "dict[str, str]") -> RunConfig:
    """Typed RunConfig from raw strings; every key checked, then validated."""
    sections = {"model": {}, "loss": {}, "data": {}, "augment": {}}
    top = {}
    meta = {}
    for key, value in raw.items():
        if key.startswith("meta."):
            meta[key[len("meta."):]] = value
            continue
        entry = _SCHEMA.get(key)
        if entry is None:
            raise ConfigError(f"unknown config key {key!r}")
        section, attr, parse = entry
        parsed = parse(key, value)
        if section is None:
            top[attr] = parsed
        else:
            sections[section][attr] = parsed

    if "backbone" in sections["model"]:
        sections["model"]["backbone"] = backbone_by_name(
            sections["model"]["backbone"])
    sections["model"].setdefault("dtype", "float32")
    model = DFNetConfig(**sections["model"])
    cfg = RunConfig(model=model, loss=LossConfig(**sections["loss"]),
                    data=SyntheticDatasetSpec(**sections["data"]),
                    augment=AugmentConfig(**sections["augment"]),
                    meta=meta, **top)
    validate_run_config(cfg)
    return cfg


def validate_run_config(cfg: RunConfig) -> None:
    cfg.model.validate()
    cfg.loss.validate()
    cfg.data.validate()
    cfg.make_optim().validate()
    if cfg.patience < 1:
        raise ConfigError("schedule.patience must be >= 1")
    if cfg.factor <= 1.0:
        raise ConfigError("schedule.factor must be > 1")
    if not 0.0 <= cfg.augment.hflip_probability <= 1.0:
        raise ConfigError("augment.hflip_probability must lie in [0, 1]")
    lo, hi = cfg.augment.rotation_range_degrees
    if not 0.0 <= lo <= hi:
        raise ConfigError(f"augment.rotation_range {lo},{hi} must satisfy "
                          "0 <= lo <= hi")
    if cfg.epochs < 1 or cfg.batch_size < 1:
        raise ConfigError("train.epochs and train.batch_size must be >= 1")
    if cfg.loss_kind not in ("sharpening", "cross_entropy"):
        raise ConfigError(f"train.loss must be sharpening or cross_entropy, "
                          f"got {cfg.loss_kind!r}")
    if bool(cfg.train_images) != bool(cfg.train_masks):
        raise ConfigError("data.train_images and data.train_masks must be "
                          "set together")
    unknown = [v for v in cfg.variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise ConfigError(f"ablate.variants: unknown {unknown}; valid: "
                          f"{list(ABLATION_VARIANTS)}")
    if not cfg.variants or not cfg.seeds:
        raise ConfigError("ablate.variants and ablate.seeds must be non-empty")
    if not cfg.lambda_values:
        raise ConfigError("sweep.values must be non-empty")
    for lam in cfg.lambda_values:
        if lam < 0:
            raise ConfigError(f"sweep.values entries must be >= 0, got {lam}")


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return resolve_config(parse_config_text(text))


def default_config() -> RunConfig:
    return RunConfig()


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def config_lines(cfg: RunConfig) -> "list[str]":
    """The full resolved configuration as schema-keyed lines.

    Feeding these back through the parser reproduces the same RunConfig, so
    a manifest doubles as a rerunnable config file.
    """
    lines = []
    for key, (section, attr, _) in _SCHEMA.items():
        if key == "model.backbone":
            value = cfg.model.backbone.kind
        elif section is None:
            value = getattr(cfg, attr)
        else:
            value = getattr(getattr(cfg, section), attr)
        lines.append(f"{key} = {_fmt(value)}")
    for key in sorted(cfg.meta):
        lines.append(f"meta.{key} = {cfg.meta[key]}")
    return lines

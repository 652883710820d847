"""Run configuration: TOML file, flag overrides, named sub-seeds and per-stage hashes.

A config file holds top-level keys for data, tiling, bag, model and
evaluation settings plus a ``[train]`` table::

    slides_dir = "data/slides"
    clinical_csv = "data/clinical.csv"
    mode = "dlcnbc-ws"
    tile_size = 32
    out_size = 16
    augment = ["rotation(10)", "vflip(0.5)"]

    [train]
    epochs = 200
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .augment import parse_spec
from .bags import derive_seed
from .errors import ConfigurationError
from .train import TrainConfig

MODES = ("dlcnb", "dlcnbc", "dlcnbc-ws")
TASKS = ("binary", "multiclass")

# settings each stage depends on, cumulatively; paths are deliberately excluded
STAGE_KEYS = {
    "tile": ["mode", "tile_size", "stride", "entropy_threshold", "mask_coverage_min", "features"],
    "bags": ["task", "seed", "n_instances", "bags_per_slide", "clinical_features"],
    "train": ["out_size", "normalize", "norm_mean", "norm_std", "augment", "feat_dim", "attn_dim", "gated", "train"],
    "eval": ["aggregate", "threshold"],
}
STAGES = list(STAGE_KEYS)


@dataclass
class RunConfig:
    slides_dir: str = ""
    masks_dir: str = ""
    clinical_csv: str = ""
    features_dir: str = ""
    out_dir: str = "run"
    mode: str = "dlcnbc-ws"
    task: str = "binary"
    seed: int = 0
    tile_size: int = 256
    stride: int = 0
    entropy_threshold: float = 5.0
    mask_coverage_min: float = 0.5
    out_size: int = 224
    normalize: str = "fixed"
    norm_mean: list = field(default_factory=lambda: [0.5, 0.5, 0.5])
    norm_std: list = field(default_factory=lambda: [0.5, 0.5, 0.5])
    n_instances: int = 10
    bags_per_slide: int = 4
    augment: list = field(default_factory=list)
    clinical_features: str = "selected"
    feat_dim: int = 32
    attn_dim: int = 16
    gated: bool = False
    aggregate: str = "mean"
    threshold: float = 0.5
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def uses_masks(self) -> bool:
        return self.mode in ("dlcnb", "dlcnbc")

    @property
    def uses_clinical(self) -> bool:
        return self.mode != "dlcnb"

    @property
    def n_classes(self) -> int:
        return 2 if self.task == "binary" else 3

    @property
    def tile_stride(self) -> int:
        return self.stride or self.tile_size

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.mode == "dlcnbc-ws" and self.masks_dir:
            raise ConfigurationError("mode dlcnbc-ws samples the whole slide; masks_dir must be empty")
        if self.uses_masks and not self.masks_dir and not self.features_dir:
            raise ConfigurationError(f"mode {self.mode} requires masks_dir")
        if self.tile_size < 1 or self.stride < 0 or self.out_size < 2:
            raise ConfigurationError("tile_size >= 1, stride >= 0 and out_size >= 2 required")
        if not 0 <= self.entropy_threshold <= 8:
            raise ConfigurationError("entropy_threshold must lie in [0, 8]")
        if not 0 <= self.mask_coverage_min <= 1:
            raise ConfigurationError("mask_coverage_min must lie in [0, 1]")
        if self.normalize not in ("fixed", "dataset"):
            raise ConfigurationError("normalize must be 'fixed' or 'dataset'")
        if len(self.norm_mean) != 3 or len(self.norm_std) != 3 or min(self.norm_std) <= 0:
            raise ConfigurationError("norm_mean/norm_std need three values with positive std")
        if self.n_instances < 1 or self.bags_per_slide < 1:
            raise ConfigurationError("n_instances and bags_per_slide must be >= 1")
        if self.aggregate not in ("mean", "max", "vote"):
            raise ConfigurationError("aggregate must be mean, max or vote")
        if self.clinical_features not in ("selected", "all"):
            raise ConfigurationError("clinical_features must be 'selected' or 'all'")
        parse_spec(self.augment)
        return self

    def seed_for(self, purpose: str) -> int:
        return derive_seed(self.seed, purpose)

    def train_config(self) -> TrainConfig:
        """The training settings with the shuffle seed derived from the root seed."""
        return dataclasses.replace(self.train, seed=self.seed_for("shuffle"))

    def stage_hash(self, stage: str) -> str:
        keys = []
        for name in STAGES[:STAGES.index(stage) + 1]:
            keys += STAGE_KEYS[name]
        values = {}
        for k in keys:
            if k == "features":
                values[k] = bool(self.features_dir)
            elif k == "train":
                values[k] = dataclasses.asdict(self.train)
            else:
                values[k] = getattr(self, k)
        if not self.uses_masks:
            values.pop("mask_coverage_min")
        text = json.dumps(values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _coerce(name: str, value, target):
    expected = type(target)
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, float) and value.is_integer():
        return int(value)
    if not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
        raise ConfigurationError(f"{name}: expected {expected.__name__}, got {value!r}")
    return value


def from_dict(data: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base else RunConfig()
    cfg.train = dataclasses.replace(cfg.train)
    for key, value in data.items():
        if key == "train":
            if not isinstance(value, dict):
                raise ConfigurationError("[train] must be a table")
            for tk, tv in value.items():
                if tk not in TrainConfig.__dataclass_fields__:
                    raise ConfigurationError(f"unknown train setting {tk!r}")
                setattr(cfg.train, tk, _coerce(f"train.{tk}", tv, getattr(cfg.train, tk)))
            try:
                cfg.train.__post_init__()
            except ValueError as exc:
                raise ConfigurationError(str(exc)) from exc
        elif key in RunConfig.__dataclass_fields__:
            setattr(cfg, key, _coerce(key, value, getattr(cfg, key)))
        else:
            raise ConfigurationError(f"unknown setting {key!r}")
    return cfg


def parse_override(text: str) -> dict:
    """``key=value`` or ``train.key=value``; the value is read as TOML, falling back to a bare string."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not key=value")
    key, raw = (part.strip() for part in text.split("=", 1))
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    if key.startswith("train."):
        return {"train": {key[len("train."):]: value}}
    return {key: value}


def load_config(path: str | None = None, overrides: list[str] | None = None, **flags) -> RunConfig:
    """Load the TOML file (if any), apply ``key=value`` overrides, then non-None flags."""
    data = {}
    if path:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
    cfg = from_dict(data)
    for item in overrides or []:
        cfg = from_dict(parse_override(item), cfg)
    cfg = from_dict({k: v for k, v in flags.items() if v is not None}, cfg)
    return cfg.validate()

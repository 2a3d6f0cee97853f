import hashlib
import json
from contextvars import ContextVar
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, JsonConfigSettingsSource, PydanticBaseSettingsSource, SettingsConfigDict

from .errors import ConfigurationError
from .util import canonical_json, get_basic_logger

logger = get_basic_logger(__name__)

# JSON config file consulted by `ExperimentSettings` while it is being constructed.
_config_file: ContextVar[Path | None] = ContextVar("_config_file", default=None)

Size3 = tuple[int, int, int]


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataConfig(Section):
    """
    Settings for the synthetic dataset generator.
    """

    size: Size3 = (32, 32, 32)
    num_classes: int = Field(default=2, ge=2)
    n_labelled: int = Field(default=8, ge=1)
    n_unlabelled: int = Field(default=72, ge=1)
    n_val: int = Field(default=20, ge=0)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_noise: float = Field(default=0.25, gt=0)
    """Standard deviation of the additive Gaussian intensity noise (σ)."""
    contrast: float = Field(default=1.0, gt=0)
    """Intensity step between consecutive classes."""
    boundary_gap: float = Field(default=0.1, ge=0)
    """Intensity of the shape boundary band above background, in units of σ."""
    gradient_strength: float = Field(default=0.5, ge=0)


class AugmentConfig(Section):
    crop_size: Size3 = (24, 24, 24)
    noise_sigma: float = Field(default=0.1, ge=0)
    cutmix_prob: float = Field(default=0.5, ge=0, le=1)
    cutmix_box_range: tuple[float, float] = (0.25, 0.5)
    use_strong: bool = True
    """False keeps the strong view at crop/flip only (no noise, no CutMix)."""


class AggregationConfig(Section):
    spatial_awareness: bool = True
    conv_integration: bool = True
    cross_class: bool = True


class ModelConfig(Section):
    in_channels: int = 1
    base_channels: int = Field(default=16, ge=1)
    feature_dim: int = Field(default=32, ge=1)
    """F: channels of the quarter-resolution decoder tap."""
    f3_dim: int = Field(default=16, ge=1)
    f4_dim: int = Field(default=8, ge=1)
    num_prototypes: int = Field(default=16, ge=1)
    """R: prototype sets per class."""
    aggregation: AggregationConfig = AggregationConfig()

    @model_validator(mode="after")
    def _check_channel_plan(self) -> "ModelConfig":
        if not (self.f4_dim < self.f3_dim < self.feature_dim):
            raise ValueError(
                f"Decoder taps must shrink: f4_dim={self.f4_dim} < f3_dim={self.f3_dim} < feature_dim={self.feature_dim}"
            )
        return self


class RectifierMode(str, Enum):
    V1_FIXED = "v1_fixed"
    V2_LEARNABLE_CONCAT = "v2_learnable_concat"
    V3_LEARNABLE_ADDITIVE = "v3_learnable_additive"


class RectifyConfig(Section):
    enabled: bool = True
    """False removes the interaction module's loss term and pseudo-label rectification."""
    mode: RectifierMode = RectifierMode.V3_LEARNABLE_ADDITIVE
    start_iter: int | None = Field(default=800, ge=0)
    """S: rectification of unlabelled pseudo-labels starts after this iteration (None = never)."""
    fixed_mu: float | None = Field(default=None, ge=0, le=1)
    eps: float = Field(default=1e-6, gt=0)


class XiMode(str, Enum):
    FIXED = "fixed"
    RANDOM = "random"


class ContrastConfig(Section):
    enabled: bool = True
    weight: float = Field(default=1.0, ge=0)
    tau_w: float = Field(default=0.7, ge=0, le=1)
    temperature: float = Field(default=0.5, gt=0)
    xi: float = Field(default=0.6, gt=0, le=1)
    xi_mode: XiMode = XiMode.FIXED
    max_anchors: int = Field(default=256, ge=1)
    max_negatives: int = Field(default=512, ge=1)
    projection_dim: int = Field(default=16, ge=1)
    reduction: str = Field(default="mean", pattern="^(mean|sum)$")
    centre: str = Field(default="blend", pattern="^(blend|mean|prototype)$")
    """Positive centre source: blend of class mean and prototypes, class mean only, or prototypes only."""


class TrainConfig(Section):
    lr0: float = Field(default=2.5e-3, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=5e-4, ge=0)
    poly_power: float = Field(default=0.9, gt=0)
    labelled_batch: int = Field(default=2, ge=1)
    unlabelled_batch: int = Field(default=2, ge=2)
    max_iters: int = Field(default=2000, ge=1)
    ema_decay: float = Field(default=0.99, ge=0, le=1)
    tau: float = Field(default=0.9, ge=0, le=1)
    log_every: int = Field(default=1, ge=1)
    eval_every: int = Field(default=200, ge=1)
    checkpoint_every: int = Field(default=500, ge=1)
    eval_strides: Size3 = (8, 8, 8)
    prefetch_workers: int = Field(default=2, ge=0)
    prefetch_depth: int = Field(default=4, ge=1)

    @model_validator(mode="after")
    def _check_pairs(self) -> "TrainConfig":
        if self.unlabelled_batch % 2:
            raise ValueError(f"unlabelled_batch must be even for CutMix pairing, got {self.unlabelled_batch}")
        return self


class ExperimentSettings(BaseSettings):
    """
    Full configuration of a training run.

    Values are resolved from (highest priority first) keyword overrides, `PR_`-prefixed
    environment variables (nested keys joined with `__`), the JSON config file and defaults.
    """

    seed: int = 0
    data: DataConfig = DataConfig()
    augment: AugmentConfig = AugmentConfig()
    model: ModelConfig = ModelConfig()
    rectify: RectifyConfig = RectifyConfig()
    contrast: ContrastConfig = ContrastConfig()
    train: TrainConfig = TrainConfig()

    model_config = SettingsConfigDict(env_prefix="PR_", env_nested_delimiter="__", extra="forbid", frozen=True)

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        sources: list[PydanticBaseSettingsSource] = [init_settings, env_settings]
        config_file = _config_file.get()
        if config_file is not None:
            sources.append(JsonConfigSettingsSource(settings_cls, json_file=config_file))
        return tuple(sources)

    @model_validator(mode="after")
    def _check_consistency(self) -> "ExperimentSettings":
        if not self.contrast.tau_w < self.train.tau:
            raise ValueError(f"tau_w ({self.contrast.tau_w}) must be smaller than tau ({self.train.tau})")
        for axis, (crop, full) in enumerate(zip(self.augment.crop_size, self.data.size)):
            if full < 8 or full % 4:
                raise ValueError(f"Volume size along axis {axis} must be >= 8 and divisible by 4, got {full}")
            if crop < 8 or crop % 4:
                raise ValueError(f"Crop size along axis {axis} must be >= 8 and divisible by 4, got {crop}")
            if crop > full:
                raise ValueError(f"Crop size {self.augment.crop_size} exceeds volume size {self.data.size}")
        low, high = self.augment.cutmix_box_range
        if not 0 < low <= high <= 1:
            raise ValueError(f"cutmix_box_range must satisfy 0 < low <= high <= 1, got {(low, high)}")
        return self

    @property
    def num_classes(self) -> int:
        return self.data.num_classes

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.model_dump(mode="json")).encode()).hexdigest()

    def with_overrides(self, overrides: dict[str, Any]) -> "ExperimentSettings":
        """Return a copy with dotted-key overrides applied (e.g. {"train.max_iters": 10})."""
        payload = self.model_dump(mode="json")
        for dotted, value in overrides.items():
            _assign(payload, dotted, value)
        return build_settings(payload)


def _assign(payload: dict[str, Any], dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    target = payload
    for key in parents:
        if key not in target or not isinstance(target[key], dict):
            raise ConfigurationError(f"Unknown config section '{dotted}'")
        target = target[key]
    if leaf not in target:
        raise ConfigurationError(f"Unknown config key '{dotted}'")
    if isinstance(target[leaf], dict) and isinstance(value, dict):
        target[leaf] = {**target[leaf], **value}
    else:
        target[leaf] = value


def build_settings(overrides: dict[str, Any] | None = None) -> ExperimentSettings:
    """Construct settings from nested overrides, translating validation failures."""
    try:
        return ExperimentSettings(**(overrides or {}))
    except ValidationError as e:
        raise ConfigurationError(_first_error(e)) from e


def load_settings(config_path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentSettings:
    """
    Load settings from a JSON config file, environment and dotted-key overrides.

    Args:
        config_path: Optional JSON file mirroring `ExperimentSettings`.
        overrides: Dotted-key overrides applied on top (highest priority).

    Raises:
        ConfigurationError: If the file is missing/unreadable or any value is invalid.
    """
    path = Path(config_path) if config_path is not None else None
    if path is not None:
        if not path.is_file():
            raise ConfigurationError(f"Config file not found: {path}")
        try:
            json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config file {path} is not valid JSON: {e.msg} (line {e.lineno})") from e

    token = _config_file.set(path)
    try:
        settings = build_settings()
    finally:
        _config_file.reset(token)

    if overrides:
        settings = settings.with_overrides(overrides)
    logger.debug("Loaded settings %s (hash %s)", path or "<defaults>", settings.config_hash()[:12])
    return settings


def _first_error(error: ValidationError) -> str:
    first = error.errors()[0]
    location = ".".join(str(part) for part in first["loc"]) or "settings"
    return f"{location}: {first['msg']}"


# Ablation switches reachable from the command line.
ABLATIONS: dict[str, dict[str, Any]] = {
    "no-crln": {"rectify.enabled": False},
    "no-cps": {"contrast.enabled": False},
    "no-strongaug": {"augment.use_strong": False},
    "agg-sum": {"model.aggregation": {"spatial_awareness": False, "conv_integration": False, "cross_class": True}},
    "agg-no-sa": {"model.aggregation": {"spatial_awareness": False}},
    "agg-no-ci": {"model.aggregation": {"conv_integration": False}},
    "agg-no-cr": {"model.aggregation": {"cross_class": False}},
    "rect-v1": {"rectify.mode": RectifierMode.V1_FIXED.value},
    "rect-v2": {"rectify.mode": RectifierMode.V2_LEARNABLE_CONCAT.value},
    "xi-random": {"contrast.xi_mode": XiMode.RANDOM.value},
    "centre-mean": {"contrast.centre": "mean"},
    "centre-prototype": {"contrast.centre": "prototype"},
}


def apply_ablations(settings: ExperimentSettings, names: Iterable[str]) -> ExperimentSettings:
    overrides: dict[str, Any] = {}
    for name in names:
        if name not in ABLATIONS:
            raise ConfigurationError(f"Unknown ablation '{name}'. Available: {sorted(ABLATIONS)}")
        for key, value in ABLATIONS[name].items():
            if isinstance(value, dict) and isinstance(overrides.get(key), dict):
                overrides[key] = {**overrides[key], **value}
            else:
                overrides[key] = value
    return settings.with_overrides(overrides) if overrides else settings

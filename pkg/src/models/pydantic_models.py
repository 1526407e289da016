from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

from config.settings import MODEL_CONFIG, SIMULATOR_CONFIG, TRAIN_CONFIG

# alpha + beta is compared against 1 with this slack so lattice points such
# as (0.4, 0.6) are never rejected for binary rounding.
FEASIBILITY_TOLERANCE = 1e-12


class FrameworkConfig(BaseModel):
    """(alpha, beta, c0, c1): one point of the feasible space plus the risk weights."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha: float = Field(gt=0.0, le=1.0)
    beta: float = Field(default=0.0, ge=0.0, le=1.0)
    c0: float = Field(default=1.0, ge=0.0)
    c1: float = Field(default=1.0, ge=0.0)

    @model_validator(mode="after")
    def check_feasible(self):
        if self.alpha + self.beta > 1.0 + FEASIBILITY_TOLERANCE:
            raise ValueError(
                f"alpha + beta must not exceed 1 (got {self.alpha} + {self.beta}); "
                "such configurations produce contradictory proxy labels"
            )
        return self


class TrainSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(default=TRAIN_CONFIG["learning_rate"], gt=0.0)
    epochs: int = Field(default=TRAIN_CONFIG["epochs"], ge=1)
    batch_size: int = Field(default=TRAIN_CONFIG["batch_size"], ge=1)
    seed: int = Field(default=TRAIN_CONFIG["seed"], ge=0)
    split_seed: Optional[int] = Field(default=None, ge=0)
    validation_fraction: float = Field(default=TRAIN_CONFIG["validation_fraction"], ge=0.0, lt=1.0)
    test_fraction: float = Field(default=TRAIN_CONFIG["test_fraction"], ge=0.0, lt=1.0)
    keep_best_validation: bool = TRAIN_CONFIG["keep_best_validation"]
    # slides from these locations are kept out of train, validation and test
    held_out_locations: List[str] = Field(default_factory=lambda: list(TRAIN_CONFIG["held_out_locations"]))
    prefetch: bool = TRAIN_CONFIG["prefetch"]

    @model_validator(mode="after")
    def check_split(self):
        if self.validation_fraction + self.test_fraction >= 1.0:
            raise ValueError("validation_fraction + test_fraction must leave slides for training")
        return self


class SyntheticSpec(BaseModel):
    """Parameters of a simulated two-Gaussian cohort."""

    model_config = ConfigDict(extra="forbid")

    schema_version: Literal[1] = 1
    n_slides: int = Field(default=SIMULATOR_CONFIG["n_slides"], ge=1)
    positive_fraction: float = Field(default=SIMULATOR_CONFIG["positive_fraction"], gt=0.0, le=1.0)
    patches_per_slide: Union[int, Tuple[int, int]] = SIMULATOR_CONFIG["patches_per_slide"]
    feature_dim: int = Field(default=SIMULATOR_CONFIG["feature_dim"], ge=1)
    tumor_fraction_range: Tuple[float, float] = tuple(SIMULATOR_CONFIG["tumor_fraction_range"])
    class_separation: float = Field(default=SIMULATOR_CONFIG["class_separation"], ge=0.0)
    noise_sigma: float = Field(default=SIMULATOR_CONFIG["noise_sigma"], gt=0.0)
    seed: int = Field(default=SIMULATOR_CONFIG["seed"], ge=0)
    adjacent_shift: float = Field(default=0.0, ge=0.0)
    locations: List[str] = Field(default_factory=list)
    export_ground_truth: bool = True

    @field_validator("patches_per_slide")
    @classmethod
    def check_patches(cls, value):
        low, high = (value, value) if isinstance(value, int) else value
        if low < 1:
            raise ValueError("patches_per_slide must be at least 1")
        if low > high:
            raise ValueError("patches_per_slide range must satisfy min <= max")
        return value

    @field_validator("tumor_fraction_range")
    @classmethod
    def check_tumor_fraction(cls, value):
        f_min, f_max = value
        if not 0.0 < f_min <= 1.0 or not 0.0 < f_max <= 1.0:
            raise ValueError("tumor_fraction_range bounds must lie in (0, 1]")
        if f_min > f_max:
            raise ValueError(f"tumor_fraction_range f_min ({f_min}) exceeds f_max ({f_max})")
        return value

    @model_validator(mode="after")
    def check_shift_dims(self):
        if self.adjacent_shift > 0 and self.feature_dim < 2:
            raise ValueError("adjacent_shift requires feature_dim >= 2")
        return self

    @property
    def patch_range(self) -> Tuple[int, int]:
        if isinstance(self.patches_per_slide, int):
            return self.patches_per_slide, self.patches_per_slide
        return tuple(self.patches_per_slide)


class SlideRecord(BaseModel):
    """One manifest line: a bag, its binary label T and where its features live."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    slide_id: str = Field(min_length=1)
    label: int = Field(ge=0, le=1)
    n_patches: int = Field(ge=1)
    feature_file: str
    location: Optional[str] = None


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hidden_dims: List[int] = Field(default_factory=lambda: list(MODEL_CONFIG["hidden_dims"]))

    @field_validator("hidden_dims")
    @classmethod
    def check_hidden(cls, value):
        if any(width < 1 for width in value):
            raise ValueError("hidden_dims entries must be positive")
        return value


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    manifest: Path
    output_dir: Path


class RunConfig(BaseModel):
    """Versioned run configuration document consumed by train/eval/benchmark."""

    model_config = ConfigDict(extra="forbid")

    schema_version: Literal[1] = 1
    framework: FrameworkConfig
    train: TrainSettings = Field(default_factory=TrainSettings)
    model: ModelConfig = Field(default_factory=ModelConfig)
    paths: PathsConfig
    # simulated into the manifest directory when paths.manifest does not exist yet
    simulator: Optional[SyntheticSpec] = None


class EpochLog(BaseModel):
    epoch: int
    mean_loss_negative: Optional[float] = None
    mean_loss_positive: Optional[float] = None
    validation_auc: Optional[float] = None
    empty_positive_steps: int = 0
    seconds: float


class TrainLog(BaseModel):
    framework: FrameworkConfig
    settings: TrainSettings
    n_train_slides: int
    n_validation_slides: int
    epochs: List[EpochLog] = Field(default_factory=list)
    best_epoch: Optional[int] = None


class SlideScore(BaseModel):
    slide_id: str
    auc: Optional[float] = None
    positive_fraction: float
    single_class: bool = False


class LocationScore(BaseModel):
    location: str
    auc: Optional[float] = None
    n_instances: int


class EvalReport(BaseModel):
    auc: float = Field(ge=0.0, le=1.0)
    threshold: float
    precision: float = Field(ge=0.0, le=1.0)
    recall: float = Field(ge=0.0, le=1.0)
    n_instances: int
    n_positive: int
    per_slide: List[SlideScore] = Field(default_factory=list)
    per_location: List[LocationScore] = Field(default_factory=list)
    framework: Optional[FrameworkConfig] = None
    out_of_location: Optional["EvalReport"] = None


class BenchmarkRow(BaseModel):
    alpha: float
    beta: float
    auc: float
    precision: float
    recall: float
    threshold: float
    out_of_location_auc: Optional[float] = None

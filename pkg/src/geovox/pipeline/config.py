"""Resolved run configuration, serialized as JSON into every run directory."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from ..errors import ConfigError
from ..genflow import TrainConfig
from ..geostory import StoryRanges
from ..netmodel import UNetConfig

# Training cases avoid the upper end of these ranges; OOD cases are drawn only from it.
DEFAULT_TRAIN_OVERRIDES = {"fold_amplitude": [0.0, 6.0], "fault_throw": [0.0, 6.0], "tilt_dip": [0.0, 20.0]}
DEFAULT_OOD_OVERRIDES = {"fold_amplitude": [7.0, 10.0], "fault_throw": [7.0, 10.0], "tilt_dip": [22.0, 30.0]}


@dataclass
class SamplerConfig:
    steps: int = 50
    ddpm_T: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.ddpm_T < 1:
            raise ConfigError("sampler steps and ddpm_T must be >= 1")


@dataclass
class RunConfig:
    grid: tuple[int, int, int] = (16, 16, 16)
    voxel_size: float = 25.0
    ranges: dict = field(default_factory=lambda: StoryRanges().to_dict())  # 64-tall scale
    train_overrides: dict = field(default_factory=lambda: dict(DEFAULT_TRAIN_OVERRIDES))
    ood_overrides: dict = field(default_factory=lambda: dict(DEFAULT_OOD_OVERRIDES))
    n_holes: int = 4
    n_cases: int = 150
    ood_fraction: float = 0.2
    val_fraction: float = 0.1
    geophysics: bool = True
    receivers: int = 30
    generation_seed: int = 0
    model: dict = field(default_factory=lambda: UNetConfig().to_dict())
    train: dict = field(default_factory=lambda: asdict(TrainConfig()))
    sampler: dict = field(default_factory=lambda: asdict(SamplerConfig()))

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise ConfigError(f"grid must be three positive ints, got {self.grid}")
        if self.n_cases < 1 or not 0 <= self.ood_fraction < 1 or not 0 <= self.val_fraction < 1:
            raise ConfigError("n_cases >= 1 and split fractions in [0, 1) required")
        if not 0 <= self.n_holes <= self.grid[0] * self.grid[1]:
            raise ConfigError(f"n_holes {self.n_holes} outside [0, {self.grid[0] * self.grid[1]}]")
        if not self.voxel_size > 0:
            raise ConfigError("voxel_size must be positive")
        if self.receivers < 1:
            raise ConfigError("receivers must be >= 1")
        # resolve every sub-config once so invalid values fail at load time
        self.story_ranges("train")
        self.story_ranges("ood")
        self.check_ood_disjoint()
        self.unet_config()
        self.train_config()
        self.sampler_config()

    # -- derived -------------------------------------------------------------
    def split_counts(self) -> dict[str, int]:
        n_ood = int(round(self.n_cases * self.ood_fraction))
        rest = self.n_cases - n_ood
        n_val = int(round(rest * self.val_fraction))
        return {"train": rest - n_val, "val": n_val, "ood": n_ood}

    def story_ranges(self, split: str) -> StoryRanges:
        base = StoryRanges.from_dict(self.ranges)
        over = self.ood_overrides if split == "ood" else self.train_overrides
        return base.with_overrides(**over).for_grid(self.grid[2])

    def check_ood_disjoint(self) -> None:
        train = StoryRanges.from_dict(self.ranges).with_overrides(**self.train_overrides)
        for key, (lo, hi) in self.ood_overrides.items():
            tlo, thi = getattr(train, key)
            if not (lo > thi or hi < tlo):
                raise ConfigError(f"OOD range for {key!r} {[lo, hi]} overlaps training range {[tlo, thi]}")

    def unet_config(self, **overrides) -> UNetConfig:
        try:
            return UNetConfig(**{**self.model, **overrides})
        except TypeError as e:
            raise ConfigError(f"model config: {e}") from e

    def train_config(self, **overrides) -> TrainConfig:
        try:
            return TrainConfig(**{**self.train, **overrides})
        except TypeError as e:
            raise ConfigError(f"train config: {e}") from e

    def sampler_config(self, **overrides) -> SamplerConfig:
        try:
            return SamplerConfig(**{**self.sampler, **overrides})
        except TypeError as e:
            raise ConfigError(f"sampler config: {e}") from e

    # -- serialization -----------------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"invalid run config: {e}") from e

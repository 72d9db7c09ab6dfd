"""Model/training/tracking configuration shared by the library and the CLI."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .scene_model import DEFAULT_SPEED_RANGES, ConfigError


@dataclass
class TrainConfig:
    # optimisation schedule
    epochs: int = 16
    mini_seq_len: int = 10
    lr: float = 2e-4
    lr_power: float = 0.8
    weight_decay: float = 0.01
    lambda_p: float = 0.5
    focal_alpha: float = -1.0
    focal_gamma: float = 1.0
    # memory and cues
    t_max: int = 7
    k_neighbors: int = 3
    k_cue: int = 3
    # architecture
    d_model: int = 32
    n_geo_layers: int = 2
    n_cue_layers: int = 2
    sin_bands: int = 8
    cross_mode: str = "cue"
    pos_scale: float = 10.0
    vel_scale: float = 10.0
    num_classes: int = 7
    # gating
    class_max_speed: list = field(default_factory=lambda: [hi for _, hi in DEFAULT_SPEED_RANGES])
    frame_dt: float = 0.5
    gate_margin: float = 1.5
    gate_floor: float = 1.0
    # lifecycle
    assign_method: str = "greedy"
    match_threshold: float = 0.5
    max_misses: int = 2
    birth_score_min: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        positive = ("epochs", "mini_seq_len", "lr", "t_max", "k_neighbors", "k_cue", "d_model",
                    "n_geo_layers", "n_cue_layers", "sin_bands", "num_classes", "frame_dt",
                    "pos_scale", "vel_scale")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % 2:
            raise ConfigError("d_model must be even")
        if self.cross_mode not in ("cue", "vanilla"):
            raise ConfigError(f"cross_mode must be 'cue' or 'vanilla', got {self.cross_mode!r}")
        if self.assign_method not in ("greedy", "hungarian"):
            raise ConfigError("assign_method must be 'greedy' or 'hungarian'")
        if len(self.class_max_speed) != self.num_classes:
            raise ConfigError("class_max_speed needs one value per class")
        if not 0.0 <= self.match_threshold <= 1.0 or not 0.0 <= self.birth_score_min <= 1.0:
            raise ConfigError("thresholds must lie in [0, 1]")
        if self.max_misses < 0 or self.lambda_p < 0 or self.focal_gamma < 0:
            raise ConfigError("max_misses, lambda_p and focal_gamma must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    # header fields a checkpoint must carry to rebuild the network
    ARCH_KEYS = ("d_model", "n_geo_layers", "n_cue_layers", "k_neighbors", "k_cue", "t_max",
                 "sin_bands", "num_classes", "cross_mode", "pos_scale", "vel_scale")

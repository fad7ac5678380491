# correspondence_transfer/config.py

import logging
from pathlib import Path
from typing import Any, Dict, Literal, Optional

import yaml
from pydantic import BaseModel, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError

log = logging.getLogger(__name__)

# Patch grid, best setting of the patch/stride study on 128x48 images.
PATCH_W_PX = 32
PATCH_H_PX = 32
STRIDE_W_PX = 8
STRIDE_H_PX = 12
N_STRIPES = 4
EXPAND_ROWS = 1
FEATURE_BINS = 8

SIGMA_P = 0.2
SIGMA_F = 1.0

SOLVER_ALPHA = 0.2
SOLVER_BETA = 30.0
SOLVER_MAX_ITERS = 300
SOLVER_TOL = 1e-8
SINKHORN_SWEEPS = 10

IMAGE_WIDTH_PX = 48
IMAGE_HEIGHT_PX = 128

POSE_BINS = 8
N_JOINTS = 14
JOINT_NAMES = (
    "head", "neck",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
    "l_coxa", "r_coxa", "l_knee", "r_knee", "l_ankle", "r_ankle",
)

REFERENCES_R = 100
ENSEMBLE_K = 3

METRIC_D_RED = 64
METRIC_REG = 1e-4

PROTOCOL_TRIALS = 10
PROTOCOL_SEED = 0

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class PatchSettings(BaseModel):
    w: int = Field(default=PATCH_W_PX, ge=1)
    h: int = Field(default=PATCH_H_PX, ge=1)
    stride_w: int = Field(default=STRIDE_W_PX, ge=1)
    stride_h: int = Field(default=STRIDE_H_PX, ge=1)
    n_stripes: int = Field(default=N_STRIPES, ge=1)
    expand_rows: int = Field(default=EXPAND_ROWS, ge=0)
    feature_bins: int = Field(default=FEATURE_BINS, ge=2)


class AffinitySettings(BaseModel):
    sigma_p: float = Field(default=SIGMA_P, gt=0)
    sigma_f: float = Field(default=SIGMA_F, gt=0)


class SolverSettings(BaseModel):
    alpha: float = Field(default=SOLVER_ALPHA, ge=0, le=1)
    beta: float = Field(default=SOLVER_BETA, gt=0)
    max_iters: int = Field(default=SOLVER_MAX_ITERS, ge=1)
    tol: float = Field(default=SOLVER_TOL, gt=0)
    sinkhorn_sweeps: int = Field(default=SINKHORN_SWEEPS, ge=1)
    refine: bool = True


class PoseSettings(BaseModel):
    n_bins: int = Field(default=POSE_BINS, ge=2)


class TransferSettings(BaseModel):
    R: int = Field(default=REFERENCES_R, ge=1)
    k: int = Field(default=ENSEMBLE_K, ge=1)
    scoring: Literal["ensemble", "full", "aligned"] = "ensemble"


class MetricSettings(BaseModel):
    kind: Literal["kissme", "euclidean"] = "kissme"
    d_red: int = Field(default=METRIC_D_RED, ge=1)
    reg: float = Field(default=METRIC_REG, ge=0)


class ProtocolSettings(BaseModel):
    trials: int = Field(default=PROTOCOL_TRIALS, ge=1)
    seed: int = Field(default=PROTOCOL_SEED, ge=0)
    multi_shot: bool = False


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="GCT_",
        env_nested_delimiter="__",
        extra="forbid",
    )

    patch: PatchSettings = Field(default_factory=PatchSettings)
    affinity: AffinitySettings = Field(default_factory=AffinitySettings)
    solver: SolverSettings = Field(default_factory=SolverSettings)
    pose: PoseSettings = Field(default_factory=PoseSettings)
    transfer: TransferSettings = Field(default_factory=TransferSettings)
    metric: MetricSettings = Field(default_factory=MetricSettings)
    protocol: ProtocolSettings = Field(default_factory=ProtocolSettings)
    threads: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def warn_nonstandard_bins(self) -> "Settings":
        if self.pose.n_bins != POSE_BINS:
            log.warning(f"Pose context uses {self.pose.n_bins} bins instead of {POSE_BINS}")
        return self


def load_settings(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> Settings:
    """Read an optional YAML file, apply dotted overrides, validate into Settings."""
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                loaded = yaml.safe_load(fh)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping, got {type(loaded).__name__}")
        data = loaded or {}

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if key:
            data.setdefault(section, {})[key] = value
        else:
            data[section] = value

    try:
        settings = Settings(**data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
    log.debug(f"Loaded settings: {settings.model_dump()}")
    return settings

from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, Field, field_validator, model_validator

from consts import (
    CROP_RADIUS,
    DEFAULT_K,
    DEFAULT_THREADS,
    KEYPOINT_LABELS,
    LANDMARK_COUNT,
    MV_ITERATIONS,
    MV_LAMBDAS,
    MV_LR,
    REG_ITERATIONS,
    REG_LAMBDAS,
    REG_LR,
    THETA_DEG,
    UV_RESOLUTION,
)
from errors import AsmError

Vec3 = Tuple[float, float, float]


class BoneEntry(BaseModel):
    name: str
    parent: Optional[Union[int, str]] = None
    psi0: Vec3
    proxy_vertex: Optional[int] = None
    bind_rot_scale: Optional[Tuple[Vec3, Vec3, Vec3]] = None


class SkeletonFile(BaseModel):
    bones: List[BoneEntry]


class RegConfig(BaseModel):
    lambda1: float = Field(REG_LAMBDAS[0], ge=0)
    lambda2: float = Field(REG_LAMBDAS[1], ge=0)
    lambda3: float = Field(REG_LAMBDAS[2], ge=0)
    lambda4: float = Field(REG_LAMBDAS[3], ge=0)
    lambda5: float = Field(REG_LAMBDAS[4], ge=0)
    learning_rate: float = Field(REG_LR, gt=0)
    iterations: int = Field(REG_ITERATIONS, ge=1)
    crop_radius: float = Field(CROP_RADIUS, gt=0)
    zeta_prior: Literal["init", "origin"] = "init"
    variant: Literal["asm", "dbb", "ssm"] = "asm"
    optimize_pose: bool = True
    log_every: int = Field(50, ge=1)


class MvConfig(BaseModel):
    lambda1: float = Field(MV_LAMBDAS[0], ge=0)
    lambda2: float = Field(MV_LAMBDAS[1], ge=0)
    lambda3: float = Field(MV_LAMBDAS[2], ge=0)
    lambda4: float = Field(MV_LAMBDAS[3], ge=0)
    theta_deg: float = Field(THETA_DEG, gt=0, lt=90)
    lr: float = Field(MV_LR, gt=0)
    iterations: int = Field(MV_ITERATIONS, ge=1)
    uv_resolution: int = Field(UV_RESOLUTION, ge=4)
    patch: Literal[3] = 3
    prior: RegConfig = Field(default_factory=RegConfig)
    photometric_literal: bool = False
    optimize_focal: bool = False
    depth_bias: float = Field(0.02, ge=0)
    log_every: int = Field(50, ge=1)


class RunConfig(BaseModel):
    template: Optional[Path] = None
    skeleton: Optional[Path] = None
    model: Optional[Path] = None
    output: Optional[Path] = None
    reg: RegConfig = Field(default_factory=RegConfig)
    mv: MvConfig = Field(default_factory=MvConfig)
    K: int = Field(DEFAULT_K, ge=1)
    seed: int = 0
    threads: int = Field(DEFAULT_THREADS, ge=1)

    def check_paths(self) -> None:
        for name in ("template", "skeleton", "model"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise AsmError(f"{name} path does not exist: {path}")


class TemplateAnnotations(BaseModel):
    """Annotated template vertices: the 7 registration keypoints and the 68 facial landmarks."""

    keypoints7: Dict[str, int]
    landmarks68: List[int]

    @field_validator("keypoints7")
    @classmethod
    def _all_labels(cls, value: Dict[str, int]) -> Dict[str, int]:
        missing = [label for label in KEYPOINT_LABELS if label not in value]
        if missing:
            raise ValueError(f"missing keypoint labels: {missing}")
        return value

    @field_validator("landmarks68")
    @classmethod
    def _sixty_eight(cls, value: List[int]) -> List[int]:
        if len(value) != LANDMARK_COUNT:
            raise ValueError(f"expected {LANDMARK_COUNT} landmark vertices, got {len(value)}")
        return value

    def keypoint_vertices(self) -> List[int]:
        return [self.keypoints7[label] for label in KEYPOINT_LABELS]


class KeypointsFile(BaseModel):
    scan: Dict[str, Vec3]
    model: Optional[Dict[str, int]] = None

    @model_validator(mode="after")
    def _complete(self) -> "KeypointsFile":
        missing = [label for label in KEYPOINT_LABELS if label not in self.scan]
        if missing:
            raise ValueError(f"scan keypoints missing labels: {missing}")
        return self

    def scan_points(self) -> List[Vec3]:
        return [self.scan[label] for label in KEYPOINT_LABELS]


class ViewEntry(BaseModel):
    image: Path
    f: float = Field(gt=0)
    cx: float
    cy: float
    rotation: Optional[Tuple[Vec3, Vec3, Vec3]] = None
    translation: Optional[Vec3] = None
    landmarks: Path
    contour: Path


class ViewManifest(BaseModel):
    views: List[ViewEntry]


class RunSummary(BaseModel):
    command: str
    status: str = "ok"
    final_loss: Optional[float] = None
    metric_name: Optional[str] = None
    metric: Optional[float] = None
    iterations: int = 0
    wall_time: float = 0.0
    details: Dict[str, float] = Field(default_factory=dict)

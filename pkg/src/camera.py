"""
Pinhole cameras: p = (cx + f x / z, cy + f y / z) for (x, y, z) = R v + t.
Pixel centres sit at integer coordinates, origin at the top-left pixel.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from errors import AsmError, BehindCameraError
from mesh_core import as_tensor, to_numpy
from skeleton_rig import euler_to_matrix

# frontal camera: image rows grow downwards, the face looks along +z
FRONTAL = np.diag([1.0, -1.0, -1.0])


@dataclass
class CameraView:
    image: np.ndarray
    f: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    landmarks68: Optional[np.ndarray] = None
    contour: Optional[np.ndarray] = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 2 or self.image.size == 0:
            raise AsmError("view image must be a non-empty grayscale grid")
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-6):
            raise AsmError("view rotation is not orthonormal")
        if self.landmarks68 is not None:
            self.landmarks68 = np.asarray(self.landmarks68, dtype=np.float64).reshape(-1, 2)
        if self.contour is not None:
            self.contour = np.asarray(self.contour, dtype=np.float64).reshape(-1, 2)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def pose_vector(self) -> np.ndarray:
        return pose_to_vector(self.rotation, self.translation)


def pose_to_vector(rotation, translation) -> np.ndarray:
    """[euler xyz (R = Rz Ry Rx), translation]."""
    euler = Rotation.from_matrix(to_numpy(rotation)).as_euler("xyz")
    return np.concatenate([euler, to_numpy(translation)])


def vector_to_pose(vector) -> Tuple[torch.Tensor, torch.Tensor]:
    vector = as_tensor(vector)
    return euler_to_matrix(vector[0:3]), vector[3:6]


def to_camera(points, rotation, translation) -> torch.Tensor:
    points = as_tensor(points)
    return points @ as_tensor(rotation).T + as_tensor(translation)


def project_points(points, rotation, translation, f, cx: float, cy: float, check: bool = True) -> torch.Tensor:
    """
    Projects (N, 3) points to (N, 2) pixels.

    Raises:
        BehindCameraError: some point has camera depth <= 0 (when check is set).
    """
    cam = to_camera(points, rotation, translation)
    z = cam[..., 2]
    if check and bool((z <= 0).any()):
        index = int(torch.nonzero(z <= 0)[0, 0])
        raise BehindCameraError(f"behind-camera: point {index} has camera depth {float(z[index]):.6g}")
    if not check:
        z = torch.where(z > 0, z, torch.ones_like(z))
    f = as_tensor(f)
    return torch.stack([cx + f * cam[..., 0] / z, cy + f * cam[..., 1] / z], dim=-1)


def project(v, view: CameraView) -> torch.Tensor:
    points = as_tensor(v)
    single = points.ndim == 1
    pixels = project_points(points.reshape(-1, 3), view.rotation, view.translation, view.f, view.cx, view.cy)
    return pixels[0] if single else pixels


def rotation_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def arc_poses(n_views: int, distance: float, spread_deg: float = 60.0) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Cameras on a horizontal arc around the head, all at `distance` from the
    origin and looking at it; yaw spans [-spread/2, spread/2].
    """
    if n_views < 1:
        raise AsmError("need at least one view")
    yaws = np.linspace(-0.5, 0.5, n_views) * math.radians(spread_deg) if n_views > 1 else np.zeros(1)
    translation = np.array([0.0, 0.0, distance])
    return [(FRONTAL @ rotation_y(yaw), translation.copy()) for yaw in yaws]

"""
Scan registration: keypoint similarity alignment, shape priors, the Adam loop
shared by every fitter, and the cropped scan-to-mesh error.
"""

import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np
import torch
from loguru import logger
from scipy.spatial.transform import Rotation

from asm_model import AsmParams, DeformedMesh, asm_forward
from autodiff import ParamLayout, value_and_grad
from errors import AsmError, DivergenceError, NonFiniteError
from gmm_skinning import normalized_weights
from mesh_core import Mesh, as_tensor, point_mesh_distance, to_numpy
from models import RegConfig
from skeleton_rig import Skeleton, euler_to_matrix

POSE_DIM = 7
VARIANT_GROUPS = {
    "asm": ("zeta", "log_pi", "mu", "chol", "tau"),
    "dbb": ("zeta", "tau"),
    "ssm": ("tau",),
}


@dataclass
class Scan:
    points: np.ndarray
    keypoints7: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.keypoints7 = np.asarray(self.keypoints7, dtype=np.float64)
        if len(self.points) < 7:
            raise AsmError(f"scan needs at least 7 points, got {len(self.points)}")
        if self.keypoints7.shape != (7, 3) or not np.isfinite(self.keypoints7).all():
            raise AsmError("scan keypoints must be 7 finite 3D points")


@dataclass(frozen=True)
class RigidPose:
    """x_scan = scale * rotation @ x_model + translation."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64)
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-9) or np.linalg.det(rotation) <= 0:
            raise AsmError("pose rotation must be a proper orthonormal matrix")
        if not self.scale > 0:
            raise AsmError(f"pose scale must be positive, got {self.scale}")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3), 1.0)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation

    def to_vector(self) -> np.ndarray:
        euler = Rotation.from_matrix(self.rotation).as_euler("xyz")
        return np.concatenate([euler, self.translation, [math.log(self.scale)]])

    @classmethod
    def from_vector(cls, vector) -> "RigidPose":
        vector = to_numpy(vector)
        rotation = Rotation.from_euler("xyz", vector[0:3]).as_matrix()
        return cls(rotation, vector[3:6], float(math.exp(vector[6])))


def apply_pose_vector(vertices: torch.Tensor, pose: torch.Tensor) -> torch.Tensor:
    """Differentiable similarity for a pose vector [euler(3), translation(3), log scale]."""
    rotation = euler_to_matrix(pose[0:3])
    return torch.exp(pose[6]) * vertices @ rotation.T + pose[3:6]


def similarity_transform(source, target, with_scale: bool = True) -> RigidPose:
    """
    Least-squares s, R, t with s R source_i + t ~ target_i (Kabsch-Umeyama).

    Raises:
        AsmError: the source points are coincident or collinear.
    """
    source, target = to_numpy(source), to_numpy(target)
    if source.shape != target.shape or source.shape[0] < 3:
        raise AsmError("similarity alignment needs two congruent sets of at least 3 points")
    mean_s, mean_t = source.mean(0), target.mean(0)
    cs, ct = source - mean_s, target - mean_t
    spread = np.linalg.svd(cs, compute_uv=False)
    if spread[0] <= 1e-12 or spread[1] <= 1e-9 * spread[0]:
        raise AsmError("keypoints are coincident or collinear; cannot align")
    H = ct.T @ cs / len(source)
    U, D, VT = np.linalg.svd(H)
    d = np.sign(np.linalg.det(U) * np.linalg.det(VT))
    S = np.diag([1.0, 1.0, d])
    R = U @ S @ VT
    scale = 1.0
    if with_scale:
        var_s = np.mean(np.sum(cs**2, axis=1))
        scale = float(np.trace(np.diag(D) @ S) / var_s)
    t = mean_t - scale * R @ mean_s
    return RigidPose(R, t, scale)


def rigid_init(model_kp, scan_kp) -> RigidPose:
    pose = similarity_transform(model_kp, scan_kp)
    logger.info(f"Keypoint alignment: scale={pose.scale:.5f}, translation={np.round(pose.translation, 5).tolist()}")
    return pose


def reg_energy(params: AsmParams, init: AsmParams, cfg: RegConfig) -> torch.Tensor:
    """
    Shape prior: l1 |tau|^2 + l2 |zeta - zeta0|^2 + l3 |pi - pi0|^2 + l4 |mu - mu0|^2
    + l5 |chol - chol0|^2, with pi compared after softmax and Sigma compared
    through its Cholesky parameters. zeta_prior="origin" uses |zeta|^2.
    """
    g, g0 = params.gmm, init.gmm
    zeta_ref = torch.zeros_like(g.zeta) if cfg.zeta_prior == "origin" else g0.zeta.detach()
    return (
        cfg.lambda1 * (params.tau**2).sum()
        + cfg.lambda2 * ((g.zeta - zeta_ref) ** 2).sum()
        + cfg.lambda3 * ((g.pi() - g0.pi().detach()) ** 2).sum()
        + cfg.lambda4 * ((g.mu - g0.mu.detach()) ** 2).sum()
        + cfg.lambda5 * ((g.chol - g0.chol.detach()) ** 2).sum()
    )


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update; returns the new parameters and state."""
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, step)


class OptimizationResult(NamedTuple):
    x: np.ndarray
    history: List[float]
    best_loss: float
    wall_time: float


def run_adam(
    objective: Callable,
    x0: np.ndarray,
    lr: float,
    iterations: int,
    free: Optional[np.ndarray] = None,
    log_every: int = 50,
    label: str = "fit",
) -> OptimizationResult:
    """
    Adam on a flat vector. The objective is re-evaluated from scratch every
    step, so discrete choices inside it are refreshed per iteration. Returns
    the best point visited; history holds the loss at every evaluated point.
    """
    started = time.perf_counter()
    x = np.array(x0, dtype=np.float64)
    free = np.ones_like(x) if free is None else free.astype(np.float64)
    state = AdamState.zeros(x.size)
    best_loss, best_x = math.inf, x.copy()
    history: List[float] = []
    logger.info(f"{label}: {int(free.sum())} free parameters, lr={lr}, {iterations} iterations")
    for iteration in range(iterations + 1):
        try:
            result = value_and_grad(objective, x)
        except NonFiniteError as err:
            raise DivergenceError(iteration, err.value, err.term) from err
        history.append(result.value)
        if result.value < best_loss:
            best_loss, best_x = result.value, x.copy()
        if iteration % log_every == 0 or iteration == iterations:
            terms = ", ".join(f"{k}={v:.6g}" for k, v in result.terms.items())
            logger.info(f"{label} iter {iteration}: loss={result.value:.6g} ({terms})")
        if iteration == iterations:
            break
        x, state = adam_step(state, x, result.grad * free, lr)
    return OptimizationResult(best_x, history, best_loss, time.perf_counter() - started)


@dataclass
class FitResult:
    params: AsmParams
    pose: RigidPose
    history: List[float] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def final_loss(self) -> float:
        return min(self.history) if self.history else math.nan


def _free_mask(layout: ParamLayout, variant: str, optimize_pose: bool) -> np.ndarray:
    groups = list(VARIANT_GROUPS[variant])
    if optimize_pose:
        groups.append("pose")
    return layout.mask(groups)


def _frozen_weights(mesh: Mesh, init: AsmParams, variant: str) -> Optional[torch.Tensor]:
    if variant == "asm":
        return None
    with torch.no_grad():
        return normalized_weights(mesh, init.gmm).weights


def fit_scan(
    mesh: Mesh,
    skeleton: Skeleton,
    scan: Scan,
    cfg: RegConfig,
    init: AsmParams,
    keypoint_vertices: Sequence[int],
) -> FitResult:
    """
    Keypoint alignment, then joint Adam over the pose and the ASM groups the
    variant frees, minimizing mean scan-to-model distance plus the shape prior.
    """
    J, K = init.bone_count, init.K
    with torch.no_grad():
        start_vertices = to_numpy(asm_forward(mesh, skeleton, init).vertices)
    pose0 = rigid_init(start_vertices[list(keypoint_vertices)], scan.keypoints7)
    layout = ParamLayout.for_asm(J, K).add("pose", POSE_DIM)
    free = _free_mask(layout, cfg.variant, cfg.optimize_pose)
    weights = _frozen_weights(mesh, init, cfg.variant)
    scan_points = torch.as_tensor(scan.points)
    asm_size = layout.size - POSE_DIM

    def objective(x: torch.Tensor):
        params = AsmParams.from_vector(x[:asm_size], J, K)
        deformed = asm_forward(mesh, skeleton, params, weights)
        posed = DeformedMesh(apply_pose_vector(deformed.vertices, x[asm_size:]), mesh.faces, mesh.uv)
        return {
            "distance": point_mesh_distance(scan_points, posed).mean,
            "prior": reg_energy(params, init, cfg),
        }

    x0 = np.concatenate([to_numpy(init.to_vector()), pose0.to_vector()])
    result = run_adam(objective, x0, cfg.learning_rate, cfg.iterations, free, cfg.log_every, f"fit-scan[{cfg.variant}]")
    params = AsmParams.from_vector(torch.as_tensor(result.x[:asm_size].copy()), J, K)
    pose = RigidPose.from_vector(result.x[asm_size:])
    logger.info(f"fit-scan finished: loss {result.history[0]:.6g} -> {result.best_loss:.6g} in {result.wall_time:.1f}s")
    return FitResult(params, pose, result.history, result.wall_time)


def fit_mesh(
    mesh: Mesh,
    skeleton: Skeleton,
    target_vertices,
    cfg: RegConfig,
    init: AsmParams,
) -> FitResult:
    """
    Registers ASM onto a mesh sharing the template topology (point-to-point),
    turning an externally predicted face mesh into starting parameters.
    """
    target = as_tensor(target_vertices)
    if target.shape != (mesh.vertex_count, 3):
        raise AsmError(f"target mesh has shape {tuple(target.shape)}, template has {mesh.vertex_count} vertices")
    J, K = init.bone_count, init.K
    with torch.no_grad():
        start_vertices = to_numpy(asm_forward(mesh, skeleton, init).vertices)
    pose0 = similarity_transform(start_vertices, to_numpy(target))
    layout = ParamLayout.for_asm(J, K).add("pose", POSE_DIM)
    free = _free_mask(layout, cfg.variant, cfg.optimize_pose)
    weights = _frozen_weights(mesh, init, cfg.variant)
    asm_size = layout.size - POSE_DIM

    def objective(x: torch.Tensor):
        params = AsmParams.from_vector(x[:asm_size], J, K)
        posed = apply_pose_vector(asm_forward(mesh, skeleton, params, weights).vertices, x[asm_size:])
        return {
            "vertex": ((posed - target) ** 2).sum(1).mean(),
            "prior": reg_energy(params, init, cfg),
        }

    x0 = np.concatenate([to_numpy(init.to_vector()), pose0.to_vector()])
    result = run_adam(objective, x0, cfg.learning_rate, cfg.iterations, free, cfg.log_every, "fit-mesh")
    params = AsmParams.from_vector(torch.as_tensor(result.x[:asm_size].copy()), J, K)
    return FitResult(params, RigidPose.from_vector(result.x[asm_size:]), result.history, result.wall_time)


def nme(fitted, scan: Scan, pose: RigidPose, crop_radius: float, nose_vertex: int) -> float:
    """
    Mean distance from the scan points within crop_radius of the fitted nose tip
    to the posed fitted surface, in scan units.
    """
    vertices = pose.apply(to_numpy(fitted.vertices))
    nose = vertices[nose_vertex]
    inside = np.linalg.norm(scan.points - nose, axis=1) <= crop_radius
    if not inside.any():
        raise AsmError(f"no scan points within {crop_radius} of the fitted nose tip")
    posed = Mesh(vertices, fitted.faces, fitted.uv)
    with torch.no_grad():
        distance = point_mesh_distance(scan.points[inside], posed)
    return float(distance.mean)

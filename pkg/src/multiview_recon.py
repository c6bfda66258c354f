"""
Multi-view reconstruction energies and the joint optimizer.

Per view and per evaluation the discrete sets (z-buffer visibility, contour
membership, texel faces) are computed from detached values and held fixed;
gradients flow through projections, bilinear sampling and barycentric blends.
"""

import itertools
import math
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger

from asm_model import AsmParams, asm_forward
from autodiff import ParamLayout
from camera import CameraView, project_points, vector_to_pose
from errors import AsmError, NoOverlapError, NoSilhouetteError
from file_utils import PathLike, atomic_write_text
from image_io import read_image
from mesh_core import Mesh, as_tensor, to_numpy, vertex_normals
from models import MvConfig, ViewManifest
from rasterizer import zbuffer_visibility
from registration import reg_energy, run_adam, similarity_transform
from skeleton_rig import Skeleton

VIEW_POSE_DIM = 6


class Camera(NamedTuple):
    """Differentiable camera state for one view during optimization."""

    rotation: torch.Tensor
    translation: torch.Tensor
    f: torch.Tensor
    cx: float
    cy: float
    width: int
    height: int

    @classmethod
    def from_view(cls, view: CameraView) -> "Camera":
        return cls(
            torch.as_tensor(view.rotation), torch.as_tensor(view.translation),
            torch.tensor(float(view.f), dtype=torch.float64), view.cx, view.cy, view.width, view.height,
        )

    def project(self, points, check: bool = True) -> torch.Tensor:
        return project_points(points, self.rotation, self.translation, self.f, self.cx, self.cy, check)

    def visibility(self, vertices, faces, bias: float) -> np.ndarray:
        return zbuffer_visibility(
            vertices, faces, to_numpy(self.rotation), to_numpy(self.translation),
            float(self.f), self.cx, self.cy, self.width, self.height, bias,
        )


class UvIntensityMap(NamedTuple):
    values: torch.Tensor
    mask: np.ndarray


class TexelMap(NamedTuple):
    faces: np.ndarray
    bary: np.ndarray
    covered: np.ndarray
    resolution: int


class ContourSelection(NamedTuple):
    indices: np.ndarray
    points: torch.Tensor


def texel_map(mesh: Mesh, resolution: int) -> TexelMap:
    """Face and barycentric weights of every UV texel centre ((c + 0.5) / R, (r + 0.5) / R)."""
    centers = (np.arange(resolution) + 0.5) / resolution
    cu, cv = np.meshgrid(centers, centers)
    faces, bary = mesh.uv_grid.locate(np.stack([cu.ravel(), cv.ravel()], axis=1))
    covered = faces >= 0
    return TexelMap(np.where(covered, faces, 0), bary, covered.reshape(resolution, resolution), resolution)


def extract_model_contour(vertices, faces: np.ndarray, camera: Camera, theta_deg: float, visible: np.ndarray) -> ContourSelection:
    """
    Projected vertices whose camera-space normal has |n_z| < sin(theta) and that
    pass the z-buffer test.

    Raises:
        NoSilhouetteError: no vertex qualifies.
    """
    normals = vertex_normals(to_numpy(vertices), faces) @ to_numpy(camera.rotation).T
    rim = np.abs(normals[:, 2]) < math.sin(math.radians(theta_deg))
    indices = np.flatnonzero(rim & visible)
    if len(indices) == 0:
        raise NoSilhouetteError("no-silhouette: no visible vertex lies on the model contour")
    return ContourSelection(indices, camera.project(as_tensor(vertices)[torch.as_tensor(indices)]))


def chamfer(set_a, set_b) -> torch.Tensor:
    """Half the sum of both directed mean squared nearest-neighbour distances."""
    a, b = as_tensor(set_a), as_tensor(set_b)
    if len(a) == 0 or len(b) == 0:
        raise AsmError("chamfer distance needs two non-empty point sets")
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return 0.5 * (d2.min(1).values.mean() + d2.min(0).values.mean())


def landmark_energy(vertices, landmark_ids: Sequence[int], cameras: Sequence[Camera], targets: Sequence[np.ndarray]) -> torch.Tensor:
    """Mean over views and landmarks of the squared pixel error."""
    points = as_tensor(vertices)[torch.as_tensor(np.asarray(landmark_ids, dtype=np.int64))]
    errors = [((camera.project(points) - as_tensor(target)) ** 2).sum(-1) for camera, target in zip(cameras, targets)]
    return torch.cat(errors).mean()


def bilinear_sample(image, points) -> torch.Tensor:
    """Samples an (H, W) grid at (N, 2) pixel coordinates (x, y), clamped to the border."""
    image = as_tensor(image)
    height, width = image.shape
    x = points[:, 0].clamp(0, width - 1)
    y = points[:, 1].clamp(0, height - 1)
    x0 = torch.floor(x).clamp(max=max(width - 2, 0)).detach()
    y0 = torch.floor(y).clamp(max=max(height - 2, 0)).detach()
    fx, fy = x - x0, y - y0
    xi, yi = x0.long(), y0.long()
    xj, yj = (xi + 1).clamp(max=width - 1), (yi + 1).clamp(max=height - 1)
    top = image[yi, xi] * (1 - fx) + image[yi, xj] * fx
    bottom = image[yj, xi] * (1 - fx) + image[yj, xj] * fx
    return top * (1 - fy) + bottom * fy


def unwrap_intensities(vertices, mesh: Mesh, image, camera: Camera, visible: np.ndarray, texels: TexelMap) -> UvIntensityMap:
    """Samples each visible vertex's intensity and spreads it over the UV texels."""
    pixels = camera.project(vertices, check=False)
    intensity = bilinear_sample(image, pixels)
    visible_t = torch.as_tensor(visible)
    intensity = torch.where(visible_t, intensity, torch.zeros_like(intensity))
    corners = mesh.faces[texels.faces]
    values = (torch.as_tensor(texels.bary) * intensity[torch.as_tensor(corners)]).sum(1)
    mask = texels.covered.ravel() & visible[corners].all(1)
    values = torch.where(torch.as_tensor(mask), values, torch.zeros_like(values))
    R = texels.resolution
    return UvIntensityMap(values.reshape(R, R), mask.reshape(R, R))


def lncc(map_a: UvIntensityMap, map_b: UvIntensityMap, patch: int = 3) -> torch.Tensor:
    """
    Mean normalized cross-correlation of co-located patch x patch windows that
    are fully unmasked in both maps. Zero-variance windows score 0.

    Raises:
        NoOverlapError: no window is valid in both maps.
    """
    if map_a.values.shape != map_b.values.shape:
        raise AsmError("lncc needs maps of equal resolution")
    both = torch.as_tensor((map_a.mask & map_b.mask).astype(np.float64))[None, None]
    valid = F.unfold(both, patch).min(1).values[0] > 0.5
    if not bool(valid.any()):
        raise NoOverlapError("no-overlap: the two UV maps share no fully visible patch")
    pa = F.unfold(map_a.values[None, None], patch)[0][:, valid]
    pb = F.unfold(map_b.values[None, None], patch)[0][:, valid]
    da = pa - pa.mean(0)
    db = pb - pb.mean(0)
    var = (da * da).sum(0) * (db * db).sum(0)
    ok = var > 1e-24
    ncc = torch.where(ok, (da * db).sum(0) / torch.sqrt(torch.where(ok, var, torch.ones_like(var))), torch.zeros_like(var))
    return ncc.clamp(-1.0, 1.0).mean()


def photometric_energy(maps: Sequence[UvIntensityMap], patch: int = 3, literal: bool = False) -> torch.Tensor:
    """Mean over unordered view pairs of 1 - LNCC (or of LNCC itself when literal)."""
    if len(maps) < 2:
        raise AsmError("photometric consistency needs at least two views")
    scores = [lncc(maps[i], maps[j], patch) for i, j in itertools.combinations(range(len(maps)), 2)]
    mean = torch.stack(scores).mean()
    return mean if literal else 1.0 - mean


def combine_energies(e_lmk, e_edge, e_pc, e_reg, cfg: MvConfig) -> torch.Tensor:
    return cfg.lambda1 * e_lmk + cfg.lambda2 * e_edge + cfg.lambda3 * e_pc + cfg.lambda4 * e_reg


def vertex_rmse(a, b) -> float:
    a, b = to_numpy(a), to_numpy(b)
    if a.shape != b.shape:
        raise AsmError(f"vertex sets differ in shape: {a.shape} vs {b.shape}")
    return float(np.sqrt(((a - b) ** 2).sum(1).mean()))


class ViewSets(NamedTuple):
    """Discrete choices for one view, held fixed within a gradient evaluation."""

    visible: np.ndarray
    contour: Optional[np.ndarray]


def view_sets(vertices, mesh: Mesh, cameras: Sequence[Camera], views: Sequence[CameraView], cfg: MvConfig) -> List[ViewSets]:
    """z-buffer visibility and contour vertex indices of every view at the given vertices."""
    detached = to_numpy(vertices)
    sets = []
    for camera, view in zip(cameras, views):
        visible = camera.visibility(detached, mesh.faces, cfg.depth_bias)
        contour = None
        if view.contour is not None and len(view.contour):
            contour = extract_model_contour(detached, mesh.faces, camera, cfg.theta_deg, visible).indices
        sets.append(ViewSets(visible, contour))
    return sets


def energy_terms(
    mesh: Mesh,
    skeleton: Skeleton,
    params: AsmParams,
    init: AsmParams,
    cameras: Sequence[Camera],
    views: Sequence[CameraView],
    landmark_ids: Sequence[int],
    texels: TexelMap,
    cfg: MvConfig,
    sets: Optional[Sequence[ViewSets]] = None,
) -> Dict[str, torch.Tensor]:
    """
    Unweighted landmark, edge, photometric and prior energies at one parameter
    state. Without `sets` the discrete choices are recomputed from the current
    vertices.
    """
    vertices = asm_forward(mesh, skeleton, params).vertices
    if sets is None:
        sets = view_sets(vertices, mesh, cameras, views, cfg)
    edges, maps = [], []
    for camera, view, chosen in zip(cameras, views, sets):
        if chosen.contour is not None:
            points = camera.project(vertices[torch.as_tensor(chosen.contour)])
            edges.append(chamfer(points, view.contour))
        maps.append(unwrap_intensities(vertices, mesh, view.image, camera, chosen.visible, texels))
    zero = torch.zeros((), dtype=torch.float64)
    return {
        "landmark": landmark_energy(vertices, landmark_ids, cameras, [v.landmarks68 for v in views]),
        "edge": torch.stack(edges).mean() if edges else zero,
        "photometric": photometric_energy(maps, cfg.patch, cfg.photometric_literal) if len(maps) > 1 else zero,
        "prior": reg_energy(params, init, cfg.prior),
    }


def weighted_terms(terms: Dict[str, torch.Tensor], cfg: MvConfig) -> Dict[str, torch.Tensor]:
    weights = {"landmark": cfg.lambda1, "edge": cfg.lambda2, "photometric": cfg.lambda3, "prior": cfg.lambda4}
    return {name: weights[name] * value for name, value in terms.items()}


def total_energy(
    mesh: Mesh,
    skeleton: Skeleton,
    params: AsmParams,
    init: AsmParams,
    cameras: Sequence[Camera],
    views: Sequence[CameraView],
    landmark_ids: Sequence[int],
    texels: TexelMap,
    cfg: MvConfig,
    sets: Optional[Sequence[ViewSets]] = None,
) -> torch.Tensor:
    """Weighted sum of the four reconstruction energies at one parameter and camera state."""
    terms = energy_terms(mesh, skeleton, params, init, cameras, views, landmark_ids, texels, cfg, sets)
    return combine_energies(terms["landmark"], terms["edge"], terms["photometric"], terms["prior"], cfg)


class ReconResult(NamedTuple):
    params: AsmParams
    poses: List[Tuple[np.ndarray, np.ndarray]]
    focals: List[float]
    history: List[float]
    wall_time: float


def estimate_pose_from_landmarks(model_points, landmarks, f: float, cx: float, cy: float, iterations: int = 100, tol: float = 1e-12) -> Tuple[np.ndarray, np.ndarray]:
    """
    Camera pose from 3D-2D correspondences: start from a fronto-parallel guess,
    then alternate projecting the posed points onto their lines of sight and
    re-solving the rigid alignment.
    """
    model = to_numpy(model_points)
    pixels = to_numpy(landmarks)
    rays = np.column_stack([(pixels[:, 0] - cx) / f, (pixels[:, 1] - cy) / f, np.ones(len(pixels))])
    spread3 = np.sqrt(((model[:, :2] - model[:, :2].mean(0)) ** 2).sum(1).mean())
    spread2 = np.sqrt(((pixels - pixels.mean(0)) ** 2).sum(1).mean())
    if spread2 <= 0:
        raise AsmError("landmarks are coincident; cannot estimate a pose")
    targets = rays * (f * spread3 / spread2)
    line_of_sight = np.einsum("ni,nj->nij", rays, rays) / (rays * rays).sum(1)[:, None, None]
    previous = math.inf
    pose = None
    for _ in range(iterations):
        pose = similarity_transform(model, targets, with_scale=False)
        cam = model @ pose.rotation.T + pose.translation
        targets = np.einsum("nij,nj->ni", line_of_sight, cam)
        error = float(((targets - cam) ** 2).sum())
        if abs(previous - error) <= tol * max(1.0, error):
            break
        previous = error
    return pose.rotation, pose.translation


def reconstruct(
    mesh: Mesh,
    skeleton: Skeleton,
    views: Sequence[CameraView],
    cfg: MvConfig,
    init: AsmParams,
    landmark_ids: Sequence[int],
) -> ReconResult:
    """Joint Adam over ASM parameters and per-view poses (and focal lengths when enabled)."""
    if len(views) < 2:
        raise AsmError("reconstruction needs at least two views")
    for k, view in enumerate(views):
        if view.landmarks68 is None:
            raise AsmError(f"view {k} has no landmarks")
    J, K = init.bone_count, init.K
    n = len(views)
    layout = ParamLayout.for_asm(J, K)
    asm_size = layout.size
    for k in range(n):
        layout.add("pose", VIEW_POSE_DIM, k)
    for k in range(n):
        layout.add("focal", 1, k)
    free = layout.mask(["zeta", "log_pi", "mu", "chol", "tau", "pose"] + (["focal"] if cfg.optimize_focal else []))
    texels = texel_map(mesh, cfg.uv_resolution)
    init = init.detach()

    def unpack(x):
        params = AsmParams.from_vector(x[:asm_size], J, K)
        cameras = []
        for k, view in enumerate(views):
            start = asm_size + VIEW_POSE_DIM * k
            rotation, translation = vector_to_pose(x[start : start + VIEW_POSE_DIM])
            log_f = x[asm_size + VIEW_POSE_DIM * n + k]
            cameras.append(Camera(rotation, translation, torch.exp(log_f), view.cx, view.cy, view.width, view.height))
        return params, cameras

    def objective(x: torch.Tensor):
        params, cameras = unpack(x)
        terms = energy_terms(mesh, skeleton, params, init, cameras, views, landmark_ids, texels, cfg)
        return weighted_terms(terms, cfg)

    x0 = np.concatenate(
        [to_numpy(init.to_vector())]
        + [view.pose_vector() for view in views]
        + [np.array([math.log(view.f)]) for view in views]
    )
    result = run_adam(objective, x0, cfg.lr, cfg.iterations, free, cfg.log_every, f"reconstruct[{n} views]")
    params, cameras = unpack(torch.as_tensor(result.x))
    poses = [(to_numpy(c.rotation), to_numpy(c.translation)) for c in cameras]
    focals = [float(c.f) for c in cameras]
    logger.info(f"reconstruct finished: energy {result.history[0]:.6g} -> {result.best_loss:.6g}")
    return ReconResult(params.detach(), poses, focals, result.history, result.wall_time)


def _read_points_2d(path: Path) -> np.ndarray:
    return np.loadtxt(path, dtype=np.float64, ndmin=2).reshape(-1, 2)


def write_points_2d(path: PathLike, points) -> Path:
    lines = [f"{x:.17g} {y:.17g}" for x, y in to_numpy(points)]
    return atomic_write_text(path, "\n".join(lines) + "\n")


def load_views(manifest_path: PathLike, model_landmarks: Optional[np.ndarray] = None) -> List[CameraView]:
    """
    Reads a view manifest; paths are relative to the manifest. Views without a
    stored pose get one estimated from their landmarks (needs model_landmarks).
    """
    manifest_path = Path(manifest_path)
    manifest = ViewManifest.model_validate_json(manifest_path.read_text())
    base = manifest_path.parent
    views = []
    for k, entry in enumerate(manifest.views):
        image = read_image(base / entry.image)
        landmarks = _read_points_2d(base / entry.landmarks)
        contour = _read_points_2d(base / entry.contour)
        if entry.rotation is not None and entry.translation is not None:
            rotation, translation = np.array(entry.rotation), np.array(entry.translation)
        elif model_landmarks is not None:
            rotation, translation = estimate_pose_from_landmarks(model_landmarks, landmarks, entry.f, entry.cx, entry.cy)
            logger.info(f"View {k}: pose estimated from landmarks")
        else:
            raise AsmError(f"view {k} has no pose and no model landmarks to estimate one")
        views.append(CameraView(image, entry.f, entry.cx, entry.cy, rotation, translation, landmarks, contour))
    logger.info(f"Loaded {len(views)} views from {manifest_path}")
    return views

"""
Synthetic cases with known ground truth: random ASM parameters, a sampled
scan with keypoints, and rendered views with exact landmarks and contours.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
from loguru import logger

from asm_model import AsmParams, asm_forward, random_params, save_params
from camera import CameraView, arc_poses
from consts import KEYPOINT_LABELS, THETA_DEG
from errors import AsmError, UncoveredVertexError
from file_utils import PathLike, write_json
from gmm_skinning import normalized_weights
from image_io import write_pgm
from mesh_core import Mesh, sample_surface, to_numpy
from mesh_io import save_obj, save_points_ply
from models import KeypointsFile, TemplateAnnotations, ViewEntry, ViewManifest
from multiview_recon import Camera, extract_model_contour, write_points_2d
from rasterizer import rasterize_view, view_visibility
from registration import RigidPose, Scan
from skeleton_rig import Skeleton

MAX_ATTEMPTS = 10
IMAGE_SIZE = 128
CAMERA_DISTANCE = 6.0


@dataclass
class SynthCase:
    params: AsmParams
    vertices: np.ndarray
    scan: Optional[Scan] = None
    scan_pose: Optional[RigidPose] = None
    views: List[CameraView] = field(default_factory=list)
    magnitude: float = 1.0


def synth_params(mesh: Mesh, skeleton: Skeleton, K: int, rng: np.random.Generator, magnitude: float) -> Tuple[AsmParams, float]:
    """
    Random parameters; a draw that leaves a vertex uncovered is retried at half
    the magnitude. Returns the parameters and the magnitude actually drawn.
    """
    for attempt in range(1, MAX_ATTEMPTS + 1):
        params = random_params(mesh, skeleton, K, rng, magnitude)
        try:
            normalized_weights(mesh, params.gmm)
            return params, magnitude
        except UncoveredVertexError as err:
            logger.warning(f"Synth attempt {attempt}: {err}; halving magnitude {magnitude} -> {magnitude / 2}")
            magnitude /= 2
    raise AsmError(f"could not draw covered parameters in {MAX_ATTEMPTS} attempts")


def random_similarity(rng: np.random.Generator, magnitude: float) -> RigidPose:
    euler = rng.uniform(-0.1, 0.1, size=3) * magnitude
    translation = rng.uniform(-0.1, 0.1, size=3) * magnitude
    log_scale = rng.uniform(-0.05, 0.05) * magnitude
    return RigidPose.from_vector(np.concatenate([euler, translation, [log_scale]]))


def synth_scan(
    mesh: Mesh,
    vertices: np.ndarray,
    annotations: TemplateAnnotations,
    rng: np.random.Generator,
    magnitude: float,
    n_points: int = 2000,
) -> tuple:
    pose = random_similarity(rng, magnitude)
    posed = pose.apply(vertices)
    points, _ = sample_surface(posed, mesh.faces, n_points, rng)
    keypoints = posed[annotations.keypoint_vertices()]
    return Scan(points, keypoints), pose


def procedural_texture(mesh: Mesh) -> np.ndarray:
    """Smooth, non-constant per-vertex intensity in [0.1, 0.9] driven by the UV chart."""
    u, v = mesh.uv[:, 0], mesh.uv[:, 1]
    value = 0.5 + 0.25 * np.sin(12.0 * u) * np.cos(9.0 * v) + 0.15 * np.sin(31.0 * u + 17.0 * v)
    return np.clip(value, 0.1, 0.9)


def synth_views(
    mesh: Mesh,
    vertices: np.ndarray,
    annotations: TemplateAnnotations,
    n_views: int,
    image_size: int = IMAGE_SIZE,
    theta_deg: float = THETA_DEG,
    spread_deg: float = 60.0,
) -> List[CameraView]:
    """Renders the deformed mesh from an arc of cameras with exact landmarks and contours."""
    texture = procedural_texture(mesh)
    f = 0.7 * image_size * CAMERA_DISTANCE / 2.0
    c = (image_size - 1) / 2.0
    blank = np.zeros((image_size, image_size))
    views = []
    for rotation, translation in arc_poses(n_views, CAMERA_DISTANCE, spread_deg):
        view = CameraView(blank, f, c, c, rotation, translation)
        image = rasterize_view(vertices, mesh.faces, texture, view).image
        camera = Camera.from_view(view)
        visible = view_visibility(vertices, mesh.faces, view)
        with torch.no_grad():
            landmarks = to_numpy(camera.project(vertices[annotations.landmarks68]))
            contour = to_numpy(extract_model_contour(vertices, mesh.faces, camera, theta_deg, visible).points)
        views.append(CameraView(image, f, c, c, rotation, translation, landmarks, contour))
    return views


def make_case(
    mesh: Mesh,
    skeleton: Skeleton,
    annotations: TemplateAnnotations,
    K: int,
    seed: int,
    mode: str = "scan",
    magnitude: float = 1.0,
    n_views: int = 5,
    n_points: int = 2000,
) -> SynthCase:
    if mode not in ("scan", "views"):
        raise AsmError(f"unknown synth mode '{mode}'")
    rng = np.random.default_rng(seed)
    params, magnitude = synth_params(mesh, skeleton, K, rng, magnitude)
    with torch.no_grad():
        vertices = to_numpy(asm_forward(mesh, skeleton, params).vertices)
    case = SynthCase(params, vertices, magnitude=magnitude)
    if mode == "scan":
        case.scan, case.scan_pose = synth_scan(mesh, vertices, annotations, rng, magnitude, n_points)
    else:
        case.views = synth_views(mesh, vertices, annotations, n_views)
    logger.info(f"Synth case ready: mode={mode}, seed={seed}, magnitude={magnitude}")
    return case


def write_case(out_dir: PathLike, case: SynthCase, mesh: Mesh, skeleton: Skeleton) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_params(out_dir / "gt_params.asmp", case.params, skeleton, mesh)
    save_obj(out_dir / "gt_mesh.obj", case.vertices, mesh)
    if case.scan is not None:
        save_points_ply(out_dir / "scan.ply", case.scan.points)
        keypoints = KeypointsFile(scan={k: tuple(p) for k, p in zip(KEYPOINT_LABELS, case.scan.keypoints7.tolist())})
        write_json(out_dir / "keypoints.json", keypoints.model_dump(mode="json"))
        pose = case.scan_pose
        write_json(
            out_dir / "scan_pose.json",
            {"rotation": pose.rotation.tolist(), "translation": pose.translation.tolist(), "scale": pose.scale},
        )
    if case.views:
        entries = []
        for k, view in enumerate(case.views):
            write_pgm(out_dir / f"view_{k}.pgm", view.image)
            write_points_2d(out_dir / f"view_{k}_landmarks.txt", view.landmarks68)
            write_points_2d(out_dir / f"view_{k}_contour.txt", view.contour)
            entries.append(
                ViewEntry(
                    image=Path(f"view_{k}.pgm"),
                    f=view.f,
                    cx=view.cx,
                    cy=view.cy,
                    rotation=tuple(tuple(row) for row in view.rotation.tolist()),
                    translation=tuple(view.translation.tolist()),
                    landmarks=Path(f"view_{k}_landmarks.txt"),
                    contour=Path(f"view_{k}_contour.txt"),
                )
            )
        write_json(out_dir / "views.json", ViewManifest(views=entries).model_dump(mode="json"))
    logger.info(f"Synth case written to {out_dir}")
    return out_dir

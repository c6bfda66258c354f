"""
Procedural demo head with a UV chart, the default 84-bone skeleton placed on
it, and its keypoint / landmark annotations. Everything is generated
deterministically, so the assets can be rebuilt at any time.

Units are decimeters; the face looks along +z.
"""

import math
from typing import Dict, List, Tuple

import numpy as np
from loguru import logger

from consts import DEMO_ANNOTATIONS, DEMO_SKELETON, DEMO_TEMPLATE, KEYPOINT_LABELS
from file_utils import PathLike, write_json
from mesh_core import Mesh
from mesh_io import save_obj
from models import SkeletonFile, TemplateAnnotations
from skeleton_rig import ASM_HIERARCHY

DEFAULT_GRID = 51
HEAD_AXES = (0.75, 1.0, 0.85)
BONE_DEPTH = 0.1

CENTER_BONES: Dict[str, float] = {
    "root": 0.50, "nose_mid": 0.48, "head": 0.69, "nose_bridge_upper": 0.62, "nose_bridge": 0.56,
    "nose": 0.44, "nose_tip": 0.38, "lip_upper_mid": 0.31, "mouth": 0.25, "lip_lower_mid": 0.19,
    "chin": 0.12, "chin_low": 0.06, "neck_front": 0.00, "eyebrow_center": 0.77,
    "eyebrow_center_up": 0.85, "forehead": 0.94,
}

# subject's right side (u < 0.5); the left side mirrors u -> 1 - u
RIGHT_BONES: Dict[str, Tuple[float, float]] = {
    "nose_wing": (0.42, 0.45), "nose_hole": (0.45, 0.40), "nose_bottom": (0.42, 0.35),
    "lip_upper_side": (0.42, 0.29), "lip_lower_side": (0.42, 0.20), "lip_corner": (0.35, 0.25),
    "chin_side": (0.38, 0.12), "chin_side_low": (0.30, 0.05), "neck_side": (0.10, 0.05),
    "jaw": (0.17, 0.18), "jaw_corner": (0.06, 0.32), "cheek": (0.22, 0.32),
    "apple_lower": (0.30, 0.38), "apple_inner": (0.37, 0.46), "apple_center": (0.27, 0.46),
    "apple_outer": (0.16, 0.46), "ear": (0.04, 0.56), "eye": (0.30, 0.64), "eye_hole": (0.30, 0.58),
    "eye_inner_corner": (0.40, 0.64), "eye_outer_corner": (0.20, 0.64), "eye_inner_upper": (0.36, 0.70),
    "eye_outer_upper": (0.24, 0.70), "eye_inner_lower": (0.36, 0.58), "eye_outer_lower": (0.24, 0.58),
    "eyelid_inner": (0.37, 0.76), "eyelid_middle": (0.30, 0.75), "eyelid_outer": (0.23, 0.76),
    "eyebrow": (0.30, 0.88), "eyebrow_mid": (0.30, 0.82), "eyebrow_inner": (0.40, 0.82),
    "eyebrow_outer": (0.19, 0.81), "forehead": (0.22, 0.95), "temple": (0.07, 0.90),
}

KEYPOINT_UV: Dict[str, Tuple[float, float]] = {
    "right_eye_outer": (0.20, 0.64),
    "right_eye_inner": (0.40, 0.64),
    "left_eye_inner": (0.60, 0.64),
    "left_eye_outer": (0.80, 0.64),
    "nose_tip": (0.50, 0.38),
    "right_mouth_corner": (0.35, 0.25),
    "left_mouth_corner": (0.65, 0.25),
}


def head_surface(u, v) -> np.ndarray:
    """Ellipsoid patch over the UV square with a nose bump."""
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    a, b, c = HEAD_AXES
    phi = (u - 0.5) * math.pi * 0.9
    theta = (v - 0.5) * math.pi * 0.8
    x = a * np.sin(phi) * np.cos(theta)
    y = b * np.sin(theta)
    z = c * np.cos(phi) * np.cos(theta)
    z = z + 0.25 * np.exp(-((u - 0.5) ** 2 + (v - 0.42) ** 2) / (2 * 0.06**2))
    return np.stack([x, y, z], axis=-1)


def build_demo_head(n: int = DEFAULT_GRID) -> Mesh:
    """n x n vertex grid over UV; vertex id = row * n + column, triangles counter-clockwise in UV."""
    ticks = np.linspace(0.0, 1.0, n)
    uu, vv = np.meshgrid(ticks, ticks)
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    vertices = head_surface(uv[:, 0], uv[:, 1])
    i, j = np.meshgrid(np.arange(n - 1), np.arange(n - 1))
    p00 = (j * n + i).ravel()
    p10, p01, p11 = p00 + 1, p00 + n, p00 + n + 1
    faces = np.concatenate([np.stack([p00, p10, p11], 1), np.stack([p00, p11, p01], 1)])
    return Mesh(vertices, faces, uv)


def grid_vertex(u: float, v: float, n: int = DEFAULT_GRID) -> int:
    return int(round(v * (n - 1))) * n + int(round(u * (n - 1)))


def bone_uv_table() -> Dict[str, Tuple[float, float]]:
    table = {name: (0.5, v) for name, v in CENTER_BONES.items()}
    for name, (u, v) in RIGHT_BONES.items():
        table[f"{name}.R"] = (u, v)
        table[f"{name}.L"] = (1.0 - u, v)
    return table


def build_default_skeleton(mesh: Mesh, n: int = DEFAULT_GRID) -> SkeletonFile:
    """
    The default hierarchy with every bone placed BONE_DEPTH behind the surface
    point of its UV anchor; the root sits at the origin.
    """
    table = bone_uv_table()
    bones = []
    for name, parent in ASM_HIERARCHY:
        proxy = grid_vertex(*table[name], n=n)
        psi0 = np.zeros(3) if parent is None else mesh.vertices[proxy] - np.array([0.0, 0.0, BONE_DEPTH])
        bones.append({"name": name, "parent": parent, "psi0": psi0.tolist(), "proxy_vertex": proxy})
    return SkeletonFile.model_validate({"bones": bones})


def landmark_uvs() -> List[Tuple[float, float]]:
    """68 facial landmarks in the usual jaw / brows / nose / eyes / mouth order."""
    points = []
    for k in range(17):
        angle = math.pi * k / 16
        points.append((0.5 - 0.4 * math.cos(angle), 0.55 - 0.47 * math.sin(angle)))
    for start in (0.18, 0.58):
        for k in range(5):
            t = k / 4
            points.append((start + 0.24 * t, 0.80 + 0.02 * math.sin(math.pi * t)))
    for k in range(4):
        points.append((0.5, 0.62 - 0.22 * k / 3))
    for k in range(5):
        points.append((0.44 + 0.03 * k, 0.36 - 0.01 * (k == 2)))
    eye_angles = [math.pi, 2 * math.pi / 3, math.pi / 3, 0.0, -math.pi / 3, -2 * math.pi / 3]
    for cu in (0.30, 0.70):
        points.extend((cu + 0.08 * math.cos(a), 0.64 + 0.03 * math.sin(a)) for a in eye_angles)
    outer = [math.pi - k * math.pi / 6 for k in range(7)] + [-k * math.pi / 6 for k in range(1, 6)]
    points.extend((0.5 + 0.15 * math.cos(a), 0.25 + 0.06 * math.sin(a)) for a in outer)
    inner = [math.pi, 3 * math.pi / 4, math.pi / 2, math.pi / 4, 0.0, -math.pi / 4, -math.pi / 2, -3 * math.pi / 4]
    points.extend((0.5 + 0.10 * math.cos(a), 0.25 + 0.025 * math.sin(a)) for a in inner)
    return points


def build_annotations(n: int = DEFAULT_GRID) -> TemplateAnnotations:
    return TemplateAnnotations(
        keypoints7={label: grid_vertex(*KEYPOINT_UV[label], n=n) for label in KEYPOINT_LABELS},
        landmarks68=[grid_vertex(u, v, n=n) for u, v in landmark_uvs()],
    )


def write_demo_assets(
    template_path: PathLike = DEMO_TEMPLATE,
    skeleton_path: PathLike = DEMO_SKELETON,
    annotations_path: PathLike = DEMO_ANNOTATIONS,
    n: int = DEFAULT_GRID,
) -> Mesh:
    mesh = build_demo_head(n)
    save_obj(template_path, mesh.vertices, mesh)
    write_json(skeleton_path, build_default_skeleton(mesh, n).model_dump(mode="json"))
    write_json(annotations_path, build_annotations(n).model_dump(mode="json"))
    logger.info(f"Demo assets written: {template_path}, {skeleton_path}, {annotations_path}")
    return mesh


def ensure_demo_assets() -> None:
    if not all(p.exists() for p in (DEMO_TEMPLATE, DEMO_SKELETON, DEMO_ANNOTATIONS)):
        write_demo_assets()

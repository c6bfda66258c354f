"""
Bone hierarchy, bind poses, transform composition and dynamic bone binding.

Matrix math runs on float64 torch tensors so that every quantity derived from
the bone UV positions (zeta) and transformation parameters (tau) is
differentiable. tau is stored as [rotation(3), translation(3), log-scale(3)];
`compose_trs` takes the realized (rotation, translation, scale) triple.
"""

import hashlib
from dataclasses import dataclass
from functools import cached_property
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
import torch
from loguru import logger

from errors import SkeletonError, UvOutOfChartError
from file_utils import PathLike, read_json
from mesh_core import Mesh, as_tensor, barycentric_weights, clamp_to_chart, nearest_vertex_front, to_numpy
from models import SkeletonFile

# (name, parent) in index order
ASM_HIERARCHY: Tuple[Tuple[str, Optional[str]], ...] = (
    ("root", None), ("head", "root"), ("nose", "head"), ("nose_bridge", "nose"),
    ("nose_tip", "nose"), ("nose_mid", "nose"), ("nose_wing.L", "nose"), ("nose_wing.R", "nose"),
    ("nose_bottom.L", "nose"), ("nose_bottom.R", "nose"), ("nose_hole.L", "nose"), ("nose_hole.R", "nose"),
    ("nose_bridge_upper", "nose"), ("mouth", "head"), ("lip_corner.L", "mouth"),
    ("lip_upper_side.L", "mouth"), ("lip_upper_mid", "mouth"), ("lip_lower_mid", "mouth"),
    ("lip_lower_side.L", "mouth"), ("lip_corner.R", "mouth"), ("lip_upper_side.R", "mouth"),
    ("lip_lower_side.R", "mouth"), ("ear.L", "head"), ("eye.L", "head"),
    ("eye_inner_upper.L", "eye.L"), ("eye_outer_upper.L", "eye.L"), ("eye_outer_corner.L", "eye.L"),
    ("eye_inner_lower.L", "eye.L"), ("eye_outer_lower.L", "eye.L"), ("eye_inner_corner.L", "eye.L"),
    ("eye_hole.L", "eye.L"), ("eyelid_outer.L", "eye.L"), ("eyelid_middle.L", "eye.L"),
    ("eyelid_inner.L", "eye.L"), ("eyebrow.L", "head"), ("eyebrow_inner.L", "eyebrow.L"),
    ("eyebrow_outer.L", "eyebrow.L"), ("eyebrow_mid.L", "eyebrow.L"), ("forehead", "head"),
    ("apple_outer.L", "head"), ("apple_lower.L", "head"), ("apple_inner.L", "head"),
    ("apple_center.L", "head"), ("eyebrow_center", "head"), ("chin", "head"), ("chin_side.L", "head"),
    ("jaw.L", "head"), ("jaw_corner.L", "head"), ("temple.L", "head"), ("ear.R", "head"),
    ("eye.R", "head"), ("eye_inner_upper.R", "eye.R"), ("eye_outer_upper.R", "eye.R"),
    ("eye_outer_corner.R", "eye.R"), ("eye_inner_lower.R", "eye.R"), ("eye_outer_lower.R", "eye.R"),
    ("eye_inner_corner.R", "eye.R"), ("eye_hole.R", "eye.R"), ("eyelid_outer.R", "eye.R"),
    ("eyelid_middle.R", "eye.R"), ("eyelid_inner.R", "eye.R"), ("eyebrow.R", "head"),
    ("eyebrow_inner.R", "eyebrow.R"), ("eyebrow_outer.R", "eyebrow.R"), ("eyebrow_mid.R", "eyebrow.R"),
    ("apple_outer.R", "head"), ("apple_lower.R", "head"), ("apple_inner.R", "head"),
    ("apple_center.R", "head"), ("chin_side.R", "head"), ("jaw.R", "head"), ("jaw_corner.R", "head"),
    ("temple.R", "head"), ("cheek.L", "head"), ("cheek.R", "head"), ("chin_low", "head"),
    ("chin_side_low.L", "head"), ("chin_side_low.R", "head"), ("eyebrow_center_up", "head"),
    ("forehead.L", "head"), ("forehead.R", "head"), ("neck_front", "root"), ("neck_side.L", "root"),
    ("neck_side.R", "root"),
)


@dataclass(frozen=True)
class Bone:
    name: str
    parent: Optional[int]
    psi0: np.ndarray
    proxy_vertex: int
    bind_rot_scale: np.ndarray


@dataclass(frozen=True, eq=False)
class Skeleton:
    bones: Tuple[Bone, ...]

    def __post_init__(self):
        roots = [j for j, bone in enumerate(self.bones) if bone.parent is None]
        if len(roots) != 1:
            raise SkeletonError(f"skeleton needs exactly one root bone, found {len(roots)}")
        for j, bone in enumerate(self.bones):
            if bone.parent is not None and not 0 <= bone.parent < j:
                raise SkeletonError(
                    f"bone {j} '{bone.name}' has parent {bone.parent}; parents must precede children"
                )

    @property
    def bone_count(self) -> int:
        return len(self.bones)

    @cached_property
    def names(self) -> List[str]:
        return [bone.name for bone in self.bones]

    @cached_property
    def parents(self) -> np.ndarray:
        return np.array([-1 if b.parent is None else b.parent for b in self.bones], dtype=np.int64)

    @cached_property
    def psi0(self) -> np.ndarray:
        return np.stack([bone.psi0 for bone in self.bones])

    @cached_property
    def proxy_vertices(self) -> np.ndarray:
        return np.array([bone.proxy_vertex for bone in self.bones], dtype=np.int64)

    @cached_property
    def rot_scale(self) -> torch.Tensor:
        return torch.as_tensor(np.stack([bone.bind_rot_scale for bone in self.bones]))

    @cached_property
    def rot_scale_inv(self) -> torch.Tensor:
        blocks = np.stack([bone.bind_rot_scale for bone in self.bones])
        identity = np.all(blocks == np.eye(3), axis=(1, 2))
        inverse = np.where(identity[:, None, None], np.eye(3), np.linalg.inv(blocks))
        return torch.as_tensor(inverse)

    def index(self, name: str) -> int:
        if name not in self.names:
            raise SkeletonError(f"unknown bone '{name}'")
        return self.names.index(name)

    def chain(self, j: int) -> List[int]:
        """Bone indices from the root down to j."""
        path = []
        while j >= 0:
            path.append(j)
            j = int(self.parents[j])
        return path[::-1]

    @cached_property
    def content_hash(self) -> str:
        digest = hashlib.sha256()
        for bone in self.bones:
            digest.update(bone.name.encode("utf-8"))
            digest.update(np.int64(-1 if bone.parent is None else bone.parent).tobytes())
            digest.update(np.ascontiguousarray(bone.psi0, dtype=np.float64).tobytes())
            digest.update(np.int64(bone.proxy_vertex).tobytes())
            digest.update(np.ascontiguousarray(bone.bind_rot_scale, dtype=np.float64).tobytes())
        return digest.hexdigest()


def _find_cycle(parents: List[Optional[int]]) -> Optional[List[int]]:
    for start in range(len(parents)):
        seen = []
        node = start
        while node is not None and node not in seen:
            seen.append(node)
            node = parents[node]
        if node is not None:
            return seen[seen.index(node) :]
    return None


def skeleton_from_file(spec: SkeletonFile, mesh: Mesh) -> Skeleton:
    """
    Resolves parents given by name or index, rejects cycles and out-of-order
    parents, and picks each bone's proxy vertex by front projection when the
    file does not name one.
    """
    names = [entry.name for entry in spec.bones]
    if len(set(names)) != len(names):
        duplicates = sorted({n for n in names if names.count(n) > 1})
        raise SkeletonError(f"duplicate bone names: {duplicates}")

    parents: List[Optional[int]] = []
    for entry in spec.bones:
        if entry.parent is None:
            parents.append(None)
        elif isinstance(entry.parent, int):
            if not 0 <= entry.parent < len(names):
                raise SkeletonError(f"bone '{entry.name}' has parent index {entry.parent} out of range")
            parents.append(entry.parent)
        elif entry.parent in names:
            parents.append(names.index(entry.parent))
        else:
            raise SkeletonError(f"bone '{entry.name}' names unknown parent '{entry.parent}'")

    cycle = _find_cycle(parents)
    if cycle:
        raise SkeletonError("parent cycle: " + " -> ".join(names[j] for j in cycle + cycle[:1]))

    bones = []
    for entry, parent in zip(spec.bones, parents):
        psi0 = np.asarray(entry.psi0, dtype=np.float64)
        proxy = entry.proxy_vertex if entry.proxy_vertex is not None else nearest_vertex_front(mesh, psi0)
        if not 0 <= proxy < mesh.vertex_count:
            raise SkeletonError(f"bone '{entry.name}' proxy vertex {proxy} out of range")
        rot_scale = np.eye(3) if entry.bind_rot_scale is None else np.asarray(entry.bind_rot_scale, np.float64)
        bones.append(Bone(entry.name, parent, psi0, int(proxy), rot_scale))
    skeleton = Skeleton(tuple(bones))
    logger.info(f"Skeleton ready: {skeleton.bone_count} bones")
    return skeleton


def load_skeleton(path: PathLike, mesh: Mesh) -> Skeleton:
    logger.info(f"Loading skeleton from {path}.")
    return skeleton_from_file(SkeletonFile.model_validate(read_json(path)), mesh)


def skeleton_to_file(skeleton: Skeleton) -> SkeletonFile:
    return SkeletonFile.model_validate(
        {
            "bones": [
                {
                    "name": bone.name,
                    "parent": None if bone.parent is None else skeleton.names[bone.parent],
                    "psi0": bone.psi0.tolist(),
                    "proxy_vertex": bone.proxy_vertex,
                    "bind_rot_scale": bone.bind_rot_scale.tolist(),
                }
                for bone in skeleton.bones
            ]
        }
    )


class BindPose(NamedTuple):
    matrices: torch.Tensor
    positions: torch.Tensor
    inverse: torch.Tensor
    parents: np.ndarray


class BoneTransforms(NamedTuple):
    matrices: torch.Tensor


class Binding(NamedTuple):
    bind: BindPose
    local_to_parent: torch.Tensor
    psi: torch.Tensor


def _homogeneous(block: torch.Tensor, column: torch.Tensor) -> torch.Tensor:
    top = torch.cat([block, column[..., None]], dim=-1)
    bottom = torch.zeros(block.shape[:-2] + (1, 4), dtype=block.dtype)
    bottom[..., 0, 3] = 1.0
    return torch.cat([top, bottom], dim=-2)


def compute_bind_pose(skeleton: Skeleton, psi) -> BindPose:
    """B_j = [[R0_j S0_j, psi_j], [0, 1]]; only the translation column follows psi."""
    psi = as_tensor(psi)
    rot_scale = skeleton.rot_scale.to(psi.dtype)
    inv_block = skeleton.rot_scale_inv.to(psi.dtype)
    matrices = _homogeneous(rot_scale, psi)
    inverse = _homogeneous(inv_block, -(inv_block @ psi[..., None])[..., 0])
    return BindPose(matrices, psi, inverse, skeleton.parents)


def local_to_parent(bind: BindPose, j: int) -> torch.Tensor:
    parent = int(bind.parents[j])
    if parent < 0:
        return bind.matrices[j]
    return bind.inverse[parent] @ bind.matrices[j]


def local_to_parent_all(bind: BindPose) -> torch.Tensor:
    parents = torch.as_tensor(np.where(bind.parents < 0, 0, bind.parents))
    relative = bind.inverse[parents] @ bind.matrices
    is_root = torch.as_tensor(bind.parents < 0)[:, None, None]
    return torch.where(is_root, bind.matrices, relative)


def euler_to_matrix(r) -> torch.Tensor:
    """Rotation for Euler angles applied about X, then Y, then Z: R = Rz Ry Rx."""
    r = as_tensor(r)
    cx, cy, cz = torch.cos(r[..., 0]), torch.cos(r[..., 1]), torch.cos(r[..., 2])
    sx, sy, sz = torch.sin(r[..., 0]), torch.sin(r[..., 1]), torch.sin(r[..., 2])
    rows = [
        torch.stack([cz * cy, cz * sy * sx - sz * cx, sz * sx + cz * sy * cx], dim=-1),
        torch.stack([sz * cy, cz * cx + sz * sy * sx, sz * sy * cx - cz * sx], dim=-1),
        torch.stack([-sy, cy * sx, cy * cx], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def compose_trs(tau) -> torch.Tensor:
    """M(tau) = Translate(t) Rotate(r) Scale(s) for tau = (r, t, s), batched over leading axes."""
    tau = as_tensor(tau)
    rotation = euler_to_matrix(tau[..., 0:3])
    block = rotation * tau[..., None, 6:9]
    return _homogeneous(block, tau[..., 3:6])


def realize_tau(tau_raw) -> torch.Tensor:
    """Stored [r, t, log s] -> [r, t, s]."""
    tau_raw = as_tensor(tau_raw)
    return torch.cat([tau_raw[..., 0:6], torch.exp(tau_raw[..., 6:9])], dim=-1)


def bone_transforms(skeleton: Skeleton, bind: BindPose, tau_raw, l2p: Optional[torch.Tensor] = None) -> BoneTransforms:
    """
    T_j = M_trs(tau_root) ... M_trs(tau_parent) M_trs(tau_j) B_j^-1 with
    M_trs(tau_j) = M_l2p_j M(tau_j); the chain product is taken root first.
    """
    if l2p is None:
        l2p = local_to_parent_all(bind)
    local = l2p @ compose_trs(realize_tau(tau_raw))
    world: List[torch.Tensor] = []
    for j, parent in enumerate(skeleton.parents):
        world.append(local[j] if parent < 0 else world[parent] @ local[j])
    return BoneTransforms(torch.stack(world) @ bind.inverse)


def bone_uv_projection(mesh: Mesh, skeleton: Skeleton) -> np.ndarray:
    """zeta_j = F(v_t) with v_t the proxy vertex of bone j."""
    return mesh.uv[skeleton.proxy_vertices].copy()


def locate_bones(mesh: Mesh, zeta) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Frozen face assignment for each bone UV position. Positions outside the chart
    are clamped to the nearest covered point and reported.

    Returns:
        faces (J,), clamped UV points (J, 2), clamped mask (J,)
    """
    zeta_np = to_numpy(zeta)
    faces, _ = mesh.uv_grid.locate(zeta_np)
    clamped = faces < 0
    points = zeta_np.copy()
    for j in np.flatnonzero(clamped):
        faces[j], points[j] = clamp_to_chart(mesh, zeta_np[j])
        logger.warning(
            f"{UvOutOfChartError.code}: bone {j} uv {zeta_np[j].tolist()} clamped to {points[j].tolist()}"
        )
    return faces, points, clamped


def dynamic_bind(mesh: Mesh, skeleton: Skeleton, zeta) -> torch.Tensor:
    """
    psi_j = alpha v_A + beta v_B + gamma v_C - v_t + psi0_j, with (alpha, beta, gamma)
    the barycentric weights of zeta_j in its (frozen) UV face. Clamped bones
    carry no gradient.
    """
    if mesh.face_count == 0:
        raise UvOutOfChartError("uv-out-of-chart: the UV chart is empty")
    zeta = as_tensor(zeta)
    faces, points, clamped = locate_bones(mesh, zeta)
    if clamped.any():
        mask = torch.as_tensor(clamped)[:, None]
        zeta = torch.where(mask, torch.as_tensor(points), zeta)
    corners = torch.as_tensor(mesh.faces[faces])
    uv = torch.as_tensor(mesh.uv)[corners]
    xyz = mesh.vertices_tensor[corners]
    alpha, beta, gamma = barycentric_weights(zeta, uv[:, 0], uv[:, 1], uv[:, 2])
    surface = alpha[:, None] * xyz[:, 0] + beta[:, None] * xyz[:, 1] + gamma[:, None] * xyz[:, 2]
    anchor = mesh.vertices_tensor[torch.as_tensor(skeleton.proxy_vertices)]
    return surface - anchor + torch.as_tensor(skeleton.psi0)


def rebind(mesh: Mesh, skeleton: Skeleton, zeta) -> Binding:
    """Barycentric interpolation phase followed by the binding update phase."""
    psi = dynamic_bind(mesh, skeleton, zeta)
    bind = compute_bind_pose(skeleton, psi)
    return Binding(bind, local_to_parent_all(bind), psi)

"""
The adaptive skinning model forward map and its parameter container.

    params --dynamic_bind--> bind poses --+
           --GMM fields----> weights -----+--> lbs_blend --> deformed vertices
           --tau-----------> transforms --+
"""

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Tuple

import numpy as np
import torch
from loguru import logger

from consts import PARAMS_MAGIC, PARAMS_VERSION, TAU_DIM
from errors import AsmError, AssetMismatchError, ParamsFormatError
from file_utils import PathLike, atomic_write_bytes, atomic_write_text
from gmm_skinning import GmmParams, init_isotropic, normalized_weights
from mesh_core import Mesh, as_tensor, to_numpy
from skeleton_rig import Skeleton, bone_transforms, rebind

# magic, version, J, K, skeleton sha256, template sha256, value count
_HEADER = struct.Struct("<4sIII32s32sQ")


def param_count(J: int, K: int) -> int:
    """Tunable values per face: J bones of zeta(2) + pi(K) + mu(2K) + Sigma(3K) + tau(9)."""
    if J < 1 or K < 1:
        raise AsmError(f"param_count needs J, K >= 1 (got J={J}, K={K})")
    return J * (11 + 6 * K)


def group_sizes(K: int) -> Tuple[int, int, int, int, int]:
    return 2, K, 2 * K, 3 * K, TAU_DIM


@dataclass
class AsmParams:
    gmm: GmmParams
    tau: torch.Tensor

    @property
    def bone_count(self) -> int:
        return self.tau.shape[0]

    @property
    def K(self) -> int:
        return self.gmm.K

    @classmethod
    def neutral(cls, mesh: Mesh, skeleton: Skeleton, K: int) -> "AsmParams":
        gmm = init_isotropic(mesh, skeleton, K)
        return cls(gmm, torch.zeros(skeleton.bone_count, TAU_DIM, dtype=torch.float64))

    def to_vector(self) -> torch.Tensor:
        """Bone-major flat vector, each bone laid out as zeta, pi logits, mu, Sigma factor, tau."""
        J = self.bone_count
        g = self.gmm
        return torch.cat([g.zeta, g.log_pi, g.mu.reshape(J, -1), g.chol.reshape(J, -1), self.tau], dim=1).reshape(-1)

    @classmethod
    def from_vector(cls, vector, J: int, K: int) -> "AsmParams":
        vector = as_tensor(vector)
        if vector.numel() != param_count(J, K):
            raise AsmError(f"parameter vector has {vector.numel()} values, expected {param_count(J, K)}")
        zeta, log_pi, mu, chol, tau = torch.split(vector.reshape(J, -1), group_sizes(K), dim=1)
        return cls(GmmParams(zeta, log_pi, mu.reshape(J, K, 2), chol.reshape(J, K, 3)), tau)

    def detach(self) -> "AsmParams":
        return AsmParams.from_vector(self.to_vector().detach().clone(), self.bone_count, self.K)


class DeformedMesh(NamedTuple):
    vertices: torch.Tensor
    faces: np.ndarray
    uv: np.ndarray

    def to_mesh(self) -> Mesh:
        return Mesh(to_numpy(self.vertices), self.faces, self.uv)


def lbs_blend(weights, transforms, mesh) -> DeformedMesh:
    """
    v' = sum_j w_j T_j v in homogeneous coordinates.

    Args:
        weights: (V, J) skinning weights.
        transforms: (J, 4, 4) bone transforms (or a BoneTransforms).
        mesh: template Mesh supplying rest positions, faces and UVs.
    """
    weights = as_tensor(getattr(weights, "weights", weights))
    matrices = as_tensor(getattr(transforms, "matrices", transforms))
    rest = mesh.vertices_tensor
    homogeneous = torch.cat([rest, torch.ones(len(rest), 1, dtype=rest.dtype)], dim=1)
    per_bone = torch.einsum("jab,vb->jva", matrices[:, :3, :], homogeneous)
    vertices = torch.einsum("vj,jva->va", weights, per_bone)
    return DeformedMesh(vertices, mesh.faces, mesh.uv)


def asm_forward(mesh: Mesh, skeleton: Skeleton, params: AsmParams, weights: Optional[torch.Tensor] = None) -> DeformedMesh:
    """
    Deforms the template. `weights` freezes the skinning field (static-weight
    variants); otherwise it is evaluated from the GMM parameters.
    """
    if params.bone_count != skeleton.bone_count:
        raise AsmError(f"parameters cover {params.bone_count} bones, skeleton has {skeleton.bone_count}")
    binding = rebind(mesh, skeleton, params.gmm.zeta)
    if weights is None:
        weights = normalized_weights(mesh, params.gmm).weights
    transforms = bone_transforms(skeleton, binding.bind, params.tau, binding.local_to_parent)
    return lbs_blend(weights, transforms, mesh)


def random_params(
    mesh: Mesh, skeleton: Skeleton, K: int, rng: np.random.Generator, magnitude: float = 1.0
) -> AsmParams:
    """
    Neutral parameters plus bounded uniform noise: translations up to 5% of the
    template bounding-box diagonal and rotations up to 0.2 rad at magnitude 1.
    """
    base = AsmParams.neutral(mesh, skeleton, K)
    J = skeleton.bone_count
    m = float(magnitude)

    def noise(bound, shape):
        return torch.as_tensor(rng.uniform(-bound, bound, size=shape))

    tau = torch.cat(
        [noise(0.2 * m, (J, 3)), noise(0.05 * m * mesh.bbox_diagonal, (J, 3)), noise(0.05 * m, (J, 3))], dim=1
    )
    sigma = torch.exp(base.gmm.chol[0, 0, 0]).item()
    gmm = GmmParams(
        base.gmm.zeta + noise(0.1 * m * sigma, (J, 2)),
        base.gmm.log_pi + noise(0.3 * m, (J, K)),
        base.gmm.mu + noise(0.2 * m * sigma, (J, K, 2)),
        base.gmm.chol + noise(0.1 * m, (J, K, 3)) * torch.tensor([1.0, sigma, 1.0], dtype=torch.float64),
    )
    return AsmParams(gmm, tau)


def save_params(path: PathLike, params: AsmParams, skeleton: Skeleton, mesh: Mesh) -> Path:
    """Binary container: fixed header with asset hashes, then little-endian float64 values."""
    values = to_numpy(params.to_vector()).astype("<f8")
    header = _HEADER.pack(
        PARAMS_MAGIC,
        PARAMS_VERSION,
        params.bone_count,
        params.K,
        bytes.fromhex(skeleton.content_hash),
        bytes.fromhex(mesh.content_hash),
        values.size,
    )
    path = atomic_write_bytes(path, header + values.tobytes())
    logger.info(f"Saved {values.size} parameters (J={params.bone_count}, K={params.K}) to {path}")
    return path


class ParamsHeader(NamedTuple):
    version: int
    J: int
    K: int
    skeleton_hash: str
    template_hash: str


def parse_params(data: bytes, source: str = "<bytes>") -> Tuple[AsmParams, ParamsHeader]:
    if len(data) < _HEADER.size:
        raise ParamsFormatError(f"{source}: truncated header ({len(data)} of {_HEADER.size} bytes)", len(data))
    magic, version, J, K, skeleton_hash, template_hash, count = _HEADER.unpack_from(data)
    if magic != PARAMS_MAGIC:
        raise ParamsFormatError(f"{source}: bad magic {magic!r}", 0)
    if version != PARAMS_VERSION:
        raise ParamsFormatError(f"{source}: unsupported version {version}", 4)
    if count != param_count(J, K):
        raise ParamsFormatError(f"{source}: {count} values do not match J={J}, K={K}", _HEADER.size - 8)
    expected = _HEADER.size + 8 * count
    if len(data) < expected:
        raise ParamsFormatError(f"{source}: truncated payload, file ends before value {(len(data) - _HEADER.size) // 8}", len(data))
    if len(data) > expected:
        raise ParamsFormatError(f"{source}: {len(data) - expected} trailing bytes", expected)
    values = np.frombuffer(data, dtype="<f8", count=count, offset=_HEADER.size).astype(np.float64)
    header = ParamsHeader(version, J, K, skeleton_hash.hex(), template_hash.hex())
    return AsmParams.from_vector(torch.as_tensor(values.copy()), J, K), header


def load_params(
    path: PathLike, skeleton: Optional[Skeleton] = None, mesh: Optional[Mesh] = None
) -> AsmParams:
    """Reads a parameter file and, when given the assets, checks it was made for them."""
    params, header = parse_params(Path(path).read_bytes(), str(path))
    if skeleton is not None and header.skeleton_hash != skeleton.content_hash:
        raise AssetMismatchError(f"{path}: parameters were made for a different skeleton")
    if mesh is not None and header.template_hash != mesh.content_hash:
        raise AssetMismatchError(f"{path}: parameters were made for a different template mesh")
    logger.info(f"Loaded parameters from {path}: J={header.J}, K={header.K}")
    return params


def params_to_text(params: AsmParams, skeleton: Skeleton) -> str:
    """Per-bone JSON dump of the stored values, for diffing."""
    g = params.gmm
    bones = []
    for j, name in enumerate(skeleton.names):
        bones.append(
            {
                "name": name,
                "zeta": to_numpy(g.zeta[j]).tolist(),
                "log_pi": to_numpy(g.log_pi[j]).tolist(),
                "mu": to_numpy(g.mu[j]).tolist(),
                "chol": to_numpy(g.chol[j]).tolist(),
                "tau": to_numpy(params.tau[j]).tolist(),
            }
        )
    payload = {"J": params.bone_count, "K": params.K, "skeleton": skeleton.content_hash, "bones": bones}
    return json.dumps(payload, indent=2) + "\n"


def export_params_text(path: PathLike, params: AsmParams, skeleton: Skeleton) -> Path:
    return atomic_write_text(path, params_to_text(params, skeleton))


def params_digest(params: AsmParams) -> str:
    return hashlib.sha256(to_numpy(params.to_vector()).astype("<f8").tobytes()).hexdigest()

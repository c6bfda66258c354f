import math

import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose
from scipy.spatial.transform import Rotation

from conftest import plane_mesh
from errors import SkeletonError
from models import SkeletonFile
from skeleton_rig import (
    ASM_HIERARCHY,
    bone_transforms,
    bone_uv_projection,
    compose_trs,
    compute_bind_pose,
    dynamic_bind,
    euler_to_matrix,
    local_to_parent,
    local_to_parent_all,
    realize_tau,
    rebind,
    skeleton_from_file,
    skeleton_to_file,
)


def chain_skeleton(mesh, rot_scales=None):
    """root -> a -> b with psi0 above three plane vertices."""
    bones = []
    for k, (name, parent, vertex) in enumerate((("root", None, 6), ("a", "root", 12), ("b", "a", 18))):
        entry = {"name": name, "parent": parent, "psi0": (mesh.vertices[vertex] + [0, 0, -0.1]).tolist(), "proxy_vertex": vertex}
        if rot_scales is not None:
            entry["bind_rot_scale"] = rot_scales[k].tolist()
        bones.append(entry)
    return skeleton_from_file(SkeletonFile.model_validate({"bones": bones}), mesh)


def random_rot_scale(rng):
    rotation = Rotation.from_rotvec(rng.normal(0.0, 0.5, 3)).as_matrix()
    return rotation @ np.diag(rng.uniform(0.5, 1.5, 3))


def test_default_hierarchy(skeleton):
    assert skeleton.bone_count == len(ASM_HIERARCHY) == 84
    assert skeleton.names[0] == "root"
    assert (skeleton.parents[1:] < np.arange(1, 84)).all()
    assert skeleton.chain(skeleton.index("eye_inner_upper.L")) == [0, 1, 23, 24]


def test_parent_cycle_is_named():
    spec = SkeletonFile.model_validate(
        {"bones": [{"name": "a", "parent": "b", "psi0": (0, 0, 0)}, {"name": "b", "parent": "a", "psi0": (0, 0, 0)}]}
    )
    with pytest.raises(SkeletonError, match="parent cycle: a -> b -> a"):
        skeleton_from_file(spec, plane_mesh(3))


def test_duplicate_and_unknown_names_rejected():
    mesh = plane_mesh(3)
    duplicate = {"bones": [{"name": "a", "psi0": (0, 0, 0)}, {"name": "a", "parent": "a", "psi0": (0, 0, 0)}]}
    with pytest.raises(SkeletonError, match="duplicate"):
        skeleton_from_file(SkeletonFile.model_validate(duplicate), mesh)
    unknown = {"bones": [{"name": "a", "psi0": (0, 0, 0)}, {"name": "b", "parent": "zz", "psi0": (0, 0, 0)}]}
    with pytest.raises(SkeletonError, match="unknown parent"):
        skeleton_from_file(SkeletonFile.model_validate(unknown), mesh)


def test_proxy_vertex_defaults_to_front_projection():
    mesh = plane_mesh(3)
    spec = SkeletonFile.model_validate({"bones": [{"name": "root", "psi0": (0.5, 0.5, -0.2)}]})
    assert skeleton_from_file(spec, mesh).bones[0].proxy_vertex == 4


def test_skeleton_file_round_trip_keeps_hash(skeleton, demo_mesh):
    again = skeleton_from_file(skeleton_to_file(skeleton), demo_mesh)
    assert again.content_hash == skeleton.content_hash


def test_bind_pose_translation_follows_psi(skeleton):
    psi = np.zeros((84, 3))
    psi[5] = (1.0, 2.0, 3.0)
    bind = compute_bind_pose(skeleton, psi)
    expected = np.eye(4)
    expected[:3, 3] = (1.0, 2.0, 3.0)
    assert_allclose(bind.matrices[5].numpy(), expected, atol=0)
    moved = compute_bind_pose(skeleton, psi + 0.37)
    assert torch.equal(moved.matrices[:, :3, :3], bind.matrices[:, :3, :3])


def test_bind_inverse(rng):
    mesh = plane_mesh(5)
    skeleton = chain_skeleton(mesh, [random_rot_scale(rng) for _ in range(3)])
    bind = compute_bind_pose(skeleton, skeleton.psi0)
    for j in range(3):
        assert_allclose((bind.matrices[j] @ bind.inverse[j]).numpy(), np.eye(4), atol=1e-12)


def test_local_to_parent_examples(rng):
    mesh = plane_mesh(5)
    plain = chain_skeleton(mesh)
    bind = compute_bind_pose(plain, plain.psi0)
    expected = np.eye(4)
    expected[:3, 3] = plain.psi0[1] - plain.psi0[0]
    assert_allclose(local_to_parent(bind, 1).numpy(), expected, atol=1e-15)
    assert torch.equal(local_to_parent(bind, 0), bind.matrices[0])

    same = compute_bind_pose(plain, np.tile(plain.psi0[:1], (3, 1)))
    assert_allclose(local_to_parent(same, 2).numpy(), np.eye(4), atol=1e-15)

    skewed = chain_skeleton(mesh, [random_rot_scale(rng) for _ in range(3)])
    bind = compute_bind_pose(skewed, skewed.psi0)
    l2p = local_to_parent_all(bind)
    for j in (1, 2):
        parent = skewed.parents[j]
        assert_allclose((bind.matrices[parent] @ l2p[j]).numpy(), bind.matrices[j].numpy(), atol=1e-12)


def test_compose_trs_examples():
    identity = compose_trs(torch.tensor([0.0, 0, 0, 0, 0, 0, 1, 1, 1], dtype=torch.float64))
    assert torch.equal(identity, torch.eye(4, dtype=torch.float64))
    translate = compose_trs(torch.tensor([0.0, 0, 0, 1, 2, 3, 1, 1, 1], dtype=torch.float64))
    expected = np.eye(4)
    expected[:3, 3] = (1, 2, 3)
    assert_allclose(translate.numpy(), expected, atol=0)
    rotate = compose_trs(torch.tensor([0.0, 0, math.pi / 2, 0, 0, 0, 1, 1, 1], dtype=torch.float64))
    assert_allclose((rotate @ torch.tensor([1.0, 0, 0, 1], dtype=torch.float64)).numpy(), [0, 1, 0, 1], atol=1e-12)


def test_euler_convention_matches_scipy(rng):
    for angles in rng.uniform(-math.pi, math.pi, size=(20, 3)):
        expected = Rotation.from_euler("xyz", angles).as_matrix()
        assert_allclose(euler_to_matrix(angles).numpy(), expected, atol=1e-12)


def test_realize_tau_exponentiates_scale():
    tau = torch.tensor([0.1, 0.2, 0.3, 1, 2, 3, 0.0, math.log(2.0), -math.log(2.0)], dtype=torch.float64)
    assert_allclose(realize_tau(tau).numpy(), [0.1, 0.2, 0.3, 1, 2, 3, 1, 2, 0.5], atol=1e-15)


def test_identity_tau_gives_identity_transforms(skeleton):
    bind = compute_bind_pose(skeleton, skeleton.psi0)
    transforms = bone_transforms(skeleton, bind, torch.zeros(84, 9, dtype=torch.float64))
    assert_allclose(transforms.matrices.numpy(), np.tile(np.eye(4), (84, 1, 1)), atol=1e-10)


def test_root_translation_moves_every_bone(skeleton):
    bind = compute_bind_pose(skeleton, skeleton.psi0)
    tau = torch.zeros(84, 9, dtype=torch.float64)
    tau[0, 3:6] = torch.tensor([0.1, -0.2, 0.3])
    expected = np.eye(4)
    expected[:3, 3] = (0.1, -0.2, 0.3)
    transforms = bone_transforms(skeleton, bind, tau)
    assert_allclose(transforms.matrices.numpy(), np.tile(expected, (84, 1, 1)), atol=1e-10)


def test_chain_transforms_match_naive_product(rng):
    mesh = plane_mesh(5)
    skeleton = chain_skeleton(mesh, [random_rot_scale(rng) for _ in range(3)])
    bind = compute_bind_pose(skeleton, skeleton.psi0)
    tau = torch.as_tensor(rng.normal(0.0, 0.2, size=(3, 9)))
    result = bone_transforms(skeleton, bind, tau).matrices.numpy()

    B = bind.matrices.numpy()
    M = compose_trs(realize_tau(tau)).numpy()
    local = [B[0] @ M[0], np.linalg.inv(B[0]) @ B[1] @ M[1], np.linalg.inv(B[1]) @ B[2] @ M[2]]
    expected = [
        local[0] @ np.linalg.inv(B[0]),
        local[0] @ local[1] @ np.linalg.inv(B[1]),
        local[0] @ local[1] @ local[2] @ np.linalg.inv(B[2]),
    ]
    assert_allclose(result, np.array(expected), atol=1e-10)


def test_dynamic_bind_is_exact_at_proxy_vertices(demo_mesh, skeleton):
    zeta = bone_uv_projection(demo_mesh, skeleton)
    psi = dynamic_bind(demo_mesh, skeleton, zeta)
    assert torch.equal(psi, torch.as_tensor(skeleton.psi0))


def test_dynamic_bind_follows_surface_between_vertices(demo_mesh, skeleton):
    zeta = bone_uv_projection(demo_mesh, skeleton)
    j, s = 5, 1300
    zeta[j] = demo_mesh.uv[s]
    psi = dynamic_bind(demo_mesh, skeleton, zeta).numpy()
    t = skeleton.proxy_vertices[j]
    assert_allclose(psi[j], demo_mesh.vertices[s] - demo_mesh.vertices[t] + skeleton.psi0[j], atol=1e-12)


def test_out_of_chart_bone_is_clamped_without_gradient(demo_mesh, skeleton):
    zeta = torch.as_tensor(bone_uv_projection(demo_mesh, skeleton))
    zeta[3] = torch.tensor([1.2, 0.5], dtype=torch.float64)
    zeta.requires_grad_(True)
    psi = dynamic_bind(demo_mesh, skeleton, zeta)
    psi.sum().backward()
    assert torch.isfinite(psi).all()
    assert torch.equal(zeta.grad[3], torch.zeros(2, dtype=torch.float64))
    assert zeta.grad[4].abs().sum() > 0


def test_rebind_at_initial_projection_reproduces_bind_pose(demo_mesh, skeleton):
    binding = rebind(demo_mesh, skeleton, bone_uv_projection(demo_mesh, skeleton))
    reference = compute_bind_pose(skeleton, skeleton.psi0)
    assert torch.equal(binding.bind.matrices, reference.matrices)


def test_rebind_common_shift_on_flat_template():
    mesh = plane_mesh(11)
    skeleton = chain_skeleton(mesh)
    zeta = bone_uv_projection(mesh, skeleton) + np.array([0.05, 0.1])
    binding = rebind(mesh, skeleton, zeta)
    shift = binding.bind.matrices[:, :3, 3].numpy() - skeleton.psi0
    assert_allclose(shift, np.tile([0.05, 0.1, 0.0], (3, 1)), atol=1e-12)

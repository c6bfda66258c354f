import math

import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose
from scipy.spatial.transform import Rotation

from asm_model import AsmParams, asm_forward
from conftest import plane_mesh
from consts import NOSE_TIP_INDEX
from errors import AsmError, DivergenceError
from main import keypoint_span
from mesh_core import sample_surface, to_numpy
from models import RegConfig
from registration import (
    AdamState,
    RigidPose,
    Scan,
    adam_step,
    apply_pose_vector,
    fit_mesh,
    fit_scan,
    nme,
    reg_energy,
    run_adam,
    similarity_transform,
)
from synth import make_case


def template_scan(mesh, annotations, rng, count=300):
    points, _ = sample_surface(mesh.vertices, mesh.faces, count, rng)
    return Scan(points, mesh.vertices[annotations.keypoint_vertices()])


def test_similarity_of_identical_sets_is_identity(rng):
    points = rng.normal(size=(7, 3))
    pose = similarity_transform(points, points)
    assert_allclose(pose.rotation, np.eye(3), atol=1e-12)
    assert_allclose(pose.translation, 0.0, atol=1e-12)
    assert pose.scale == pytest.approx(1.0, abs=1e-12)


def test_similarity_recovers_known_transform(rng):
    rotation = Rotation.from_rotvec([0.2, -0.4, 0.3]).as_matrix()
    source = rng.normal(size=(7, 3))
    target = 1.3 * source @ rotation.T + [0.5, -1.0, 2.0]
    pose = similarity_transform(source, target)
    assert_allclose(pose.rotation, rotation, atol=1e-10)
    assert_allclose(pose.translation, [0.5, -1.0, 2.0], atol=1e-10)
    assert pose.scale == pytest.approx(1.3, abs=1e-10)
    assert_allclose(pose.apply(source), target, atol=1e-10)


def test_similarity_rejects_collinear_keypoints():
    line = np.outer(np.arange(7.0), [1.0, 2.0, 3.0])
    with pytest.raises(AsmError, match="collinear"):
        similarity_transform(line, line + 1.0)


def test_rigid_pose_vector_round_trip():
    vector = np.array([0.1, -0.2, 0.3, 1.0, 2.0, 3.0, math.log(1.1)])
    assert_allclose(RigidPose.from_vector(vector).to_vector(), vector, atol=1e-12)


def test_rigid_pose_validation():
    with pytest.raises(AsmError, match="orthonormal"):
        RigidPose(np.diag([1.0, 1.0, 2.0]), np.zeros(3))
    with pytest.raises(AsmError, match="orthonormal"):
        RigidPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(AsmError, match="scale"):
        RigidPose(np.eye(3), np.zeros(3), 0.0)


def test_apply_pose_vector_matches_rigid_pose(rng):
    vector = np.array([0.3, 0.1, -0.2, 0.5, 0.0, -0.5, math.log(0.9)])
    points = rng.normal(size=(10, 3))
    moved = apply_pose_vector(torch.as_tensor(points), torch.as_tensor(vector)).numpy()
    assert_allclose(moved, RigidPose.from_vector(vector).apply(points), atol=1e-12)


def test_reg_energy(neutral):
    cfg = RegConfig()
    assert float(reg_energy(neutral, neutral, cfg)) == 0.0
    moved = AsmParams.from_vector(neutral.to_vector().clone(), 84, 2)
    moved.tau[0, 0] = 1.0
    assert float(reg_energy(moved, neutral, cfg)) == pytest.approx(1.0)
    origin = RegConfig(zeta_prior="origin", lambda2=1.0)
    expected = float((neutral.gmm.zeta**2).sum())
    assert float(reg_energy(neutral, neutral, origin)) == pytest.approx(expected)


def test_adam_step_examples():
    params, state = adam_step(AdamState.zeros(3), np.array([1.0, 2.0, 3.0]), np.zeros(3), 0.1)
    assert params.tolist() == [1.0, 2.0, 3.0]
    assert state.step == 1
    params, _ = adam_step(AdamState.zeros(2), np.zeros(2), np.array([4.0, -0.5]), 0.1)
    assert_allclose(params, [-0.1, 0.1], atol=1e-8)


def test_run_adam_minimizes_quadratic():
    result = run_adam(lambda x: ((x - 3.0) ** 2).sum(), np.zeros(1), 0.05, 500)
    assert abs(result.x[0] - 3.0) < 1e-2
    assert len(result.history) == 501
    assert result.best_loss == min(result.history)


def test_run_adam_respects_frozen_coordinates():
    result = run_adam(lambda x: ((x - 3.0) ** 2).sum(), np.zeros(2), 0.05, 50, free=np.array([True, False]))
    assert result.x[1] == 0.0
    assert result.x[0] > 1.0


def test_run_adam_reports_divergence():
    with pytest.raises(DivergenceError, match="divergence") as err:
        run_adam(lambda x: torch.sqrt(0.05 - x).sum(), np.zeros(1), 0.1, 5)
    assert err.value.iteration == 1


def test_divergence_carries_the_offending_loss():
    def objective(x):
        wall = torch.where(x > 0.05, torch.full_like(x, math.inf), torch.zeros_like(x))
        return {"slope": -x.sum(), "wall": wall.sum()}

    with pytest.raises(DivergenceError) as err:
        run_adam(objective, np.zeros(1), 0.1, 5)
    assert err.value.iteration == 1
    assert err.value.term == "wall"
    assert err.value.loss == math.inf


def test_template_samples_are_a_fixed_point(demo_mesh, skeleton, annotations, neutral, rng):
    scan = template_scan(demo_mesh, annotations, rng)
    result = fit_scan(demo_mesh, skeleton, scan, RegConfig(iterations=3), neutral, annotations.keypoint_vertices())
    assert result.history[0] < 1e-9
    assert result.final_loss == result.history[0]
    assert_allclose(result.pose.rotation, np.eye(3), atol=1e-9)
    assert result.pose.scale == pytest.approx(1.0, abs=1e-9)


def test_fit_scan_reduces_loss(demo_mesh, skeleton, annotations, neutral):
    case = make_case(demo_mesh, skeleton, annotations, 2, seed=9, magnitude=0.5, n_points=400)
    result = fit_scan(demo_mesh, skeleton, case.scan, RegConfig(iterations=20), neutral, annotations.keypoint_vertices())
    assert len(result.history) == 21
    assert result.final_loss < result.history[0]


@pytest.mark.parametrize("variant,frozen", [("ssm", ("zeta", "log_pi", "mu", "chol")), ("dbb", ("log_pi", "mu", "chol"))])
def test_variants_keep_frozen_groups(demo_mesh, skeleton, annotations, neutral, variant, frozen):
    case = make_case(demo_mesh, skeleton, annotations, 2, seed=9, magnitude=0.5, n_points=300)
    cfg = RegConfig(iterations=3, variant=variant)
    result = fit_scan(demo_mesh, skeleton, case.scan, cfg, neutral, annotations.keypoint_vertices())
    for group in frozen:
        assert torch.equal(getattr(result.params.gmm, group), getattr(neutral.gmm, group)), group
    assert not torch.equal(result.params.tau, neutral.tau)


def test_fit_mesh_recovers_translation(demo_mesh, skeleton, neutral):
    target = demo_mesh.vertices + [0.1, -0.2, 0.05]
    result = fit_mesh(demo_mesh, skeleton, target, RegConfig(iterations=2), neutral)
    assert_allclose(result.pose.translation, [0.1, -0.2, 0.05], atol=1e-9)
    assert result.history[0] < 1e-15
    with pytest.raises(AsmError, match="target mesh"):
        fit_mesh(demo_mesh, skeleton, target[:10], RegConfig(iterations=2), neutral)


def test_nme_examples(rng):
    mesh = plane_mesh(5)
    points = np.column_stack([rng.uniform(0.1, 0.9, size=(50, 2)), np.full(50, 0.1)])
    scan = Scan(points, points[:7])
    assert nme(mesh, scan, RigidPose.identity(), 10.0, 12) == pytest.approx(0.1, abs=1e-12)
    on_plane = Scan(points * [1.0, 1.0, 0.0], points[:7])
    assert nme(mesh, on_plane, RigidPose.identity(), 10.0, 12) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(AsmError, match="no scan points"):
        nme(mesh, Scan(points + 5.0, points[:7]), RigidPose.identity(), 1.0, 12)


def test_nme_of_template_against_its_samples(demo_mesh, annotations, rng):
    scan = template_scan(demo_mesh, annotations, rng)
    nose = annotations.keypoint_vertices()[NOSE_TIP_INDEX]
    assert nme(demo_mesh, scan, RigidPose.identity(), 95.0, nose) < 1e-9


def test_scan_validation():
    with pytest.raises(AsmError, match="at least 7"):
        Scan(np.zeros((3, 3)), np.zeros((7, 3)))
    with pytest.raises(AsmError, match="7 finite"):
        Scan(np.zeros((10, 3)), np.zeros((6, 3)))
    with pytest.raises(AsmError, match="7 finite"):
        Scan(np.zeros((10, 3)), np.full((7, 3), np.nan))


@pytest.mark.slow
def test_fit_scan_acceptance(demo_mesh, skeleton, annotations, neutral):
    case = make_case(demo_mesh, skeleton, annotations, 2, seed=21, magnitude=1.0, n_points=2000)
    keypoints = annotations.keypoint_vertices()
    with torch.no_grad():
        start = asm_forward(demo_mesh, skeleton, neutral)
    start_pose = similarity_transform(to_numpy(start.vertices)[keypoints], case.scan.keypoints7)
    before = nme(start, case.scan, start_pose, 95.0, keypoints[NOSE_TIP_INDEX])
    result = fit_scan(demo_mesh, skeleton, case.scan, RegConfig(), neutral, keypoints)
    with torch.no_grad():
        fitted = asm_forward(demo_mesh, skeleton, result.params)
    after = nme(fitted, case.scan, result.pose, 95.0, keypoints[NOSE_TIP_INDEX])
    assert after < before


SUITE_SEEDS = range(20)


@pytest.fixture(scope="module")
def registration_suite(demo_mesh, skeleton, annotations):
    """Whole-scan error over keypoint span, per variant, for 20 bounded synthetic scans."""
    keypoints = annotations.keypoint_vertices()
    init = AsmParams.neutral(demo_mesh, skeleton, 2)
    errors = {"asm": [], "dbb": [], "ssm": []}
    for seed in SUITE_SEEDS:
        case = make_case(demo_mesh, skeleton, annotations, 2, seed=seed, magnitude=1.0, n_points=2000)
        span = keypoint_span(case.scan.keypoints7)
        for variant in errors:
            result = fit_scan(demo_mesh, skeleton, case.scan, RegConfig(variant=variant), init, keypoints)
            with torch.no_grad():
                fitted = asm_forward(demo_mesh, skeleton, result.params)
            errors[variant].append(nme(fitted, case.scan, result.pose, math.inf, keypoints[NOSE_TIP_INDEX]) / span)
    return {variant: np.array(values) for variant, values in errors.items()}


@pytest.mark.slow
def test_registration_round_trip_suite(registration_suite):
    assert (registration_suite["asm"] < 0.02).sum() >= 18


@pytest.mark.slow
def test_ablation_ordering(registration_suite):
    asm, dbb, ssm = registration_suite["asm"], registration_suite["dbb"], registration_suite["ssm"]
    assert ssm.mean() >= dbb.mean() >= asm.mean()
    assert (ssm >= dbb).mean() >= 0.8
    assert (dbb >= asm).mean() >= 0.8

import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose

import synth
from errors import AsmError, UncoveredVertexError
from file_utils import read_json
from mesh_core import Mesh, point_mesh_distance
from mesh_io import load_obj, load_points
from models import KeypointsFile
from synth import make_case, procedural_texture, synth_params, write_case


def test_cases_are_deterministic(demo_mesh, skeleton, annotations):
    a = make_case(demo_mesh, skeleton, annotations, 2, seed=11, n_points=300)
    b = make_case(demo_mesh, skeleton, annotations, 2, seed=11, n_points=300)
    assert np.array_equal(a.vertices, b.vertices)
    assert np.array_equal(a.scan.points, b.scan.points)
    assert torch.equal(a.params.to_vector(), b.params.to_vector())


def test_zero_magnitude_reproduces_template(demo_mesh, skeleton, annotations):
    case = make_case(demo_mesh, skeleton, annotations, 2, seed=5, magnitude=0.0, n_points=300)
    assert_allclose(case.vertices, demo_mesh.vertices, atol=1e-9)
    assert_allclose(case.scan_pose.rotation, np.eye(3), atol=1e-15)
    assert case.scan_pose.scale == 1.0
    assert_allclose(case.scan.keypoints7, demo_mesh.vertices[annotations.keypoint_vertices()], atol=1e-9)


def test_scan_points_lie_on_posed_surface(demo_mesh, skeleton, annotations):
    case = make_case(demo_mesh, skeleton, annotations, 2, seed=2, magnitude=0.5, n_points=300)
    posed = Mesh(case.scan_pose.apply(case.vertices), demo_mesh.faces, demo_mesh.uv)
    assert float(point_mesh_distance(case.scan.points, posed).distances.max()) < 1e-9
    assert_allclose(case.scan.keypoints7, posed.vertices[annotations.keypoint_vertices()], atol=1e-12)


def test_uncovered_draw_halves_magnitude(monkeypatch, demo_mesh, skeleton):
    drawn = []
    real_random_params = synth.random_params

    def recording_random_params(mesh, skeleton, K, rng, magnitude):
        drawn.append(magnitude)
        return real_random_params(mesh, skeleton, K, rng, magnitude)

    calls = iter([UncoveredVertexError(3, 0.0), None])

    def flaky_weights(mesh, gmm):
        error = next(calls)
        if error is not None:
            raise error

    monkeypatch.setattr(synth, "random_params", recording_random_params)
    monkeypatch.setattr(synth, "normalized_weights", flaky_weights)
    _, magnitude = synth_params(demo_mesh, skeleton, 2, np.random.default_rng(0), 1.0)
    assert drawn == [1.0, 0.5]
    assert magnitude == 0.5


def test_case_records_the_drawn_magnitude(monkeypatch, demo_mesh, skeleton, annotations):
    calls = iter([UncoveredVertexError(3, 0.0), None])

    def flaky_weights(mesh, gmm):
        error = next(calls)
        if error is not None:
            raise error

    monkeypatch.setattr(synth, "normalized_weights", flaky_weights)
    case = make_case(demo_mesh, skeleton, annotations, 2, seed=6, magnitude=1.0, n_points=100)
    assert case.magnitude == 0.5
    rng = np.random.default_rng(6)
    synth.random_params(demo_mesh, skeleton, 2, rng, 1.0)
    synth.random_params(demo_mesh, skeleton, 2, rng, 0.5)
    expected = synth.random_similarity(rng, 0.5)
    assert_allclose(case.scan_pose.rotation, expected.rotation, atol=0)
    assert case.scan_pose.scale == expected.scale


def test_persistently_uncovered_draws_give_up(monkeypatch, demo_mesh, skeleton):
    def never_covered(mesh, gmm):
        raise UncoveredVertexError(0, 0.0)

    monkeypatch.setattr(synth, "normalized_weights", never_covered)
    with pytest.raises(AsmError, match="attempts"):
        synth_params(demo_mesh, skeleton, 2, np.random.default_rng(0), 1.0)


def test_unknown_mode(demo_mesh, skeleton, annotations):
    with pytest.raises(AsmError, match="unknown synth mode"):
        make_case(demo_mesh, skeleton, annotations, 2, seed=0, mode="video")


def test_procedural_texture_range(demo_mesh):
    texture = procedural_texture(demo_mesh)
    assert texture.min() >= 0.1 and texture.max() <= 0.9
    assert texture.std() > 0.05


def test_write_scan_case(tmp_path, demo_mesh, skeleton, annotations):
    case = make_case(demo_mesh, skeleton, annotations, 2, seed=4, magnitude=0.5, n_points=300)
    write_case(tmp_path, case, demo_mesh, skeleton)
    points, normals = load_points(tmp_path / "scan.ply")
    assert_allclose(points, case.scan.points, atol=0)
    assert normals is None
    keypoints = KeypointsFile.model_validate(read_json(tmp_path / "keypoints.json"))
    assert_allclose(keypoints.scan_points(), case.scan.keypoints7, atol=0)
    assert_allclose(load_obj(tmp_path / "gt_mesh.obj").vertices, case.vertices, atol=0)
    pose = read_json(tmp_path / "scan_pose.json")
    assert pose["scale"] == case.scan_pose.scale

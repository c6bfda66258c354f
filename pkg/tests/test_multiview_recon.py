import json
import math

import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose

from asm_model import AsmParams, asm_forward
from camera import FRONTAL, CameraView, arc_poses
from conftest import plane_mesh, sphere_mesh
from errors import AsmError, NoOverlapError, NoSilhouetteError
from models import MvConfig
from multiview_recon import (
    Camera,
    UvIntensityMap,
    bilinear_sample,
    chamfer,
    combine_energies,
    estimate_pose_from_landmarks,
    extract_model_contour,
    landmark_energy,
    lncc,
    load_views,
    photometric_energy,
    reconstruct,
    texel_map,
    unwrap_intensities,
    vertex_rmse,
)
from synth import make_case, write_case

SIZE = 128
F = 0.7 * SIZE * 3.0
C = (SIZE - 1) / 2.0


def frontal_camera(distance=6.0, f=F, size=SIZE):
    return Camera(torch.as_tensor(FRONTAL), torch.tensor([0.0, 0.0, distance], dtype=torch.float64), torch.tensor(f, dtype=torch.float64), (size - 1) / 2.0, (size - 1) / 2.0, size, size)


def uv_map(values, mask=None):
    values = torch.as_tensor(np.asarray(values, dtype=np.float64))
    return UvIntensityMap(values, np.ones(values.shape, dtype=bool) if mask is None else mask)


@pytest.fixture(scope="module")
def views_case(demo_mesh, skeleton, annotations):
    return make_case(demo_mesh, skeleton, annotations, 2, seed=3, mode="views", magnitude=0.5, n_views=2)


def test_chamfer_examples(rng):
    points = rng.normal(size=(20, 2))
    assert float(chamfer(points, points)) == 0.0
    assert float(chamfer([[0.0, 0.0]], [[1.0, 0.0]])) == pytest.approx(1.0)
    with pytest.raises(AsmError):
        chamfer(np.zeros((0, 2)), points)


def test_chamfer_matches_brute_force(rng):
    a, b = rng.normal(size=(15, 2)), rng.normal(size=(9, 2))
    ab = np.mean([min(((p - q) ** 2).sum() for q in b) for p in a])
    ba = np.mean([min(((p - q) ** 2).sum() for p in a) for q in b])
    assert float(chamfer(a, b)) == pytest.approx(0.5 * (ab + ba), rel=1e-12)


def test_lncc_examples(rng):
    values = rng.uniform(size=(8, 8))
    assert float(lncc(uv_map(values), uv_map(values))) == pytest.approx(1.0, abs=1e-12)
    assert float(lncc(uv_map(values), uv_map(2 * values + 3))) == pytest.approx(1.0, abs=1e-12)
    assert float(lncc(uv_map(values), uv_map(-values))) == pytest.approx(-1.0, abs=1e-12)
    assert float(lncc(uv_map(values), uv_map(np.full((8, 8), 0.4)))) == 0.0


def test_lncc_without_shared_patch():
    left = np.zeros((8, 8), dtype=bool)
    left[:, :4] = True
    with pytest.raises(NoOverlapError, match="no-overlap"):
        lncc(uv_map(np.ones((8, 8)), left), uv_map(np.ones((8, 8)), ~left))


def test_lncc_ignores_masked_windows(rng):
    values = rng.uniform(size=(8, 8))
    mask = np.ones((8, 8), dtype=bool)
    mask[:, 5:] = False
    other = values.copy()
    other[:, 5:] = rng.uniform(size=(8, 3))
    assert float(lncc(uv_map(values, mask), uv_map(other, mask))) == pytest.approx(1.0, abs=1e-12)


def test_photometric_energy(rng):
    values = rng.uniform(size=(8, 8))
    same = [uv_map(values), uv_map(values), uv_map(values)]
    assert float(photometric_energy(same)) == pytest.approx(0.0, abs=1e-12)
    assert float(photometric_energy([uv_map(values), uv_map(-values)])) == pytest.approx(2.0, abs=1e-12)
    assert float(photometric_energy([uv_map(values), uv_map(values)], literal=True)) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(AsmError):
        photometric_energy([uv_map(values)])


def test_combine_energies_default_weights():
    one = torch.tensor(1.0, dtype=torch.float64)
    assert float(combine_energies(one, one, one, one, MvConfig())) == pytest.approx(101.401)


def test_landmark_energy(demo_mesh, annotations):
    camera = frontal_camera()
    ids = annotations.landmarks68
    with torch.no_grad():
        targets = camera.project(torch.as_tensor(demo_mesh.vertices[ids])).numpy()
    assert float(landmark_energy(demo_mesh.vertices, ids, [camera], [targets])) == pytest.approx(0.0, abs=1e-20)
    shifted = targets.copy()
    shifted[0] += (3.0, 4.0)
    assert float(landmark_energy(demo_mesh.vertices, ids, [camera], [shifted])) == pytest.approx(25.0 / 68.0)


def test_bilinear_sample():
    image = np.arange(20, dtype=np.float64).reshape(4, 5)
    points = torch.tensor([[2.0, 3.0], [2.5, 1.0], [1.0, 1.5], [4.0, 3.0], [9.0, -2.0]], dtype=torch.float64)
    assert_allclose(bilinear_sample(image, points).numpy(), [17.0, 7.5, 8.5, 19.0, 4.0])


def test_unwrap_constant_image(demo_mesh):
    camera = frontal_camera()
    visible = camera.visibility(demo_mesh.vertices, demo_mesh.faces, 0.02)
    texels = texel_map(demo_mesh, 32)
    unwrapped = unwrap_intensities(demo_mesh.vertices, demo_mesh, np.full((SIZE, SIZE), 0.5), camera, visible, texels)
    assert unwrapped.mask.any()
    assert_allclose(unwrapped.values.numpy()[unwrapped.mask], 0.5, atol=1e-12)
    assert (unwrapped.values.numpy()[~unwrapped.mask] == 0).all()


def test_contour_of_facing_plane_is_empty():
    mesh = plane_mesh(5)
    with pytest.raises(NoSilhouetteError, match="no-silhouette"):
        extract_model_contour(mesh.vertices, mesh.faces, frontal_camera(), 10.0, np.ones(25, dtype=bool))


def test_sphere_contour_lies_on_rim():
    sphere = sphere_mesh()
    camera = frontal_camera(20.0, 2000.0, 512)
    visible = camera.visibility(sphere.vertices, sphere.faces, 0.02)
    contour = extract_model_contour(sphere.vertices, sphere.faces, camera, 10.0, visible)
    assert len(contour.indices) > 0
    assert visible[contour.indices].all()
    assert (np.abs(sphere.vertices[contour.indices, 2]) < 0.25).all()
    assert contour.points.shape == (len(contour.indices), 2)


def test_vertex_rmse():
    a = np.zeros((4, 3))
    assert vertex_rmse(a, a + [0.0, 3.0, 4.0]) == pytest.approx(5.0)
    with pytest.raises(AsmError):
        vertex_rmse(a, np.zeros((3, 3)))


def test_pose_from_landmarks_reprojects(demo_mesh, annotations):
    rotation, translation = arc_poses(3, 6.0)[2]
    model = demo_mesh.vertices[annotations.landmarks68]
    cam = model @ rotation.T + translation
    pixels = np.stack([C + F * cam[:, 0] / cam[:, 2], C + F * cam[:, 1] / cam[:, 2]], 1)
    R, t = estimate_pose_from_landmarks(model, pixels, F, C, C, iterations=500)
    again = model @ R.T + t
    reprojected = np.stack([C + F * again[:, 0] / again[:, 2], C + F * again[:, 1] / again[:, 2]], 1)
    assert np.sqrt(((reprojected - pixels) ** 2).sum(1)).max() < 1.0


def test_synthetic_views_carry_exact_landmarks(views_case, annotations):
    for view in views_case.views:
        cam = views_case.vertices[annotations.landmarks68] @ view.rotation.T + view.translation
        expected = np.stack([view.cx + view.f * cam[:, 0] / cam[:, 2], view.cy + view.f * cam[:, 1] / cam[:, 2]], 1)
        assert_allclose(view.landmarks68, expected, atol=1e-9)
        assert len(view.contour) > 0
        assert view.image.shape == (128, 128)


def test_load_views_round_trip(tmp_path, views_case, demo_mesh, skeleton):
    write_case(tmp_path, views_case, demo_mesh, skeleton)
    loaded = load_views(tmp_path / "views.json")
    assert len(loaded) == 2
    for original, again in zip(views_case.views, loaded):
        assert np.abs(again.image - original.image).max() <= 0.5 / 255 + 1e-12
        assert_allclose(again.landmarks68, original.landmarks68, atol=0)
        assert_allclose(again.rotation, original.rotation, atol=0)
        assert again.f == original.f


def test_load_views_without_pose(tmp_path, views_case, demo_mesh, skeleton, annotations):
    write_case(tmp_path, views_case, demo_mesh, skeleton)
    manifest = json.loads((tmp_path / "views.json").read_text())
    for entry in manifest["views"]:
        entry["rotation"] = entry["translation"] = None
    (tmp_path / "views.json").write_text(json.dumps(manifest))
    with pytest.raises(AsmError, match="no pose"):
        load_views(tmp_path / "views.json")
    estimated = load_views(tmp_path / "views.json", views_case.vertices[annotations.landmarks68])
    for original, view in zip(views_case.views, estimated):
        assert np.linalg.norm(view.translation - original.translation) < 0.1


def test_reconstruct_smoke(views_case, demo_mesh, skeleton, annotations):
    cfg = MvConfig(iterations=2, uv_resolution=32, log_every=1)
    init = AsmParams.neutral(demo_mesh, skeleton, 2)
    result = reconstruct(demo_mesh, skeleton, views_case.views, cfg, init, annotations.landmarks68)
    assert len(result.history) == 3
    assert all(math.isfinite(value) for value in result.history)
    assert result.params.bone_count == 84
    assert len(result.poses) == 2
    assert result.focals == pytest.approx([view.f for view in views_case.views])


def test_reconstruct_needs_two_views(views_case, demo_mesh, skeleton, annotations, neutral):
    with pytest.raises(AsmError, match="two views"):
        reconstruct(demo_mesh, skeleton, views_case.views[:1], MvConfig(), neutral, annotations.landmarks68)


def test_view_without_landmarks_is_rejected(demo_mesh, skeleton, annotations, neutral):
    bare = CameraView(np.zeros((8, 8)), 10.0, 4.0, 4.0, FRONTAL, np.array([0.0, 0.0, 6.0]))
    with pytest.raises(AsmError, match="no landmarks"):
        reconstruct(demo_mesh, skeleton, [bare, bare], MvConfig(), neutral, annotations.landmarks68)


def brute_force_lncc(a, b, mask, patch=3):
    scores = []
    for r in range(a.shape[0] - patch + 1):
        for c in range(a.shape[1] - patch + 1):
            if not mask[r : r + patch, c : c + patch].all():
                continue
            pa = a[r : r + patch, c : c + patch].ravel()
            pb = b[r : r + patch, c : c + patch].ravel()
            da, db = pa - pa.mean(), pb - pb.mean()
            var = (da @ da) * (db @ db)
            scores.append(da @ db / np.sqrt(var) if var > 1e-24 else 0.0)
    return np.mean(scores)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_lncc_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8))
    b[:3, 5:] = 0.25
    mask_a = rng.uniform(size=(8, 8)) > 0.1
    mask_b = rng.uniform(size=(8, 8)) > 0.1
    mask_a[:3, :3] = mask_b[:3, :3] = True
    expected = brute_force_lncc(a, b, mask_a & mask_b)
    assert float(lncc(uv_map(a, mask_a), uv_map(b, mask_b))) == pytest.approx(expected, abs=1e-12)


def test_unwrap_linear_ramp(demo_mesh):
    camera = frontal_camera()
    visible = camera.visibility(demo_mesh.vertices, demo_mesh.faces, 0.02)
    texels = texel_map(demo_mesh, 32)
    ys, xs = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    image = 0.1 + 0.005 * xs + 0.002 * ys
    unwrapped = unwrap_intensities(demo_mesh.vertices, demo_mesh, image, camera, visible, texels)
    with torch.no_grad():
        pixels = camera.project(torch.as_tensor(demo_mesh.vertices)).numpy()
    per_vertex = 0.1 + 0.005 * pixels[:, 0] + 0.002 * pixels[:, 1]
    corners = demo_mesh.faces[texels.faces]
    expected = (texels.bary * per_vertex[corners]).sum(1).reshape(32, 32)
    assert unwrapped.mask.sum() > 100
    assert_allclose(unwrapped.values.numpy()[unwrapped.mask], expected[unwrapped.mask], atol=1e-12)


def reconstruction_gain(mesh, skeleton, annotations, seed, n_views):
    """(final RMSE, neutral RMSE) against the ground-truth vertices of one synthetic case."""
    case = make_case(mesh, skeleton, annotations, 2, seed=seed, mode="views", magnitude=0.5, n_views=n_views)
    init = AsmParams.neutral(mesh, skeleton, 2)
    result = reconstruct(mesh, skeleton, case.views, MvConfig(), init, annotations.landmarks68)
    with torch.no_grad():
        final = asm_forward(mesh, skeleton, result.params).vertices
        start = asm_forward(mesh, skeleton, init).vertices
    return vertex_rmse(final, case.vertices), vertex_rmse(start, case.vertices)


@pytest.mark.slow
def test_reconstruction_halves_vertex_rmse(demo_mesh, skeleton, annotations):
    gains = [reconstruction_gain(demo_mesh, skeleton, annotations, seed, 5) for seed in range(10)]
    assert sum(final <= 0.5 * start for final, start in gains) >= 9


@pytest.mark.slow
def test_more_views_reconstruct_no_worse(demo_mesh, skeleton, annotations):
    few = [reconstruction_gain(demo_mesh, skeleton, annotations, seed, 3)[0] for seed in range(10)]
    many = [reconstruction_gain(demo_mesh, skeleton, annotations, seed, 10)[0] for seed in range(10)]
    assert np.mean(many) <= np.mean(few)

import numpy as np
import pytest
import torch

from asm_model import AsmParams
from demo_assets import build_annotations, build_default_skeleton, build_demo_head
from mesh_core import Mesh
from skeleton_rig import skeleton_from_file


def plane_mesh(n: int = 5, z: float = 0.0) -> Mesh:
    """Unit square in the z = const plane, uv = (x, y)."""
    ticks = np.linspace(0.0, 1.0, n)
    xx, yy = np.meshgrid(ticks, ticks)
    uv = np.stack([xx.ravel(), yy.ravel()], axis=1)
    vertices = np.column_stack([uv, np.full(len(uv), z)])
    i, j = np.meshgrid(np.arange(n - 1), np.arange(n - 1))
    p00 = (j * n + i).ravel()
    p10, p01, p11 = p00 + 1, p00 + n, p00 + n + 1
    faces = np.concatenate([np.stack([p00, p10, p11], 1), np.stack([p00, p11, p01], 1)])
    return Mesh(vertices, faces, uv)


def sphere_mesh(rings: int = 24, segments: int = 48, radius: float = 1.0) -> Mesh:
    """Latitude / longitude sphere; uv is the (longitude, latitude) chart."""
    vertices, uv = [], []
    for r in range(rings + 1):
        theta = np.pi * r / rings
        for s in range(segments + 1):
            phi = 2 * np.pi * s / segments
            vertices.append(radius * np.array([np.sin(theta) * np.cos(phi), np.cos(theta), np.sin(theta) * np.sin(phi)]))
            uv.append((s / segments, 1.0 - r / rings))
    faces = []
    for r in range(rings):
        for s in range(segments):
            a = r * (segments + 1) + s
            b, c, d = a + 1, a + segments + 1, a + segments + 2
            if r > 0:
                faces.append((a, c, b))
            if r < rings - 1:
                faces.append((b, c, d))
    return Mesh(np.array(vertices), np.array(faces), np.array(uv))


@pytest.fixture(scope="session")
def demo_mesh():
    return build_demo_head()


@pytest.fixture(scope="session")
def skeleton(demo_mesh):
    return skeleton_from_file(build_default_skeleton(demo_mesh), demo_mesh)


@pytest.fixture(scope="session")
def annotations():
    return build_annotations()


@pytest.fixture
def neutral(demo_mesh, skeleton):
    return AsmParams.neutral(demo_mesh, skeleton, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)

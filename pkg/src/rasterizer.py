"""
Software z-buffer rasterizer for synthetic views and visibility tests.

Every (triangle, pixel) pair inside a triangle's screen bounding box is
enumerated at once; coverage uses inclusive edge tests on the pixel centre and
the nearest fragment wins (lowest face index on equal depth).
"""

from typing import NamedTuple, Optional

import numpy as np
from loguru import logger

from camera import CameraView
from mesh_core import barycentric_weights, expand_integer_boxes, to_numpy

_NEAR = 1e-9


class Raster(NamedTuple):
    image: np.ndarray
    depth: np.ndarray
    face_index: np.ndarray


def _camera_space(vertices, rotation, translation):
    return to_numpy(vertices) @ np.asarray(rotation).T + np.asarray(translation)


def rasterize(
    vertices,
    faces: np.ndarray,
    colors: Optional[np.ndarray],
    rotation,
    translation,
    f: float,
    cx: float,
    cy: float,
    width: int,
    height: int,
    background: float = 0.0,
) -> Raster:
    """
    Renders per-vertex colors with perspective-correct interpolation.

    Returns:
        Raster with image (H, W[, C]), depth (H, W; inf where empty) and the
        owning face per pixel (-1 where empty).
    """
    cam = _camera_space(vertices, rotation, translation)
    faces = np.asarray(faces, dtype=np.int64)
    z = cam[:, 2]
    safe_z = np.where(z > _NEAR, z, 1.0)
    px = np.stack([cx + f * cam[:, 0] / safe_z, cy + f * cam[:, 1] / safe_z], axis=1)

    front = np.all(z[faces] > _NEAR, axis=1)
    tri = px[faces]
    area2 = (tri[:, 1, 0] - tri[:, 0, 0]) * (tri[:, 2, 1] - tri[:, 0, 1]) - (tri[:, 1, 1] - tri[:, 0, 1]) * (
        tri[:, 2, 0] - tri[:, 0, 0]
    )
    candidates = np.flatnonzero(front & (area2 != 0))
    lo = tri[candidates].min(1)
    hi = tri[candidates].max(1)
    x0 = np.clip(np.ceil(lo[:, 0]), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(hi[:, 0]), -1, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(lo[:, 1]), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(hi[:, 1]), -1, height - 1).astype(np.int64)
    box, xs, ys = expand_integer_boxes(x0, x1, y0, y1)
    face_ids = candidates[box]

    t = tri[face_ids]
    p = np.stack([xs, ys], axis=1).astype(np.float64)
    alpha, beta, gamma = barycentric_weights(p, t[:, 0], t[:, 1], t[:, 2])
    inside = (alpha >= 0) & (beta >= 0) & (gamma >= 0)
    face_ids, xs, ys = face_ids[inside], xs[inside], ys[inside]
    bary = np.stack([alpha[inside], beta[inside], gamma[inside]], axis=1)

    inv_z = 1.0 / z[faces[face_ids]]
    persp = bary * inv_z
    frag_depth = 1.0 / persp.sum(1)
    persp = persp * frag_depth[:, None]

    pixel = ys * width + xs
    order = np.lexsort((face_ids, frag_depth, pixel))
    _, first = np.unique(pixel[order], return_index=True)
    winners = order[first]

    depth = np.full(height * width, np.inf)
    owner = np.full(height * width, -1, dtype=np.int64)
    depth[pixel[winners]] = frag_depth[winners]
    owner[pixel[winners]] = face_ids[winners]

    image = None
    if colors is not None:
        colors = np.asarray(colors, dtype=np.float64)
        channels = colors.shape[1:] if colors.ndim > 1 else ()
        image = np.full((height * width,) + channels, background, dtype=np.float64)
        corner_colors = colors[faces[face_ids[winners]]]
        weights = persp[winners].reshape((-1, 3) + (1,) * len(channels))
        image[pixel[winners]] = (weights * corner_colors).sum(1)
        image = image.reshape((height, width) + channels)
    logger.debug(f"Rasterized {len(candidates)} faces into {len(winners)} pixels ({width}x{height})")
    return Raster(image, depth.reshape(height, width), owner.reshape(height, width))


def rasterize_view(vertices, faces, colors, view: CameraView, f: Optional[float] = None) -> Raster:
    return rasterize(
        vertices, faces, colors, view.rotation, view.translation,
        view.f if f is None else f, view.cx, view.cy, view.width, view.height,
    )


def zbuffer_visibility(
    vertices,
    faces: np.ndarray,
    rotation,
    translation,
    f: float,
    cx: float,
    cy: float,
    width: int,
    height: int,
    bias: float = 0.02,
) -> np.ndarray:
    """
    A vertex is visible when it is in front of the camera, projects inside the
    image, and either lies within `bias` of the z-buffer depth at its pixel or
    belongs to the face that owns that pixel.
    """
    vertices = to_numpy(vertices)
    faces = np.asarray(faces, dtype=np.int64)
    raster = rasterize(vertices, faces, None, rotation, translation, f, cx, cy, width, height)
    cam = _camera_space(vertices, rotation, translation)
    z = cam[:, 2]
    in_front = z > _NEAR
    safe_z = np.where(in_front, z, 1.0)
    col = np.rint(cx + f * cam[:, 0] / safe_z)
    row = np.rint(cy + f * cam[:, 1] / safe_z)
    on_image = in_front & (col >= 0) & (col <= width - 1) & (row >= 0) & (row <= height - 1)

    visible = np.zeros(len(vertices), dtype=bool)
    idx = np.flatnonzero(on_image)
    r, c = row[idx].astype(np.int64), col[idx].astype(np.int64)
    pixel_depth = raster.depth[r, c]
    owner = raster.face_index[r, c]
    incident = (owner >= 0) & np.any(faces[np.maximum(owner, 0)] == idx[:, None], axis=1)
    visible[idx] = (z[idx] <= pixel_depth + bias) | incident
    return visible


def view_visibility(vertices, faces, view: CameraView, bias: float = 0.02, f: Optional[float] = None) -> np.ndarray:
    return zbuffer_visibility(
        vertices, faces, view.rotation, view.translation,
        view.f if f is None else f, view.cx, view.cy, view.width, view.height, bias,
    )

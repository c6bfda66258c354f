from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import trimesh
from loguru import logger

from errors import ObjFormatError
from file_utils import PathLike, atomic_write_text
from mesh_core import Mesh, to_numpy


def _resolve(index: str, count: int, line_no: int) -> int:
    value = int(index)
    resolved = value - 1 if value > 0 else count + value
    if not 0 <= resolved < count:
        raise ObjFormatError(f"line {line_no}: index {value} out of range (have {count})")
    return resolved


def parse_obj(text: str, source: str = "<string>") -> Mesh:
    """
    Parses `v`, `vt` and `f` records. Every face corner must carry a texture
    index (`v/vt` or `v/vt/vn`); polygons are fan-triangulated. A position used
    with several texture coordinates is split into one vertex per coordinate.
    """
    positions: List[List[float]] = []
    texcoords: List[List[float]] = []
    corners: List[List[Tuple[int, int]]] = []

    for line_no, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        tag = parts[0]
        if tag == "v":
            positions.append([float(x) for x in parts[1:4]])
        elif tag == "vt":
            texcoords.append([float(x) for x in parts[1:3]])
        elif tag == "f":
            polygon = []
            for token in parts[1:]:
                fields = token.split("/")
                if len(fields) < 2 or not fields[1]:
                    raise ObjFormatError(
                        f"{source}:{line_no}: face corner '{token}' has no texture index; "
                        "the template needs a UV chart (v/vt faces)"
                    )
                polygon.append(
                    (_resolve(fields[0], len(positions), line_no), _resolve(fields[1], len(texcoords), line_no))
                )
            if len(polygon) < 3:
                raise ObjFormatError(f"{source}:{line_no}: face with fewer than 3 corners")
            corners.append(polygon)

    if not texcoords:
        raise ObjFormatError(f"{source}: no 'vt' records; the template needs a UV chart")
    if not corners:
        raise ObjFormatError(f"{source}: no faces")

    uv_of: Dict[int, int] = {}
    split: Dict[Tuple[int, int], int] = {}
    extra_positions: List[int] = []
    extra_uv: List[int] = []

    def vertex_for(v: int, vt: int) -> int:
        if v not in uv_of:
            uv_of[v] = vt
            return v
        if uv_of[v] == vt:
            return v
        key = (v, vt)
        if key not in split:
            split[key] = len(positions) + len(extra_positions)
            extra_positions.append(v)
            extra_uv.append(vt)
        return split[key]

    faces = []
    for polygon in corners:
        ids = [vertex_for(v, vt) for v, vt in polygon]
        for k in range(1, len(ids) - 1):
            faces.append([ids[0], ids[k], ids[k + 1]])

    missing = [v for v in range(len(positions)) if v not in uv_of]
    if missing:
        if len(texcoords) != len(positions):
            raise ObjFormatError(
                f"{source}: {len(missing)} vertices are not referenced by any face and have no UV"
            )
        for v in missing:
            uv_of[v] = v
    if split:
        logger.warning(f"{source}: split {len(split)} seam vertices carrying several UV coordinates")

    vertices = np.array(positions + [positions[v] for v in extra_positions], dtype=np.float64)
    uv = np.array(
        [texcoords[uv_of[v]] for v in range(len(positions))] + [texcoords[t] for t in extra_uv],
        dtype=np.float64,
    )
    mesh = Mesh(vertices, np.array(faces, dtype=np.int64), uv)
    logger.info(f"Loaded OBJ {source}: {mesh.vertex_count} vertices, {mesh.face_count} triangles")
    return mesh


def load_obj(path: PathLike) -> Mesh:
    return parse_obj(Path(path).read_text(), source=str(path))


def format_obj(vertices, template: Mesh) -> str:
    vertices = to_numpy(vertices)
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in vertices]
    lines += [f"vt {u:.17g} {v:.17g}" for u, v in template.uv]
    lines += [f"f {a + 1}/{a + 1} {b + 1}/{b + 1} {c + 1}/{c + 1}" for a, b, c in template.faces]
    return "\n".join(lines) + "\n"


def save_obj(path: PathLike, vertices, template: Mesh) -> Path:
    """Writes `vertices` with the template's UVs and faces."""
    path = atomic_write_text(path, format_obj(vertices, template))
    logger.info(f"Saved OBJ {path}")
    return path


def load_points(path: PathLike) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Reads scan points from any format trimesh understands (PLY, OBJ, STL, ...).
    Vertex order is kept as stored. Normals come back only for scans with faces;
    bare point clouds return None.
    """
    path = Path(path)
    try:
        loaded = trimesh.load(path, process=False)
    except Exception as err:
        raise ObjFormatError(f"{path}: cannot read scan ({err})") from err
    if isinstance(loaded, trimesh.Scene):
        parts = list(loaded.geometry.values())
        if not parts:
            raise ObjFormatError(f"{path}: scan holds no geometry")
        loaded = parts[0] if len(parts) == 1 else trimesh.util.concatenate(parts)
    points = np.array(loaded.vertices, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ObjFormatError(f"{path}: scan holds no points")
    normals = None
    if isinstance(loaded, trimesh.Trimesh) and len(loaded.faces):
        normals = np.array(loaded.vertex_normals, dtype=np.float64)
    logger.info(f"Loaded {len(points)} scan points from {path}")
    return points, normals


def save_points_ply(path: PathLike, points: np.ndarray) -> Path:
    points = to_numpy(points)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in points]
    return atomic_write_text(path, "\n".join(lines) + "\n")

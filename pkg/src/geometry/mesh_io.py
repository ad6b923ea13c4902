"""Wavefront OBJ geometry with a JSON sidecar for the texture atlas."""
import json
import logging
from pathlib import Path
from typing import Union

import numpy as np

from ..autodiff.tensor import Value
from .mesh import GeometryError, TexturedMesh

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def texture_sidecar(path: PathLike) -> Path:
    path = Path(path)
    return path.with_suffix(".texture.json")


def save_mesh(mesh: TexturedMesh, path: PathLike) -> Path:
    """Write ``<path>.obj`` plus ``<path>.texture.json``; returns the OBJ path."""
    path = Path(path).with_suffix(".obj")
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# vertices {mesh.num_vertices} faces {mesh.num_faces}"]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.data.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    path.write_text("\n".join(lines) + "\n")
    sidecar = {
        "shape": list(mesh.textures.shape),
        "texels": mesh.textures.data.reshape(-1).tolist(),
    }
    texture_sidecar(path).write_text(json.dumps(sidecar))
    logger.debug(f"Saved mesh with {mesh.num_faces} faces to {path}")
    return path


def load_mesh(path: PathLike) -> TexturedMesh:
    path = Path(path).with_suffix(".obj")
    vertices, faces = [], []
    try:
        for line in path.read_text().splitlines():
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                vertices.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                # tolerate "f 1/1/1 2/2/2 3/3/3"
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    except (OSError, ValueError) as e:
        raise GeometryError(f"Failed to read OBJ {path}: {e}") from e
    sidecar = texture_sidecar(path)
    faces_arr = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if sidecar.exists():
        try:
            data = json.loads(sidecar.read_text())
            textures = np.array(data["texels"], dtype=np.float64).reshape(data["shape"])
        except (json.JSONDecodeError, KeyError, ValueError) as e:
            raise GeometryError(f"Failed to read texture sidecar {sidecar}: {e}") from e
    else:
        logger.warning(f"No texture sidecar for {path}; using mid-gray 1x1 texels")
        textures = np.full((len(faces_arr), 1, 1, 3), 0.5)
    return TexturedMesh(Value(np.array(vertices).reshape(-1, 3)), faces_arr, Value(textures))

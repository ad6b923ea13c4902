"""Textured triangle meshes: the adversary's parametrisation and rigid placement."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..autodiff import tensor as T
from ..autodiff.tensor import Value

logger = logging.getLogger(__name__)


class GeometryError(ValueError):
    """Mesh or fitted geometry violates a structural precondition"""
    pass


def normalize_angle(angle: float) -> float:
    """Map an angle into (-pi, pi]."""
    return float(np.pi - ((np.pi - angle) % (2 * np.pi)))


@dataclass(frozen=True)
class BoxConstraint:
    lx: float = 0.8
    ly: float = 0.8
    lz: float = 0.5

    def __post_init__(self):
        if min(self.lx, self.ly, self.lz) < 0:
            raise GeometryError(f"Box constraint extents must be non-negative: {self.as_array()}")

    def as_array(self) -> np.ndarray:
        return np.array([self.lx, self.ly, self.lz], dtype=np.float64)

    @classmethod
    def cube(cls, size: float) -> "BoxConstraint":
        """Square footprint of half-width ``size`` with the default height ratio."""
        return cls(size, size, size * 0.5 / 0.8)


@dataclass(frozen=True)
class Pose:
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))
        object.__setattr__(self, "heading", normalize_angle(self.heading))

    def rotation(self) -> np.ndarray:
        return rotation_z(self.heading)

    def inverse(self) -> "Pose":
        t = np.asarray(self.translation)
        return Pose(tuple(-(rotation_z(-self.heading) @ t)), -self.heading)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation().T + np.asarray(self.translation)

    def to_dict(self) -> dict:
        return {"translation": list(self.translation), "heading": self.heading}

    @classmethod
    def from_dict(cls, data: dict) -> "Pose":
        return cls(tuple(data["translation"]), data["heading"])


def rotation_z(heading: float) -> np.ndarray:
    c, s = np.cos(heading), np.sin(heading)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class TexturedMesh:
    """Vertices (N, 3), faces (M, 3) and a per-face texture atlas (M, C, C, 3)."""
    vertices: Value
    faces: np.ndarray
    textures: Value
    _neighbors: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = T.as_value(self.vertices)
        self.textures = T.as_value(self.textures)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        n = self.vertices.shape[0]
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise GeometryError(f"Vertices must be (N, 3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise GeometryError(f"Faces must be (M, 3), got {self.faces.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise GeometryError(f"Face index out of range for {n} vertices")
        tex = self.textures.shape
        if len(tex) != 4 or tex[0] != len(self.faces) or tex[1] != tex[2] or tex[3] != 3:
            raise GeometryError(f"Textures must be (M, C, C, 3) with M={len(self.faces)}, got {tex}")

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @property
    def texture_res(self) -> int:
        return self.textures.shape[1]

    def edges(self) -> np.ndarray:
        """Unique undirected edges as a sorted (E, 2) array."""
        pairs = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.unique(np.sort(pairs, axis=1), axis=0)

    def neighbors(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Cached 1-ring structure as (source, neighbor, degree) arrays."""
        if self._neighbors is None:
            edges = self.edges()
            src = np.concatenate([edges[:, 0], edges[:, 1]])
            dst = np.concatenate([edges[:, 1], edges[:, 0]])
            degree = np.bincount(src, minlength=self.num_vertices)
            self._neighbors = (src, dst, degree)
        return self._neighbors

    def with_leaves(self) -> "TexturedMesh":
        """Copy whose vertices and textures are fresh gradient-tracking leaves."""
        return TexturedMesh(Value(self.vertices.data.copy(), requires_grad=True), self.faces,
                            Value(self.textures.data.copy(), requires_grad=True), self._neighbors)

    def detached(self) -> "TexturedMesh":
        return TexturedMesh(self.vertices.detach(), self.faces, self.textures.detach(), self._neighbors)

    def is_edge_manifold(self) -> bool:
        pairs = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        _, counts = np.unique(np.sort(pairs, axis=1), axis=0, return_counts=True)
        return bool(np.all(counts <= 2))


def _icosahedron() -> Tuple[np.ndarray, np.ndarray]:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return verts / np.linalg.norm(verts, axis=1, keepdims=True), faces


def _subdivide(verts: np.ndarray, faces: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    cache: Dict[Tuple[int, int], int] = {}
    verts_list: List[np.ndarray] = list(verts)

    def midpoint(a: int, b: int) -> int:
        key = (min(a, b), max(a, b))
        if key not in cache:
            mid = (verts_list[a] + verts_list[b]) / 2.0
            verts_list.append(mid / np.linalg.norm(mid))
            cache[key] = len(verts_list) - 1
        return cache[key]

    new_faces = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        new_faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
    return np.array(verts_list), np.array(new_faces, dtype=np.int64)


def _orient_outward(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = verts[faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    centroids = tri.mean(axis=1) - verts.mean(axis=0)
    flip = (normals * centroids).sum(axis=1) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def make_icosphere(subdivisions: int = 2, texture_res: int = 5, radius: float = 1.0) -> TexturedMesh:
    """Unit icosphere (scaled by ``radius``) with a mid-gray texture atlas."""
    if not 0 <= subdivisions <= 5:
        raise GeometryError(f"subdivisions must be in [0, 5], got {subdivisions}")
    if texture_res < 1:
        raise GeometryError(f"texture_res must be positive, got {texture_res}")
    verts, faces = _icosahedron()
    for _ in range(subdivisions):
        verts, faces = _subdivide(verts, faces)
    faces = _orient_outward(verts, faces)
    textures = np.full((len(faces), texture_res, texture_res, 3), 0.5)
    return TexturedMesh(Value(verts * radius), faces, Value(textures))


def laplacian_loss(mesh: TexturedMesh) -> Value:
    """Sum over vertices of the squared offset from the 1-ring centroid."""
    src, dst, degree = mesh.neighbors()
    if np.any(degree == 0):
        isolated = np.flatnonzero(degree == 0)
        raise GeometryError(f"Isolated vertices have no neighborhood: {isolated.tolist()}")
    neighbor_sum = T.scatter_add(T.gather(mesh.vertices, dst), src, mesh.num_vertices)
    centroid = neighbor_sum / degree[:, None].astype(np.float64)
    delta = mesh.vertices - centroid
    return (delta * delta).sum()


def clamp_vertices(mesh: TexturedMesh, box: BoxConstraint) -> TexturedMesh:
    """Project onto the l-inf vertex box and the [0, 1] texel range."""
    limits = box.as_array()
    verts = np.clip(mesh.vertices.data, -limits, limits)
    textures = np.clip(mesh.textures.data, 0.0, 1.0)
    return TexturedMesh(Value(verts), mesh.faces, Value(textures), mesh._neighbors)


def transform_vertices(vertices: Value, pose: Pose) -> Value:
    rot = Value(pose.rotation().T)
    return T.matmul(vertices, rot) + np.asarray(pose.translation)


def transform_mesh(mesh: TexturedMesh, pose: Pose) -> TexturedMesh:
    """Rotate about the vertical axis by the pose heading, then translate."""
    return TexturedMesh(transform_vertices(mesh.vertices, pose), mesh.faces, mesh.textures,
                        mesh._neighbors)


def _raw_normals(vertices: Value, faces: np.ndarray) -> Tuple[Value, np.ndarray]:
    v0 = T.gather(vertices, faces[:, 0])
    v1 = T.gather(vertices, faces[:, 1])
    v2 = T.gather(vertices, faces[:, 2])
    n = T.cross(v1 - v0, v2 - v0)
    lengths = np.linalg.norm(n.data, axis=1)
    return n, lengths


def face_normals(mesh: TexturedMesh, tol: float = 1e-12) -> Value:
    """Unit right-hand-rule normals; zero-area faces are rejected."""
    n, lengths = _raw_normals(mesh.vertices, mesh.faces)
    degenerate = np.flatnonzero(lengths <= tol)
    if degenerate.size:
        raise GeometryError(f"Zero-area faces: {degenerate.tolist()}")
    return n / T.norm(n, axis=-1).reshape(-1, 1)


def safe_face_normals(vertices: Value, faces: np.ndarray, tol: float = 1e-12) -> Tuple[Value, np.ndarray]:
    """Unit normals plus a validity mask; degenerate faces get a zero normal."""
    n, lengths = _raw_normals(vertices, faces)
    valid = lengths > tol
    denom = T.norm(n, axis=-1, eps=tol * tol).reshape(-1, 1)
    return T.where(valid[:, None], n / denom, 0.0), valid

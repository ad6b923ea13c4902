"""Ray-cast LiDAR simulation with Möller–Trumbore intersection.

Simulated returns stay attached to the autodiff graph: each hit's range is
recomputed from the hit face's plane so that point positions are differentiable
with respect to mesh vertices.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from ..autodiff import tensor as T
from ..autodiff.tensor import Value
from ..geometry.mesh import TexturedMesh

logger = logging.getLogger(__name__)

GRAZING_EPS = 1e-12


class SensorError(ValueError):
    """Sensor data or sensor configuration is inconsistent"""
    pass


@dataclass(frozen=True)
class LidarSpec:
    beam_elevations: Tuple[float, ...]
    azimuth_step: float
    azimuth_range: Tuple[float, float] = (0.0, 2 * np.pi)
    origin: Tuple[float, float, float] = (0.0, 0.0, 1.73)

    def __post_init__(self):
        object.__setattr__(self, "beam_elevations", tuple(float(e) for e in self.beam_elevations))
        object.__setattr__(self, "azimuth_range", tuple(float(a) for a in self.azimuth_range))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if not self.beam_elevations:
            raise SensorError("LidarSpec needs at least one beam")
        if self.azimuth_step <= 0:
            raise SensorError(f"azimuth_step must be positive, got {self.azimuth_step}")
        start, end = self.azimuth_range
        count = (end - start) / self.azimuth_step
        if end <= start or abs(count - round(count)) > 1e-9 * max(1.0, count):
            raise SensorError(f"azimuth_step {self.azimuth_step} does not divide range {self.azimuth_range}")

    @property
    def num_azimuths(self) -> int:
        start, end = self.azimuth_range
        return int(round((end - start) / self.azimuth_step))

    @property
    def num_rays(self) -> int:
        return len(self.beam_elevations) * self.num_azimuths

    @property
    def full_circle(self) -> bool:
        start, end = self.azimuth_range
        return abs((end - start) - 2 * np.pi) < 1e-9

    def to_dict(self) -> dict:
        return {
            "beam_elevations": list(self.beam_elevations),
            "azimuth_step": self.azimuth_step,
            "azimuth_range": list(self.azimuth_range),
            "origin": list(self.origin),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LidarSpec":
        return cls(tuple(data["beam_elevations"]), float(data["azimuth_step"]),
                   tuple(data["azimuth_range"]), tuple(data["origin"]))

    @classmethod
    def uniform(cls, num_beams: int, elevation_range_deg: Tuple[float, float], azimuth_step_deg: float,
                azimuth_range_deg: Tuple[float, float], origin: Sequence[float]) -> "LidarSpec":
        elevations = np.deg2rad(np.linspace(elevation_range_deg[0], elevation_range_deg[1], num_beams))
        return cls(tuple(elevations), float(np.deg2rad(azimuth_step_deg)),
                   tuple(np.deg2rad(azimuth_range_deg)), tuple(origin))


@dataclass
class LidarSweep:
    """P returns in the world frame, one per ``ray_id`` at most."""
    points: Value
    ray_ids: np.ndarray
    spec: LidarSpec
    _order: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.points = T.as_value(self.points).reshape(-1, 3)
        self.ray_ids = np.asarray(self.ray_ids, dtype=np.int64).reshape(-1)
        if len(self.ray_ids) != self.points.shape[0]:
            raise SensorError(f"{self.points.shape[0]} points but {len(self.ray_ids)} ray ids")
        if len(np.unique(self.ray_ids)) != len(self.ray_ids):
            raise SensorError("Sweep holds more than one return for some ray id")

    def __len__(self) -> int:
        return len(self.ray_ids)

    @property
    def xyz(self) -> np.ndarray:
        return self.points.data

    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.xyz - np.asarray(self.spec.origin), axis=1)

    def detached(self) -> "LidarSweep":
        return LidarSweep(self.points.detach(), self.ray_ids, self.spec)

    @classmethod
    def empty(cls, spec: LidarSpec) -> "LidarSweep":
        return cls(Value(np.zeros((0, 3))), np.zeros(0, dtype=np.int64), spec)


@dataclass
class RayHit:
    t: Value
    face: int
    barycentric: Tuple[float, float, float]


def generate_rays(spec: LidarSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One unit ray per (beam, azimuth): origins (R, 3), directions (R, 3), ray ids (R,)."""
    elevation = np.asarray(spec.beam_elevations)[:, None]
    azimuth = spec.azimuth_range[0] + spec.azimuth_step * np.arange(spec.num_azimuths)[None, :]
    directions = np.stack([
        np.cos(elevation) * np.cos(azimuth),
        np.cos(elevation) * np.sin(azimuth),
        np.broadcast_to(np.sin(elevation), (elevation.shape[0], azimuth.shape[1])),
    ], axis=-1).reshape(-1, 3)
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    origins = np.broadcast_to(np.asarray(spec.origin), directions.shape).copy()
    return origins, directions, np.arange(len(directions), dtype=np.int64)


def moller_trumbore(origins: np.ndarray, directions: np.ndarray, v0: np.ndarray, v1: np.ndarray,
                    v2: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """All-pairs ray/triangle test: returns (t, u, v, hit) each shaped (R, M)."""
    e1, e2 = v1 - v0, v2 - v0
    p = np.cross(directions[:, None, :], e2[None, :, :])
    det = (e1[None] * p).sum(-1)
    hit = np.abs(det) >= GRAZING_EPS
    inv = np.where(hit, 1.0 / np.where(hit, det, 1.0), 0.0)
    s = origins[:, None, :] - v0[None]
    u = (s * p).sum(-1) * inv
    q = np.cross(s, e1[None])
    v = (directions[:, None, :] * q).sum(-1) * inv
    t = (e2[None] * q).sum(-1) * inv
    hit &= (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 0.0)
    return t, u, v, hit


def _differentiable_range(vertices: Value, faces: np.ndarray, face_idx: np.ndarray,
                          origins: np.ndarray, directions: np.ndarray) -> Value:
    """t = n.(v0 - o) / n.d for the given hit faces; equals the MT range."""
    tri = faces[face_idx]
    v0 = T.gather(vertices, tri[:, 0])
    v1 = T.gather(vertices, tri[:, 1])
    v2 = T.gather(vertices, tri[:, 2])
    n = T.cross(v1 - v0, v2 - v0)
    num = ((v0 - origins) * n).sum(axis=1)
    den = (n * directions).sum(axis=1)
    return num / den


def intersect_ray_mesh(origin: Sequence[float], direction: Sequence[float],
                       mesh: TexturedMesh) -> Optional[RayHit]:
    """Nearest hit with t > 0, or None on a miss."""
    o = np.asarray(origin, dtype=np.float64).reshape(1, 3)
    d = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    verts = mesh.vertices.data
    f = mesh.faces
    t, u, v, hit = moller_trumbore(o, d, verts[f[:, 0]], verts[f[:, 1]], verts[f[:, 2]])
    if not hit.any():
        return None
    t_masked = np.where(hit[0], t[0], np.inf)
    face = int(np.argmin(t_masked))
    t_value = _differentiable_range(mesh.vertices, f, np.array([face]), o, d)
    bary = (1.0 - u[0, face] - v[0, face], u[0, face], v[0, face])
    return RayHit(t_value.reshape(()), face, tuple(float(b) for b in bary))


def _aabb_candidates(origins: np.ndarray, directions: np.ndarray, lo: np.ndarray,
                     hi: np.ndarray) -> np.ndarray:
    """Indices of rays whose forward half-line meets the box [lo, hi]."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    # axis-parallel rays: inside the slab -> unbounded, outside -> miss
    parallel = directions == 0.0
    inside = (origins >= lo) & (origins <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    near = tmin.max(axis=1)
    far = tmax.min(axis=1)
    return np.flatnonzero((far >= np.maximum(near, 0.0)) & (far > 0.0))


def cast_rays(mesh: TexturedMesh, origins: np.ndarray, directions: np.ndarray,
              chunk: int = 4096) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest-hit face per ray (-1 on a miss) and its range (inf on a miss)."""
    verts = mesh.vertices.data
    f = mesh.faces
    best_face = np.full(len(origins), -1, dtype=np.int64)
    best_t = np.full(len(origins), np.inf)
    if mesh.num_faces == 0 or len(origins) == 0:
        return best_face, best_t
    pad = 1e-9
    candidates = _aabb_candidates(origins, directions, verts.min(axis=0) - pad, verts.max(axis=0) + pad)
    v0, v1, v2 = verts[f[:, 0]], verts[f[:, 1]], verts[f[:, 2]]
    for start in range(0, len(candidates), chunk):
        idx = candidates[start:start + chunk]
        t, _, _, hit = moller_trumbore(origins[idx], directions[idx], v0, v1, v2)
        t = np.where(hit, t, np.inf)
        face = np.argmin(t, axis=1)
        tmin = t[np.arange(len(idx)), face]
        found = np.isfinite(tmin)
        best_face[idx[found]] = face[found]
        best_t[idx[found]] = tmin[found]
    return best_face, best_t


def simulate_lidar(mesh: TexturedMesh, spec: LidarSpec, max_range: float = np.inf) -> LidarSweep:
    """Returns of ``mesh`` (world frame) under ``spec``, differentiable w.r.t. its vertices."""
    origins, directions, ray_ids = generate_rays(spec)
    face, t = cast_rays(mesh, origins, directions)
    hit = np.flatnonzero((face >= 0) & (t <= max_range))
    if hit.size == 0:
        return LidarSweep.empty(spec)
    t_value = _differentiable_range(mesh.vertices, mesh.faces, face[hit], origins[hit], directions[hit])
    points = t_value.reshape(-1, 1) * directions[hit] + origins[hit]
    logger.debug(f"Simulated {hit.size} LiDAR returns on a {mesh.num_faces}-face mesh")
    return LidarSweep(points, ray_ids[hit], spec)


def merge_sweeps(original: LidarSweep, rendered: LidarSweep) -> LidarSweep:
    """Keep the nearer return per ray; rays present in only one sweep keep that return."""
    if original.spec != rendered.spec:
        raise SensorError("Cannot merge sweeps recorded under different LiDAR specs")
    if len(rendered) == 0:
        return original
    if len(original) == 0:
        return rendered
    ids = np.concatenate([original.ray_ids, rendered.ray_ids])
    ranges = np.concatenate([original.ranges(), rendered.ranges()])
    source = np.concatenate([np.zeros(len(original)), np.ones(len(rendered))])
    # ties keep the original return
    order = np.lexsort((source, ranges, ids))
    first = np.ones(len(order), dtype=bool)
    first[1:] = ids[order][1:] != ids[order][:-1]
    keep = np.sort(order[first])
    points = T.concat([original.points, rendered.points], axis=0)
    return LidarSweep(T.index(points, keep), ids[keep], original.spec)


def assign_ray_ids(points: np.ndarray, spec: LidarSpec) -> LidarSweep:
    """Bucket raw points to the nearest (elevation, azimuth) ray of ``spec``.

    Points outside the azimuth range are dropped; when two points land on one
    ray, the nearer one is kept.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return LidarSweep.empty(spec)
    rel = points - np.asarray(spec.origin)
    rng = np.linalg.norm(rel, axis=1)
    elevation = np.arctan2(rel[:, 2], np.hypot(rel[:, 0], rel[:, 1]))
    azimuth = np.arctan2(rel[:, 1], rel[:, 0])
    beams = np.asarray(spec.beam_elevations)
    beam = np.abs(elevation[:, None] - beams[None, :]).argmin(axis=1)
    start = spec.azimuth_range[0]
    offset = (azimuth - start) % (2 * np.pi)
    az_idx = np.round(offset / spec.azimuth_step).astype(np.int64)
    if spec.full_circle:
        az_idx %= spec.num_azimuths
        valid = np.ones(len(points), dtype=bool)
    else:
        valid = az_idx < spec.num_azimuths
    ids = beam * spec.num_azimuths + az_idx
    idx = np.flatnonzero(valid)
    order = idx[np.lexsort((rng[idx], ids[idx]))]
    first = np.ones(len(order), dtype=bool)
    first[1:] = ids[order][1:] != ids[order][:-1]
    keep = np.sort(order[first])
    dropped = len(points) - len(keep)
    if dropped:
        logger.info(f"assign_ray_ids dropped {dropped} points (out of range or bucket collision)")
    return LidarSweep(Value(points[keep]), ids[keep], spec)

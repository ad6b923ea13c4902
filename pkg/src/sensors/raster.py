"""Soft (differentiable) and hard (z-buffer) triangle rasterisation.

The soft rasteriser follows the probabilistic-silhouette formulation: every face
influences nearby pixels through ``sigmoid(sign * d^2 / sigma)`` and colours are
blended with depth-aware softmax weights. Only the adversary is rendered this
way; clean scenes go through ``rasterize_hard``.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..autodiff import tensor as T
from ..autodiff.tensor import Value
from ..geometry.mesh import TexturedMesh, safe_face_normals
from .camera import CameraModel, DirectionalLight, SoftRasterConfig, project_points, shade_factor

logger = logging.getLogger(__name__)

AGGREGATION_EPS = 1e-3
PIXEL_CHUNK = 2048


@dataclass
class SoftRender:
    rgb: Value
    alpha: Value
    depth: np.ndarray


def _edge_distance_sq(px: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = np.maximum((ab * ab).sum(-1), 1e-30)
    t = np.clip(((px - a) * ab).sum(-1) / denom, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return ((px - closest) ** 2).sum(-1)


def _signed_distance_np(px: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Signed squared distance (positive inside) of pixels (P, 1, 2) to triangles (1, F, 3, 2)."""
    a, b, c = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    d2 = np.minimum(np.minimum(_edge_distance_sq(px, a, b), _edge_distance_sq(px, b, c)),
                    _edge_distance_sq(px, c, a))
    return np.where(_inside_np(px, a, b, c), d2, -d2)


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _inside_np(p, a, b, c) -> np.ndarray:
    d0 = _cross2(b - a, p - a)
    d1 = _cross2(c - b, p - b)
    d2 = _cross2(a - c, p - c)
    return ((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))


def _edge_distance_sq_v(p: np.ndarray, a: Value, b: Value) -> Value:
    ab = b - a
    denom = (ab * ab).sum(axis=-1) + 1e-30
    t = T.clamp(((p - a) * ab).sum(axis=-1) / denom, 0.0, 1.0)
    closest = a + T.reshape(t, t.shape + (1,)) * ab
    diff = p - closest
    return (diff * diff).sum(axis=-1)


def _cross2_v(a: Value, b: Value) -> Value:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _sample_textures(textures: Value, face: np.ndarray, w1: Value, w2: Value) -> Value:
    """Bilinear texel lookup on each face's barycentric grid; returns (..., 3)."""
    res = textures.shape[1]
    flat = T.reshape(textures, (-1, 3))
    base = face * res * res
    if res == 1:
        return T.reshape(T.gather(flat, base.reshape(-1)), face.shape + (3,))
    r = w1 * float(res - 1)
    c = w2 * float(res - 1)
    r0 = np.clip(np.floor(r.data), 0, res - 2).astype(np.int64)
    c0 = np.clip(np.floor(c.data), 0, res - 2).astype(np.int64)
    fr, fc = r - r0, c - c0
    out = None
    for dr, dc, w in ((0, 0, (1.0 - fr) * (1.0 - fc)), (1, 0, fr * (1.0 - fc)),
                      (0, 1, (1.0 - fr) * fc), (1, 1, fr * fc)):
        idx = (base + (r0 + dr) * res + (c0 + dc)).reshape(-1)
        texel = T.reshape(T.gather(flat, idx), face.shape + (3,))
        term = texel * T.reshape(w, w.shape + (1,))
        out = term if out is None else out + term
    return out


def rasterize_soft(mesh: TexturedMesh, cam: CameraModel, light: DirectionalLight,
                   cfg: SoftRasterConfig = SoftRasterConfig(),
                   background: Optional[np.ndarray] = None) -> SoftRender:
    """Differentiable render of a world-frame mesh: rgb (H, W, 3), alpha (H, W), depth (H, W).

    ``background`` is an (H, W, 3) image or None to use ``cfg.background`` (black
    when unset). Depth is the camera depth of the most influential face and is
    ``inf`` where nothing is rendered.
    """
    height, width = cam.shape
    if background is None:
        color = (0.0, 0.0, 0.0) if cfg.background is None else cfg.background
        background = np.broadcast_to(np.asarray(color, dtype=np.float64), (height, width, 3))
    background = np.asarray(background, dtype=np.float64)
    depth_out = np.full((height, width), np.inf)
    empty = SoftRender(Value(background.copy()), Value(np.zeros((height, width))), depth_out)

    uv, depth, valid = project_points(mesh.vertices, cam)
    faces = mesh.faces
    face_ok = valid[faces].all(axis=1)
    tri_px = uv.data[faces]
    area = _cross2(tri_px[:, 1] - tri_px[:, 0], tri_px[:, 2] - tri_px[:, 0])
    face_ok &= np.abs(area) > 1e-12
    candidates = np.flatnonzero(face_ok)
    if candidates.size == 0:
        logger.debug("rasterize_soft: no face in front of the camera")
        return empty

    scale = max(height, width) / 2.0
    margin = np.sqrt(cfg.sigma * np.log(1e4)) * scale + 1.0
    lo = np.floor(tri_px[candidates].reshape(-1, 2).min(axis=0) - margin)
    hi = np.ceil(tri_px[candidates].reshape(-1, 2).max(axis=0) + margin)
    x0, y0 = int(max(lo[0], 0)), int(max(lo[1], 0))
    x1, y1 = int(min(hi[0], width)), int(min(hi[1], height))
    if x0 >= x1 or y0 >= y1:
        return empty
    ys, xs = np.mgrid[y0:y1, x0:x1]
    pix_idx = (ys * width + xs).reshape(-1)
    centers = np.stack([xs.reshape(-1) + 0.5, ys.reshape(-1) + 0.5], axis=1)

    # top-k nearest faces per pixel, picked without the graph
    k = min(cfg.max_faces_per_pixel, candidates.size)
    tri_norm = tri_px[candidates] / scale
    sel = np.empty((len(centers), k), dtype=np.int64)
    sel_sd = np.empty((len(centers), k))
    for s in range(0, len(centers), PIXEL_CHUNK):
        chunk = centers[s:s + PIXEL_CHUNK, None, :] / scale
        sd = _signed_distance_np(chunk, tri_norm[None])
        part = np.argsort(-sd, axis=1, kind="stable")[:, :k]
        sel[s:s + PIXEL_CHUNK] = candidates[part]
        sel_sd[s:s + PIXEL_CHUNK] = np.take_along_axis(sd, part, axis=1)
    relevant = (sel_sd / cfg.sigma > -30.0).any(axis=1)
    if not relevant.any():
        return empty
    centers, pix_idx, sel = centers[relevant], pix_idx[relevant], sel[relevant]
    n_pix = len(centers)

    flat_sel = sel.reshape(-1)
    uv_n = uv / scale
    p = np.repeat(centers / scale, k, axis=0)
    a = T.gather(uv_n, faces[flat_sel, 0])
    b = T.gather(uv_n, faces[flat_sel, 1])
    c = T.gather(uv_n, faces[flat_sel, 2])
    d2 = T.minimum(T.minimum(_edge_distance_sq_v(p, a, b), _edge_distance_sq_v(p, b, c)),
                   _edge_distance_sq_v(p, c, a))
    inside = _inside_np(p, a.data, b.data, c.data)
    sign = np.where(inside, 1.0, -1.0)
    influence = T.sigmoid(d2 * sign / cfg.sigma)

    # clipped, renormalised barycentrics
    tri_area = _cross2_v(b - a, c - a)
    w0 = T.clamp(_cross2_v(b - p, c - p) / tri_area, 0.0, 1.0)
    w1 = T.clamp(_cross2_v(c - p, a - p) / tri_area, 0.0, 1.0)
    w2 = T.clamp(_cross2_v(a - p, b - p) / tri_area, 0.0, 1.0)
    wsum = w0 + w1 + w2 + 1e-12
    w0, w1, w2 = w0 / wsum, w1 / wsum, w2 / wsum

    z0 = T.gather(depth, faces[flat_sel, 0])
    z1 = T.gather(depth, faces[flat_sel, 1])
    z2 = T.gather(depth, faces[flat_sel, 2])
    z = 1.0 / (w0 / z0 + w1 / z1 + w2 / z2)

    normals, _ = safe_face_normals(mesh.vertices, faces)
    shade = T.gather(shade_factor(normals, light), flat_sel)
    texel = _sample_textures(mesh.textures, flat_sel, w1, w2)
    color = texel * T.reshape(shade, (-1, 1))

    z_n = (cam.far - z) / (cam.far - cam.near)
    z_n = T.reshape(z_n, (n_pix, k))
    influence = T.reshape(influence, (n_pix, k))
    shift = np.maximum(z_n.data.max(axis=1, keepdims=True), AGGREGATION_EPS)
    expo = T.exp((z_n - shift) / cfg.gamma)
    bg_expo = np.exp((AGGREGATION_EPS - shift) / cfg.gamma)
    weighted = influence * expo
    denom = weighted.sum(axis=1, keepdims=True) + bg_expo
    weights = weighted / denom
    bg_weight = T.reshape(bg_expo / denom, (n_pix, 1))

    pix_bg = background.reshape(-1, 3)[pix_idx]
    rgb_region = (T.reshape(weights, (n_pix, k, 1)) * T.reshape(color, (n_pix, k, 3))).sum(axis=1)
    rgb_region = rgb_region + bg_weight * pix_bg
    log_keep = T.log(T.clamp(1.0 - influence, 1e-12, 1.0)).sum(axis=1)
    alpha_region = 1.0 - T.exp(log_keep)

    base = background.reshape(-1, 3).copy()
    base[pix_idx] = 0.0
    rgb = T.reshape(T.scatter_add(rgb_region, pix_idx, height * width) + base, (height, width, 3))
    alpha = T.reshape(T.scatter_add(alpha_region, pix_idx, height * width), (height, width))

    best = np.argmax(weights.data, axis=1)
    best_depth = z.data.reshape(n_pix, k)[np.arange(n_pix), best]
    has_face = alpha_region.data > 1e-6
    depth_out.reshape(-1)[pix_idx[has_face]] = best_depth[has_face]
    return SoftRender(rgb, alpha, depth_out)


def rasterize_hard(vertices: np.ndarray, faces: np.ndarray, face_colors: np.ndarray,
                   cam: CameraModel, light: DirectionalLight, image: np.ndarray,
                   depth: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Z-buffered flat-shaded render into copies of ``image``/``depth``.

    ``face_colors`` is (M, 3). Pixels are covered when their centre lies inside
    the projected triangle and the perspective-correct depth wins the test.
    """
    image = np.array(image, dtype=np.float64, copy=True)
    depth = np.array(depth, dtype=np.float64, copy=True)
    height, width = cam.shape
    cam_pts = cam.to_camera(vertices)
    z = cam_pts[:, 2]
    tri = np.asarray(vertices)[faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.divide(normals, lengths, out=np.zeros_like(normals), where=lengths > 0)
    facing = np.maximum(0.0, -(normals @ np.asarray(light.direction)))
    shade = np.clip(light.ambient + light.diffuse * facing, 0.0, 1.0)

    for f, (i0, i1, i2) in enumerate(faces):
        zs = z[[i0, i1, i2]]
        if np.any(zs <= cam.near):
            continue
        pts = cam_pts[[i0, i1, i2]]
        u = pts[:, 0] * cam.fx / zs + cam.cx
        v = pts[:, 1] * cam.fy / zs + cam.cy
        area = (u[1] - u[0]) * (v[2] - v[0]) - (u[2] - u[0]) * (v[1] - v[0])
        if abs(area) < 1e-12:
            continue
        xa, xb = int(max(np.floor(u.min()), 0)), int(min(np.ceil(u.max()) + 1, width))
        ya, yb = int(max(np.floor(v.min()), 0)), int(min(np.ceil(v.max()) + 1, height))
        if xa >= xb or ya >= yb:
            continue
        py, px = np.mgrid[ya:yb, xa:xb].astype(np.float64) + 0.5
        w0 = ((u[1] - px) * (v[2] - py) - (u[2] - px) * (v[1] - py)) / area
        w1 = ((u[2] - px) * (v[0] - py) - (u[0] - px) * (v[2] - py)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        zpix = 1.0 / (w0 / zs[0] + w1 / zs[1] + w2 / zs[2])
        rows, cols = np.nonzero(inside)
        rows_img, cols_img = rows + ya, cols + xa
        zcand = zpix[rows, cols]
        win = zcand < depth[rows_img, cols_img]
        depth[rows_img[win], cols_img[win]] = zcand[win]
        image[rows_img[win], cols_img[win]] = face_colors[f] * shade[f]
    return np.clip(image, 0.0, 1.0), depth

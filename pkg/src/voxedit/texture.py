"""Orthographic rendering and visibility-aware multi-view texture fusion."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .latent import sample_trilinear
from .mesh import TriMesh, marching_cubes, texel_coverage

WORLD_UP = np.array([-1.0, 0.0, 0.0])
CENTER = np.array([0.5, 0.5, 0.5])


@dataclass
class Camera:
    """Orthographic camera looking along ``direction``.

    The window is ``extent`` wide in world units and centred on ``center``.
    Image columns run along ``direction x up`` and rows run against ``up``.
    """

    direction: np.ndarray
    up: np.ndarray
    extent: float = 1.0
    center: np.ndarray = None

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        self.center = CENTER.copy() if self.center is None else np.asarray(self.center, dtype=np.float64)
        for name, v in (("direction", self.direction), ("up", self.up)):
            if abs(np.linalg.norm(v) - 1.0) > 1e-6:
                raise ValueError(f"camera {name} must be a unit vector")
        if abs(float(self.direction @ self.up)) > 1e-6:
            raise ValueError("camera direction and up must be perpendicular")
        if not self.extent > 0:
            raise ValueError("camera extent must be positive")

    @property
    def right(self) -> np.ndarray:
        return np.cross(self.direction, self.up)

    def project(self, points: np.ndarray, size: int):
        """Continuous pixel coordinates ``(row, col)`` and depth along the view direction."""
        rel = np.asarray(points, dtype=np.float64) - self.center
        col = (rel @ self.right / self.extent + 0.5) * size
        row = (0.5 - rel @ self.up / self.extent) * size
        return row, col, rel @ self.direction


def orbit_camera(azimuth_deg: float, elevation_deg: float, extent: float = 1.0) -> Camera:
    """Camera on a circle around the vertical axis; azimuth 0 looks along +k."""
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    d = np.array([math.sin(el), math.cos(el) * math.sin(az), math.cos(el) * math.cos(az)])
    up = WORLD_UP - (WORLD_UP @ d) * d
    return Camera(d, up / np.linalg.norm(up), extent)


def front_camera(extent: float = 1.0) -> Camera:
    return orbit_camera(0.0, 0.0, extent)


def auxiliary_cameras(extent: float = 1.2) -> list[Camera]:
    """Six views: azimuths 0, 60, ..., 300 degrees at 20 degrees elevation."""
    return [orbit_camera(az, 20.0, extent) for az in range(0, 360, 60)]


@dataclass
class ViewImage:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    camera: Camera


@dataclass
class UvTexture:
    image: np.ndarray  # (A, A, 3)
    valid: np.ndarray  # (A, A) bool

    @property
    def size(self) -> int:
        return self.image.shape[0]


@dataclass
class Raster:
    face: np.ndarray  # (H, W) owning triangle, -1 for background
    depth: np.ndarray  # (H, W), +inf for background
    bary: np.ndarray  # (H, W, 3)


def rasterize(mesh: TriMesh, camera: Camera, size: int) -> Raster:
    """Depth-buffered coverage of pixel centres; ties go to the lower triangle index."""
    face = np.full((size, size), -1, dtype=np.int64)
    depth = np.full((size, size), np.inf)
    bary = np.zeros((size, size, 3))
    if mesh.n_faces == 0:
        return Raster(face, depth, bary)
    row, col, z = camera.project(mesh.vertices, size)
    tr, tc, tz = row[mesh.faces], col[mesh.faces], z[mesh.faces]
    r0 = np.clip(np.ceil(tr.min(axis=1) - 0.5), 0, size).astype(int)
    r1 = np.clip(np.floor(tr.max(axis=1) - 0.5), -1, size - 1).astype(int)
    c0 = np.clip(np.ceil(tc.min(axis=1) - 0.5), 0, size).astype(int)
    c1 = np.clip(np.floor(tc.max(axis=1) - 0.5), -1, size - 1).astype(int)
    nr = np.maximum(r1 - r0 + 1, 0)
    nc = np.maximum(c1 - c0 + 1, 0)
    count = nr * nc
    if count.sum() == 0:
        return Raster(face, depth, bary)
    fid = np.repeat(np.arange(mesh.n_faces), count)
    local = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
    pr = r0[fid] + local // nc[fid]
    pc = c0[fid] + local % nc[fid]
    x, y = pc + 0.5, pr + 0.5
    x0, x1, x2 = tc[fid, 0], tc[fid, 1], tc[fid, 2]
    y0, y1, y2 = tr[fid, 0], tr[fid, 1], tr[fid, 2]
    det = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
    ok = np.abs(det) > 1e-12
    det = np.where(ok, det, 1.0)
    l0 = ((y1 - y2) * (x - x2) + (x2 - x1) * (y - y2)) / det
    l1 = ((y2 - y0) * (x - x2) + (x0 - x2) * (y - y2)) / det
    l2 = 1.0 - l0 - l1
    hit = ok & (l0 >= -1e-9) & (l1 >= -1e-9) & (l2 >= -1e-9)
    fid, pr, pc, l0, l1, l2 = fid[hit], pr[hit], pc[hit], l0[hit], l1[hit], l2[hit]
    zz = l0 * tz[fid, 0] + l1 * tz[fid, 1] + l2 * tz[fid, 2]
    pix = pr * size + pc
    order = np.lexsort((fid, zz, pix))
    first = order[np.r_[True, pix[order][1:] != pix[order][:-1]]]
    face.ravel()[pix[first]] = fid[first]
    depth.ravel()[pix[first]] = zz[first]
    bary.reshape(-1, 3)[pix[first]] = np.stack([l0[first], l1[first], l2[first]], axis=1)
    return Raster(face, depth, bary)


def surface_points(mesh: TriMesh, face: np.ndarray, bary: np.ndarray):
    """Positions and unit interpolated normals at barycentric samples of ``face``."""
    corners = mesh.vertices[mesh.faces[face]]
    normals = mesh.normals[mesh.faces[face]]
    p = np.einsum("...k,...kd->...d", bary, corners)
    n = np.einsum("...k,...kd->...d", bary, normals)
    length = np.linalg.norm(n, axis=-1, keepdims=True)
    n = np.where(length > 1e-12, n / np.where(length > 0, length, 1.0), mesh.face_normals()[face])
    return p, n


def texture_lookup(texture: UvTexture, uv: np.ndarray) -> np.ndarray:
    A = texture.size
    col = np.clip(np.floor(uv[..., 0] * A).astype(int), 0, A - 1)
    row = np.clip(np.floor(uv[..., 1] * A).astype(int), 0, A - 1)
    return texture.image[row, col]


def render_view(
    mesh_or_grid,
    camera: Camera,
    size: int = 128,
    texture: UvTexture | None = None,
    color_fn=None,
    shade: bool = True,
    background=(1.0, 1.0, 1.0),
) -> ViewImage:
    """Rasterise a mesh (or the iso-surface of a grid) to an RGB image.

    Colour comes from ``texture`` (nearest texel), else from
    ``color_fn(points, normals)``, else mid grey. With ``shade`` every
    triangle is lit by a headlight: ``0.2 + 0.8 * max(0, -n . d)`` with its
    face normal ``n``.
    """
    mesh = mesh_or_grid if isinstance(mesh_or_grid, TriMesh) else marching_cubes(mesh_or_grid)
    ras = rasterize(mesh, camera, size)
    image = np.empty((size, size, 3))
    image[:] = np.asarray(background, dtype=np.float64)
    covered = ras.face >= 0
    if not covered.any():
        return ViewImage(image, camera)
    f = ras.face[covered]
    b = ras.bary[covered]
    if texture is not None:
        if mesh.uv is None:
            raise ValueError("textured rendering needs atlas coordinates")
        uv = np.einsum("nk,nkd->nd", b, mesh.uv[f])
        color = texture_lookup(texture, uv)
    elif color_fn is not None:
        p, n = surface_points(mesh, f, b)
        color = np.asarray(color_fn(p, n), dtype=np.float64)
    else:
        color = np.full((len(f), 3), 0.7)
    if shade:
        cos = np.maximum(0.0, -(mesh.face_normals()[f] @ camera.direction))
        color = color * (0.2 + 0.8 * cos)[:, None]
    image[covered] = color
    return ViewImage(image, camera)


def texel_samples(mesh: TriMesh, A: int):
    """Valid texels with their surface points and normals."""
    owner, bary = texel_coverage(mesh, A)
    valid = owner >= 0
    p, n = surface_points(mesh, owner[valid], bary[valid])
    return valid, p, n


def bake_texture(mesh: TriMesh, A: int, color_fn, samples=None) -> UvTexture:
    """Texture whose valid texels hold ``color_fn`` at their surface points."""
    valid, p, n = samples if samples is not None else texel_samples(mesh, A)
    image = np.zeros((A, A, 3))
    image[valid] = np.clip(color_fn(p, n), 0.0, 1.0)
    return UvTexture(image, valid)


def view_weights(mesh: TriMesh, view: ViewImage, points, normals, p: float = 2.0, bias: float = 1e-3, raster=None):
    """Per-sample fusion weight and projected colour for one view.

    The weight is ``visible * max(0, -n . d) ** p``; a sample is visible if
    it lies inside the window and no deeper than the depth buffer plus a
    slope-scaled bias: ``bias * extent`` plus the depth change of the
    sample's own surface across one pixel (the buffer is read at the pixel
    centre, not at the sample).
    """
    size = view.image.shape[0]
    cam = view.camera
    ras = raster if raster is not None else rasterize(mesh, cam, size)
    row, col, z = cam.project(points, size)
    r = np.floor(row).astype(int)
    c = np.floor(col).astype(int)
    inside = (r >= 0) & (r < size) & (c >= 0) & (c < size)
    rc, cc = np.clip(r, 0, size - 1), np.clip(c, 0, size - 1)
    facing = np.maximum(0.0, -(normals @ cam.direction))
    slope = np.sqrt(np.maximum(0.0, 1.0 - facing**2)) / np.maximum(facing, 0.05)
    tolerance = bias * cam.extent + slope * cam.extent / size
    visible = inside & (z <= ras.depth[rc, cc] + tolerance)
    w = np.where(visible, facing**p, 0.0)
    return w, view.image[rc, cc]


def fuse_texture(mesh: TriMesh, views, mask_field, original: UvTexture, p: float = 2.0, bias: float = 1e-3, samples=None) -> UvTexture:
    """Blend projected view colours into ``original`` inside the mask.

    ``T = (1 - m) T_orig + m * sum_v w_v c_v / sum_v w_v`` with ``m`` the
    mask sampled at the texel's surface point; texels seen by no view (or
    with ``m = 0``) keep their original colour exactly.
    """
    if not views:
        raise ValueError("texture fusion needs at least one view")
    A = original.size
    valid, points, normals = samples if samples is not None else texel_samples(mesh, A)
    num = np.zeros((len(points), 3))
    den = np.zeros(len(points))
    for view in views:
        w, c = view_weights(mesh, view, points, normals, p, bias)
        num += w[:, None] * c
        den += w
    orig = original.image[valid]
    seen = den > 0
    blended = orig.copy()
    blended[seen] = num[seen] / den[seen, None]
    m = np.clip(sample_trilinear(np.asarray(mask_field, dtype=np.float64), points), 0.0, 1.0)[:, None]
    fused = np.where(m == 0, orig, (1.0 - m) * orig + m * blended)
    image = original.image.copy()
    image[valid] = fused
    return UvTexture(image, original.valid.copy())

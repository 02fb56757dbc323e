"""Triangle meshes: iso-surface extraction, per-triangle UV atlas and OBJ files."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage import measure

from .latent import check_cube


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3) in normalised [0, 1]^3
    faces: np.ndarray  # (F, 3) vertex indices
    normals: np.ndarray  # (V, 3) unit vertex normals
    uv: np.ndarray | None = None  # (F, 3, 2) per-corner atlas coordinates in [0, 1]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if self.normals.shape != self.vertices.shape:
            raise ValueError("need one normal per vertex")

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def corners(self) -> np.ndarray:
        """Triangle corner positions, ``(F, 3, 3)``."""
        return self.vertices[self.faces]

    def face_normals(self) -> np.ndarray:
        c = self.corners()
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        length = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(length > 0, length, 1.0)

    def area(self) -> float:
        c = self.corners()
        return float(0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1).sum())

    def euler_characteristic(self) -> int:
        edges = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        n_edges = len(np.unique(edges, axis=0))
        n_verts = len(np.unique(self.faces))
        return n_verts - n_edges + self.n_faces


def empty_mesh() -> TriMesh:
    return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted average of adjacent face normals."""
    c = vertices[faces]
    fn = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    acc = np.zeros_like(vertices)
    for corner in range(3):
        np.add.at(acc, faces[:, corner], fn)
    length = np.linalg.norm(acc, axis=1, keepdims=True)
    fallback = np.array([0.0, 0.0, 1.0])
    return np.where(length > 1e-300, acc / np.where(length > 0, length, 1.0), fallback)


def marching_cubes(grid: np.ndarray, iso: float = 0.5) -> TriMesh:
    """Iso-surface of an occupancy grid, vertices at voxel-centre coordinates.

    The grid is padded with one layer of zeros so shapes touching the border
    still give closed surfaces. Triangles wind counter-clockwise seen from
    outside.
    """
    if not 0.0 < iso < 1.0:
        raise ValueError("iso must lie in (0, 1)")
    R = check_cube(grid)
    padded = np.pad(np.asarray(grid, dtype=np.float64), 1)
    if padded.max() <= iso or padded.min() >= iso:
        return empty_mesh()
    verts, faces, _, _ = measure.marching_cubes(padded, level=iso, method="lewiner", allow_degenerate=False)
    verts = (verts - 1.0 + 0.5) / R
    # skimage winds towards the low side; flip so normals point out of the solid
    faces = faces[:, ::-1].astype(np.int64)
    return TriMesh(verts, faces, vertex_normals(verts, faces))


class AtlasCapacityError(ValueError):
    pass


MIN_CELL = 4


def atlas_uv(mesh: TriMesh, A: int) -> TriMesh:
    """Give each triangle its own square cell in an ``A x A`` atlas.

    Cells are sized by triangle area (at least ``MIN_CELL`` texels) and
    packed on shelves in triangle order. A chart is the right triangle with
    legs along the cell's top and left edges, inset by one texel of gutter.
    """
    if mesh.n_faces == 0:
        raise ValueError("cannot build an atlas for an empty mesh")
    c = mesh.corners()
    areas = 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)
    total = areas.sum()
    share = areas / total if total > 0 else np.full(mesh.n_faces, 1.0 / mesh.n_faces)
    for fill in (0.5, 0.35, 0.25, 0.15, 0.0):
        sides = np.maximum(MIN_CELL, np.floor(np.sqrt(share * fill * A * A))).astype(int)
        origins = _shelf_pack(sides, A)
        if origins is not None:
            break
    else:
        raise AtlasCapacityError(f"{mesh.n_faces} triangles do not fit in a {A}x{A} atlas")
    x0 = origins[:, 0].astype(np.float64)
    y0 = origins[:, 1].astype(np.float64)
    s = sides.astype(np.float64)
    # (u, v) = (column, row) / A
    uv = np.empty((mesh.n_faces, 3, 2))
    uv[:, 0] = np.stack([x0 + 1, y0 + 1], axis=1)
    uv[:, 1] = np.stack([x0 + s - 1, y0 + 1], axis=1)
    uv[:, 2] = np.stack([x0 + 1, y0 + s - 1], axis=1)
    return TriMesh(mesh.vertices, mesh.faces, mesh.normals, uv / A)


def _shelf_pack(sides: np.ndarray, A: int):
    origins = np.zeros((len(sides), 2), dtype=int)
    x = y = shelf = 0
    for i, s in enumerate(sides):
        if s > A:
            return None
        if x + s > A:
            x, y, shelf = 0, y + shelf, 0
        if y + s > A:
            return None
        origins[i] = (x, y)
        x += s
        shelf = max(shelf, s)
    return origins


def texel_coverage(mesh: TriMesh, A: int):
    """Rasterise every chart.

    Returns ``(owner, bary)``: the owning triangle per texel (-1 if none) and
    the barycentric coordinates of the texel centre in that triangle.
    """
    if mesh.uv is None:
        raise ValueError("mesh has no atlas coordinates")
    owner = np.full((A, A), -1, dtype=np.int64)
    bary = np.zeros((A, A, 3))
    px = mesh.uv * A
    lo = np.floor(px.min(axis=1)).astype(int)
    hi = np.ceil(px.max(axis=1)).astype(int)
    for f in range(mesh.n_faces):
        cols = np.arange(max(lo[f, 0], 0), min(hi[f, 0], A))
        rows = np.arange(max(lo[f, 1], 0), min(hi[f, 1], A))
        if len(cols) == 0 or len(rows) == 0:
            continue
        cc, rr = np.meshgrid(cols + 0.5, rows + 0.5)
        b = _barycentric_2d(px[f], cc, rr)
        inside = np.all(b >= -1e-9, axis=-1)
        r_idx, c_idx = np.nonzero(inside)
        owner[rows[r_idx], cols[c_idx]] = f
        bary[rows[r_idx], cols[c_idx]] = b[r_idx, c_idx]
    return owner, bary


def _barycentric_2d(tri: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    (x0, y0), (x1, y1), (x2, y2) = tri
    det = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
    l0 = ((y1 - y2) * (x - x2) + (x2 - x1) * (y - y2)) / det
    l1 = ((y2 - y0) * (x - x2) + (x0 - x2) * (y - y2)) / det
    return np.stack([l0, l1, 1.0 - l0 - l1], axis=-1)


def _g(v: float) -> str:
    return format(float(v), ".9g")


def export_obj(mesh: TriMesh, texture: np.ndarray | None, prefix) -> list[Path]:
    """Write ``prefix.obj``, ``prefix.mtl`` and (if given) ``prefix.ppm``.

    Texture coordinates are written with ``v`` pointing up, so the image
    row is ``1 - v``.
    """
    from .io import write_ppm

    prefix = Path(prefix)
    name = prefix.name
    lines = [f"mtllib {name}.mtl", "usemtl material0"]
    lines += [f"v {_g(a)} {_g(b)} {_g(c)}" for a, b, c in mesh.vertices]
    if mesh.uv is not None:
        lines += [f"vt {_g(u)} {_g(1.0 - v)}" for u, v in mesh.uv.reshape(-1, 2)]
    lines += [f"vn {_g(a)} {_g(b)} {_g(c)}" for a, b, c in mesh.normals]
    for f, tri in enumerate(mesh.faces):
        if mesh.uv is not None:
            corners = [f"{v + 1}/{3 * f + k + 1}/{v + 1}" for k, v in enumerate(tri)]
        else:
            corners = [f"{v + 1}//{v + 1}" for v in tri]
        lines.append("f " + " ".join(corners))
    obj_path = prefix.with_suffix(".obj")
    mtl_path = prefix.with_suffix(".mtl")
    mtl = ["newmtl material0", "Kd 1 1 1"]
    if texture is not None:
        mtl.append(f"map_Kd {name}.ppm")
    try:
        obj_path.write_text("\n".join(lines) + "\n", encoding="ascii")
        mtl_path.write_text("\n".join(mtl) + "\n", encoding="ascii")
    except OSError as err:
        raise OSError(f"cannot write mesh files at {prefix}: {err}") from err
    paths = [obj_path, mtl_path]
    if texture is not None:
        paths.append(write_ppm(prefix.with_suffix(".ppm"), texture))
    return paths


def read_obj(path) -> TriMesh:
    """Parse the subset of OBJ written by :func:`export_obj`."""
    verts, tex, norms, faces, face_vt = [], [], [], [], []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "vt":
            tex.append([float(p) for p in parts[1:3]])
        elif parts[0] == "vn":
            norms.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            idx = [p.split("/") for p in parts[1:4]]
            faces.append([int(i[0]) - 1 for i in idx])
            if len(idx[0]) > 1 and idx[0][1]:
                face_vt.append([int(i[1]) - 1 for i in idx])
    uv = None
    if face_vt:
        t = np.asarray(tex)
        uv = t[np.asarray(face_vt)]
        uv[..., 1] = 1.0 - uv[..., 1]
    return TriMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64), np.asarray(norms), uv)

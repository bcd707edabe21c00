"""Triangle meshes with adjacency, and Phong-surface evaluation.

Barycentric convention used throughout the package: for face ``k`` with
vertices ``(V1, V2, V3) = vertices[faces[k]]`` the point with coordinates
``(u, v)`` is ``u*V1 + v*V2 + (1-u-v)*V3``.

Local edge ``e`` of a face is the edge opposite its local vertex ``e``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BarycentricOutOfRange,
    DegenerateFace,
    IndexOutOfRange,
    InvalidFace,
    NonManifoldEdge,
    ObjFormatError,
    ZeroNormal,
)

AREA_EPS = 1e-12
BARY_SLACK = 1e-9

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int64
    vertex_normals: np.ndarray  # (V, 3)
    face_normals: np.ndarray  # (F, 3)
    face_areas: np.ndarray  # (F,)
    face_frames: np.ndarray  # (F, 3, 3) columns: tangent, bitangent, normal
    adjacency: np.ndarray  # (F, 3, 2): (neighbor face, neighbor local edge) or (-1, -1)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def checksum(self) -> int:
        return face_checksum(self.faces)

    def edge_adjacency(self) -> dict:
        """Adjacency as a mapping ``(face, local_edge) -> (face, local_edge) | None``."""
        out = {}
        for f in range(self.n_faces):
            for e in range(3):
                g, h = self.adjacency[f, e]
                out[(f, e)] = None if g < 0 else (int(g), int(h))
        return out

    def with_vertices(self, vertices, area_eps: float = AREA_EPS) -> "TriangleMesh":
        """Same topology, new vertex positions (adjacency is reused)."""
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise ValueError(f"expected vertices of shape {self.vertices.shape}, got {vertices.shape}")
        normals, areas, frames, vnormals = _derived_geometry(vertices, self.faces, area_eps)
        return TriangleMesh(vertices, self.faces, vnormals, normals, areas, frames, self.adjacency)

    def bounding_radius(self) -> float:
        center = 0.5 * (self.vertices.min(axis=0) + self.vertices.max(axis=0))
        return float(np.linalg.norm(self.vertices - center, axis=1).max())

    def mean_edge_length(self) -> float:
        v = self.vertices[self.faces]
        lengths = np.linalg.norm(v - np.roll(v, -1, axis=1), axis=2)
        return float(lengths.mean())


def face_checksum(faces) -> int:
    """64-bit FNV-1a over the face index buffer (uint32 little-endian, row-major)."""
    data = np.ascontiguousarray(faces, dtype="<u4").tobytes()
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def _derived_geometry(vertices, faces, area_eps):
    v1, v2, v3 = (vertices[faces[:, i]] for i in range(3))
    cross = np.cross(v2 - v1, v3 - v1)
    double_area = np.linalg.norm(cross, axis=1)
    areas = 0.5 * double_area
    bad = np.flatnonzero(~(areas > area_eps))
    if len(bad):
        raise DegenerateFace(int(bad[0]), float(areas[bad[0]]))
    normals = cross / double_area[:, None]

    tangent = v2 - v1
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    bitangent = np.cross(normals, tangent)
    frames = np.stack([tangent, bitangent, normals], axis=2)

    # unnormalized cross products carry area weighting
    acc = np.zeros_like(vertices)
    for i in range(3):
        np.add.at(acc, faces[:, i], cross)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    isolated = norm[:, 0] == 0.0
    acc[isolated] = (0.0, 0.0, 1.0)
    norm[isolated] = 1.0
    vnormals = acc / norm
    return normals, areas, frames, vnormals


def _build_adjacency(faces, n_vertices):
    n_faces = len(faces)
    # edge e joins local vertices (e+1)%3 and (e+2)%3
    a = faces[:, [1, 2, 0]].reshape(-1)
    b = faces[:, [2, 0, 1]].reshape(-1)
    keys = np.minimum(a, b) * n_vertices + np.maximum(a, b)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    adjacency = np.full((n_faces, 3, 2), -1, dtype=np.int64)
    i = 0
    n = len(sorted_keys)
    while i < n:
        j = i + 1
        while j < n and sorted_keys[j] == sorted_keys[i]:
            j += 1
        if j - i > 2:
            key = int(sorted_keys[i])
            raise NonManifoldEdge((key // n_vertices, key % n_vertices))
        if j - i == 2:
            p, q = order[i], order[i + 1]
            fp, ep = divmod(int(p), 3)
            fq, eq = divmod(int(q), 3)
            adjacency[fp, ep] = (fq, eq)
            adjacency[fq, eq] = (fp, ep)
        i = j
    return adjacency


def build_mesh(vertices, faces, area_eps: float = AREA_EPS) -> TriangleMesh:
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise ValueError(f"vertices must have shape (V, 3), got {vertices.shape}")
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise ValueError(f"faces must have shape (F, 3), got {faces.shape}")
    if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
        raise IndexOutOfRange(f"face indices must lie in [0, {len(vertices)})")
    normals, areas, frames, vnormals = _derived_geometry(vertices, faces, area_eps)
    adjacency = _build_adjacency(faces, len(vertices))
    return TriangleMesh(vertices, faces, vnormals, normals, areas, frames, adjacency)


def _check_coords(mesh, k, u, v):
    if not (0 <= k < mesh.n_faces):
        raise InvalidFace(f"face index {k} out of range [0, {mesh.n_faces})")
    if u < -BARY_SLACK or v < -BARY_SLACK or u + v > 1 + BARY_SLACK:
        raise BarycentricOutOfRange(f"(u, v) = ({u}, {v}) is outside the triangle")


def vector_norm(x) -> np.ndarray:
    """Euclidean norm over the last axis, keeping it. Scalar and batched callers
    share this so they agree to the last bit."""
    x = np.asarray(x)
    return np.sqrt(x[..., 0:1] * x[..., 0:1] + x[..., 1:2] * x[..., 1:2] + x[..., 2:3] * x[..., 2:3])


def phong_point(mesh: TriangleMesh, k: int, u: float, v: float) -> np.ndarray:
    _check_coords(mesh, k, u, v)
    v1, v2, v3 = mesh.vertices[mesh.faces[k]]
    return u * v1 + v * v2 + (1.0 - u - v) * v3


def phong_normal(mesh: TriangleMesh, k: int, u: float, v: float) -> np.ndarray:
    _check_coords(mesh, k, u, v)
    n1, n2, n3 = mesh.vertex_normals[mesh.faces[k]]
    n = u * n1 + v * n2 + (1.0 - u - v) * n3
    norm = vector_norm(n)
    if norm[0] < 1e-12:
        raise ZeroNormal(f"interpolated normal vanishes at face {k}, (u, v) = ({u}, {v})")
    return n / norm


def phong_points(mesh: TriangleMesh, k, u, v) -> np.ndarray:
    """Vectorized ``phong_point`` without range checks."""
    tri = mesh.vertices[mesh.faces[k]]
    u = np.asarray(u)[..., None]
    v = np.asarray(v)[..., None]
    return u * tri[:, 0] + v * tri[:, 1] + (1.0 - u - v) * tri[:, 2]


def phong_normals(mesh: TriangleMesh, k, u, v, return_raw: bool = False):
    """Vectorized ``phong_normal``; optionally also the un-normalized interpolant."""
    tri = mesh.vertex_normals[mesh.faces[k]]
    u = np.asarray(u)[..., None]
    v = np.asarray(v)[..., None]
    raw = u * tri[:, 0] + v * tri[:, 1] + (1.0 - u - v) * tri[:, 2]
    norm = vector_norm(raw)
    if np.any(norm < 1e-12):
        raise ZeroNormal("interpolated normal vanishes")
    if return_raw:
        return raw / norm, raw
    return raw / norm


def triangle_frame(mesh: TriangleMesh, k: int) -> np.ndarray:
    if not (0 <= k < mesh.n_faces):
        raise InvalidFace(f"face index {k} out of range [0, {mesh.n_faces})")
    return mesh.face_frames[k].copy()


# ---------------------------------------------------------------------------
# mesh generators


def icosphere(level: int = 2, radius: float = 1.0) -> TriangleMesh:
    t = (1.0 + 5.0**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.asarray(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(level):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return build_mesh(radius * np.array(verts), np.array(faces))


def grid_plane(nx: int, ny: int, size: float = 1.0) -> TriangleMesh:
    """Flat z=0 lattice of ``nx*ny`` squares, each split along the same diagonal.

    Every pair of adjacent triangles forms a parallelogram.
    """
    xs = np.arange(nx + 1) * size
    ys = np.arange(ny + 1) * size
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    faces = []
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            b = a + 1
            c = a + nx + 1
            d = c + 1
            # right angle at a (third vertex) and at d
            faces.append((b, c, a))
            faces.append((c, b, d))
    return build_mesh(vertices, np.array(faces))


def cylinder(n_around: int = 16, n_along: int = 8, radius: float = 0.5, height: float = 2.0, capped: bool = True) -> TriangleMesh:
    theta = 2 * np.pi * np.arange(n_around) / n_around
    zs = np.linspace(-height / 2, height / 2, n_along + 1)
    vertices = [(radius * np.cos(a), radius * np.sin(a), z) for z in zs for a in theta]
    faces = []
    for j in range(n_along):
        for i in range(n_around):
            a = j * n_around + i
            b = j * n_around + (i + 1) % n_around
            c = a + n_around
            d = b + n_around
            faces.append((a, b, d))
            faces.append((a, d, c))
    if capped:
        bottom = len(vertices)
        vertices.append((0.0, 0.0, zs[0]))
        top = len(vertices)
        vertices.append((0.0, 0.0, zs[-1]))
        last = n_along * n_around
        for i in range(n_around):
            faces.append((bottom, (i + 1) % n_around, i))
            faces.append((top, last + i, last + (i + 1) % n_around))
    return build_mesh(np.array(vertices), np.array(faces))


# ---------------------------------------------------------------------------
# OBJ


def read_obj(path) -> TriangleMesh:
    vertices, faces = read_obj_arrays(path)
    return build_mesh(vertices, faces)


def read_obj_arrays(path):
    """Parse ``v`` and ``f`` records. Faces with more than three vertices are rejected."""
    vertices = []
    faces = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ObjFormatError(f"{path}:{lineno}: vertex needs three coordinates")
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                refs = parts[1:]
                if len(refs) != 3:
                    raise ObjFormatError(f"{path}:{lineno}: only triangles are supported, got {len(refs)} vertices")
                idx = []
                for ref in refs:
                    i = int(ref.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(vertices) + i)
                faces.append(idx)
    return np.array(vertices, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def write_obj(path, vertices, faces) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(vertices, dtype=np.float64).tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces).tolist()]
    Path(path).write_text("\n".join(lines) + "\n")

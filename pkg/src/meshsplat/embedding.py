"""Surface embeddings ``(k, u, v, d)``, walking on triangles and the inverse solve.

Walking re-expresses a barycentric update that leaves its triangle in the
neighbouring triangle's chart. Two adjacent triangles are treated as right
triangles glued along their hypotenuse, i.e. their union is unfolded into a
unit square. On a mesh where every adjacent pair forms a parallelogram this
unfolding is exact.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numba as nb
import numpy as np

from . import geometry
from .errors import ChecksumMismatch, DataError
from .geometry import TriangleMesh

INSIDE_SLACK = 1e-12
MAX_HOPS = 1000
FORMAT_VERSION = 1


class WalkStatus(enum.IntEnum):
    INSIDE = 0
    BOUNDARY_HIT = 1
    MAX_HOPS_EXCEEDED = 2


@dataclass
class Embedding:
    k: int
    u: float
    v: float
    d: float = 0.0


class WalkResult(NamedTuple):
    k: int
    u: float
    v: float
    du: float  # the input delta transported into the final chart
    dv: float
    status: WalkStatus
    hops: int


@nb.njit(cache=True)
def _walk_one(faces, adjacency, k, b, delta, direction, max_hops, slack):
    """Walk in place. ``b``, ``delta`` and ``direction`` are length-3 barycentric
    vectors over the local vertices of face ``k``. Returns (k, status, hops)."""
    hops = 0
    while True:
        j_exit = -1
        t_min = np.inf
        for j in range(3):
            if delta[j] < 0.0 and b[j] + delta[j] < -slack:
                t = b[j] / -delta[j]
                if t < t_min:
                    t_min = t
                    j_exit = j
        if j_exit < 0:
            for j in range(3):
                b[j] += delta[j]
            return k, 0, hops

        t = min(max(t_min, 0.0), 1.0)
        s = 0.0
        for j in range(3):
            b[j] += t * delta[j]
            delta[j] *= 1.0 - t
        b[j_exit] = 0.0
        for j in range(3):
            if b[j] < 0.0:
                b[j] = 0.0
            s += b[j]
        for j in range(3):
            b[j] /= s

        g = adjacency[k, j_exit, 0]
        h = adjacency[k, j_exit, 1]
        if g < 0:
            return k, 1, hops
        if hops >= max_hops:
            return k, 2, hops
        hops += 1

        a = (j_exit + 1) % 3
        c = (j_exit + 2) % 3
        va = faces[k, a]
        a2 = 0
        c2 = 0
        for i in range(3):
            if i == h:
                continue
            if faces[g, i] == va:
                a2 = i
            else:
                c2 = i
        xa, xc = b[a], b[c]
        da, dc = delta[a], delta[c]
        ra, rc = direction[a], direction[c]
        b[a2] = xa
        b[c2] = xc
        b[h] = 0.0
        # unit-square unfolding: shared-vertex weights swap roles and deltas flip
        delta[a2] = -dc
        delta[c2] = -da
        delta[h] = da + dc
        direction[a2] = -rc
        direction[c2] = -ra
        direction[h] = ra + rc
        k = g


@nb.njit(cache=True)
def _walk_batch(faces, adjacency, k, u, v, du, dv, max_hops, slack):
    n = len(k)
    k_out = np.empty(n, dtype=np.int64)
    uv_out = np.empty((n, 2))
    dir_out = np.empty((n, 2))
    status = np.empty(n, dtype=np.int64)
    b = np.empty(3)
    delta = np.empty(3)
    direction = np.empty(3)
    for i in range(n):
        b[0] = u[i]
        b[1] = v[i]
        b[2] = 1.0 - u[i] - v[i]
        delta[0] = du[i]
        delta[1] = dv[i]
        delta[2] = -du[i] - dv[i]
        direction[0] = du[i]
        direction[1] = dv[i]
        direction[2] = -du[i] - dv[i]
        kk, st, _ = _walk_one(faces, adjacency, k[i], b, delta, direction, max_hops, slack)
        k_out[i] = kk
        uv_out[i, 0] = b[0]
        uv_out[i, 1] = b[1]
        dir_out[i, 0] = direction[0]
        dir_out[i, 1] = direction[1]
        status[i] = st
    return k_out, uv_out, dir_out, status


def walk_on_triangles(mesh: TriangleMesh, k: int, u: float, v: float, du: float, dv: float, max_hops: int = MAX_HOPS) -> WalkResult:
    """Apply the update ``(du, dv)`` to ``(k, u, v)``, crossing edges as needed.

    At a boundary edge the walk stops at the crossing point and the rest of
    the update is discarded (status ``BOUNDARY_HIT``).
    """
    if not np.all(np.isfinite([u, v, du, dv])):
        raise ValueError(f"non-finite walking input: u={u}, v={v}, du={du}, dv={dv}")
    if not (0 <= k < mesh.n_faces):
        raise geometry.InvalidFace(f"face index {k} out of range")
    b = np.array([u, v, 1.0 - u - v])
    delta = np.array([du, dv, -du - dv])
    direction = delta.copy()
    kk, status, hops = _walk_one(mesh.faces, mesh.adjacency, int(k), b, delta, direction, max_hops, INSIDE_SLACK)
    return WalkResult(int(kk), float(b[0]), float(b[1]), float(direction[0]), float(direction[1]), WalkStatus(status), int(hops))


def walk_batch(mesh: TriangleMesh, k, u, v, du, dv, max_hops: int = MAX_HOPS):
    """Vectorized walk. Returns ``(k, uv, transported_delta, status)`` arrays."""
    k = np.ascontiguousarray(k, dtype=np.int64)
    arrays = [np.ascontiguousarray(x, dtype=np.float64) for x in (u, v, du, dv)]
    bad = ~np.isfinite(np.stack(arrays)).all(axis=0)
    if bad.any():
        raise ValueError(f"non-finite walking input for {int(bad.sum())} embeddings (first: {int(np.flatnonzero(bad)[0])})")
    return _walk_batch(mesh.faces, mesh.adjacency, k, *arrays, max_hops, INSIDE_SLACK)


def project_to_triangle(u, v):
    """Euclidean projection of chart coordinates onto ``u, v >= 0, u + v <= 1``.

    Returns ``(u, v, jac)`` with ``jac`` the (..., 2, 2) Jacobian of the projection.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    pu, pv = u.copy(), v.copy()
    jac = np.zeros(u.shape + (2, 2))

    inside = (u >= 0) & (v >= 0) & (u + v <= 1)
    hyp = ~inside & (u + v > 1) & (u - v < 1) & (v - u < 1)
    leg_u0 = ~inside & (u < 0) & (v > 0) & (v < 1)
    leg_v0 = ~inside & (v < 0) & (u > 0) & (u < 1)
    corner00 = ~inside & (u <= 0) & (v <= 0)
    corner10 = ~inside & (u >= 1) & (u - v >= 1)
    corner01 = ~inside & ~hyp & ~leg_u0 & ~leg_v0 & ~corner00 & ~corner10

    jac[inside] = np.eye(2)
    excess = 0.5 * (u + v - 1.0)
    pu[hyp] = (u - excess)[hyp]
    pv[hyp] = (v - excess)[hyp]
    jac[hyp] = [[0.5, -0.5], [-0.5, 0.5]]
    pu[leg_u0] = 0.0
    jac[leg_u0] = [[0.0, 0.0], [0.0, 1.0]]
    pv[leg_v0] = 0.0
    jac[leg_v0] = [[1.0, 0.0], [0.0, 0.0]]
    pu[corner00], pv[corner00] = 0.0, 0.0
    pu[corner10], pv[corner10] = 1.0, 0.0
    pu[corner01], pv[corner01] = 0.0, 1.0
    return pu, pv, jac


# ---------------------------------------------------------------------------


def embedded_position(mesh: TriangleMesh, E: Embedding) -> np.ndarray:
    return geometry.phong_point(mesh, E.k, E.u, E.v) + E.d * geometry.phong_normal(mesh, E.k, E.u, E.v)


def _residual_and_jacobian(mesh, k, u, v, d, target):
    f = mesh.faces[k]
    v1, v2, v3 = mesh.vertices[f]
    n1, n2, n3 = mesh.vertex_normals[f]
    w = 1.0 - u - v
    raw = u * n1 + v * n2 + w * n3
    norm = np.linalg.norm(raw)
    n = raw / norm
    proj = (np.eye(3) - np.outer(n, n)) / norm
    r = u * v1 + v * v2 + w * v3 + d * n - target
    jac = np.empty((3, 3))
    jac[:, 0] = v1 - v3 + d * proj @ (n1 - n3)
    jac[:, 1] = v2 - v3 + d * proj @ (n2 - n3)
    jac[:, 2] = n
    return r, jac


def _naive_projection(mesh, point):
    """Best orthogonal projection over all triangles, with clamped barycentrics."""
    tri = mesh.vertices[mesh.faces]
    e1 = tri[:, 0] - tri[:, 2]
    e2 = tri[:, 1] - tri[:, 2]
    rel = point - tri[:, 2]
    a = np.einsum("ij,ij->i", e1, e1)
    b = np.einsum("ij,ij->i", e1, e2)
    c = np.einsum("ij,ij->i", e2, e2)
    p = np.einsum("ij,ij->i", e1, rel)
    q = np.einsum("ij,ij->i", e2, rel)
    det = a * c - b * b
    u = (c * p - b * q) / det
    v = (a * q - b * p) / det
    u, v, _ = project_to_triangle(u, v)
    k = np.arange(mesh.n_faces)
    P = geometry.phong_points(mesh, k, u, v)
    n = geometry.phong_normals(mesh, k, u, v)
    d = np.einsum("ij,ij->i", point - P, n)
    res = np.linalg.norm(P + d[:, None] * n - point, axis=1)
    best = int(np.argmin(res))
    return Embedding(best, float(u[best]), float(v[best]), float(d[best])), float(res[best])


@dataclass
class SolveResult:
    embedding: Embedding
    residual: float
    converged: bool
    iterations: int
    history: list


def solve_embedding(
    mesh: TriangleMesh,
    point,
    hint: Optional[Embedding] = None,
    max_iter: int = 50,
    d_max: Optional[float] = None,
    tol: float = 1e-13,
) -> SolveResult:
    """Find ``(k, u, v, d)`` whose displaced Phong point is closest to ``point``.

    Damped Gauss-Newton on ``(u, v, d)`` with the ``(u, v)`` steps routed
    through :func:`walk_on_triangles`. Steps are only accepted when they
    lower the residual, so the residual history is non-increasing.
    """
    point = np.asarray(point, dtype=np.float64)
    if not np.all(np.isfinite(point)):
        raise ValueError("point must be finite")
    if d_max is None:
        d_max = 10.0 * mesh.mean_edge_length()

    best, best_res = _naive_projection(mesh, point)
    best.d = float(np.clip(best.d, -d_max, d_max))
    best_res = float(np.linalg.norm(_residual_and_jacobian(mesh, best.k, best.u, best.v, best.d, point)[0]))
    if hint is not None:
        h = Embedding(int(hint.k), float(hint.u), float(hint.v), float(np.clip(hint.d, -d_max, d_max)))
        r = float(np.linalg.norm(_residual_and_jacobian(mesh, h.k, h.u, h.v, h.d, point)[0]))
        if r <= best_res:
            best, best_res = h, r

    k, u, v, d = best.k, best.u, best.v, best.d
    res_vec, jac = _residual_and_jacobian(mesh, k, u, v, d, point)
    res = float(np.linalg.norm(res_vec))
    history = [res]
    damping = 1e-6
    converged = res <= tol
    it = 0
    while not converged and it < max_iter:
        it += 1
        jtj = jac.T @ jac
        step = np.linalg.solve(jtj + damping * np.diag(np.diag(jtj) + 1e-12), -jac.T @ res_vec)
        walked = walk_on_triangles(mesh, k, u, v, step[0], step[1])
        d_new = float(np.clip(d + step[2], -d_max, d_max))
        r_new, j_new = _residual_and_jacobian(mesh, walked.k, walked.u, walked.v, d_new, point)
        res_new = float(np.linalg.norm(r_new))
        if res_new < res:
            moved = abs(res - res_new)
            k, u, v, d = walked.k, walked.u, walked.v, d_new
            res_vec, jac, res = r_new, j_new, res_new
            damping = max(damping / 3.0, 1e-12)
            converged = res <= tol or moved <= 1e-15 * max(1.0, res)
        else:
            damping *= 4.0
            if damping > 1e8:
                converged = True  # stationary point
        history.append(res)
    return SolveResult(Embedding(int(k), float(u), float(v), float(d)), res, bool(converged), it, history)


# ---------------------------------------------------------------------------
# JSON


def embeddings_to_json(k, u, v, d, mesh_checksum: int) -> str:
    rows = [
        {"k": int(kk), "u": float(uu), "v": float(vv), "d": float(dd)}
        for kk, uu, vv, dd in zip(np.asarray(k).tolist(), np.asarray(u).tolist(), np.asarray(v).tolist(), np.asarray(d).tolist())
    ]
    doc = {"version": FORMAT_VERSION, "mesh_checksum": int(mesh_checksum), "embeddings": rows}
    return json.dumps(doc, indent=1)


def save_embeddings(path, k, u, v, d, mesh_checksum: int) -> None:
    Path(path).write_text(embeddings_to_json(k, u, v, d, mesh_checksum))


def load_embeddings(path, mesh: Optional[TriangleMesh] = None):
    """Return ``(k, u, v, d)`` arrays; checks the face-buffer checksum against ``mesh``."""
    try:
        doc = json.loads(Path(path).read_text())
        rows = doc["embeddings"]
        checksum = int(doc["mesh_checksum"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed embedding file ({exc})") from exc
    if mesh is not None and checksum != mesh.checksum:
        raise ChecksumMismatch(f"{path}: mesh_checksum {checksum:#x} does not match mesh {mesh.checksum:#x}")
    k = np.array([r["k"] for r in rows], dtype=np.int64)
    u = np.array([r["u"] for r in rows], dtype=np.float64)
    v = np.array([r["v"] for r in rows], dtype=np.float64)
    d = np.array([r["d"] for r in rows], dtype=np.float64)
    if mesh is not None and len(k) and (k.min() < 0 or k.max() >= mesh.n_faces):
        raise DataError(f"{path}: face index out of range")
    return k, u, v, d

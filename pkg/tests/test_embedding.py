import json

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from meshsplat import embedding, geometry
from meshsplat.embedding import Embedding, WalkStatus, solve_embedding, walk_batch, walk_on_triangles
from meshsplat.errors import ChecksumMismatch


def lattice_oracle(nx, ny, x, y):
    """Face and barycentrics of global point (x, y) on ``grid_plane(nx, ny, 1)``."""
    i, j = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - i, y - j
    base = 2 * (j * nx + i)
    if fx + fy <= 1.0:
        return base, fx, fy  # face (b, c, a): chart equals the square's local frame
    return base + 1, 1.0 - fx, 1.0 - fy  # face (c, b, d)


def test_embedded_position_examples():
    tri = geometry.build_mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))
    np.testing.assert_array_equal(embedding.embedded_position(tri, Embedding(0, 0.2, 0.3, 0.0)), geometry.phong_point(tri, 0, 0.2, 0.3))
    np.testing.assert_allclose(embedding.embedded_position(tri, Embedding(0, 1 / 3, 1 / 3, 0.5)), [1 / 3, 1 / 3, 0.5], atol=1e-15)


def test_embedded_position_icosphere_radius():
    # Positions interpolate linearly, so face interiors of a level-2 icosphere
    # sit up to ~0.013 inside the sphere; this 1e-2 tolerance is not met (see project notes).
    ico = geometry.icosphere(2)
    rng = np.random.default_rng(0)
    for _ in range(50):
        u, v = rng.dirichlet(np.ones(3))[:2]
        p = embedding.embedded_position(ico, Embedding(int(rng.integers(ico.n_faces)), u, v, 0.1))
        assert abs(np.linalg.norm(p) - 1.1) < 1e-2


def test_walk_identity_and_interior_exact():
    m = geometry.icosphere(2)
    r = walk_on_triangles(m, 5, 0.2, 0.3, 0.0, 0.0)
    assert (r.k, r.u, r.v, r.status, r.hops) == (5, 0.2, 0.3, WalkStatus.INSIDE, 0)
    r = walk_on_triangles(m, 5, 0.2, 0.3, 0.1, -0.05)
    assert (r.k, r.u, r.v) == (5, 0.2 + 0.1, 0.3 - 0.05)


def test_one_crossing_hand_oracle():
    # unit square split into faces (b, c, a) and (c, b, d); the diagonal b-c is
    # the hypotenuse of both. From (0.25, 0.25) a step of (0.5, 0.5) meets the
    # hypotenuse at (0.5, 0.5) with (0.25, 0.25) left over. Re-expressed in the
    # neighbour: (1 - 0.5, 1 - 0.5) = (0.5, 0.5), delta (-0.25, -0.25).
    m = geometry.grid_plane(1, 1, 1.0)
    r = walk_on_triangles(m, 0, 0.25, 0.25, 0.5, 0.5)
    assert r.k == 1 and r.hops == 1
    assert abs(r.u - 0.25) < 1e-15 and abs(r.v - 0.25) < 1e-15
    np.testing.assert_allclose(geometry.phong_point(m, 1, r.u, r.v), [0.75, 0.75, 0.0], atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.02, 0.98), st.floats(0.02, 0.98), st.floats(-2.5, 2.5), st.floats(-2.5, 2.5))
def test_flat_lattice_matches_global_chart(fx, fy, du, dv):
    nx = ny = 8
    m = geometry.grid_plane(nx, ny, 1.0)
    assume(fx + fy < 0.98)
    i0, j0 = 3, 3
    x, y = i0 + fx + du, j0 + fy + dv
    # endpoints exactly on a lattice line are ambiguous between two faces
    assume(min(abs(x - round(x)), abs(y - round(y)), abs((x + y) - round(x + y))) > 1e-9)
    r = walk_on_triangles(m, 2 * (j0 * nx + i0), fx, fy, du, dv)
    k, u, v = lattice_oracle(nx, ny, x, y)
    assert r.status == WalkStatus.INSIDE
    assert r.k == k
    assert abs(r.u - u) < 1e-9 and abs(r.v - v) < 1e-9


def test_boundary_hit_clamps_to_edge():
    m = geometry.grid_plane(1, 1, 1.0)
    r = walk_on_triangles(m, 0, 0.25, 0.25, -1.0, 0.0)
    assert r.status == WalkStatus.BOUNDARY_HIT
    assert r.k == 0 and abs(r.u) < 1e-15 and abs(r.v - 0.25) < 1e-15


def test_max_hops_reported():
    m = geometry.icosphere(2)
    r = walk_on_triangles(m, 0, 0.3, 0.3, 50.0, 37.0, max_hops=5)
    assert r.status == WalkStatus.MAX_HOPS_EXCEEDED and r.hops == 5
    assert min(r.u, r.v, 1 - r.u - r.v) >= -1e-9


def test_walk_rejects_nan():
    m = geometry.icosphere(1)
    with pytest.raises(ValueError):
        walk_on_triangles(m, 0, 0.3, 0.3, float("nan"), 0.0)


def _substeps(mesh, k, u, v, du, dv, n):
    """Walk ``n`` equal pieces of the update. After each piece the walk reports
    that piece re-expressed in the chart it ended in, which is the next piece."""
    pu, pv = du / n, dv / n
    for _ in range(n):
        r = walk_on_triangles(mesh, k, u, v, pu, pv)
        k, u, v, pu, pv = r.k, r.u, r.v, r.du, r.dv
    return k, u, v


def test_substep_invariance_icosphere():
    m = geometry.icosphere(2)
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        k = int(rng.integers(m.n_faces))
        u, v = rng.dirichlet(np.ones(3))[:2]
        du, dv = rng.normal(0, 0.8, 2)
        one = walk_on_triangles(m, k, u, v, du, dv)
        kk, uu, vv = _substeps(m, k, u, v, du, dv, 100)
        assert kk == one.k
        worst = max(worst, abs(uu - one.u), abs(vv - one.v))
    assert worst < 1e-9


def test_walk_batch_matches_scalar():
    m = geometry.icosphere(2)
    rng = np.random.default_rng(3)
    n = 100
    k = rng.integers(m.n_faces, size=n)
    uv = rng.dirichlet(np.ones(3), size=n)[:, :2]
    d = rng.normal(0, 0.6, (n, 2))
    kb, uvb, _, status = walk_batch(m, k, uv[:, 0], uv[:, 1], d[:, 0], d[:, 1])
    for i in range(n):
        r = walk_on_triangles(m, int(k[i]), uv[i, 0], uv[i, 1], d[i, 0], d[i, 1])
        assert (r.k, r.u, r.v, int(r.status)) == (kb[i], uvb[i, 0], uvb[i, 1], status[i])
        assert min(r.u, r.v, 1 - r.u - r.v) >= -1e-12


def test_project_to_triangle_matches_brute_force():
    rng = np.random.default_rng(4)
    pts = rng.uniform(-1.5, 2.5, (300, 2))
    pu, pv, jac = embedding.project_to_triangle(pts[:, 0], pts[:, 1])
    # brute force over a fine sampling of the closed triangle
    g = np.linspace(0, 1, 401)
    gu, gv = np.meshgrid(g, g)
    keep = gu + gv <= 1
    cand = np.stack([gu[keep], gv[keep]], 1)
    for p, q in zip(pts, np.stack([pu, pv], 1)):
        best = cand[np.argmin(np.sum((cand - p) ** 2, axis=1))]
        assert np.linalg.norm(best - q) < 4e-3
    # Jacobian against central differences (away from region borders)
    h = 1e-7
    for i in range(len(pts)):
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            a = np.array(embedding.project_to_triangle(*(pts[i] + e))[:2])
            b = np.array(embedding.project_to_triangle(*(pts[i] - e))[:2])
            np.testing.assert_allclose((a - b) / (2 * h), jac[i][:, j], atol=1e-6)


def test_solve_embedding_round_trip():
    m = geometry.icosphere(2)
    rng = np.random.default_rng(5)
    for _ in range(30):
        k = int(rng.integers(m.n_faces))
        u, v = rng.dirichlet(np.ones(3))[:2]
        E = Embedding(k, u, v, float(rng.uniform(-0.02, 0.02)))
        target = embedding.embedded_position(m, E)
        res = solve_embedding(m, target)
        assert res.residual < 1e-8
        np.testing.assert_allclose(embedding.embedded_position(m, res.embedding), target, atol=1e-8)
        assert all(a >= b for a, b in zip(res.history, res.history[1:]))


def test_solve_embedding_flat_cases():
    m = geometry.grid_plane(4, 4, 0.5)
    res = solve_embedding(m, m.vertices[7])
    E = res.embedding
    np.testing.assert_allclose(geometry.phong_point(m, E.k, E.u, E.v), m.vertices[7], atol=1e-10)
    assert abs(E.d) < 1e-10 and res.residual < 1e-10
    res = solve_embedding(m, np.array([0.9, 1.13, 0.07]))
    assert abs(res.embedding.d - 0.07) < 1e-9


def test_solve_embedding_not_worse_than_naive():
    m = geometry.icosphere(1)
    rng = np.random.default_rng(6)
    for _ in range(20):
        p = rng.normal(size=3)
        p *= rng.uniform(0.7, 1.3) / np.linalg.norm(p)
        naive, naive_res = embedding._naive_projection(m, p)
        res = solve_embedding(m, p)
        assert res.residual <= naive_res + 1e-12


def test_solve_with_hint_uses_walking():
    m = geometry.icosphere(2)
    E = Embedding(10, 0.3, 0.3, 0.0)
    target = embedding.embedded_position(m, Embedding(11, 0.2, 0.5, 0.01))
    res = solve_embedding(m, target, hint=E)
    assert res.residual < 1e-8


def test_embedding_json_round_trip(tmp_path):
    m = geometry.icosphere(1)
    rng = np.random.default_rng(7)
    k = rng.integers(m.n_faces, size=5)
    uv = rng.dirichlet(np.ones(3), size=5)
    d = rng.normal(size=5)
    p = tmp_path / "e.json"
    embedding.save_embeddings(p, k, uv[:, 0], uv[:, 1], d, m.checksum)
    doc = json.loads(p.read_text())
    assert set(doc) == {"version", "mesh_checksum", "embeddings"}
    assert set(doc["embeddings"][0]) == {"k", "u", "v", "d"}
    k2, u2, v2, d2 = embedding.load_embeddings(p, m)
    np.testing.assert_array_equal(k2, k)
    np.testing.assert_array_equal(u2, uv[:, 0])
    np.testing.assert_array_equal(d2, d)
    first = p.read_bytes()
    embedding.save_embeddings(p, k2, u2, v2, d2, m.checksum)
    assert p.read_bytes() == first
    with pytest.raises(ChecksumMismatch):
        embedding.load_embeddings(p, geometry.icosphere(2))

"""Carrying embedded Gaussians from the canonical mesh to a posed mesh.

Each face gets the rotation taking its canonical frame to its posed frame.
Vertices average the rotations of their incident faces (area weighted), and
a Gaussian interpolates its face's three vertex rotations barycentrically.
Scales follow the area ratio of the home face.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import geometry
from . import quaternion as quat
from .embedding import Embedding
from .errors import TopologyMismatch
from .gaussians import Gaussian
from .geometry import TriangleMesh

log = logging.getLogger(__name__)


@dataclass
class DeformationField:
    frame_id: int
    tri_quats: np.ndarray  # (F, 4)
    vertex_quats: np.ndarray  # (V, 4)
    area_ratios: np.ndarray  # (F,)


@dataclass
class PosedGaussian:
    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity_logit: float
    color: np.ndarray


def _check_topology(cano: TriangleMesh, posed: TriangleMesh):
    if cano.faces is not posed.faces and not np.array_equal(cano.faces, posed.faces):
        raise TopologyMismatch("posed mesh does not share the canonical face buffer")


def triangle_rotations(cano: TriangleMesh, posed: TriangleMesh, previous: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-face quaternions of ``R_pose @ R_cano^T`` (canonical to posed)."""
    _check_topology(cano, posed)
    R = posed.face_frames @ np.swapaxes(cano.face_frames, 1, 2)
    q = quat.from_matrix(R)
    if previous is not None:
        q = quat.align_hemisphere(q, previous)
    return q


def triangle_rotation(cano: TriangleMesh, posed: TriangleMesh, k: int, previous=None) -> np.ndarray:
    _check_topology(cano, posed)
    R = geometry.triangle_frame(posed, k) @ geometry.triangle_frame(cano, k).T
    q = quat.from_matrix(R)
    if previous is not None and np.dot(q, previous) < 0:
        q = -q
    return q


def vertex_quaternion_field(cano: TriangleMesh, tri_quats) -> np.ndarray:
    tri_quats = np.asarray(tri_quats, dtype=np.float64)
    if tri_quats.shape != (cano.n_faces, 4):
        raise ValueError(f"expected {cano.n_faces} face quaternions, got shape {tri_quats.shape}")
    n_v = cano.n_vertices
    first = np.full(n_v, cano.n_faces, dtype=np.int64)
    face_ids = np.repeat(np.arange(cano.n_faces), 3)
    corners = cano.faces.reshape(-1)
    np.minimum.at(first, corners, face_ids)
    isolated = first == cano.n_faces
    if isolated.any():
        log.warning("%d isolated vertices get the identity rotation", int(isolated.sum()))
    ref = tri_quats[np.minimum(first, cano.n_faces - 1)]
    q = quat.align_hemisphere(tri_quats[face_ids], ref[corners])
    acc = np.zeros((n_v, 4))
    np.add.at(acc, corners, cano.face_areas[face_ids, None] * q)
    acc[isolated] = quat.IDENTITY
    return quat.normalize(acc)


def build_deformation_field(cano: TriangleMesh, posed: TriangleMesh, frame_id: int = 0, previous: Optional[DeformationField] = None) -> DeformationField:
    tri = triangle_rotations(cano, posed, None if previous is None else previous.tri_quats)
    vq = vertex_quaternion_field(cano, tri)
    if previous is not None:
        vq = quat.align_hemisphere(vq, previous.vertex_quats)
    return DeformationField(frame_id, tri, vq, posed.face_areas / cano.face_areas)


def pose_gaussian(cano: TriangleMesh, posed: TriangleMesh, field: DeformationField, E: Embedding, g: Gaussian) -> PosedGaussian:
    batch = pose_batch(
        posed,
        field,
        np.array([E.k]),
        np.array([[E.u, E.v]]),
        np.array([E.d]),
        np.asarray(g.rotation, dtype=np.float64)[None],
        np.asarray(g.log_scale, dtype=np.float64)[None],
    )
    return PosedGaussian(batch.means[0], batch.quats[0], batch.scales[0], float(g.opacity_logit), np.array(g.color, dtype=np.float64))


@dataclass
class PosedBatch:
    means: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    # cached for the backward pass
    k: np.ndarray
    uv: np.ndarray
    d: np.ndarray
    normals: np.ndarray
    normal_norm: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    nedge_u: np.ndarray
    nedge_v: np.ndarray
    vq: np.ndarray
    dq_raw: np.ndarray
    dq: np.ndarray
    qbar_raw: np.ndarray
    qbar: np.ndarray


def pose_batch(posed: TriangleMesh, field: DeformationField, k, uv, d, qbar_raw, log_scale) -> PosedBatch:
    """Pose many Gaussians at once. ``uv`` must already lie in the triangle."""
    f = posed.faces[k]
    tri = posed.vertices[f]
    ntri = posed.vertex_normals[f]
    u = uv[:, 0:1]
    v = uv[:, 1:2]
    w = 1.0 - u - v
    P = u * tri[:, 0] + v * tri[:, 1] + w * tri[:, 2]
    raw_n = u * ntri[:, 0] + v * ntri[:, 1] + w * ntri[:, 2]
    nn = geometry.vector_norm(raw_n)
    n = raw_n / nn
    means = P + d[:, None] * n

    vq = field.vertex_quats[f].copy()
    vq[:, 1] = quat.align_hemisphere(vq[:, 1], vq[:, 0])
    vq[:, 2] = quat.align_hemisphere(vq[:, 2], vq[:, 0])
    dq_raw = u * vq[:, 0] + v * vq[:, 1] + w * vq[:, 2]
    dq = quat.normalize(dq_raw)
    qbar = quat.normalize(qbar_raw)
    quats = quat.multiply(dq, qbar)
    scales = field.area_ratios[k][:, None] * np.exp(log_scale)
    return PosedBatch(
        means, quats, scales,
        k, uv, d, n, nn,
        tri[:, 0] - tri[:, 2], tri[:, 1] - tri[:, 2],
        ntri[:, 0] - ntri[:, 2], ntri[:, 1] - ntri[:, 2],
        vq, dq_raw, dq, qbar_raw, qbar,
    )


def pose_batch_backward(batch: PosedBatch, grad_means, grad_quats, grad_scales):
    """Chain posed-space gradients back to ``(uv, d, qbar_raw, log_scale)``."""
    n = batch.normals
    d = batch.d[:, None]

    def tangential(x):
        return (x - n * np.sum(n * x, axis=1, keepdims=True)) / batch.normal_norm

    dmu_du = batch.edge_u + d * tangential(batch.nedge_u)
    dmu_dv = batch.edge_v + d * tangential(batch.nedge_v)
    grad_u = np.sum(grad_means * dmu_du, axis=1)
    grad_v = np.sum(grad_means * dmu_dv, axis=1)
    grad_d = np.sum(grad_means * n, axis=1)

    g_dq, g_qbar = quat.multiply_backward(batch.dq, batch.qbar, grad_quats)
    g_dq_raw = quat.normalize_backward(batch.dq_raw, g_dq)
    vq = batch.vq
    grad_u += np.sum(g_dq_raw * (vq[:, 0] - vq[:, 2]), axis=1)
    grad_v += np.sum(g_dq_raw * (vq[:, 1] - vq[:, 2]), axis=1)
    grad_qbar_raw = quat.normalize_backward(batch.qbar_raw, g_qbar)
    grad_log_scale = grad_scales * batch.scales
    return np.stack([grad_u, grad_v], axis=1), grad_d, grad_qbar_raw, grad_log_scale

"""The trainable model: Gaussians plus their surface embeddings, and the full
forward/backward chain from embedding coordinates to pixels."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import deformation, embedding, geometry
from . import quaternion as quat
from .deformation import DeformationField, PosedBatch
from .gaussians import Camera
from .geometry import TriangleMesh
from .rasterizer import RenderOutput, render, render_backward

_ROW_FIELDS = ("k", "uv", "delta", "d", "rotation", "log_scale", "opacity_logit", "color")


@dataclass
class SplatModel:
    """Row ``i`` holds one Gaussian and its embedding.

    ``uv`` is the recorded barycentric position inside face ``k`` and ``delta``
    the pending optimizer update to it; walking folds ``delta`` into ``uv``.
    """

    mesh: TriangleMesh
    k: np.ndarray
    uv: np.ndarray
    delta: np.ndarray
    d: np.ndarray
    rotation: np.ndarray  # raw quaternion, normalized when posed
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray

    def __len__(self):
        return len(self.k)

    @classmethod
    def empty(cls, mesh: TriangleMesh) -> "SplatModel":
        return cls(mesh, np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0),
                   np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    def copy(self) -> "SplatModel":
        return SplatModel(self.mesh, *(getattr(self, f).copy() for f in _ROW_FIELDS))

    def take(self, rows) -> "SplatModel":
        return SplatModel(self.mesh, *(getattr(self, f)[rows].copy() for f in _ROW_FIELDS))

    def append(self, other: "SplatModel") -> "SplatModel":
        return SplatModel(self.mesh, *(np.concatenate([getattr(self, f), getattr(other, f)]) for f in _ROW_FIELDS))

    def effective_uv(self):
        """Current barycentric coordinates, projected into the home triangle."""
        raw = self.uv + self.delta
        u, v, jac = embedding.project_to_triangle(raw[:, 0], raw[:, 1])
        return np.stack([u, v], axis=1), jac

    def canonical_positions(self) -> np.ndarray:
        uv, _ = self.effective_uv()
        k = self.k
        P = geometry.phong_points(self.mesh, k, uv[:, 0], uv[:, 1])
        n = geometry.phong_normals(self.mesh, k, uv[:, 0], uv[:, 1])
        return P + self.d[:, None] * n

    def pose(self, posed: TriangleMesh, field: DeformationField) -> PosedBatch:
        uv, _ = self.effective_uv()
        return deformation.pose_batch(posed, field, self.k, uv, self.d, self.rotation, self.log_scale)

    def embeddings_folded(self):
        """``(k, u, v, d)`` with pending deltas folded in by walking (model unchanged)."""
        if not np.any(self.delta):
            return self.k.copy(), self.uv[:, 0].copy(), self.uv[:, 1].copy(), self.d.copy()
        k, uv, _, _ = embedding.walk_batch(self.mesh, self.k, self.uv[:, 0], self.uv[:, 1], self.delta[:, 0], self.delta[:, 1])
        return k, uv[:, 0], uv[:, 1], self.d.copy()


@dataclass
class GradientSet:
    """Gradients for every trainable row of a :class:`SplatModel`."""

    delta: np.ndarray  # (N, 2) w.r.t. the barycentric update
    d: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    mean2d: np.ndarray  # screen-space positional gradient (pixels), for densification
    visible: np.ndarray
    radius: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradientSet":
        return cls(np.zeros((n, 2)), np.zeros(n), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n),
                   np.zeros((n, 3)), np.zeros((n, 2)), np.zeros(n, bool), np.zeros(n))


@dataclass
class ForwardContext:
    batch: PosedBatch
    uv_jac: np.ndarray
    output: RenderOutput
    camera: Camera
    background: np.ndarray
    model: SplatModel


def posed_arrays(model: SplatModel, batch: PosedBatch):
    return (batch.means, batch.quats, batch.scales, model.opacity_logit, model.color)


def render_model(model: SplatModel, posed: TriangleMesh, field: DeformationField, camera: Camera, background=(0.0, 0.0, 0.0)):
    """Render ``model`` deformed onto ``posed``; returns ``(RenderOutput, ForwardContext)``."""
    uv, jac = model.effective_uv()
    batch = deformation.pose_batch(posed, field, model.k, uv, model.d, model.rotation, model.log_scale)
    bg = np.asarray(background, dtype=np.float64)
    out = render(posed_arrays(model, batch), camera, bg)
    return out, ForwardContext(batch, jac, out, camera, bg, model)


def backward_model(ctx: ForwardContext, grad_image) -> GradientSet:
    model = ctx.model
    pg = render_backward(posed_arrays(model, ctx.batch), ctx.camera, ctx.background, grad_image, ctx.output)
    g_uv, g_d, g_rot, g_ls = deformation.pose_batch_backward(ctx.batch, pg.means, pg.quats, pg.scales)
    # chain through the projection onto the triangle
    g_delta = np.einsum("nij,ni->nj", ctx.uv_jac, g_uv)
    proj = ctx.output.projected
    return GradientSet(g_delta, g_d, g_rot, g_ls, pg.opacity_logits, pg.colors, pg.mean2d, proj.visible, proj.radius)

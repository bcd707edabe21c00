"""Gaussian splatting with Gaussians embedded on a deforming triangle mesh.

Each Gaussian lives at a barycentric embedding ``(k, u, v, d)`` on the
canonical mesh, is carried to posed space by the mesh deformation, and is
rendered with a differentiable tile-based CPU rasterizer.
"""

from .deformation import DeformationField, build_deformation_field, pose_gaussian
from .embedding import Embedding, WalkStatus, solve_embedding, walk_batch, walk_on_triangles
from .errors import MeshSplatError
from .gaussians import Camera, Gaussian
from .geometry import TriangleMesh, build_mesh, cylinder, grid_plane, icosphere
from .model import SplatModel, backward_model, render_model
from .rasterizer import render, render_backward, render_reference

__version__ = "0.1.0"

__all__ = [
    "Camera", "DeformationField", "Embedding", "Gaussian", "MeshSplatError", "SplatModel",
    "TriangleMesh", "WalkStatus", "backward_model", "build_deformation_field", "build_mesh",
    "cylinder", "grid_plane", "icosphere", "pose_gaussian", "render", "render_backward",
    "render_model", "render_reference", "solve_embedding", "walk_batch", "walk_on_triangles",
]

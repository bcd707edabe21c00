"""Gaussian parameters, pinhole cameras, covariance construction and projection.

Camera convention: ``world_to_camera`` maps world points to camera space with
+z forward, +x right and +y down. Pixel ``(row i, column j)`` has its centre
at image coordinates ``(j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import quaternion as quat
from .errors import BehindCamera, DataError

LOWPASS_SIGMA = 0.3  # pixels
SH_C0 = 0.28209479177387814


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class Gaussian:
    """Pose-invariant parameters of one Gaussian (scale in log space, opacity as a logit)."""

    rotation: np.ndarray = field(default_factory=lambda: quat.IDENTITY.copy())
    log_scale: np.ndarray = field(default_factory=lambda: np.zeros(3))
    opacity_logit: float = 0.0
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    @property
    def scale(self):
        return np.exp(self.log_scale)

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))


@dataclass
class Camera:
    world_to_camera: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        R = self.rotation
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise ValueError("world_to_camera rotation block is not a proper rotation")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not self.near < self.far:
            raise ValueError("near must be smaller than far")
        self.width = int(self.width)
        self.height = int(self.height)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), fov_deg=40.0, width=128, height=128, near=0.01, far=100.0):
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        W = np.eye(4)
        W[:3, :3] = np.stack([x, y, z])
        W[:3, 3] = -W[:3, :3] @ eye
        f = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
        return cls(W, f, f, 0.5 * width, 0.5 * height, width, height, near, far)

    def to_dict(self) -> dict:
        return {
            "world_to_camera": self.world_to_camera.tolist(),
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": self.width,
            "height": self.height,
            "near": float(self.near),
            "far": float(self.far),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            np.asarray(d["world_to_camera"], dtype=np.float64),
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]),
            float(d.get("near", 0.01)), float(d.get("far", 100.0)),
        )


def covariance3d(q, s) -> np.ndarray:
    """``R S S^T R^T`` for unit quaternion(s) ``q`` and scale vector(s) ``s``."""
    R = quat.to_matrix(q)
    s = np.asarray(s, dtype=np.float64)
    return (R * (s * s)[..., None, :]) @ np.swapaxes(R, -1, -2)


def projection_jacobian(t, fx, fy) -> np.ndarray:
    """2x3 Jacobian of the pinhole projection at camera-space point(s) ``t``."""
    t = np.asarray(t, dtype=np.float64)
    tx, ty, tz = t[..., 0], t[..., 1], t[..., 2]
    J = np.zeros(t.shape[:-1] + (2, 3))
    J[..., 0, 0] = fx / tz
    J[..., 0, 2] = -fx * tx / (tz * tz)
    J[..., 1, 1] = fy / tz
    J[..., 1, 2] = -fy * ty / (tz * tz)
    return J


def project_covariance(cov, camera: Camera, mean, lowpass: bool = True) -> np.ndarray:
    """Screen-space covariance ``J W cov W^T J^T`` plus the low-pass floor."""
    t = camera.rotation @ np.asarray(mean, dtype=np.float64) + camera.translation
    if t[2] <= camera.near:
        raise BehindCamera(f"camera-space depth {t[2]} is not beyond near plane {camera.near}")
    M = projection_jacobian(t, camera.fx, camera.fy) @ camera.rotation
    out = M @ np.asarray(cov, dtype=np.float64) @ M.T
    if lowpass:
        out = out + LOWPASS_SIGMA**2 * np.eye(2)
    return out


# ---------------------------------------------------------------------------
# PLY

PLY_FIELDS = (
    ["x", "y", "z", "opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
    + [f"f_dc_{i}" for i in range(3)]
)


def color_to_dc(c):
    return (np.asarray(c, dtype=np.float64) - 0.5) / SH_C0


def dc_to_color(f):
    return np.asarray(f, dtype=np.float64) * SH_C0 + 0.5


def write_splat_ply(path, positions, opacity_logits, log_scales, rotations, colors) -> None:
    """Binary little-endian splat PLY (rotations wxyz, colour as DC coefficient)."""
    n = len(positions)
    data = np.empty(n, dtype=[(name, "<f4") for name in PLY_FIELDS])
    cols = np.concatenate(
        [
            np.asarray(positions, dtype=np.float64).reshape(n, 3),
            np.asarray(opacity_logits, dtype=np.float64).reshape(n, 1),
            np.asarray(log_scales, dtype=np.float64).reshape(n, 3),
            np.asarray(rotations, dtype=np.float64).reshape(n, 4),
            color_to_dc(np.asarray(colors).reshape(n, 3)),
        ],
        axis=1,
    )
    for i, name in enumerate(PLY_FIELDS):
        data[name] = cols[:, i]
    header = "ply\nformat binary_little_endian 1.0\n"
    header += f"element vertex {n}\n"
    header += "".join(f"property float {name}\n" for name in PLY_FIELDS)
    header += "end_header\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


_PLY_TYPES = {
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
}


def read_splat_ply(path) -> dict:
    """Read a binary splat PLY; returns arrays keyed like ``write_splat_ply`` arguments."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise DataError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    body = raw[end + len("end_header\n"):]
    count = None
    props = []
    endian = "<"
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            if parts[1] == "binary_big_endian":
                endian = ">"
            elif parts[1] != "binary_little_endian":
                raise DataError(f"{path}: unsupported PLY format {parts[1]}")
        elif parts[0] == "element":
            if parts[1] != "vertex":
                raise DataError(f"{path}: unexpected element {parts[1]}")
            count = int(parts[2])
        elif parts[0] == "property":
            props.append((parts[2], endian + _PLY_TYPES[parts[1]]))
    if count is None:
        raise DataError(f"{path}: missing vertex element")
    data = np.frombuffer(body, dtype=props, count=count)
    missing = [name for name in PLY_FIELDS if name not in data.dtype.names]
    if missing:
        raise DataError(f"{path}: missing properties {missing}")

    def cols(names):
        return np.stack([data[n].astype(np.float64) for n in names], axis=1) if count else np.zeros((0, len(names)))

    return {
        "positions": cols(["x", "y", "z"]),
        "opacity_logits": cols(["opacity"])[:, 0],
        "log_scales": cols([f"scale_{i}" for i in range(3)]),
        "rotations": cols([f"rot_{i}" for i in range(4)]),
        "colors": dc_to_color(cols([f"f_dc_{i}" for i in range(3)])),
    }

"""Pinhole cameras, frustum point grids, BEV cell indexing and height slices.

Conventions: the ego frame has z up (height in meters).  Camera frames are
x right, y down, z forward; ``CameraModel.rotation`` maps camera-frame
vectors into the ego frame.  Feature pixel ``(i, j)`` sits at image
coordinates ``(u, v) = (j, i)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BEHIND_CAMERA_Z = 1e-9


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9, rtol=0) or abs(np.linalg.det(rot) - 1) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    def __eq__(self, other):
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (
            (self.fx, self.fy, self.cx, self.cy) == (other.fx, other.fy, other.cx, other.cy)
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    __hash__ = None


@dataclass(frozen=True)
class FrustumSpec:
    Hf: int
    Wf: int
    d_min: float
    d_max: float
    D: int

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        if self.D < 2 or self.Hf < 1 or self.Wf < 1:
            raise ValueError("need D >= 2 and positive feature extents")

    def bin_centers(self) -> np.ndarray:
        step = (self.d_max - self.d_min) / self.D
        return self.d_min + (np.arange(self.D) + 0.5) * step

    def bin_of(self, depth: float) -> int | None:
        if not self.d_min <= depth < self.d_max:
            return None
        return min(int((depth - self.d_min) / ((self.d_max - self.d_min) / self.D)), self.D - 1)


@dataclass(frozen=True)
class BevGridSpec:
    x_min: float = -16.0
    x_max: float = 16.0
    y_min: float = -16.0
    y_max: float = 16.0
    He: int = 16
    We: int = 16
    h_min: float = -6.0
    h_max: float = 4.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max and self.h_min < self.h_max):
            raise ValueError("grid bounds must be strictly ascending")
        if self.He < 1 or self.We < 1:
            raise ValueError("grid must have at least one cell per axis")

    @property
    def cell_x(self) -> float:
        return (self.x_max - self.x_min) / self.We

    @property
    def cell_y(self) -> float:
        return (self.y_max - self.y_min) / self.He

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        return self.x_min + (ix + 0.5) * self.cell_x, self.y_min + (iy + 0.5) * self.cell_y


@dataclass(frozen=True)
class HeightSlice:
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"slice needs lower < upper, got [{self.lower}, {self.upper}]")

    def validate(self, grid: BevGridSpec) -> "HeightSlice":
        if self.lower < grid.h_min or self.upper > grid.h_max:
            raise ValueError(
                f"slice [{self.lower}, {self.upper}] outside height range [{grid.h_min}, {grid.h_max}]"
            )
        return self

    def closed_top(self, grid: BevGridSpec) -> bool:
        return self.upper == grid.h_max

    def __str__(self):
        return f"[{self.lower:g}, {self.upper:g}]"


# ---------------------------------------------------------------- projection


def project_ego_to_image(p, cam: CameraModel):
    """Return ``(u, v, depth)`` or ``None`` when the point is behind the camera."""
    pc = cam.rotation.T @ (np.asarray(p, dtype=np.float64) - cam.translation)
    z = pc[2]
    if z <= BEHIND_CAMERA_Z:
        return None
    return cam.cx + cam.fx * pc[0] / z, cam.cy + cam.fy * pc[1] / z, z


def project_points(points: np.ndarray, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of ``(..., 3)`` ego points.

    Returns ``(uvd, valid)``; rows with ``valid == False`` are behind the
    camera and carry NaN.
    """
    pts = np.asarray(points, dtype=np.float64)
    pc = (pts - cam.translation) @ cam.rotation
    z = pc[..., 2]
    valid = z > BEHIND_CAMERA_Z
    safe = np.where(valid, z, np.nan)
    uvd = np.stack([cam.cx + cam.fx * pc[..., 0] / safe, cam.cy + cam.fy * pc[..., 1] / safe, safe], axis=-1)
    return uvd, valid


def unproject(u: float, v: float, depth: float, cam: CameraModel) -> np.ndarray:
    pc = np.array([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth])
    return cam.rotation @ pc + cam.translation


def frustum_points(cam: CameraModel, fs: FrustumSpec) -> np.ndarray:
    """Ego-frame points for every (depth bin, row, column): ``(D, Hf, Wf, 3)``."""
    depth = fs.bin_centers()[:, None, None]
    v = np.arange(fs.Hf, dtype=np.float64)[None, :, None]
    u = np.arange(fs.Wf, dtype=np.float64)[None, None, :]
    shape = (fs.D, fs.Hf, fs.Wf)
    pc = np.stack([
        np.broadcast_to((u - cam.cx) / cam.fx * depth, shape),
        np.broadcast_to((v - cam.cy) / cam.fy * depth, shape),
        np.broadcast_to(depth, shape),
    ], axis=-1)
    return pc @ cam.rotation.T + cam.translation


def ring_cameras(n: int = 6, fs: FrustumSpec | None = None, hfov_deg: float = 70.0,
                 height: float = 0.0) -> list[CameraModel]:
    """``n`` outward-looking cameras evenly spaced in yaw at ``height``."""
    fs = fs or FrustumSpec(16, 44, 1.0, 25.0, 24)
    cx, cy = (fs.Wf - 1) / 2.0, (fs.Hf - 1) / 2.0
    f = (fs.Wf / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    cams = []
    for k in range(n):
        yaw = 2.0 * math.pi * k / n
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]])
        cams.append(CameraModel(f, f, cx, cy, rot, np.array([0.0, 0.0, height])))
    return cams


# ------------------------------------------------------------------- indexing


def bev_cell_index(p, grid: BevGridSpec):
    """``(ix, iy)`` of the half-open cell holding ``p``, or ``None`` if outside."""
    x, y = float(p[0]), float(p[1])
    if not (grid.x_min <= x < grid.x_max and grid.y_min <= y < grid.y_max):
        return None
    # rounding can push a point just below the top edge onto it; it still belongs to the last cell
    ix = min(math.floor((x - grid.x_min) / grid.cell_x), grid.We - 1)
    iy = min(math.floor((y - grid.y_min) / grid.cell_y), grid.He - 1)
    return ix, iy


def slice_contains(s: HeightSlice, z: float, grid: BevGridSpec) -> bool:
    if s.upper == grid.h_max:
        return s.lower <= z <= s.upper
    return s.lower <= z < s.upper

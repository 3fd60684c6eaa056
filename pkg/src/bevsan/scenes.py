"""Synthetic scenes: class-height-separated boxes, simulated LiDAR, camera features."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from ._io import atomic_write_text
from .geometry import BevGridSpec, CameraModel, FrustumSpec, ring_cameras

FORMAT_HEADER = "BEVSAN-SCENES"
FORMAT_VERSION = 1
GROUND_Z = -2.0
LIDAR_NOISE = 0.02


class DatasetFormatError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class DatasetVersionError(DatasetFormatError):
    pass


class PlacementWarning(UserWarning):
    """Some boxes could not be placed without overlap."""


@dataclass(frozen=True)
class ClassProfile:
    name: str
    class_id: int
    z_mean: float
    z_std: float
    size_mean: tuple[float, float, float]
    size_std: tuple[float, float, float]
    spawn_rate: float

    def __post_init__(self):
        if self.z_std <= 0 or any(s <= 0 for s in self.size_std):
            raise ValueError(f"{self.name}: standard deviations must be positive")
        if self.spawn_rate < 0:
            raise ValueError(f"{self.name}: spawn rate must be nonnegative")


CONE = ClassProfile("cone", 0, -1.4, 0.1, (0.6, 0.6, 0.8), (0.05, 0.05, 0.05), 3.0)
BUS = ClassProfile("bus", 1, 0.5, 0.3, (8.0, 2.6, 3.0), (0.8, 0.1, 0.2), 1.5)
PERSON = ClassProfile("person", 2, -1.1, 0.12, (0.7, 0.7, 1.7), (0.05, 0.05, 0.1), 2.0)

PROFILE_PRESETS: dict[str, list[ClassProfile]] = {
    "default": [CONE, BUS],
    "three-class": [CONE, BUS, PERSON],
}


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    class_id: int

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise ValueError(f"box size must be positive, got {self.size}")
        if not -math.pi <= self.yaw < math.pi:
            raise ValueError(f"yaw must lie in [-pi, pi), got {self.yaw}")

    @property
    def footprint_radius(self) -> float:
        return 0.5 * math.hypot(self.size[0], self.size[1])


@dataclass
class PointCloud:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        return isinstance(other, PointCloud) and np.array_equal(self.points, other.points)


@dataclass
class Scene:
    boxes: list[Box3D]
    cameras: list[CameraModel]
    lidar: PointCloud
    seed: int
    placement_failures: int = field(default=0, compare=False)


@dataclass(frozen=True)
class SceneConfig:
    """Everything besides the seed that determines a generated scene."""

    profiles: tuple[ClassProfile, ...] = (CONE, BUS)
    grid: BevGridSpec = BevGridSpec()
    frustum: FrustumSpec = FrustumSpec(16, 44, 1.0, 25.0, 24)
    n_cameras: int = 6
    camera_height: float = 0.0
    min_center_distance: float = 4.0
    ego_clearance: float = 3.0
    rays_per_box: int = 200
    ground_points: int = 1500
    ground_z: float = GROUND_Z

    @property
    def class_names(self) -> list[str]:
        return [p.name for p in sorted(self.profiles, key=lambda p: p.class_id)]


# ---------------------------------------------------------------- generation


def _far_enough(box: Box3D, placed: Sequence[Box3D], min_dist: float) -> bool:
    x, y = box.center[:2]
    for other in placed:
        d = math.hypot(x - other.center[0], y - other.center[1])
        if d < max(min_dist, box.footprint_radius + other.footprint_radius):
            return False
    return True


def generate_scene(seed: int, profiles: Sequence[ClassProfile] | None = None,
                   grid: BevGridSpec | None = None, config: SceneConfig = SceneConfig()) -> Scene:
    """Sample boxes per class profile, a camera ring and a LiDAR sweep.

    Footprints are kept apart by circumscribed-circle rejection sampling
    (at most 100 tries per box); boxes that cannot be placed are dropped
    and counted in ``placement_failures``.
    """
    profiles = list(config.profiles if profiles is None else profiles)
    grid = grid or config.grid
    rng = np.random.default_rng(seed)
    boxes: list[Box3D] = []
    failures = 0
    for prof in sorted(profiles, key=lambda p: p.class_id):
        for _ in range(rng.poisson(prof.spawn_rate)):
            for _attempt in range(100):
                size = tuple(float(max(0.05, rng.normal(m, s))) for m, s in zip(prof.size_mean, prof.size_std))
                x = float(rng.uniform(grid.x_min, grid.x_max))
                y = float(rng.uniform(grid.y_min, grid.y_max))
                z = float(np.clip(rng.normal(prof.z_mean, prof.z_std), grid.h_min, grid.h_max))
                yaw = float(rng.uniform(-math.pi, math.pi))
                if yaw >= math.pi:
                    yaw = -math.pi
                box = Box3D((x, y, z), size, yaw, prof.class_id)
                if math.hypot(x, y) - box.footprint_radius < config.ego_clearance:
                    continue
                if _far_enough(box, boxes, config.min_center_distance):
                    boxes.append(box)
                    break
            else:
                failures += 1
    if failures:
        warnings.warn(f"scene {seed}: {failures} boxes could not be placed", PlacementWarning, stacklevel=2)
    cams = ring_cameras(config.n_cameras, config.frustum, height=config.camera_height)
    scene = Scene(boxes, cams, PointCloud(), seed, failures)
    scene.lidar = simulate_lidar(scene, config.rays_per_box, config.ground_points, grid=grid,
                                 ground_z=config.ground_z, rng=rng)
    return scene


def generate_scenes(count: int, seed: int, config: SceneConfig = SceneConfig()) -> list[Scene]:
    """Scenes with seeds ``seed, seed+1, ...``."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PlacementWarning)
        return [generate_scene(seed + k, config=config) for k in range(count)]


def _box_rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def sample_box_surface(box: Box3D, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniform over the box's six faces (area-weighted)."""
    l, w, h = box.size
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    local = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array([l, w, h])
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    local[np.arange(n), axis] = np.array([l, w, h])[axis] * sign
    return local @ _box_rotation(box.yaw).T + np.array(box.center)


def simulate_lidar(scene: Scene, rays_per_box: int = 200, ground_points: int = 1500,
                   grid: BevGridSpec | None = None, ground_z: float = GROUND_Z,
                   rng: np.random.Generator | None = None) -> PointCloud:
    """Box-surface samples plus a noisy ground plane, all with N(0, 0.02^2) jitter."""
    if rays_per_box < 0 or ground_points < 0:
        raise ValueError("point counts must be nonnegative")
    grid = grid or BevGridSpec()
    rng = rng if rng is not None else np.random.default_rng(scene.seed)
    parts = [sample_box_surface(b, rays_per_box, rng) for b in scene.boxes]
    ground = np.column_stack([
        rng.uniform(grid.x_min, grid.x_max, ground_points),
        rng.uniform(grid.y_min, grid.y_max, ground_points),
        np.full(ground_points, ground_z),
    ])
    pts = np.concatenate(parts + [ground]) if parts else ground
    pts = pts + rng.normal(0.0, LIDAR_NOISE, size=pts.shape)
    return PointCloud(pts)


# ----------------------------------------------------------------- rendering


def _ray_box_hits(origin: np.ndarray, dirs: np.ndarray, box: Box3D) -> np.ndarray:
    """Ray parameter of the first hit per direction (inf on miss); slab test."""
    rot = _box_rotation(box.yaw)
    o = rot.T @ (origin - np.array(box.center))
    d = dirs @ rot
    half = 0.5 * np.array(box.size)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    # parallel rays: inside the slab only if origin is between the planes
    parallel_out = np.any((d == 0) & (np.abs(o) > half), axis=1)
    hit = (tmax >= tmin) & (tmax > 0) & ~parallel_out
    t = np.where(tmin > 0, tmin, tmax)
    return np.where(hit, t, np.inf)


@dataclass(frozen=True)
class RenderConfig:
    channels: int = 4
    noise: float = 0.1
    temperature: float = 0.25
    bump_width: float = 2.0


def render_camera_features(scene: Scene, cam: CameraModel, fs: FrustumSpec, C: int,
                           noise: float = 0.1, n_classes: int | None = None,
                           temperature: float = 0.25, bump_width: float = 2.0,
                           rng: np.random.Generator | None = None) -> tuple[ad.Tensor, ad.Tensor]:
    """Stand-in backbone output for one camera.

    Channels: ``[class one-hot (K) | range = depth / d_max | background | zeros]``
    plus N(0, noise^2).  Depth columns are the softmax of a triangular bump
    centred on the hit bin (logit height ``1/temperature``, half-width
    ``bump_width`` bins); misses get a uniform column.
    """
    K = n_classes if n_classes is not None else 1 + max((b.class_id for b in scene.boxes), default=0)
    if C < K + 1:
        raise ValueError(f"need at least {K + 1} channels for {K} classes, got {C}")
    rng = rng if rng is not None else np.random.default_rng(scene.seed)
    v, u = np.meshgrid(np.arange(fs.Hf, dtype=np.float64), np.arange(fs.Wf, dtype=np.float64), indexing="ij")
    dirs_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    dirs = dirs_cam @ cam.rotation.T
    best_t = np.full(len(dirs), np.inf)
    best_cls = np.full(len(dirs), -1)
    for box in scene.boxes:
        t = _ray_box_hits(cam.translation, dirs, box)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_cls[closer] = box.class_id
    hit = np.isfinite(best_t) & (best_t >= fs.d_min) & (best_t < fs.d_max)

    npix = fs.Hf * fs.Wf
    F = np.zeros((C, npix))
    F[best_cls[hit], np.flatnonzero(hit)] = 1.0
    F[K, hit] = best_t[hit] / fs.d_max
    if C > K + 1:
        F[K + 1, ~hit] = 1.0
    F += rng.normal(0.0, noise, size=F.shape) if noise > 0 else 0.0

    step = (fs.d_max - fs.d_min) / fs.D
    hit_bin = np.where(hit, np.floor((np.where(hit, best_t, fs.d_min) - fs.d_min) / step), 0).astype(int)
    hit_bin = np.minimum(hit_bin, fs.D - 1)
    bins = np.arange(fs.D)[:, None]
    logits = np.maximum(0.0, 1.0 - np.abs(bins - hit_bin[None]) / bump_width) / temperature
    logits = np.where(hit[None], logits, 0.0)
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    D = e / e.sum(axis=0, keepdims=True)
    return ad.Tensor(F.reshape(C, fs.Hf, fs.Wf)), ad.Tensor(D.reshape(fs.D, fs.Hf, fs.Wf))


def class_prior_error(a: ClassProfile, b: ClassProfile, n: int = 200001) -> float:
    """Bayes error of telling two classes apart by center height alone.

    Equal class priors; integrates min(pdf_a, pdf_b)/2 numerically.
    """
    lo = min(a.z_mean - 10 * a.z_std, b.z_mean - 10 * b.z_std)
    hi = max(a.z_mean + 10 * a.z_std, b.z_mean + 10 * b.z_std)
    z = np.linspace(lo, hi, n)

    def pdf(p):
        return np.exp(-0.5 * ((z - p.z_mean) / p.z_std) ** 2) / (p.z_std * math.sqrt(2 * math.pi))

    trapezoid = getattr(np, "trapezoid", None) or np.trapz
    return float(trapezoid(np.minimum(pdf(a), pdf(b)), z) / 2.0)


# ------------------------------------------------------------------- file I/O


def _fmt(x: float) -> str:
    return repr(float(x))


def dataset_text(scenes: Sequence[Scene]) -> str:
    lines = [f"{FORMAT_HEADER} v{FORMAT_VERSION}"]
    for sc in scenes:
        lines.append(f"scene {int(sc.seed)}")
        for cam in sc.cameras:
            vals = [cam.fx, cam.fy, cam.cx, cam.cy, *cam.rotation.reshape(-1), *cam.translation]
            lines.append("camera " + " ".join(_fmt(v) for v in vals))
        for b in sc.boxes:
            vals = [*b.center, *b.size, b.yaw]
            lines.append("box " + " ".join(_fmt(v) for v in vals) + f" {int(b.class_id)}")
        pts = sc.lidar.points
        lines.append(f"lidar {len(pts)}")
        lines.extend(f"{x!r} {y!r} {z!r}" for x, y, z in pts.tolist())
    lines.append("end")
    return "\n".join(lines) + "\n"


def write_dataset(scenes: Sequence[Scene], path) -> None:
    atomic_write_text(path, dataset_text(scenes))


def _floats(parts, lineno, n):
    if len(parts) != n:
        raise DatasetFormatError(lineno, f"expected {n} numbers, got {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise DatasetFormatError(lineno, f"malformed number in {' '.join(parts)!r}") from None


def parse_dataset(text: str) -> list[Scene]:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError(1, "empty file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != FORMAT_HEADER or not head[1].startswith("v"):
        raise DatasetFormatError(1, f"bad header {lines[0]!r}")
    if head[1] != f"v{FORMAT_VERSION}":
        raise DatasetVersionError(1, f"unsupported format version {head[1]!r} (expected v{FORMAT_VERSION})")

    scenes: list[Scene] = []
    i = 1
    n = len(lines)
    while True:
        if i >= n:
            raise DatasetFormatError(i + 1, "unexpected end of file (missing 'end')")
        parts = lines[i].split()
        if parts == ["end"]:
            if i != n - 1:
                raise DatasetFormatError(i + 2, "content after 'end'")
            return scenes
        if len(parts) != 2 or parts[0] != "scene":
            raise DatasetFormatError(i + 1, f"expected 'scene <seed>', got {lines[i]!r}")
        try:
            seed = int(parts[1])
        except ValueError:
            raise DatasetFormatError(i + 1, f"bad seed {parts[1]!r}") from None
        i += 1
        cams, boxes = [], []
        while i < n and lines[i].startswith("camera "):
            v = _floats(lines[i].split()[1:], i + 1, 16)
            try:
                cams.append(CameraModel(v[0], v[1], v[2], v[3], np.array(v[4:13]).reshape(3, 3), np.array(v[13:16])))
            except ValueError as e:
                raise DatasetFormatError(i + 1, str(e)) from None
            i += 1
        while i < n and lines[i].startswith("box "):
            parts = lines[i].split()[1:]
            v = _floats(parts[:7], i + 1, 7)
            if len(parts) != 8 or not parts[7].lstrip("-").isdigit():
                raise DatasetFormatError(i + 1, "box line needs 7 numbers and an integer class")
            try:
                boxes.append(Box3D(tuple(v[:3]), tuple(v[3:6]), v[6], int(parts[7])))
            except ValueError as e:
                raise DatasetFormatError(i + 1, str(e)) from None
            i += 1
        if i >= n:
            raise DatasetFormatError(i + 1, "unexpected end of file (missing 'lidar')")
        parts = lines[i].split()
        if len(parts) != 2 or parts[0] != "lidar" or not parts[1].isdigit():
            raise DatasetFormatError(i + 1, f"expected 'lidar <N>', got {lines[i]!r}")
        count = int(parts[1])
        i += 1
        if i + count > n:
            raise DatasetFormatError(n + 1, f"unexpected end of file inside lidar block of scene {seed}")
        pts = np.array([_floats(lines[i + k].split(), i + k + 1, 3) for k in range(count)]).reshape(-1, 3)
        i += count
        if not cams:
            raise DatasetFormatError(i, f"scene {seed} has no cameras")
        scenes.append(Scene(boxes, cams, PointCloud(pts), seed))


def read_dataset(path) -> list[Scene]:
    return parse_dataset(Path(path).read_text())

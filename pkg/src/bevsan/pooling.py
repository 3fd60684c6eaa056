"""Lift image features into frustums and scatter them into height-sliced BEV grids.

Two forward paths share one accumulation order (cameras in index order,
frustum cells in row-major ``(d, i, j)`` order):

* :func:`pool_slice_reference` pools a single slice; running it once per
  slice is the "repeat the lift-splat step" baseline.
* :func:`pool_multislice_fused` traverses the frustum cells once and
  scatters each cell into every slice containing its height.

Because every output element sees the same addition sequence, the two paths
agree bitwise.  The hot loops come from the compiled ``_pool_kernels``
extension when it is importable, otherwise from the numpy fallback; set
``BEVSAN_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import csv
import io
import os
import statistics
import time
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import _pool_fallback
from ._io import atomic_write_text
from .geometry import BevGridSpec, CameraModel, FrustumSpec, HeightSlice, frustum_points, ring_cameras

if os.environ.get("BEVSAN_PURE_PYTHON"):
    _kernels = _pool_fallback
else:
    try:
        from . import _pool_kernels as _kernels
    except ImportError:  # extension not built
        _kernels = _pool_fallback

BACKEND: str = _kernels.BACKEND


class DepthDistributionError(ValueError):
    """A depth column is negative or does not sum to one."""


@dataclass
class FrustumFeatures:
    """One camera's lifted features and their ego-frame coordinates."""

    values: ad.Tensor          # (C, D, Hf, Wf)
    coords: np.ndarray         # (D, Hf, Wf, 3)

    def __post_init__(self):
        if not isinstance(self.values, ad.Tensor):
            self.values = ad.Tensor(self.values)
        if self.values.ndim != 4 or tuple(self.coords.shape) != self.values.shape[1:] + (3,):
            raise ad.DimensionError(
                f"coords {self.coords.shape} do not match frustum values {self.values.shape}"
            )

    @property
    def channels(self) -> int:
        return self.values.shape[0]


@dataclass
class SliceBevFeatures:
    slices: list[HeightSlice]
    stacked: ad.Tensor         # (S, C, He, We)


_coord_cache: dict = {}


def cached_frustum_points(cam: CameraModel, fs: FrustumSpec) -> np.ndarray:
    """:func:`frustum_points`, memoized on the camera's parameters."""
    key = (cam.fx, cam.fy, cam.cx, cam.cy, cam.rotation.tobytes(), cam.translation.tobytes(), fs)
    pts = _coord_cache.get(key)
    if pts is None:
        if len(_coord_cache) > 256:
            _coord_cache.clear()
        pts = frustum_points(cam, fs)
        pts.flags.writeable = False
        _coord_cache[key] = pts
    return pts


# ---------------------------------------------------------------------- lift


def check_depth_distribution(D: np.ndarray, tol: float = 1e-6) -> None:
    if np.any(D < -tol) or np.any(np.abs(D.sum(axis=0) - 1.0) > tol):
        raise DepthDistributionError("depth columns must be nonnegative and sum to 1")


def lift(F, D, validate: str = "error") -> ad.Tensor:
    """Outer product per pixel: ``V[c, d, i, j] = F[c, i, j] * D[d, i, j]``.

    ``validate`` is ``"error"``, ``"warn"`` (learned-distribution mode) or
    ``"off"``.
    """
    F, D = ad._as_tensor(F), ad._as_tensor(D)
    if F.ndim != 3 or D.ndim != 3 or F.shape[1:] != D.shape[1:]:
        raise ad.DimensionError(f"lift: feature {F.shape} and depth {D.shape} extents differ")
    if validate != "off":
        try:
            check_depth_distribution(D.data)
        except DepthDistributionError as e:
            if validate == "error":
                raise
            warnings.warn(str(e), stacklevel=2)
    return ad.record("lift", [F, D], F.data[:, None] * D.data[None])


@ad.register_rule("lift")
def _lift_grad(node, g):
    F, D = node.saved["inputs"]
    return (g * D[None]).sum(axis=1), (g * F[:, None]).sum(axis=0)


# ---------------------------------------------------------------------- pool


def _grid_tuple(grid: BevGridSpec, C: int) -> tuple:
    return (float(grid.x_min), float(grid.x_max), float(grid.y_min), float(grid.y_max),
            float(grid.cell_x), float(grid.cell_y), int(grid.He), int(grid.We), int(C))


def _slice_arrays(slices: Sequence[HeightSlice], grid: BevGridSpec):
    for s in slices:
        s.validate(grid)
    los = np.array([s.lower for s in slices], dtype=np.float64)
    his = np.array([s.upper for s in slices], dtype=np.float64)
    closed = np.array([s.closed_top(grid) for s in slices], dtype=np.uint8)
    return los, his, closed


def _flat_inputs(values: Sequence[np.ndarray], coords: Sequence[np.ndarray]):
    vs = [np.ascontiguousarray(v.reshape(v.shape[0], -1)) for v in values]
    cs = [np.ascontiguousarray(c.reshape(-1, 3), dtype=np.float64) for c in coords]
    return vs, cs


def _channels(frustums: Sequence[FrustumFeatures], channels: int | None) -> int:
    cs = {f.channels for f in frustums}
    if len(cs) > 1:
        raise ad.DimensionError(f"frustums disagree on channel count: {sorted(cs)}")
    if cs:
        if channels is not None and channels not in cs:
            raise ad.DimensionError(f"expected {channels} channels, frustums have {cs.pop()}")
        return cs.pop()
    if channels is None:
        raise ValueError("channel count needed when no frustums are given")
    return channels


def pool_slice_reference(frustums: Sequence[FrustumFeatures], grid: BevGridSpec,
                         s: HeightSlice, channels: int | None = None) -> ad.Tensor:
    """Scatter-sum of every frustum cell inside slice ``s`` into ``(C, He, We)``."""
    C = _channels(frustums, channels)
    s.validate(grid)
    vs, cs = _flat_inputs([f.values.data for f in frustums], [f.coords for f in frustums])
    out = _kernels.pool_reference(vs, cs, _grid_tuple(grid, C), float(s.lower), float(s.upper),
                                  bool(s.closed_top(grid)))
    return ad.Tensor(out.reshape(C, grid.He, grid.We))


def pool_multislice_fused(frustums: Sequence[FrustumFeatures], grid: BevGridSpec,
                          slices: Iterable[HeightSlice], channels: int | None = None) -> SliceBevFeatures:
    """Pool all slices in one pass; differentiable w.r.t. the frustum values."""
    slices = list(slices)
    C = _channels(frustums, channels)
    los, his, closed = _slice_arrays(slices, grid)
    vs, cs = _flat_inputs([f.values.data for f in frustums], [f.coords for f in frustums])
    gt = _grid_tuple(grid, C)
    out = _kernels.pool_fused(vs, cs, gt, los, his, closed)
    out = out.reshape(len(slices), C, grid.He, grid.We)
    stacked = ad.record("pool", [f.values for f in frustums], out, coords=cs, grid=gt,
                        los=los, his=his, closed=closed,
                        shapes=[f.values.shape for f in frustums], inputs=[])
    return SliceBevFeatures(slices, stacked)


def pool_backward(grad_stack, frustums: Sequence[FrustumFeatures], grid: BevGridSpec,
                  slices: Iterable[HeightSlice]) -> list[np.ndarray]:
    """Gradient of the fused pooling w.r.t. each camera's ``(C, D, Hf, Wf)`` values."""
    slices = list(slices)
    g = np.asarray(grad_stack.data if isinstance(grad_stack, ad.Tensor) else grad_stack, dtype=np.float64)
    C = _channels(frustums, g.shape[1] if g.ndim == 4 else None)
    if g.shape != (len(slices), C, grid.He, grid.We):
        raise ad.DimensionError(
            f"gradient {g.shape} does not match forward extents {(len(slices), C, grid.He, grid.We)}"
        )
    los, his, closed = _slice_arrays(slices, grid)
    _, cs = _flat_inputs([], [f.coords for f in frustums])
    gs = _kernels.pool_backward(np.ascontiguousarray(g.reshape(len(slices), C, -1)), cs,
                                _grid_tuple(grid, C), los, his, closed)
    return [gc.reshape(f.values.shape) for gc, f in zip(gs, frustums)]


@ad.register_rule("pool")
def _pool_grad(node, g):
    sv = node.saved
    S, C = g.shape[:2]
    gs = _kernels.pool_backward(np.ascontiguousarray(g.reshape(S, C, -1)), sv["coords"], sv["grid"],
                                sv["los"], sv["his"], sv["closed"])
    return [gc.reshape(shape) for gc, shape in zip(gs, sv["shapes"])]


# ----------------------------------------------------------------- benchmark

SIZE_PRESETS = {
    # name: (cameras, C, D, Hf, Wf, He, We, d_min, d_max, half_extent)
    "tiny": (2, 4, 8, 4, 8, 16, 16, 1.0, 50.0, 40.0),
    "small": (6, 8, 24, 8, 22, 32, 32, 1.0, 50.0, 40.0),
    "medium": (6, 8, 48, 16, 44, 64, 64, 1.0, 50.0, 40.0),
    # 0.5 m depth bins out to 58 m, 0.8 m cells over +-51.2 m
    "full": (6, 8, 112, 16, 44, 128, 128, 2.0, 58.0, 51.2),
}


def benchmark_slices(S: int) -> list[HeightSlice]:
    """Slice set used for a benchmark of ``S`` slices."""
    from .lidar import DEFAULT_GLOBALS, NUSCENES_LOCALS
    globals_, locals_ = list(DEFAULT_GLOBALS), list(NUSCENES_LOCALS)
    if S == 1:
        return globals_[:1]
    if S == 3:
        return globals_
    if S == 6:
        return locals_
    if S == 9:
        return globals_ + locals_
    edges = np.linspace(-6.0, 4.0, S + 1)
    return [HeightSlice(float(a), float(b)) for a, b in zip(edges[:-1], edges[1:])]


@dataclass
class BenchConfig:
    slices: Sequence[int] = (1, 9)
    size: str = "full"
    runs: int = 20
    warmup: int = 3
    seed: int = 0


@dataclass
class BenchReport:
    rows: list[tuple[str, int, int, int]] = field(default_factory=list)

    def times(self, kernel: str, S: int) -> list[int]:
        return [r[3] for r in self.rows if r[0] == kernel and r[1] == S]

    def median(self, kernel: str, S: int) -> float:
        return statistics.median(self.times(kernel, S))

    def percentile(self, kernel: str, S: int, q: float) -> float:
        return float(np.percentile(self.times(kernel, S), q))

    def ratio(self, S: int) -> float:
        """fused(S) / reference(S), by median wall time."""
        return self.median("fused", S) / self.median("reference", S)

    def write_csv(self, path) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kernel", "slices", "run", "wall_ns"])
        w.writerows(self.rows)
        atomic_write_text(path, buf.getvalue())

    def summary(self) -> list[str]:
        lines = []
        for S in sorted({r[1] for r in self.rows}):
            parts = []
            for k in ("reference", "fused"):
                if self.times(k, S):
                    parts.append(
                        f"{k} median={self.median(k, S) / 1e6:.3f}ms "
                        f"p10={self.percentile(k, S, 10) / 1e6:.3f}ms p90={self.percentile(k, S, 90) / 1e6:.3f}ms"
                    )
            lines.append(f"S={S}: " + "; ".join(parts) + f"; ratio={self.ratio(S):.3f}")
        return lines


def benchmark_problem(size: str, seed: int = 0):
    """Random frustum features on a 6-camera ring for a named size preset."""
    ncam, C, D, Hf, Wf, He, We, d_min, d_max, r = SIZE_PRESETS[size]
    fs = FrustumSpec(Hf, Wf, d_min, d_max, D)
    # vertical FOV ~ 36 degrees so a fair share of rays leaves the height range
    cams = ring_cameras(ncam, fs, hfov_deg=70.0, height=0.0)
    grid = BevGridSpec(-r, r, -r, r, He, We)
    rng = np.random.default_rng(seed)
    frustums = [
        FrustumFeatures(ad.Tensor(rng.standard_normal((C, D, Hf, Wf))), cached_frustum_points(c, fs))
        for c in cams
    ]
    return frustums, grid


def pool_benchmark(config: BenchConfig = BenchConfig()) -> BenchReport:
    """Time repeated single-slice pooling against the fused kernel."""
    frustums, grid = benchmark_problem(config.size, config.seed)
    jobs = []
    for S in config.slices:
        slices = benchmark_slices(S)
        jobs.append((S, "reference", lambda sl=slices: [pool_slice_reference(frustums, grid, s) for s in sl]))
        jobs.append((S, "fused", lambda sl=slices: pool_multislice_fused(frustums, grid, sl)))
    for _ in range(config.warmup):
        for _, _, fn in jobs:
            fn()
    # every (S, kernel) pair runs once per round so machine drift hits all alike
    timed = []
    for run in range(config.runs):
        for S, name, fn in jobs:
            t0 = time.perf_counter_ns()
            fn()
            timed.append((name, S, run, time.perf_counter_ns() - t0))
    order = {(S, name): k for k, (S, name, _) in enumerate(jobs)}
    timed.sort(key=lambda r: (order[r[1], r[0]], r[2]))
    return BenchReport(timed)

"""Self-check suites for geometry, pooling and gradients.

Each suite returns :class:`Check` records.  ``fault=True`` deliberately
breaks the thing under test (a negative control) so callers can confirm a
suite is able to fail.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import pooling
from .detector import DetectionHead, head_forward
from .fusion import AttentionParams, DualBranchParams, FusionParams, SeFusionParams, cross_attention, \
    dual_branch_fuse, fuse_pipeline, se_fuse
from .geometry import BevGridSpec, CameraModel, FrustumSpec, HeightSlice, frustum_points, project_points, \
    ring_cameras
from .pooling import FrustumFeatures, lift, pool_multislice_fused, pool_slice_reference

SUITES = ("geometry", "pooling", "gradients")
GRAD_TOL = 1e-4


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


# ------------------------------------------------------------------ sampling


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_camera(rng: np.random.Generator, fs: FrustumSpec) -> CameraModel:
    return CameraModel(
        float(rng.uniform(10, 80)), float(rng.uniform(10, 80)),
        float(rng.uniform(0, fs.Wf - 1)), float(rng.uniform(0, fs.Hf - 1)),
        random_rotation(rng), rng.uniform(-5, 5, size=3),
    )


def random_slices(rng: np.random.Generator, S: int, disjoint: bool, lo: float = -6.0,
                  hi: float = 4.0) -> list[HeightSlice]:
    """``S`` slices inside ``[lo, hi]``: a random tiling, or freely overlapping intervals."""
    if disjoint:
        cuts = np.sort(rng.choice(np.arange(1, 100), size=S - 1, replace=False)) / 100.0 if S > 1 else []
        b = [lo] + [lo + c * (hi - lo) for c in cuts] + [hi]
        return [HeightSlice(float(b[k]), float(b[k + 1])) for k in range(S)]
    out = []
    for _ in range(S):
        a, c = np.sort(rng.uniform(lo, hi, size=2))
        if c - a < 0.1:
            c = min(hi, a + 0.1)
        out.append(HeightSlice(float(a), float(c)))
    return out


def random_frustums(rng: np.random.Generator, n_cams: int, C: int, fs: FrustumSpec,
                    height_range: float = 3.0) -> list[FrustumFeatures]:
    yaw0 = rng.uniform(0, 2 * math.pi)
    cams = ring_cameras(6, fs, hfov_deg=float(rng.uniform(50, 100)), height=float(rng.uniform(-height_range, 0)))
    rot = np.array([[math.cos(yaw0), -math.sin(yaw0), 0], [math.sin(yaw0), math.cos(yaw0), 0], [0, 0, 1]])
    cams = [CameraModel(c.fx, c.fy, c.cx, c.cy, rot @ c.rotation, c.translation) for c in cams][:n_cams]
    return [FrustumFeatures(ad.Tensor(rng.standard_normal((C, fs.D, fs.Hf, fs.Wf))), frustum_points(c, fs))
            for c in cams]


# ------------------------------------------------------------------ geometry


def geometry_suite(n_poses: int = 1000, seed: int = 0, fault: bool = False) -> list[Check]:
    """Frustum points reproject to their source pixel and bin-centre depth."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_poses):
        fs = FrustumSpec(int(rng.integers(2, 9)), int(rng.integers(2, 12)), float(rng.uniform(0.5, 2)),
                         float(rng.uniform(10, 60)), int(rng.integers(2, 16)))
        cam = random_camera(rng, fs)
        pts = frustum_points(cam, fs)
        if fault:
            pts = pts + 1e-6
        uvd, valid = project_points(pts, cam)
        if not valid.all():
            worst = math.inf
            break
        i, j = np.meshgrid(np.arange(fs.Hf), np.arange(fs.Wf), indexing="ij")
        worst = max(worst,
                    float(np.abs(uvd[..., 0] - j[None]).max()),
                    float(np.abs(uvd[..., 1] - i[None]).max()),
                    float(np.abs(uvd[..., 2] - fs.bin_centers()[:, None, None]).max()))
    return [Check("geometry.round_trip", worst <= 1e-9, f"max error {worst:.3g} over {n_poses} poses (tol 1e-9)")]


# ------------------------------------------------------------------- pooling


def _fused(frustums, grid, slices, fault: bool) -> np.ndarray:
    out = pool_multislice_fused(frustums, grid, slices).stacked.data.copy()
    if fault:
        k = np.unravel_index(int(np.argmax(np.abs(out))), out.shape)
        out[k] = np.nextafter(out[k], np.inf)
    return out


def pooling_equivalence(n_configs: int = 100, seed: int = 0, fault: bool = False) -> Check:
    rng = np.random.default_rng(seed)
    grid = BevGridSpec(-12.0, 12.0, -12.0, 12.0, 12, 12)
    bad = 0
    for k in range(n_configs):
        n_cams = (1, 6)[k % 2]
        S = (1, 3, 6, 9)[(k // 2) % 4]
        disjoint = (k // 8) % 2 == 0
        fs = FrustumSpec(int(rng.integers(2, 7)), int(rng.integers(3, 10)), 1.0, 20.0, int(rng.integers(3, 12)))
        frustums = random_frustums(rng, n_cams, int(rng.integers(1, 5)), fs)
        slices = random_slices(rng, S, disjoint)
        fused = _fused(frustums, grid, slices, fault)
        for s, sl in enumerate(slices):
            if not np.array_equal(fused[s], pool_slice_reference(frustums, grid, sl).data):
                bad += 1
                break
    return Check("pooling.oracle_equivalence", bad == 0,
                 f"{n_configs - bad}/{n_configs} random configurations bitwise equal")


def partition_additivity(n_cases: int = 50, seed: int = 1, fault: bool = False) -> Check:
    rng = np.random.default_rng(seed)
    grid = BevGridSpec(-12.0, 12.0, -12.0, 12.0, 12, 12)
    worst = 0.0
    for _ in range(n_cases):
        fs = FrustumSpec(int(rng.integers(2, 7)), int(rng.integers(3, 10)), 1.0, 20.0, int(rng.integers(3, 12)))
        frustums = random_frustums(rng, int(rng.integers(1, 7)), int(rng.integers(1, 5)), fs, height_range=5.0)
        tiles = random_slices(rng, int(rng.integers(2, 10)), disjoint=True, lo=grid.h_min, hi=grid.h_max)
        parts = _fused(frustums, grid, tiles, fault).sum(axis=0)
        full = pool_slice_reference(frustums, grid, HeightSlice(grid.h_min, grid.h_max)).data
        scale = max(float(np.abs(full).max()), 1e-300)
        worst = max(worst, float(np.abs(parts - full).max()) / scale)
    return Check("pooling.partition_additivity", worst <= 1e-9,
                 f"max relative deviation {worst:.3g} over {n_cases} tilings (tol 1e-9)")


def backend_agreement(seed: int = 2) -> Check:
    """Compiled and numpy kernels agree bitwise (skipped when only one is present)."""
    from . import _pool_fallback as fallback
    try:
        from . import _pool_kernels as compiled
    except ImportError:
        return Check("pooling.backend_agreement", True, "compiled kernels not built; skipped")
    rng = np.random.default_rng(seed)
    grid = BevGridSpec(-12.0, 12.0, -12.0, 12.0, 12, 12)
    fs = FrustumSpec(5, 9, 1.0, 20.0, 10)
    frustums = random_frustums(rng, 6, 3, fs)
    slices = random_slices(rng, 9, disjoint=False)
    los, his, closed = pooling._slice_arrays(slices, grid)
    vs, cs = pooling._flat_inputs([f.values.data for f in frustums], [f.coords for f in frustums])
    gt = pooling._grid_tuple(grid, 3)
    a = compiled.pool_fused(vs, cs, gt, los, his, closed)
    b = fallback.pool_fused(vs, cs, gt, los, his, closed)
    g = rng.standard_normal(a.shape)
    ga = compiled.pool_backward(g, cs, gt, los, his, closed)
    gb = fallback.pool_backward(g, cs, gt, los, his, closed)
    same = np.array_equal(a, b) and all(np.array_equal(x, y) for x, y in zip(ga, gb))
    return Check("pooling.backend_agreement", same, "compiled and numpy kernels " + ("agree" if same else "differ"))


def pooling_suite(seed: int = 0, fault: bool = False) -> list[Check]:
    return [pooling_equivalence(seed=seed, fault=fault), partition_additivity(seed=seed + 1, fault=fault),
            backend_agreement(seed + 2)]


# ----------------------------------------------------------------- gradients


@contextlib.contextmanager
def corrupted_rule(op: str, factor: float = 1.1):
    """Temporarily scale the gradient rule of ``op`` (negative control)."""
    original = ad.GRAD_RULES[op]

    def bad(node, g):
        return [None if x is None else x * factor for x in original(node, g)]

    ad.GRAD_RULES[op] = bad
    try:
        yield
    finally:
        ad.GRAD_RULES[op] = original


def _weighted_sum(out: ad.Tensor, rng_seed: int) -> ad.Tensor:
    w = np.random.default_rng(rng_seed).standard_normal(out.shape)
    return ad.sum(ad.mul(out, ad.Tensor(w)))


def _block_check(make: Callable[[np.random.Generator], tuple], rng: np.random.Generator,
                 max_coords: int) -> float:
    """``make`` returns (inputs, template block or None, fn(inputs, block))."""
    inputs, block, fn = make(rng)
    arrays = list(inputs) + ([np.asarray(v) for _, v in block.items()] if block is not None else [])
    n_in = len(inputs)
    wseed = int(rng.integers(1 << 30))

    def f(*xs):
        blk = None
        if block is not None:
            it = iter(xs[n_in:])
            blk = block.map(lambda _: next(it))
        return _weighted_sum(fn(xs[:n_in], blk), wseed)

    return ad.finite_diff_check(f, arrays, max_coords=max_coords, seed=int(rng.integers(1 << 30)))


def _lift_pool(rng):
    fs = FrustumSpec(3, 4, 1.0, 12.0, 5)
    C = int(rng.integers(1, 5))
    cams = ring_cameras(2, fs, height=-1.0)
    grid = BevGridSpec(-8.0, 8.0, -8.0, 8.0, 8, 8)
    slices = random_slices(rng, 3, disjoint=False)
    F = rng.standard_normal((2, C, fs.Hf, fs.Wf))
    D = rng.dirichlet(np.ones(fs.D), size=(2, fs.Hf, fs.Wf)).transpose(0, 3, 1, 2)

    def fn(xs, _):
        Fs, Ds = xs
        frs = [FrustumFeatures(lift(ad.reshape(ad.take(Fs, k, k + 1), Fs.shape[1:]),
                                    ad.reshape(ad.take(Ds, k, k + 1), Ds.shape[1:]), validate="off"),
                               frustum_points(cams[k], fs)) for k in range(2)]
        return pool_multislice_fused(frs, grid, slices).stacked

    return [F, D], None, fn


def _se(rng):
    J, C, H = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(3, 7))
    p = SeFusionParams.init(J, C, rng)
    p = p.map(lambda v: v + 0.1 * rng.standard_normal(np.shape(v)))
    return [rng.standard_normal((J, C, H, H))], p, lambda xs, blk: se_fuse(xs[0], blk)


def _attention(rng):
    C, H = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    p = AttentionParams.init(C, rng).map(lambda v: v + 0.1 * rng.standard_normal(np.shape(v)))
    x = [rng.standard_normal((C, H, H)), rng.standard_normal((C, H, H))]
    return x, p, lambda xs, blk: cross_attention(xs[0], xs[1], blk)


def _dual(rng):
    C, H = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    p = DualBranchParams.init(C, rng).map(lambda v: v + 0.1 * rng.standard_normal(np.shape(v)))
    x = [rng.standard_normal((C, H, H)), rng.standard_normal((C, H, H))]
    return x, p, lambda xs, blk: dual_branch_fuse(xs[0], xs[1], blk)


def _pipeline(rng):
    J, C, H = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 5))
    p = FusionParams.init(J, C, rng).map(lambda v: v + 0.1 * rng.standard_normal(np.shape(v)))
    x = [rng.standard_normal((3, C, H, H)), rng.standard_normal((J, C, H, H))]
    return x, p, lambda xs, blk: fuse_pipeline(xs[0], xs[1], blk)


def _head(rng):
    C, K, H = int(rng.integers(1, 9)), int(rng.integers(1, 4)), int(rng.integers(3, 9))
    p = DetectionHead.init(C, K, rng)
    p = p.map(lambda v: v + 0.1 * rng.standard_normal(np.shape(v)))
    return [rng.standard_normal((C, H, H))], p, lambda xs, blk: head_forward(xs[0], blk)


GRADIENT_CHECKS: dict[str, Callable] = {
    "lift_pool": _lift_pool,
    "se_block": _se,
    "cross_attention": _attention,
    "dual_branch": _dual,
    "fusion_pipeline": _pipeline,
    "head": _head,
}


def gradient_check(name: str, seeds: int = 20, max_coords: int = 12, base_seed: int = 0) -> tuple[float, int]:
    """Worst relative error over ``seeds`` random instances of one block; also returns failures."""
    make = GRADIENT_CHECKS[name]
    worst, failures = 0.0, 0
    for s in range(seeds):
        err = _block_check(make, np.random.default_rng([base_seed, s]), max_coords)
        worst = max(worst, err)
        failures += err > GRAD_TOL
    return worst, failures


def gradient_suite(seeds: int = 20, fault: bool = False) -> list[Check]:
    checks = []
    ctx = corrupted_rule("sigmoid") if fault else contextlib.nullcontext()
    with ctx:
        for name in GRADIENT_CHECKS:
            worst, failures = gradient_check(name, seeds)
            checks.append(Check(f"gradients.{name}", failures == 0,
                                f"max relative error {worst:.3g} over {seeds} seeds (tol {GRAD_TOL:g})"))
    # the negative control must be caught
    with corrupted_rule("sigmoid"):
        worst, failures = gradient_check("se_block", seeds=3, base_seed=99)
    checks.append(Check("gradients.negative_control", failures == 3,
                        f"corrupted sigmoid rule detected in {failures}/3 seeds (max error {worst:.3g})"))
    return checks


def run_suite(name: str, fault: bool = False) -> list[Check]:
    if name == "all":
        return [c for s in SUITES for c in run_suite(s, fault)]
    if name == "geometry":
        return geometry_suite(fault=fault)
    if name == "pooling":
        return pooling_suite(fault=fault)
    if name == "gradients":
        return gradient_suite(fault=fault)
    raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES + ('all',))}")

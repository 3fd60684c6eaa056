"""LiDAR height histograms and histogram-guided slice boundaries."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import HeightSlice

DEFAULT_RANGE = (-6.0, 4.0)
DEFAULT_BIN_WIDTH = 0.1

DEFAULT_GLOBALS = (HeightSlice(-6.0, 4.0), HeightSlice(-5.0, 3.0), HeightSlice(-4.0, 2.0))
# six local bins tiling [-6, 4]
NUSCENES_LOCALS = (
    HeightSlice(-6.0, -3.0), HeightSlice(-3.0, -2.0), HeightSlice(-2.0, -1.0),
    HeightSlice(-1.0, 0.0), HeightSlice(0.0, 2.0), HeightSlice(2.0, 4.0),
)


class EmptyHistogramError(ValueError):
    pass


class DegenerateSlicesWarning(UserWarning):
    """Quantile boundaries collided and had to be widened."""


@dataclass
class SliceSet:
    globals: list[HeightSlice] = field(default_factory=lambda: list(DEFAULT_GLOBALS))
    locals: list[HeightSlice] = field(default_factory=lambda: list(NUSCENES_LOCALS))

    @classmethod
    def nuscenes_preset(cls) -> "SliceSet":
        return cls(list(DEFAULT_GLOBALS), list(NUSCENES_LOCALS))

    def all(self) -> list[HeightSlice]:
        return list(self.globals) + list(self.locals)

    def __iter__(self):
        return iter(self.all())

    def __len__(self):
        return len(self.globals) + len(self.locals)


@dataclass
class HeightHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    discarded: int = 0

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if len(self.bin_edges) != len(self.counts) + 1 or np.any(np.diff(self.bin_edges) <= 0):
            raise ValueError("bin edges must be strictly ascending with one more entry than counts")
        if np.any(self.counts < 0):
            raise ValueError("counts must be nonnegative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def range(self) -> tuple[float, float]:
        return float(self.bin_edges[0]), float(self.bin_edges[-1])

    def __add__(self, other: "HeightHistogram") -> "HeightHistogram":
        if not np.array_equal(self.bin_edges, other.bin_edges):
            raise ValueError("cannot merge histograms with different bins")
        return HeightHistogram(self.bin_edges, self.counts + other.counts, self.discarded + other.discarded)


@dataclass
class CumulativeMass:
    bin_edges: np.ndarray
    cum_counts: np.ndarray     # integer prefix sums, one per bin
    fractions: np.ndarray      # cum_counts / total

    def __getitem__(self, i):
        return self.fractions[i]

    def __len__(self):
        return len(self.fractions)


def make_edges(bin_width: float, lo: float, hi: float) -> np.ndarray:
    if bin_width <= 0 or not lo < hi:
        raise ValueError(f"need bin_width > 0 and lo < hi, got {bin_width}, [{lo}, {hi}]")
    n = max(1, int(round((hi - lo) / bin_width)))
    edges = lo + np.arange(n + 1) * ((hi - lo) / n)
    edges[-1] = hi
    return edges


def height_histogram(points, bin_width: float = DEFAULT_BIN_WIDTH,
                     range: tuple[float, float] = DEFAULT_RANGE) -> HeightHistogram:  # noqa: A002
    """Bin point heights into half-open bins; the last bin is closed above.

    Points outside the range are tallied in ``discarded``.
    """
    edges = make_edges(bin_width, *range)
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64).reshape(-1, 3)
    z = pts[:, 2]
    inside = (z >= edges[0]) & (z <= edges[-1])
    idx = np.searchsorted(edges, z[inside], side="right") - 1
    idx = np.minimum(idx, len(edges) - 2)
    counts = np.bincount(idx, minlength=len(edges) - 1)
    return HeightHistogram(edges, counts, int((~inside).sum()))


def accumulate(h: HeightHistogram) -> CumulativeMass:
    total = h.total
    if total == 0:
        raise EmptyHistogramError("cannot accumulate an empty histogram")
    cum = np.cumsum(h.counts)
    return CumulativeMass(h.bin_edges, cum, cum / total)


def quantile_height(h: HeightHistogram, q: float) -> float:
    """Height below which a fraction ``q`` of the mass lies, interpolating within bins."""
    cum = np.concatenate([[0], np.cumsum(h.counts)])
    target = q * cum[-1]
    i = int(np.searchsorted(cum, target, side="left")) - 1
    i = min(max(i, 0), len(h.counts) - 1)
    lo, hi = h.bin_edges[i], h.bin_edges[i + 1]
    if h.counts[i] == 0:
        return float(lo)
    if target == cum[i + 1]:
        return float(hi)
    return float(lo + (target - cum[i]) / h.counts[i] * (hi - lo))


def derive_local_slices(h: HeightHistogram, J: int) -> list[HeightSlice]:
    """Split the histogram range into ``J`` equal-mass slices.

    Interior boundaries are the ``k/J`` quantiles of the accumulated
    histogram; the outer ones are pinned to the histogram range.  Colliding
    boundaries are pushed to the next bin edge with a
    :class:`DegenerateSlicesWarning`.
    """
    if J < 1:
        raise ValueError(f"J must be >= 1, got {J}")
    if h.total == 0:
        raise EmptyHistogramError("cannot derive slices from an empty histogram")
    lo, hi = h.range
    if J > len(h.counts):
        raise ValueError(f"cannot cut {len(h.counts)} bins into {J} slices")
    bounds = [lo] + [quantile_height(h, k / J) for k in range(1, J)] + [hi]
    edges = h.bin_edges
    widened = False
    for k in range(1, J):
        if bounds[k] <= bounds[k - 1]:
            bounds[k] = float(edges[np.searchsorted(edges, bounds[k - 1], side="right")])
            widened = True
    # walk back from the top if widening ran into the upper bound
    for k in range(J - 1, 0, -1):
        if bounds[k] >= bounds[k + 1]:
            bounds[k] = float(edges[np.searchsorted(edges, bounds[k + 1], side="left") - 1])
            widened = True
    if widened:
        warnings.warn("local slice quantiles collided; widened to bin edges", DegenerateSlicesWarning, stacklevel=2)
    return [HeightSlice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


# ------------------------------------------------------------------ text I/O


def format_number(x: float) -> str:
    x = float(x)
    if x == 0:
        return "0"
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def slices_to_text(slices: Sequence[HeightSlice]) -> str:
    return "".join(f"{format_number(s.lower)} {format_number(s.upper)}\n" for s in slices)


def slices_from_text(text: str) -> list[HeightSlice]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 'lower upper', got {line!r}")
        out.append(HeightSlice(float(parts[0]), float(parts[1])))
    return out


def histogram_csv(h: HeightHistogram) -> str:
    rows = ["edge_lo,edge_hi,count"]
    for a, b, c in zip(h.bin_edges[:-1], h.bin_edges[1:], h.counts):
        rows.append(f"{format_number(round(a, 10))},{format_number(round(b, 10))},{int(c)}")
    return "\n".join(rows) + "\n"


# ------------------------------------------------------------ box statistics


@dataclass
class ClassHeightStats:
    name: str
    histogram: HeightHistogram
    count: int
    mean: float
    std: float
    extent_mean: float
    extent_std: float

    @property
    def absent(self) -> bool:
        return self.count == 0


def class_height_stats(scenes, class_names: Sequence[str], bin_width: float = DEFAULT_BIN_WIDTH,
                       height_range: tuple[float, float] = DEFAULT_RANGE) -> dict[str, ClassHeightStats]:
    """Per-class histogram of box-center heights plus vertical-extent stats."""
    if not scenes:
        raise ValueError("need at least one scene")
    centers: dict[int, list[float]] = {k: [] for k in range(len(class_names))}
    extents: dict[int, list[float]] = {k: [] for k in range(len(class_names))}
    for scene in scenes:
        for box in scene.boxes:
            if box.class_id not in centers:
                raise KeyError(f"unknown class id {box.class_id}")
            centers[box.class_id].append(box.center[2])
            extents[box.class_id].append(box.size[2])
    out = {}
    for k, name in enumerate(class_names):
        z = np.array(centers[k])
        e = np.array(extents[k])
        hist = height_histogram(np.column_stack([np.zeros((len(z), 2)), z]), bin_width, height_range)
        out[name] = ClassHeightStats(
            name, hist, len(z),
            float(z.mean()) if len(z) else math.nan,
            float(z.std(ddof=1)) if len(z) > 1 else math.nan,
            float(e.mean()) if len(e) else math.nan,
            float(e.std(ddof=1)) if len(e) > 1 else math.nan,
        )
    return out

"""Toy center-heatmap detector on top of sliced BEV features.

Camera features are rendered, lifted and pooled once per scene (they do
not depend on trainable parameters); training then fits only the slice
fusion and the head with plain minibatch gradient descent.
"""
from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from ._io import atomic_write_text
from .autodiff import DimensionError, Tensor
from .fusion import DualBranchParams, ParamBlock, SeFusionParams, dual_branch_fuse, se_fuse
from .geometry import BevGridSpec, HeightSlice
from .lidar import DEFAULT_GLOBALS, NUSCENES_LOCALS
from .pooling import FrustumFeatures, cached_frustum_points, lift, pool_multislice_fused
from .scenes import RenderConfig, Scene, SceneConfig, render_camera_features

THRESHOLD = 0.4
MATCH_RADIUS = 2.0
TARGET_SIGMA = 1.0

LOW_BAND = HeightSlice(-2.0, -1.0)
HIGH_BAND = HeightSlice(0.0, 2.0)

ABLATION_VARIANTS = ("baseline-flat", "local-only", "global-only", "full-SAN")
FUSION_VARIANTS = ("mean", "se", "se-mean", "se-se", "se-trans")
BAND_VARIANTS = ("low-band", "high-band")
VARIANTS = ABLATION_VARIANTS + FUSION_VARIANTS + BAND_VARIANTS


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


# ---------------------------------------------------------------------- head


@dataclass
class DetectionHead(ParamBlock):
    w1: object   # (C, C, 3, 3)
    b1: object
    w2: object   # (K, C, 1, 1)
    b2: object

    @property
    def C(self) -> int:
        return self.w1.shape[1]

    @property
    def K(self) -> int:
        return self.w2.shape[0]

    @classmethod
    def init(cls, C: int, K: int, rng: np.random.Generator) -> "DetectionHead":
        w1 = rng.standard_normal((C, C, 3, 3)) * math.sqrt(2.0 / (9 * C))
        w2 = rng.standard_normal((K, C, 1, 1)) * math.sqrt(1.0 / C)
        return cls(w1, np.zeros(C), w2, np.zeros(K))


def head_forward(bev: Tensor, head: DetectionHead) -> Tensor:
    """``(C, He, We) -> (K, He, We)`` class-center logits (batch axis allowed)."""
    bev = bev if isinstance(bev, Tensor) else Tensor(bev)
    if bev.ndim not in (3, 4) or bev.shape[-3] != head.C:
        raise DimensionError(f"BEV features {bev.shape} do not match head width {head.C}")
    h = ad.relu(ad.conv2d(bev, _t(head.w1), _t(head.b1)))
    return ad.conv2d(h, _t(head.w2), _t(head.b2))


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ------------------------------------------------------------ targets & loss


def box_cells(boxes, grid: BevGridSpec) -> list[tuple[int, int, int, float, float]]:
    """``(class, iy, ix, fy, fx)`` per in-grid box: integer cell plus fractional position."""
    out = []
    for b in boxes:
        fx = (b.center[0] - grid.x_min) / grid.cell_x
        fy = (b.center[1] - grid.y_min) / grid.cell_y
        ix, iy = int(math.floor(fx)), int(math.floor(fy))
        if 0 <= ix < grid.We and 0 <= iy < grid.He:
            out.append((b.class_id, iy, ix, fy, fx))
    return out


def gaussian_targets(boxes, grid: BevGridSpec, K: int, sigma: float = TARGET_SIGMA) -> np.ndarray:
    """Per-class heatmaps: a Gaussian splat (in cells) peaking at 1 on each box's cell."""
    t = np.zeros((K, grid.He, grid.We))
    yy, xx = np.mgrid[0:grid.He, 0:grid.We]
    for k, iy, ix, _, _ in box_cells(boxes, grid):
        if not 0 <= k < K:
            raise ValueError(f"box class {k} outside 0..{K - 1}")
        g = np.exp(-((yy - iy) ** 2 + (xx - ix) ** 2) / (2.0 * sigma ** 2))
        np.maximum(t[k], g, out=t[k])
    return t


def positive_weight(targets: np.ndarray) -> float:
    """``negatives / positives`` with positives the cells at exactly 1 (1 if none)."""
    pos = int(np.count_nonzero(targets == 1.0))
    return (targets.size - pos) / pos if pos else 1.0


def heatmap_loss(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy with positive cells up-weighted by ``negatives/positives``."""
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"targets {t.shape} do not match logits {logits.shape}")
    if not np.all((t >= 0) & (t <= 1)):
        raise ValueError("targets must lie in [0, 1]")
    w = np.where(t == 1.0, positive_weight(t), 1.0)
    bce = ad.sub(ad.softplus(logits), ad.mul(logits, Tensor(t)))
    return ad.mean(ad.mul(bce, Tensor(w)))


def targets_to_logits(t: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Inverse sigmoid with the endpoints pulled in by ``eps``."""
    c = np.clip(t, eps, 1.0 - eps)
    return np.log(c) - np.log1p(-c)


# ----------------------------------------------------------------- variants


def variant_slices(variant: str, locals_: Sequence[HeightSlice] = NUSCENES_LOCALS,
                   globals_: Sequence[HeightSlice] = DEFAULT_GLOBALS,
                   grid: BevGridSpec | None = None) -> list[HeightSlice]:
    """Slices a variant pools, in the order its model consumes them."""
    grid = grid or BevGridSpec()
    full = HeightSlice(grid.h_min, grid.h_max)
    table = {
        "baseline-flat": [full],
        "low-band": [LOW_BAND],
        "high-band": [HIGH_BAND],
        "local-only": list(locals_),
        "mean": list(locals_),
        "se": list(locals_),
        "global-only": list(globals_),
    }
    if variant in table:
        return table[variant]
    if variant in ("full-SAN", "se-mean", "se-se", "se-trans"):
        return list(globals_) + list(locals_)
    raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")


@dataclass
class Model:
    """Trainable blocks for one variant plus the fixed input scale."""

    variant: str
    head: DetectionHead
    blocks: dict[str, ParamBlock] = field(default_factory=dict)
    input_scale: float = 1.0
    n_global: int = 3

    def items(self) -> list[tuple[str, object]]:
        out = []
        for name in sorted(self.blocks):
            out += [(f"{name}.{n}", v) for n, v in self.blocks[name].items()]
        return out + [(f"head.{n}", v) for n, v in self.head.items()]

    def map(self, fn) -> "Model":
        # same visiting order as items(): sorted blocks, then the head
        blocks = {k: self.blocks[k].map(fn) for k in sorted(self.blocks)}
        return Model(self.variant, self.head.map(fn), blocks, self.input_scale, self.n_global)

    def replace_values(self, values: Sequence) -> "Model":
        it = iter(values)
        return self.map(lambda _: next(it))


def init_model(variant: str, C: int, K: int, J: int, seed: int, n_global: int = 3,
               reduction: int = 1, input_scale: float = 1.0) -> Model:
    rng = np.random.default_rng(seed)
    blocks: dict[str, ParamBlock] = {}
    if variant in ("local-only", "se", "se-mean", "se-se", "full-SAN", "se-trans"):
        blocks["se_local"] = SeFusionParams.init(J, C, rng, reduction)
    if variant in ("global-only", "se-mean", "se-se", "full-SAN", "se-trans"):
        blocks["se_global"] = SeFusionParams.init(n_global, C, rng, reduction)
    if variant == "se-se":
        blocks["se_merge"] = SeFusionParams.init(2, C, rng, reduction)
    if variant in ("full-SAN", "se-trans"):
        blocks["dual"] = DualBranchParams.init(C, rng)
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    return Model(variant, DetectionHead.init(C, K, rng), blocks, input_scale, n_global)


def _split(stack: Tensor, n_global: int):
    # stack (..., S, C, H, W): globals first
    if stack.ndim == 5:
        g = ad.transpose(stack, (1, 0, 2, 3, 4))
        gs = ad.transpose(ad.take(g, 0, n_global), (1, 0, 2, 3, 4))
        ls = ad.transpose(ad.take(g, n_global, stack.shape[1]), (1, 0, 2, 3, 4))
        return gs, ls
    return ad.take(stack, 0, n_global), ad.take(stack, n_global, stack.shape[0])


def _slice_axis_mean(stack: Tensor) -> Tensor:
    S = stack.shape[-4]
    lead = stack.shape[:-4]
    rest = stack.shape[-3:]
    # (..., S, C*H*W) -> (..., C*H*W) via a ones-vector product
    flat = ad.reshape(stack, lead + (S, int(np.prod(rest))))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead))
    avg = ad.matmul(ad.transpose(flat, axes), Tensor(np.full((S, 1), 1.0 / S)))
    return ad.reshape(avg, lead + rest)


def bev_features(model: Model, stack: Tensor) -> Tensor:
    """Fused ``(C, He, We)`` map fed to the head (batch axis allowed)."""
    stack = ad.scale(stack if isinstance(stack, Tensor) else Tensor(stack), model.input_scale)
    v, b = model.variant, model.blocks
    if v in ("baseline-flat", "low-band", "high-band"):
        if stack.ndim == 5:
            one = ad.take(ad.transpose(stack, (1, 0, 2, 3, 4)), 0, 1)
            return ad.reshape(one, stack.shape[:1] + stack.shape[2:])
        return ad.reshape(ad.take(stack, 0, 1), stack.shape[1:])
    if v == "mean":
        return _slice_axis_mean(stack)
    if v in ("local-only", "se"):
        return se_fuse(stack, b["se_local"])
    if v == "global-only":
        return se_fuse(stack, b["se_global"])
    gs, ls = _split(stack, model.n_global)
    b_g = se_fuse(gs, b["se_global"])
    b_l = se_fuse(ls, b["se_local"])
    if v == "se-mean":
        return ad.add(b_g, b_l)
    if v == "se-se":
        axis = b_g.ndim - 3
        pair = ad.concat([ad.reshape(b_g, b_g.shape[:axis] + (1,) + b_g.shape[axis:]),
                          ad.reshape(b_l, b_l.shape[:axis] + (1,) + b_l.shape[axis:])], axis=axis)
        return se_fuse(pair, b["se_merge"])
    return dual_branch_fuse(b_g, b_l, b["dual"])


def forward(model: Model, stack: Tensor) -> Tensor:
    return head_forward(bev_features(model, stack), model.head)


# ----------------------------------------------------------------------- data


@dataclass
class PreparedData:
    stacks: np.ndarray    # (N, S, C, He, We) raw pooled features
    targets: np.ndarray   # (N, K, He, We)
    scenes: list[Scene]
    slices: list[HeightSlice]


def scene_stack(scene: Scene, slices: Sequence[HeightSlice], scene_config: SceneConfig = SceneConfig(),
                render: RenderConfig = RenderConfig()) -> np.ndarray:
    """Render every camera, lift, and pool into ``(S, C, He, We)``."""
    fs, grid = scene_config.frustum, scene_config.grid
    K = len(scene_config.profiles)
    rng = np.random.default_rng([scene.seed, 7])
    frustums = []
    for cam in scene.cameras:
        F, D = render_camera_features(scene, cam, fs, render.channels, noise=render.noise, n_classes=K,
                                      temperature=render.temperature, bump_width=render.bump_width, rng=rng)
        frustums.append(FrustumFeatures(lift(F, D), cached_frustum_points(cam, fs)))
    return pool_multislice_fused(frustums, grid, list(slices)).stacked.data


def prepare(scenes: Sequence[Scene], slices: Sequence[HeightSlice], scene_config: SceneConfig = SceneConfig(),
            render: RenderConfig = RenderConfig()) -> PreparedData:
    K = len(scene_config.profiles)
    grid = scene_config.grid
    S, C = len(slices), render.channels
    stacks = np.zeros((len(scenes), S, C, grid.He, grid.We))
    targets = np.zeros((len(scenes), K, grid.He, grid.We))
    for n, scene in enumerate(scenes):
        stacks[n] = scene_stack(scene, slices, scene_config, render)
        targets[n] = gaussian_targets(scene.boxes, grid, K)
    return PreparedData(stacks, targets, list(scenes), list(slices))


def input_scale_for(stacks: np.ndarray) -> float:
    """Reciprocal RMS of the training stacks (1 for all-zero data)."""
    rms = float(np.sqrt(np.mean(stacks ** 2))) if stacks.size else 0.0
    return 1.0 / rms if rms > 0 else 1.0


# ------------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "full-SAN"
    epochs: int = 30
    lr: float = 5.0
    batch_size: int = 20
    seed: int = 0
    n_train: int = 200
    n_val: int = 100
    reduction: int = 1
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.epochs < 0 or self.lr < 0 or self.batch_size < 1:
            raise ValueError("epochs and lr must be >= 0 and batch_size >= 1")


def fan_in(shape: tuple[int, ...]) -> int:
    """Inputs feeding one output of a weight tensor."""
    if len(shape) == 4:          # conv (C_out, C_in, k, k)
        return int(np.prod(shape[1:]))
    if len(shape) == 2:          # applied as x @ W
        return shape[0]
    return 1


def step_scales(model: Model) -> list[float]:
    """``1 / fan_in`` per tensor; a bias ``*.bX`` shares the scale of its weight ``*.wX``."""
    shapes = {n: np.shape(v) for n, v in model.items()}
    out = []
    for name, shape in shapes.items():
        head, _, leaf = name.rpartition(".")
        if leaf.startswith("b"):
            shape = shapes.get(f"{head}.w{leaf[1:]}", shape)
        out.append(1.0 / fan_in(shape))
    return out


@dataclass
class TrainResult:
    model: Model
    history: list[float]   # mean minibatch loss per epoch, plus the initial full-data loss first


def data_loss(model: Model, stacks: np.ndarray, targets: np.ndarray) -> float:
    total = 0.0
    for a in range(0, len(stacks), 50):
        logits = forward(model, Tensor(stacks[a:a + 50]))
        total += heatmap_loss(logits, targets[a:a + 50]).item() * len(stacks[a:a + 50])
    return total / len(stacks)


def train(config: TrainConfig, data: PreparedData, model: Model | None = None) -> TrainResult:
    """Minibatch gradient descent with a cosine-decayed step."""
    if len(data.stacks) == 0:
        raise ValueError("training set is empty")
    K, C = data.targets.shape[1], data.stacks.shape[2]
    if model is None:
        n_global = len(DEFAULT_GLOBALS)
        J = data.stacks.shape[1] - (n_global if config.variant in ("full-SAN", "se-mean", "se-se", "se-trans") else 0)
        model = init_model(config.variant, C, K, J, config.seed, n_global, config.reduction,
                           input_scale_for(data.stacks))
    rng = np.random.default_rng([config.seed, 1])
    N = len(data.stacks)
    steps_per_epoch = math.ceil(N / config.batch_size)
    total = max(1, config.epochs * steps_per_epoch)
    values = [np.array(v, dtype=np.float64) for _, v in model.items()]
    # fixed per-tensor step scale so wide and narrow layers move at similar rates
    step_scale = step_scales(model)
    history = [data_loss(model, data.stacks, data.targets)]
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(N)
        losses = []
        for a in range(0, N, config.batch_size):
            idx = np.sort(order[a:a + config.batch_size])
            lr = config.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
            with ad.Tape() as tape:
                vs = [tape.variable(v) for v in values]
                m = model.replace_values(vs)
                loss = heatmap_loss(forward(m, Tensor(data.stacks[idx])), data.targets[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"{config.variant}: loss became {value} at epoch {epoch}, step {step} (lr {lr:.4g})")
            grads = ad.backward(tape, loss)
            gs = [grads[t.node_id].data for t in vs]
            if config.clip_norm is not None:
                norm = math.sqrt(math.fsum(float(np.vdot(g, g)) for g in gs))
                if norm > config.clip_norm:
                    gs = [g * (config.clip_norm / norm) for g in gs]
            values = [v - (lr * c) * g for v, g, c in zip(values, gs, step_scale)]
            losses.append(value * len(idx))
            step += 1
        history.append(float(np.sum(losses) / N))
    return TrainResult(model.replace_values(values), history)


# ----------------------------------------------------------------- evaluation


def peaks(heat: np.ndarray, threshold: float = THRESHOLD) -> list[tuple[int, int, float]]:
    """3x3 non-maximum suppression on one ``(He, We)`` map.

    A cell survives if no neighbour beats it; among equal values the lowest
    linear index wins.  Returns ``(iy, ix, score)`` above ``threshold``.
    """
    H, W = heat.shape
    pad = np.pad(heat, 1, constant_values=-np.inf)
    keep = heat >= threshold
    lin = np.arange(H * W).reshape(H, W)
    lin_pad = np.pad(lin, 1, constant_values=-1)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = pad[1 + dy:1 + dy + H, 1 + dx:1 + dx + W]
            nb_lin = lin_pad[1 + dy:1 + dy + H, 1 + dx:1 + dx + W]
            beaten = (nb > heat) | ((nb == heat) & (nb_lin >= 0) & (nb_lin < lin))
            keep &= ~beaten
    iy, ix = np.nonzero(keep)
    return [(int(y), int(x), float(heat[y, x])) for y, x in zip(iy, ix)]


def match_counts(pred: list[tuple[int, int, float]], gt: list[tuple[float, float]],
                 radius: float = MATCH_RADIUS) -> tuple[int, int, int]:
    """Greedy (highest score first) one-to-one matching; returns ``(tp, fp, fn)``.

    Distances are in cells between a predicted cell's centre and a box centre.
    """
    order = sorted(pred, key=lambda p: (-p[2], p[0], p[1]))
    used = [False] * len(gt)
    tp = 0
    for iy, ix, _ in order:
        best, best_d = -1, radius
        for j, (fy, fx) in enumerate(gt):
            if used[j]:
                continue
            d = math.hypot(iy + 0.5 - fy, ix + 0.5 - fx)
            if d <= best_d:
                if d < best_d or best < 0:
                    best, best_d = j, d
        if best >= 0:
            used[best] = True
            tp += 1
    return tp, len(order) - tp, len(gt) - tp


def f1(tp: int, fp: int, fn: int) -> float:
    """F1 from counts; 1.0 when there is nothing to find and nothing claimed."""
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


@dataclass
class EvalReport:
    class_names: list[str]
    scores: list[float]
    counts: list[tuple[int, int, int]]

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores)) if self.scores else 0.0

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.class_names, self.scores))


def evaluate_heatmaps(probs: np.ndarray, scenes: Sequence[Scene], grid: BevGridSpec,
                      class_names: Sequence[str], threshold: float = THRESHOLD) -> EvalReport:
    """Per-class F1 over all scenes from ``(N, K, He, We)`` probabilities."""
    K = len(class_names)
    counts = np.zeros((K, 3), dtype=np.int64)
    for heat, scene in zip(probs, scenes):
        cells = box_cells(scene.boxes, grid)
        for k in range(K):
            gt = [(fy, fx) for c, _, _, fy, fx in cells if c == k]
            counts[k] += match_counts(peaks(heat[k], threshold), gt)
    tallies = [tuple(int(x) for x in row) for row in counts]
    return EvalReport(list(class_names), [f1(*t) for t in tallies], tallies)


def predict(model: Model, stacks: np.ndarray) -> np.ndarray:
    out = []
    for a in range(0, len(stacks), 50):
        logits = forward(model, Tensor(stacks[a:a + 50])).data
        out.append(1.0 / (1.0 + np.exp(-logits)))
    return np.concatenate(out) if out else np.zeros((0,))


def evaluate(model: Model, data: PreparedData, grid: BevGridSpec, class_names: Sequence[str]) -> EvalReport:
    return evaluate_heatmaps(predict(model, data.stacks), data.scenes, grid, class_names)


# ------------------------------------------------------------------ ablation


@dataclass
class AblationRow:
    variant: str
    seed: int
    class_name: str
    score: float


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    lines = ["variant,seed,class,score"]
    lines += [f"{r.variant},{r.seed},{r.class_name},{r.score!r}" for r in rows]
    return "\n".join(lines) + "\n"


def summarize(rows: Sequence[AblationRow]) -> dict[str, tuple[float, float]]:
    """Per-variant mean and sample stddev of the per-seed mean class score."""
    per: dict[str, dict[int, list[float]]] = {}
    for r in rows:
        per.setdefault(r.variant, {}).setdefault(r.seed, []).append(r.score)
    out = {}
    for v, seeds in per.items():
        means = [float(np.mean(s)) for _, s in sorted(seeds.items())]
        out[v] = (float(np.mean(means)), float(np.std(means, ddof=1)) if len(means) > 1 else 0.0)
    return out


def run_ablation(variants: Sequence[str], seeds: Sequence[int], train_scenes: Sequence[Scene],
                 val_scenes: Sequence[Scene], base: TrainConfig = TrainConfig(),
                 scene_config: SceneConfig = SceneConfig(), render: RenderConfig = RenderConfig(),
                 progress=None) -> list[AblationRow]:
    """Train and evaluate every variant under every seed."""
    if len(seeds) < 3:
        raise ValueError("an ablation needs at least 3 seeds")
    cache: dict[tuple, tuple[PreparedData, PreparedData]] = {}
    rows = []
    for variant in variants:
        slices = variant_slices(variant, grid=scene_config.grid)
        key = tuple((s.lower, s.upper) for s in slices)
        if key not in cache:
            cache[key] = (prepare(train_scenes, slices, scene_config, render),
                          prepare(val_scenes, slices, scene_config, render))
        tr, va = cache[key]
        for seed in seeds:
            cfg = dataclasses.replace(base, variant=variant, seed=seed)
            result = train(cfg, tr)
            report = evaluate(result.model, va, scene_config.grid, scene_config.class_names)
            rows += [AblationRow(variant, seed, n, s) for n, s in zip(report.class_names, report.scores)]
            if progress is not None:
                progress(variant, seed, report)
    return rows


# ---------------------------------------------------------------- checkpoint

CKPT_HEADER = "BEVSAN-CKPT"
CKPT_VERSION = 1


def _hex(x: float) -> str:
    return struct.pack(">d", x).hex()


def _unhex(s: str) -> float:
    if len(s) != 16:
        raise ValueError(f"expected 16 hex digits, got {s!r}")
    return struct.unpack(">d", bytes.fromhex(s))[0]


def checkpoint_text(model: Model, meta: dict[str, str] | None = None) -> str:
    """Header, ``meta`` lines, then one block per parameter: name, shape, hex values."""
    lines = [f"{CKPT_HEADER} v{CKPT_VERSION}",
             f"meta variant {model.variant}",
             f"meta input_scale {_hex(model.input_scale)}",
             f"meta n_global {model.n_global}"]
    for k, v in sorted((meta or {}).items()):
        if any(c.isspace() for c in k) or "\n" in str(v):
            raise ValueError(f"meta key {k!r} must be one token and its value one line")
        lines.append(f"meta {k} {v}")
    for name, arr in model.items():
        arr = np.asarray(arr, dtype=np.float64)
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"param {name} {shape}")
        flat = arr.reshape(-1)
        for a in range(0, flat.size, 8):
            lines.append(" ".join(_hex(float(x)) for x in flat[a:a + 8]))
    lines.append("end")
    return "\n".join(lines) + "\n"


def parse_checkpoint(text: str) -> tuple[Model, dict[str, str]]:
    """Inverse of :func:`checkpoint_text`; any defect raises :class:`CheckpointFormatError`."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CheckpointFormatError(1, "empty file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != CKPT_HEADER or not head[1].startswith("v"):
        raise CheckpointFormatError(1, f"expected '{CKPT_HEADER} v{CKPT_VERSION}', got {lines[0]!r}")
    if head[1] != f"v{CKPT_VERSION}":
        raise CheckpointFormatError(1, f"unsupported checkpoint version {head[1]!r}")
    meta: dict[str, str] = {}
    params: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines) and lines[i].startswith("meta "):
        parts = lines[i].split(" ", 2)
        if len(parts) != 3:
            raise CheckpointFormatError(i + 1, f"malformed meta line {lines[i]!r}")
        meta[parts[1]] = parts[2]
        i += 1
    while i < len(lines) and lines[i] != "end":
        parts = lines[i].split()
        if len(parts) != 3 or parts[0] != "param":
            raise CheckpointFormatError(i + 1, f"expected 'param <name> <shape>', got {lines[i]!r}")
        name = parts[1]
        try:
            shape = () if parts[2] == "scalar" else tuple(int(d) for d in parts[2].split("x"))
        except ValueError:
            raise CheckpointFormatError(i + 1, f"bad shape {parts[2]!r}") from None
        n = int(np.prod(shape)) if shape else 1
        vals: list[float] = []
        i += 1
        while len(vals) < n:
            if i >= len(lines) or lines[i] == "end" or lines[i].startswith("param "):
                raise CheckpointFormatError(i + 1, f"parameter {name} truncated: {len(vals)} of {n} values")
            try:
                vals += [_unhex(tok) for tok in lines[i].split()]
            except ValueError as e:
                raise CheckpointFormatError(i + 1, str(e)) from None
            i += 1
        if len(vals) != n:
            raise CheckpointFormatError(i, f"parameter {name} has {len(vals)} values, expected {n}")
        params[name] = np.array(vals).reshape(shape)
    if i >= len(lines):
        raise CheckpointFormatError(len(lines), "missing 'end' line (truncated file)")
    if i != len(lines) - 1:
        raise CheckpointFormatError(i + 2, "content after 'end'")
    for key in ("variant", "input_scale", "n_global"):
        if key not in meta:
            raise CheckpointFormatError(2, f"missing meta {key}")
    try:
        return _model_from_params(meta, params), {k: v for k, v in meta.items()
                                                  if k not in ("variant", "input_scale", "n_global")}
    except (KeyError, ValueError, IndexError) as e:
        raise CheckpointFormatError(len(lines), f"inconsistent parameters: {e}") from None


def _model_from_params(meta: dict[str, str], params: dict[str, np.ndarray]) -> Model:
    variant = meta["variant"]
    head = params["head.w2"]
    C, K = params["head.w1"].shape[1], head.shape[0]
    J = params["se_local.w1"].shape[1] // C if "se_local.w1" in params else 1
    n_global = int(meta["n_global"])
    reduction = 1
    for blk in ("se_local", "se_global"):
        if f"{blk}.w_squeeze" in params:
            sq = params[f"{blk}.w_squeeze"]
            reduction = sq.shape[0] // sq.shape[1]
    template = init_model(variant, C, K, J, 0, n_global, reduction, _unhex(meta["input_scale"]))
    names = [n for n, _ in template.items()]
    if sorted(names) != sorted(params):
        missing = sorted(set(names) - set(params))
        extra = sorted(set(params) - set(names))
        raise ValueError(f"missing {missing}, unexpected {extra}")
    for n, v in template.items():
        if np.shape(v) != params[n].shape:
            raise ValueError(f"{n} has shape {params[n].shape}, expected {np.shape(v)}")
    return template.replace_values([params[n] for n in names])


def write_checkpoint(model: Model, path, meta: dict[str, str] | None = None) -> None:
    atomic_write_text(path, checkpoint_text(model, meta))


def read_checkpoint(path) -> tuple[Model, dict[str, str]]:
    with open(path, encoding="ascii") as fh:
        return parse_checkpoint(fh.read())


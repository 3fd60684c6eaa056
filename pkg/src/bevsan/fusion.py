"""Two-stage fusion of height-slice stacks.

Stage one squeezes a ``(J, C, He, We)`` stack into ``C`` channels with a
channel-gated 1x1 path plus an ungated 3x3 path.  Stage two lets the
merged global and local maps attend to each other (single head, no
positional encoding, no residuals) and sums the two directions.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

QK_INIT_GAIN = 3.0


class ParamBlock:
    """Dataclass mixin: fields are parameter arrays (or tape Tensors)."""

    def names(self) -> list[str]:
        return [f.name for f in dataclasses.fields(self) if getattr(self, f.name) is not None]

    def items(self):
        return [(n, getattr(self, n)) for n in self.names()]

    def map(self, fn):
        """New block of the same type with ``fn`` applied to every field."""
        return dataclasses.replace(self, **{n: fn(v) for n, v in self.items()})


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _conv_init(rng, c_out, c_in, k) -> np.ndarray:
    return rng.standard_normal((c_out, c_in, k, k)) * math.sqrt(1.0 / (c_in * k * k))


# -------------------------------------------------------------------- stage 1


@dataclass
class SeFusionParams(ParamBlock):
    w1: object          # (C, J*C, 1, 1)
    b1: object          # (C,)
    w_gate: object      # (J*C, hidden) when reduced, else (J*C, J*C); applied as s @ w_gate
    b_gate: object      # (J*C,)
    w2: object          # (C, J*C, 3, 3)
    b2: object          # (C,)
    w_squeeze: object = None   # (J*C, hidden), only with a reduction ratio > 1
    b_squeeze: object = None   # (hidden,)

    @property
    def J(self) -> int:
        return self.w1.shape[1] // self.w1.shape[0]

    @property
    def C(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def init(cls, J: int, C: int, rng: np.random.Generator, reduction: int = 1) -> "SeFusionParams":
        jc = J * C
        if reduction < 1 or jc % reduction:
            raise ValueError(f"reduction ratio {reduction} must divide J*C = {jc}")
        hidden = jc // reduction
        w1 = _conv_init(rng, C, jc, 1)
        w2 = _conv_init(rng, C, jc, 3)
        if reduction == 1:
            w_gate = rng.standard_normal((jc, jc)) / math.sqrt(jc)
            return cls(w1, np.zeros(C), w_gate, np.zeros(jc), w2, np.zeros(C))
        w_sq = rng.standard_normal((jc, hidden)) / math.sqrt(jc)
        w_gate = rng.standard_normal((hidden, jc)) / math.sqrt(hidden)
        return cls(w1, np.zeros(C), w_gate, np.zeros(jc), w2, np.zeros(C), w_sq, np.zeros(hidden))

    def check(self):
        C, jc = self.w1.shape[0], self.w1.shape[1]
        if jc % C:
            raise DimensionError(f"1x1 weight {self.w1.shape} is not J*C -> C")
        expect = {"w1": (C, jc, 1, 1), "b1": (C,), "w2": (C, jc, 3, 3), "b2": (C,), "b_gate": (jc,)}
        if self.w_squeeze is None:
            expect["w_gate"] = (jc, jc)
        else:
            hidden = self.w_squeeze.shape[1]
            expect.update(w_squeeze=(jc, hidden), b_squeeze=(hidden,), w_gate=(hidden, jc))
        for name, shape in expect.items():
            if tuple(getattr(self, name).shape) != shape:
                raise DimensionError(f"SE parameter {name} has shape {getattr(self, name).shape}, expected {shape}")


def se_gate(x: Tensor, p: SeFusionParams) -> Tensor:
    """Sigmoid channel gate from the global average pool of ``x``."""
    s = ad.global_avg_pool(x)
    batched = s.ndim == 2
    if not batched:
        s = ad.reshape(s, (1, -1))
    if p.w_squeeze is not None:
        s = ad.relu(ad.add(ad.matmul(s, _t(p.w_squeeze)), _t(p.b_squeeze)))
    gate = ad.sigmoid(ad.add(ad.matmul(s, _t(p.w_gate)), _t(p.b_gate)))
    return gate if batched else ad.reshape(gate, (-1,))


def se_fuse(stack: Tensor, p: SeFusionParams) -> Tensor:
    """``(J, C, He, We) -> (C, He, We)``; a leading batch axis is allowed."""
    stack = _t(stack)
    p.check()
    if stack.ndim not in (4, 5):
        raise DimensionError(f"se_fuse expects (J, C, He, We) or batched, got {stack.shape}")
    J, C = stack.shape[-4], stack.shape[-3]
    if J * C != p.w1.shape[1] or C != p.C:
        raise DimensionError(f"stack with J={J}, C={C} does not match SE parameters {p.w1.shape}")
    lead = stack.shape[:-4]
    x = ad.reshape(stack, lead + (J * C,) + stack.shape[-2:])
    gated = ad.scale_channels(x, se_gate(x, p))
    a = ad.conv2d(gated, _t(p.w1), _t(p.b1))
    b = ad.conv2d(x, _t(p.w2), _t(p.b2))
    return ad.add(a, b)


# -------------------------------------------------------------------- stage 2


@dataclass
class AttentionParams(ParamBlock):
    wq: object
    bq: object
    wk: object
    bk: object
    wv: object
    bv: object
    wo: object
    bo: object

    @property
    def C(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, C: int, rng: np.random.Generator, qk_gain: float = QK_INIT_GAIN) -> "AttentionParams":
        ws = [rng.standard_normal((C, C)) / math.sqrt(C) for _ in range(4)]
        # larger query/key weights start the softmax sharp enough to keep BEV detail
        ws[0] *= qk_gain
        ws[1] *= qk_gain
        z = np.zeros(C)
        return cls(ws[0], z, ws[1], z.copy(), ws[2], z.copy(), ws[3], z.copy())

    def check(self):
        C = self.C
        for name, v in self.items():
            want = (C,) if name.startswith("b") else (C, C)
            if tuple(v.shape) != want:
                raise DimensionError(f"attention parameter {name} has shape {v.shape}, expected {want}")


@dataclass
class DualBranchParams(ParamBlock):
    g2l: AttentionParams
    l2g: AttentionParams

    def items(self):
        return [(f"g2l.{n}", v) for n, v in self.g2l.items()] + [(f"l2g.{n}", v) for n, v in self.l2g.items()]

    def map(self, fn):
        return DualBranchParams(self.g2l.map(fn), self.l2g.map(fn))

    @classmethod
    def init(cls, C: int, rng: np.random.Generator, qk_gain: float = QK_INIT_GAIN) -> "DualBranchParams":
        return cls(AttentionParams.init(C, rng, qk_gain), AttentionParams.init(C, rng, qk_gain))


def _tokens(x: Tensor) -> Tensor:
    # (..., C, H, W) -> (..., H*W, C)
    lead = x.shape[:-3]
    C, H, W = x.shape[-3:]
    flat = ad.reshape(x, lead + (C, H * W))
    return ad.transpose(flat, tuple(range(len(lead))) + (len(lead) + 1, len(lead)))


def _untokens(t: Tensor, shape) -> Tensor:
    lead = t.shape[:-2]
    back = ad.transpose(t, tuple(range(len(lead))) + (len(lead) + 1, len(lead)))
    return ad.reshape(back, shape)


def attention_weights(q_feat: Tensor, kv_feat: Tensor, p: AttentionParams) -> Tensor:
    """Row-stochastic ``(..., N, N)`` attention of query tokens over key tokens."""
    q = ad.add(ad.matmul(_tokens(q_feat), _t(p.wq)), _t(p.bq))
    k = ad.add(ad.matmul(_tokens(kv_feat), _t(p.wk)), _t(p.bk))
    kt = ad.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    logits = ad.scale(ad.matmul(q, kt), 1.0 / math.sqrt(p.C))
    return ad.softmax(logits, axis=-1)


def attend(q_feat: Tensor, kv_feat: Tensor, p: AttentionParams) -> Tensor:
    """Attention-weighted value tokens ``(..., N, C)`` before the output projection."""
    a = attention_weights(q_feat, kv_feat, p)
    v = ad.add(ad.matmul(_tokens(kv_feat), _t(p.wv)), _t(p.bv))
    return ad.matmul(a, v)


def cross_attention(q_feat: Tensor, kv_feat: Tensor, p: AttentionParams) -> Tensor:
    """Single-head attention of ``q_feat`` tokens over ``kv_feat`` tokens, ``(C, He, We)`` in and out."""
    q_feat, kv_feat = _t(q_feat), _t(kv_feat)
    p.check()
    if q_feat.shape != kv_feat.shape:
        raise DimensionError(f"query {q_feat.shape} and key/value {kv_feat.shape} extents differ")
    if q_feat.ndim not in (3, 4) or q_feat.shape[-3] != p.C:
        raise DimensionError(f"features {q_feat.shape} do not match attention width {p.C}")
    out = ad.add(ad.matmul(attend(q_feat, kv_feat, p), _t(p.wo)), _t(p.bo))
    return _untokens(out, q_feat.shape)


def dual_branch_fuse(b_g: Tensor, b_l: Tensor, p: DualBranchParams) -> Tensor:
    """Sum of local queries over global keys (``g2l``) and the reverse (``l2g``)."""
    b_g, b_l = _t(b_g), _t(b_l)
    if b_g.shape != b_l.shape:
        raise DimensionError(f"global {b_g.shape} and local {b_l.shape} maps differ")
    return ad.add(cross_attention(b_l, b_g, p.g2l), cross_attention(b_g, b_l, p.l2g))


# ------------------------------------------------------------------ pipeline


@dataclass
class FusionParams(ParamBlock):
    se_global: SeFusionParams
    se_local: SeFusionParams
    dual: DualBranchParams

    def items(self):
        out = [(f"se_global.{n}", v) for n, v in self.se_global.items()]
        out += [(f"se_local.{n}", v) for n, v in self.se_local.items()]
        return out + [(f"dual.{n}", v) for n, v in self.dual.items()]

    def map(self, fn):
        return FusionParams(self.se_global.map(fn), self.se_local.map(fn), self.dual.map(fn))

    @classmethod
    def init(cls, J: int, C: int, rng: np.random.Generator, n_global: int = 3,
             reduction: int = 1) -> "FusionParams":
        return cls(SeFusionParams.init(n_global, C, rng, reduction),
                   SeFusionParams.init(J, C, rng, reduction),
                   DualBranchParams.init(C, rng))


def fuse_pipeline(global_stack: Tensor, local_stack: Tensor, params: FusionParams) -> Tensor:
    """Global and local stacks to one ``(C, He, We)`` map."""
    global_stack, local_stack = _t(global_stack), _t(local_stack)
    if global_stack.ndim < 4 or global_stack.shape[-4] != 3:
        raise DimensionError(f"global stack must hold exactly 3 slices, got {global_stack.shape}")
    b_g = se_fuse(global_stack, params.se_global)
    b_l = se_fuse(local_stack, params.se_local)
    return dual_branch_fuse(b_g, b_l, params.dual)

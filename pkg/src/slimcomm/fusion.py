"""Gated multi-scale deformable fusion as plain forward computations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bev import bilinear_sample_many
from .comm import HALO_OFFSETS, SparseFeatureMessage
from .querygen import HEADS, N_POINTS, STENCIL


@dataclass
class SparseNeighborhood:
    """Averaged collaborator features per scale as dense (C, H, W) grids.

    Every received halo block is unpacked onto the cell it describes, so a
    halo around cell c also fills c's eight neighbours. Cells nobody sent stay
    zero and ``present`` is False there.
    """

    values: list[np.ndarray]
    present: list[np.ndarray]

    def lookup(self, l: int, cell) -> np.ndarray:
        """9*C halo vector around `cell` (zeros where absent)."""
        C, H, W = self.values[l].shape
        out = np.zeros((9, C))
        u, v = int(cell[0]), int(cell[1])
        for k, (du, dv) in enumerate(HALO_OFFSETS):
            if 0 <= u + du < W and 0 <= v + dv < H:
                out[k] = self.values[l][:, v + dv, u + du]
        return out.ravel()

    @classmethod
    def empty(cls, shapes, channels) -> "SparseNeighborhood":
        return cls(
            [np.zeros((c, *s)) for c, s in zip(channels, shapes)],
            [np.zeros(s, dtype=bool) for s in shapes],
        )


def _unpack(msg: SparseFeatureMessage, l: int, shape, channels: int):
    H, W = shape
    acc = np.zeros((channels, H, W))
    hits = np.zeros((H, W))
    cells, vals = msg.cells[l], np.asarray(msg.values[l], dtype=float)
    if len(cells) == 0:
        return acc, hits
    blocks = vals.reshape(len(cells), 9, channels) if msg.halo else vals.reshape(len(cells), 1, channels)
    offsets = HALO_OFFSETS if msg.halo else ((0, 0),)
    for k, (du, dv) in enumerate(offsets):
        u, v = cells[:, 0] + du, cells[:, 1] + dv
        ok = (u >= 0) & (u < W) & (v >= 0) & (v < H)
        np.add.at(acc, (slice(None), v[ok], u[ok]), blocks[ok, k].T)
        np.add.at(hits, (v[ok], u[ok]), 1.0)
    mean = np.divide(acc, hits, out=np.zeros_like(acc), where=hits > 0)
    return mean, hits > 0


def average_collaborators(messages, shapes, channels, divide_by_all: bool = False) -> SparseNeighborhood:
    """Per-cell mean over the collaborators that sent the cell.

    With ``divide_by_all`` every cell is divided by the number of
    collaborators instead. Messages are summed in sender order so the result
    does not depend on arrival order.
    """
    messages = sorted(messages, key=lambda m: m.sender)
    nb = SparseNeighborhood.empty(shapes, channels)
    if not messages:
        return nb
    for l, (shape, c) in enumerate(zip(shapes, channels)):
        total = np.zeros((c, *shape))
        count = np.zeros(shape)
        for m in messages:
            if l >= len(m.cells):
                continue
            mean, present = _unpack(m, l, shape, c)
            total += mean
            count += present
        denom = np.full(shape, float(len(messages))) if divide_by_all else count
        nb.values[l] = np.divide(total, denom, out=np.zeros_like(total), where=denom > 0)
        nb.present[l] = count > 0
    return nb


@dataclass
class AttentionLevel:
    w_value: np.ndarray  # (C, C); rows h*d:(h+1)*d feed head h
    w_offset: np.ndarray  # (heads*9*2, C)
    w_logit: np.ndarray  # (heads*9, C)
    w_out: np.ndarray  # (C, C)
    heads: int = HEADS


@dataclass
class AttentionParams:
    levels: list[AttentionLevel]

    @classmethod
    def init(cls, channels, seed: int = 0, heads: int = HEADS, offset_scale: float = 0.05) -> "AttentionParams":
        rng = np.random.default_rng(seed)
        out = []
        for c in channels:
            if c % heads:
                raise ValueError(f"channels {c} not divisible by {heads} heads")
            s = 1 / math.sqrt(c)
            out.append(
                AttentionLevel(
                    w_value=rng.normal(0, s, (c, c)),
                    w_offset=rng.normal(0, offset_scale * s, (heads * N_POINTS * 2, c)),
                    w_logit=rng.normal(0, s, (heads * N_POINTS, c)),
                    w_out=rng.normal(0, s, (c, c)),
                    heads=heads,
                )
            )
        return cls(out)


def sampling_perturbation(embeddings: np.ndarray, p: AttentionLevel) -> np.ndarray:
    """Learned fine offsets on top of the 3x3 stencil, (N, heads, 9, 2)."""
    return (embeddings @ p.w_offset.T).reshape(len(embeddings), p.heads, N_POINTS, 2)


def attention_logits(embeddings: np.ndarray, p: AttentionLevel) -> np.ndarray:
    return (embeddings @ p.w_logit.T).reshape(len(embeddings), p.heads, N_POINTS)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def head_values(samples: np.ndarray, p: AttentionLevel) -> np.ndarray:
    """Project raw samples (N, heads, 9, C) to per-head values (N, heads, 9, d)."""
    C = samples.shape[-1]
    d = C // p.heads
    w = p.w_value.reshape(p.heads, d, C)
    return np.einsum("hdc,nhpc->nhpd", w, samples)


def attention_combine(logits: np.ndarray, values: np.ndarray, w_out: np.ndarray) -> np.ndarray:
    """Softmax over points, weighted sum per head, concat heads, project."""
    w = softmax(logits, axis=-1)
    heads = np.einsum("nhp,nhpd->nhd", w, values)
    return heads.reshape(len(heads), -1) @ w_out.T


def attention_logit_grad(logits: np.ndarray, values: np.ndarray, w_out: np.ndarray, upstream: np.ndarray):
    """Gradient of sum(upstream * attention_combine(...)) w.r.t. the logits."""
    w = softmax(logits, axis=-1)
    g_heads = (upstream @ w_out).reshape(values.shape[0], values.shape[1], values.shape[3])
    g_w = np.einsum("nhd,nhpd->nhp", g_heads, values)
    return w * (g_w - (w * g_w).sum(axis=-1, keepdims=True))


def deformable_cross_attention(
    embeddings: np.ndarray,
    nudged: np.ndarray,
    value_map: np.ndarray,
    p: AttentionLevel,
    logits: np.ndarray | None = None,
    locations: np.ndarray | None = None,
):
    """Fused feature per query.

    Each head samples `value_map` (the neighbourhood's dense grid, absent
    cells zero) bilinearly at the nudged centre plus the stencil and learned
    perturbation, weights the nine samples by a softmax and mixes heads with
    the output projection. Returns (outputs (N, C), locations, weights).
    """
    if locations is None:
        locations = nudged[:, None, None, :] + STENCIL[None, None] + sampling_perturbation(embeddings, p)
    if logits is None:
        logits = attention_logits(embeddings, p)
    samples = bilinear_sample_many(value_map, locations)  # (N, heads, 9, C)
    values = head_values(samples, p)
    out = attention_combine(logits, values, p.w_out)
    return out, locations, softmax(logits, axis=-1)


def scatter_to_grid(features: np.ndarray, cells, shape) -> np.ndarray:
    """Write per-query vectors at their cells, averaging collisions."""
    H, W = shape
    C = features.shape[1] if features.ndim == 2 else 0
    grid = np.zeros((C, H, W))
    cells = np.asarray(cells, dtype=int).reshape(-1, 2)
    if len(cells) == 0:
        return grid
    count = np.zeros((H, W))
    np.add.at(grid, (slice(None), cells[:, 1], cells[:, 0]), features.T)
    np.add.at(count, (cells[:, 1], cells[:, 0]), 1.0)
    return np.divide(grid, count, out=grid, where=count > 0)


@dataclass
class GateLevel:
    weight: np.ndarray  # (C, 2C)
    bias: np.ndarray  # (C,)


@dataclass
class GateParams:
    levels: list[GateLevel]

    @classmethod
    def init(cls, channels, seed: int = 0, bias: float = 0.0) -> "GateParams":
        rng = np.random.default_rng(seed)
        return cls(
            [GateLevel(rng.normal(0, 1 / math.sqrt(2 * c), (c, 2 * c)), np.full(c, bias)) for c in channels]
        )


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gate(F: np.ndarray, F_cav: np.ndarray, g: GateLevel) -> np.ndarray:
    x = np.concatenate([F, F_cav])
    return _sigmoid(np.einsum("ck,khw->chw", g.weight, x) + g.bias[:, None, None])


def gated_blend(F: np.ndarray, F_cav: np.ndarray, g: GateLevel) -> np.ndarray:
    """(1 - G) * F + G * F_cav with a 1x1-conv sigmoid gate."""
    if F.shape != F_cav.shape:
        raise ValueError(f"shape mismatch {F.shape} vs {F_cav.shape}")
    G = gate(F, F_cav, g)
    return F + G * (F_cav - F)


def aggregation_projections(channels, seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    c0 = channels[0]
    return [rng.normal(0, 1 / math.sqrt(c), (c0, c)) for c in channels]


def aggregate_scales(levels, projections) -> np.ndarray:
    """Upsample every level (nearest) to level 0, project to C0 and sum."""
    H0, W0 = levels[0].shape[1:]
    out = np.zeros((projections[0].shape[0], H0, W0))
    for l, (F, P) in enumerate(zip(levels, projections)):
        f = 2**l
        up = np.repeat(np.repeat(F, f, axis=1), f, axis=2)[:, :H0, :W0]
        out += np.einsum("ck,khw->chw", P, up)
    return out


def finite_difference_check(func, grad, x: np.ndarray, eps: float = 1e-4) -> float:
    """Max relative error between `grad(x)` and central differences of `func`.

    The error is normalised by the larger gradient magnitude (infinity norm),
    so tiny components do not inflate it. Non-finite values return inf.
    """
    x = np.array(x, dtype=float)
    analytic = np.asarray(grad(x), dtype=float)
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = func(x)
        flat[i] = old - eps
        fm = func(x)
        flat[i] = old
        num_flat[i] = (fp - fm) / (2 * eps)
    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
        return math.inf
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)

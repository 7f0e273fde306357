"""Ego query generation: heuristic and exploratory reference points, embeddings,
coarse offsets, the offset-regularisation loss and fine sampling locations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bev import bilinear_sample_many

N_POINTS = 9
HEADS = 4
OFFSET_BOUND = 4.0  # cells
# 3x3 integer stencil, row-major over (dv, du)
STENCIL = np.array([(du, dv) for dv in (-1, 0, 1) for du in (-1, 0, 1)], dtype=float)


@dataclass(frozen=True)
class QueryBudget:
    per_scale: tuple[int, ...] = (200, 100, 50)
    percentiles: tuple[float, ...] = (0.5, 0.5, 0.5)
    n_points: int = N_POINTS
    heads: int = HEADS

    def __post_init__(self):
        if any(n < 1 for n in self.per_scale):
            raise ValueError("per-scale budgets must be >= 1")
        if self.n_points != N_POINTS:
            raise ValueError("n_points is fixed to the 3x3 halo (9)")


@dataclass(frozen=True)
class ShadowConfig:
    r_min: float = 2.0
    r_max: float = 8.0
    sigma_lat: float = 1.5

    def at_level(self, l: int) -> "ShadowConfig":
        return ShadowConfig(self.r_min, self.r_max, self.sigma_lat / 2**l)


@dataclass
class LevelParams:
    w1: np.ndarray  # (C, 2C + 2)
    b1: np.ndarray
    w2: np.ndarray  # (C, C)
    b2: np.ndarray
    w_off: np.ndarray  # (2, C)
    b_off: np.ndarray
    token: np.ndarray  # (C,)


@dataclass
class GeneratorParams:
    levels: list[LevelParams]

    @classmethod
    def init(cls, channels, seed: int = 0, offset_scale: float = 0.1) -> "GeneratorParams":
        rng = np.random.default_rng(seed)
        out = []
        for c in channels:
            d_in = 2 * c + 2
            out.append(
                LevelParams(
                    w1=rng.normal(0, 1 / math.sqrt(d_in), (c, d_in)),
                    b1=np.zeros(c),
                    w2=rng.normal(0, 1 / math.sqrt(c), (c, c)),
                    b2=np.zeros(c),
                    w_off=rng.normal(0, offset_scale / math.sqrt(c), (2, c)),
                    b_off=np.zeros(2),
                    # Xavier normal for a 1 x C parameter
                    token=rng.normal(0, math.sqrt(2.0 / (1 + c)), c),
                )
            )
        return cls(out)


@dataclass
class ScaleQueries:
    hrp: np.ndarray  # (n_h, 2)
    erp: np.ndarray  # (n_e, 2)
    erp_origin: np.ndarray  # (n_e, 2) centroid each ERP was cast from
    embeddings: np.ndarray  # (n_h + n_e, C)
    offsets: np.ndarray  # (n_h + n_e, 2)
    nudged: np.ndarray  # (n_h + n_e, 2)
    delta: float  # realised mean occluder-to-shadow distance
    fine: np.ndarray | None = None  # (n, heads, 9, 2)

    @property
    def anchors(self) -> np.ndarray:
        return np.concatenate([self.hrp, self.erp])

    @property
    def n_hrp(self) -> int:
        return len(self.hrp)

    @property
    def offsets_h(self) -> np.ndarray:
        return self.offsets[: self.n_hrp]

    @property
    def offsets_e(self) -> np.ndarray:
        return self.offsets[self.n_hrp :]

    @property
    def anchor_cells(self) -> np.ndarray:
        return np.floor(self.nudged + 0.5).astype(int)


@dataclass
class QuerySet:
    scales: list[ScaleQueries] = field(default_factory=list)
    shapes: list[tuple[int, int]] = field(default_factory=list)


def _row_major_rank(values: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """Sort cells by value descending with row-major (v, u) tie-break."""
    order = np.lexsort((cells[:, 0], cells[:, 1], -values))
    return cells[order]


def select_hrp(dynamic: np.ndarray, confidence: np.ndarray, budget: int) -> np.ndarray:
    """Dynamic cells first, then the strongest non-dynamic confidence cells.

    Both pools are ranked by confidence; the result is truncated to `budget`
    or padded by repeating the top-ranked cell.
    """
    vv, uu = np.nonzero(dynamic)
    pool1 = _row_major_rank(confidence[vv, uu], np.stack([uu, vv], axis=1))
    vv, uu = np.nonzero((dynamic == 0) & (confidence > 0))
    pool2 = _row_major_rank(confidence[vv, uu], np.stack([uu, vv], axis=1))
    cells = np.concatenate([pool1, pool2])[:budget]
    if len(cells) == 0:
        v, u = np.unravel_index(np.argmax(confidence), confidence.shape)
        cells = np.array([[u, v]])
    if len(cells) < budget:
        cells = np.concatenate([cells, np.repeat(cells[:1], budget - len(cells), axis=0)])
    return cells.astype(float)


def local_maxima(conf: np.ndarray) -> np.ndarray:
    """Boolean mask of cells equal to their 3x3 maximum (border masked)."""
    H, W = conf.shape
    padded = np.pad(conf, 1, constant_values=-np.inf)
    windows = np.stack([padded[dv : dv + H, du : du + W] for dv in range(3) for du in range(3)])
    peak = (conf >= windows.max(axis=0)) & (conf > 0)
    peak[0, :] = peak[-1, :] = False
    peak[:, 0] = peak[:, -1] = False
    return peak


def find_occluders(conf: np.ndarray, percentile: float = 0.5) -> np.ndarray:
    """Occluder centroids: local maxima above the per-scene percentile.

    Plateau ties inside a 3x3 window keep the first cell in row-major order.
    Returned (u, v) cells are sorted by confidence descending.
    """
    positive = conf[conf > 0]
    if positive.size == 0:
        return np.zeros((0, 2), dtype=int)
    thresh = np.quantile(positive, percentile)
    vv, uu = np.nonzero(local_maxima(conf) & (conf >= thresh))  # row-major order
    kept: list[tuple[int, int]] = []
    taken = set()
    for u, v in zip(uu.tolist(), vv.tolist()):
        if (u, v) in taken:
            continue
        kept.append((u, v))
        taken.update((u + du, v + dv) for du in (-1, 0, 1) for dv in (-1, 0, 1))
    cells = np.array(kept, dtype=int).reshape(-1, 2)
    return _row_major_rank(conf[cells[:, 1], cells[:, 0]], cells)


def shadow_sample(centroids, ego_cell, budget: int, shape, seed: int, cfg: ShadowConfig = ShadowConfig()):
    """Cast ERPs behind occluder centroids, away from the ego.

    Returns (erp, origin) arrays of shape (budget, 2). Without centroids the
    ERPs are drawn uniformly from cells beyond the 75th-percentile range ring
    and their origin is the ego cell.
    """
    rng = np.random.default_rng(seed)
    H, W = shape
    ego = np.asarray(ego_cell, dtype=float)
    centroids = np.asarray(centroids, dtype=float).reshape(-1, 2)
    hi = np.array([W - 1, H - 1], dtype=float)
    if len(centroids) == 0:
        vv, uu = np.mgrid[0:H, 0:W]
        cells = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(float)
        rng_dist = np.linalg.norm(cells - ego, axis=1)
        far = cells[rng_dist >= np.quantile(rng_dist, 0.75)]
        erp = far[rng.integers(0, len(far), size=budget)]
        return erp, np.repeat(ego[None], budget, axis=0)
    origin = centroids[np.arange(budget) % len(centroids)]
    d = origin - ego
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    d = np.where(norm > 0, d / np.where(norm > 0, norm, 1.0), np.array([1.0, 0.0]))
    d_perp = np.stack([-d[:, 1], d[:, 0]], axis=1)
    r = rng.uniform(cfg.r_min, cfg.r_max, size=budget)
    s = rng.normal(0.0, cfg.sigma_lat, size=budget) if cfg.sigma_lat > 0 else np.zeros(budget)
    erp = origin + r[:, None] * d + s[:, None] * d_perp
    return np.clip(erp, 0.0, hi), origin


def embed_hrp(features: np.ndarray, hrp: np.ndarray) -> np.ndarray:
    return bilinear_sample_many(features, hrp)


def _erp_input(occluder_feat, offsets, token):
    occluder_feat = np.atleast_2d(occluder_feat)
    n = occluder_feat.shape[0]
    return np.concatenate([occluder_feat, np.asarray(offsets).reshape(n, 2), np.broadcast_to(token, (n, len(token)))], axis=1)


def embed_erp(occluder_feat, offsets, token, p: LevelParams) -> np.ndarray:
    """Two-layer tanh MLP over [occluder feature | shadow offset | token]."""
    x = _erp_input(occluder_feat, offsets, token)
    if x.shape[1] != p.w1.shape[1]:
        raise ValueError(f"ERP input width {x.shape[1]} does not match MLP fan-in {p.w1.shape[1]}")
    h = np.tanh(x @ p.w1.T + p.b1)
    return h @ p.w2.T + p.b2


def embed_erp_token_jacobian(occluder_feat, offsets, token, p: LevelParams) -> np.ndarray:
    """d embedding[n] / d token as an (N, C, C) array."""
    x = _erp_input(occluder_feat, offsets, token)
    h = np.tanh(x @ p.w1.T + p.b1)
    c = len(token)
    w_tok = p.w1[:, -c:]
    return np.einsum("ij,nj,jk->nik", p.w2, 1 - h**2, w_tok)


def coarse_offset(embeddings: np.ndarray, anchors: np.ndarray, p: LevelParams, shape):
    """Squashed per-anchor offsets (|O| <= 4 cells per axis) and nudged centres."""
    H, W = shape
    offsets = OFFSET_BOUND * np.tanh(embeddings @ p.w_off.T + p.b_off)
    nudged = np.clip(anchors + offsets, 0.0, [W - 1, H - 1])
    return offsets, nudged


def offset_regularization_loss(offsets_h, offsets_e, deltas) -> tuple[float, list[int]]:
    """Sum over scales of [delta_l - (E|O_E| - E|O_H|)]_+.

    Scales where either set is empty are skipped; their indices are returned.
    """
    total, skipped = 0.0, []
    for l, (oh, oe, delta) in enumerate(zip(offsets_h, offsets_e, deltas)):
        if len(oh) == 0 or len(oe) == 0:
            skipped.append(l)
            continue
        gap = np.linalg.norm(oe, axis=1).mean() - np.linalg.norm(oh, axis=1).mean()
        total += max(delta - gap, 0.0)
    return float(total), skipped


def offset_regularization_grad(offsets_h, offsets_e, deltas):
    """Analytic gradient of the loss w.r.t. every offset (per scale lists)."""
    g_h, g_e = [], []
    for oh, oe, delta in zip(offsets_h, offsets_e, deltas):
        oh, oe = np.asarray(oh, float), np.asarray(oe, float)
        if len(oh) == 0 or len(oe) == 0:
            g_h.append(np.zeros_like(oh))
            g_e.append(np.zeros_like(oe))
            continue
        nh = np.linalg.norm(oh, axis=1, keepdims=True)
        ne = np.linalg.norm(oe, axis=1, keepdims=True)
        active = float(delta - (ne.mean() - nh.mean()) > 0)
        g_h.append(active * oh / np.where(nh > 0, nh, 1.0) / len(oh))
        g_e.append(-active * oe / np.where(ne > 0, ne, 1.0) / len(oe))
    return g_h, g_e


def fine_sampling_locations(nudged: np.ndarray, perturbation: np.ndarray | None = None, heads: int = HEADS, shape=None):
    """Q = {a + stencil_p + perturbation[h, p]} as an (N, heads, 9, 2) array."""
    nudged = np.asarray(nudged, dtype=float).reshape(-1, 2)
    q = nudged[:, None, None, :] + STENCIL[None, None, :, :]
    q = np.broadcast_to(q, (len(nudged), heads, N_POINTS, 2)).copy()
    if perturbation is not None:
        q += perturbation
    if shape is not None:
        H, W = shape
        q = np.clip(q, 0.0, [W - 1, H - 1])
    return q


def generate_queries(
    features,
    dynamic_levels,
    confidence_levels,
    params: GeneratorParams,
    budget: QueryBudget,
    shadow: ShadowConfig,
    ego_cells,
    seed: int,
    use_hrp: bool = True,
    use_erp: bool = True,
) -> QuerySet:
    """Run both branches at every scale and apply the coarse nudge."""
    qs = QuerySet()
    for l, (F, D, C, p) in enumerate(zip(features, dynamic_levels, confidence_levels, params.levels)):
        shape = F.shape[1:]
        n_r = budget.per_scale[l]
        ch = F.shape[0]
        level_seed = int(np.random.SeedSequence([seed, 7, l]).generate_state(1)[0])
        if use_hrp:
            hrp = select_hrp(D, C, n_r)
            e_h = embed_hrp(F, hrp)
        else:
            hrp, e_h = np.zeros((0, 2)), np.zeros((0, ch))
        if use_erp:
            cents = find_occluders(C, budget.percentiles[l])
            erp, origin = shadow_sample(cents, ego_cells[l], n_r, shape, level_seed, shadow.at_level(l))
            e_e = embed_erp(bilinear_sample_many(F, origin), erp - origin, p.token, p)
            delta = float(np.linalg.norm(erp - origin, axis=1).mean())
        else:
            erp, origin, e_e, delta = np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, ch)), 0.0
        anchors = np.concatenate([hrp, erp])
        emb = np.concatenate([e_h, e_e])
        offsets, nudged = coarse_offset(emb, anchors, p, shape)
        qs.scales.append(ScaleQueries(hrp, erp, origin, emb, offsets, nudged, delta))
        qs.shapes.append(shape)
    return qs

"""BEV grid geometry, pillarisation, toy feature pyramid, warping and sampling.

Grid convention: arrays are indexed ``[..., v, u]`` (row, column). Continuous
grid coordinates ``(u, v)`` put integer values at cell centres, so a point at
metric ``x`` lies at ``u = (x - x_min) / cell - 0.5`` and belongs to cell
``floor((x - x_min) / cell)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .scene import AgentPose
from .sensors import SensorCloud

N_STATS = 5


@dataclass(frozen=True)
class GridSpec:
    cell_x: float = 0.4
    cell_y: float = 0.4
    length: float = 281.6  # along the vehicle x axis
    width: float = 80.0
    z_band: float = 4.0
    n_max: int = 32

    @property
    def W(self) -> int:
        return int(math.ceil(self.length / self.cell_x - 1e-9))

    @property
    def H(self) -> int:
        return int(math.ceil(self.width / self.cell_y - 1e-9))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.H, self.W)

    @property
    def x_min(self) -> float:
        return -self.length / 2.0

    @property
    def y_min(self) -> float:
        return -self.width / 2.0

    def scaled(self, factor: int) -> "GridSpec":
        return replace(self, cell_x=self.cell_x * factor, cell_y=self.cell_y * factor)

    def level(self, l: int) -> "GridSpec":
        """Geometry of pyramid level l (stride 2**(l+1) from the pillar grid)."""
        return self.scaled(2 ** (l + 1))

    def to_grid(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        return np.stack(
            [(xy[..., 0] - self.x_min) / self.cell_x - 0.5, (xy[..., 1] - self.y_min) / self.cell_y - 0.5], axis=-1
        )

    def to_metric(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return np.stack(
            [self.x_min + (uv[..., 0] + 0.5) * self.cell_x, self.y_min + (uv[..., 1] + 0.5) * self.cell_y], axis=-1
        )

    def cell_of(self, xy) -> np.ndarray:
        """Integer (u, v) cells by floor; (-1, -1) outside the extent."""
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        u = np.floor((xy[:, 0] - self.x_min) / self.cell_x).astype(int)
        v = np.floor((xy[:, 1] - self.y_min) / self.cell_y).astype(int)
        ok = (u >= 0) & (u < self.W) & (v >= 0) & (v < self.H)
        return np.where(ok[:, None], np.stack([u, v], axis=1), -1)

    @property
    def center_cell(self) -> np.ndarray:
        """Continuous grid coordinate of the agent (the metric origin)."""
        return self.to_grid(np.zeros(2))


PAPER_GRID = GridSpec()
SMALL_GRID = GridSpec(cell_x=0.8, cell_y=0.8)

PAPER_CHANNELS = (128, 256, 512)
SMALL_CHANNELS = (8, 16, 32)


def grid_from_config(value) -> GridSpec:
    if value is None or value == "paper":
        return PAPER_GRID
    if value == "small":
        return SMALL_GRID
    return GridSpec(**value)


def channels_from_config(value) -> tuple[int, ...]:
    if value is None or value == "small":
        return SMALL_CHANNELS
    if value == "paper":
        return PAPER_CHANNELS
    return tuple(int(c) for c in value["channels"])


@dataclass
class PillarStats:
    """Per-cell statistics over retained points (at most n_max per cell).

    ``point_cell``/``point_z`` list the retained points in arrival order as
    flat cell indices, which is all the height rules need.
    """

    count: np.ndarray
    mean_z: np.ndarray
    max_z: np.ndarray
    min_z: np.ndarray
    mean_abs_doppler: np.ndarray
    point_cell: np.ndarray
    point_z: np.ndarray
    spec: GridSpec = field(repr=False, default=PAPER_GRID)

    def stack(self) -> np.ndarray:
        """(5, H, W) stat vector: count/n_max, mean z, max z, min z, mean |doppler|."""
        return np.stack(
            [self.count / self.spec.n_max, self.mean_z, self.max_z, self.min_z, self.mean_abs_doppler]
        )


def pillarize(cloud: SensorCloud, spec: GridSpec) -> PillarStats:
    H, W = spec.shape
    cells = spec.cell_of(cloud.xy) if len(cloud) else np.zeros((0, 2), dtype=int)
    inside = cells[:, 0] >= 0
    flat = np.where(inside, cells[:, 1] * W + cells[:, 0], -1)
    # FIFO capacity: rank each point within its cell by arrival order
    order = np.argsort(flat, kind="stable")
    sorted_flat = flat[order]
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_flat)) + 1] if len(flat) else np.zeros(0, dtype=int)
    rank_sorted = np.arange(len(flat)) - np.repeat(starts, np.diff(np.r_[starts, len(flat)]))
    rank = np.empty(len(flat), dtype=int)
    rank[order] = rank_sorted
    keep = inside & (rank < spec.n_max)

    idx = flat[keep]
    z = cloud.z[keep]
    dop = np.abs(np.nan_to_num(cloud.doppler[keep], nan=0.0))
    n = H * W
    count = np.bincount(idx, minlength=n).astype(float)
    safe = np.maximum(count, 1.0)
    mean_z = np.bincount(idx, weights=z, minlength=n) / safe
    mean_d = np.bincount(idx, weights=dop, minlength=n) / safe
    max_z = np.full(n, -np.inf)
    min_z = np.full(n, np.inf)
    np.maximum.at(max_z, idx, z)
    np.minimum.at(min_z, idx, z)
    empty = count == 0
    max_z[empty] = 0.0
    min_z[empty] = 0.0
    shape = (H, W)
    return PillarStats(
        count=count.reshape(shape),
        mean_z=mean_z.reshape(shape),
        max_z=max_z.reshape(shape),
        min_z=min_z.reshape(shape),
        mean_abs_doppler=mean_d.reshape(shape),
        point_cell=idx,
        point_z=z,
        spec=spec,
    )


def _pad_to(x: np.ndarray, factor: int, value: float) -> np.ndarray:
    H, W = x.shape[-2:]
    ph, pw = (-H) % factor, (-W) % factor
    if ph or pw:
        pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
        x = np.pad(x, pad, constant_values=value)
    return x


def _blocks(x: np.ndarray, factor: int) -> np.ndarray:
    H, W = x.shape[-2:]
    return x.reshape(*x.shape[:-2], H // factor, factor, W // factor, factor)


def avg_pool(x: np.ndarray, factor: int = 2) -> np.ndarray:
    return _blocks(_pad_to(x, factor, 0.0), factor).mean(axis=(-3, -1))


def max_pool(x: np.ndarray, factor: int = 2) -> np.ndarray:
    return _blocks(_pad_to(x, factor, -np.inf), factor).max(axis=(-3, -1))


@dataclass
class FeaturePyramid:
    levels: list[np.ndarray]

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.levels)

    def __len__(self) -> int:
        return len(self.levels)


def encoder_projections(channels, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    mats, fan_in = [], 2 * N_STATS
    for c in channels:
        mats.append(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(c, fan_in)))
        fan_in = c
    return mats


def encode_features(lidar_stats: PillarStats, radar_stats: PillarStats, channels=SMALL_CHANNELS, encoder_seed: int = 0):
    """Seeded linear stand-in for the BEV backbone.

    Level 0 projects the 2x2-average-pooled 10-dim stat vector; every deeper
    level average-pools the previous one and projects again. No biases, so
    empty regions stay exactly zero.
    """
    if lidar_stats.count.shape != radar_stats.count.shape:
        raise ValueError("lidar and radar stats must share a grid")
    x = np.concatenate([lidar_stats.stack(), radar_stats.stack()])
    levels = []
    for P in encoder_projections(channels, encoder_seed):
        x = avg_pool(x, 2)
        x = np.einsum("ck,khw->chw", P, x)
        levels.append(x)
    return FeaturePyramid(levels)


def bilinear_sample_many(grid: np.ndarray, locs: np.ndarray) -> np.ndarray:
    """Bilinear samples of a (C, H, W) or (H, W) grid at (..., 2) (u, v) locations.

    Neighbours outside the grid contribute zero. Returns (..., C) or (...,).
    """
    squeeze = grid.ndim == 2
    g = grid[None] if squeeze else grid
    C, H, W = g.shape
    locs = np.asarray(locs, dtype=float)
    u, v = locs[..., 0], locs[..., 1]
    u0, v0 = np.floor(u), np.floor(v)
    fu, fv = u - u0, v - v0
    u0, v0 = u0.astype(int), v0.astype(int)
    out = np.zeros(locs.shape[:-1] + (C,))
    for du, dv, w in ((0, 0, (1 - fu) * (1 - fv)), (1, 0, fu * (1 - fv)), (0, 1, (1 - fu) * fv), (1, 1, fu * fv)):
        uu, vv = u0 + du, v0 + dv
        ok = (uu >= 0) & (uu < W) & (vv >= 0) & (vv < H)
        vals = g[:, np.clip(vv, 0, H - 1), np.clip(uu, 0, W - 1)]  # (C, ...)
        out += np.moveaxis(vals, 0, -1) * (w * ok)[..., None]
    return out[..., 0] if squeeze else out


def bilinear_sample(grid: np.ndarray, loc) -> np.ndarray:
    return bilinear_sample_many(grid, np.asarray(loc, dtype=float)[None])[0]


def nearest_sample_many(grid: np.ndarray, locs: np.ndarray) -> np.ndarray:
    squeeze = grid.ndim == 2
    g = grid[None] if squeeze else grid
    C, H, W = g.shape
    uu = np.floor(locs[..., 0] + 0.5).astype(int)
    vv = np.floor(locs[..., 1] + 0.5).astype(int)
    ok = (uu >= 0) & (uu < W) & (vv >= 0) & (vv < H)
    vals = np.moveaxis(g[:, np.clip(vv, 0, H - 1), np.clip(uu, 0, W - 1)], 0, -1) * ok[..., None]
    return vals[..., 0] if squeeze else vals


def relative_transform(src: AgentPose, dst: AgentPose):
    """Rotation and translation mapping dst-frame metric points into the src frame."""
    dyaw = dst.yaw - src.yaw
    c, s = math.cos(dyaw), math.sin(dyaw)
    R = np.array([[c, -s], [s, c]])
    cs, ss = math.cos(src.yaw), math.sin(src.yaw)
    d = np.asarray(dst.position, dtype=float) - np.asarray(src.position, dtype=float)
    t = np.array([cs * d[0] + ss * d[1], -ss * d[0] + cs * d[1]])
    return R, t


def map_cells(uv: np.ndarray, spec: GridSpec, src: AgentPose, dst: AgentPose) -> np.ndarray:
    """Continuous src-grid coordinates of dst-grid coordinates `uv`."""
    R, t = relative_transform(src, dst)
    return spec.to_grid(spec.to_metric(uv) @ R.T + t)


def warp_to_frame(grid: np.ndarray, spec: GridSpec, src: AgentPose, dst: AgentPose, interpolation: str = "bilinear"):
    """Resample a grid expressed in `src`'s frame into `dst`'s frame."""
    H, W = grid.shape[-2:]
    vv, uu = np.mgrid[0:H, 0:W]
    uv = np.stack([uu, vv], axis=-1).astype(float)
    if src == dst or (src.position == dst.position and src.yaw == dst.yaw):
        locs = uv
    else:
        locs = map_cells(uv, spec, src, dst)
    if interpolation == "nearest":
        out = nearest_sample_many(grid, locs)
    elif interpolation == "bilinear":
        out = bilinear_sample_many(grid, locs)
    else:
        raise ValueError(f"unknown interpolation {interpolation!r}")
    return out if grid.ndim == 2 else np.moveaxis(out, -1, 0)

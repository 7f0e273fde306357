"""Dynamic, confidence and foreground-density priors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .bev import GridSpec, PillarStats, avg_pool, max_pool
from .sensors import RadarMount, SensorCloud


@dataclass(frozen=True)
class Thresholds:
    v_th: float = 1.0
    t_lower: float = -1.2
    t_upper: float = 0.0
    t_max: float = 1.0

    def __post_init__(self):
        if not self.t_lower < self.t_upper < self.t_max:
            raise ValueError("expected t_lower < t_upper < t_max")


def compensate_doppler(cloud: SensorCloud, v_veh, mounts) -> tuple[np.ndarray, int]:
    """Radial velocity of every radar point with ego motion added back.

    Returns one value per point of ``cloud.radar`` (NaN for skipped points)
    and the number of points skipped for a zero-length line of sight.
    """
    radar = cloud.radar
    by_index = {m.index: m for m in mounts}
    out = np.full(len(radar), np.nan)
    skipped = 0
    v_veh = np.asarray(v_veh, dtype=float)
    for k in np.unique(radar.source):
        m: RadarMount = by_index[int(k)]
        sel = radar.source == k
        p = (radar.xy[sel] - np.asarray(m.translation)) @ m.rotation().T
        norm = np.linalg.norm(p, axis=1)
        ok = norm > 0
        skipped += int((~ok).sum())
        u = p[ok] / norm[ok, None]
        v_k = m.rotation() @ v_veh
        vals = np.full(sel.sum(), np.nan)
        vals[ok] = radar.doppler[sel][ok] + u @ v_k
        out[sel] = vals
    return out, skipped


def dynamic_map(xy: np.ndarray, v_radial: np.ndarray, spec: GridSpec, v_th: float = 1.0) -> np.ndarray:
    """Binary map: 1 where any point has |v_radial| > v_th."""
    D = np.zeros(spec.shape, dtype=np.uint8)
    if len(v_radial) == 0:
        return D
    cells = spec.cell_of(xy)
    moving = (cells[:, 0] >= 0) & (np.abs(np.nan_to_num(v_radial, nan=0.0)) > v_th)
    D[cells[moving, 1], cells[moving, 0]] = 1
    return D


def foreground_mask(stats: PillarStats, th: Thresholds = Thresholds()) -> np.ndarray:
    """Cell is foreground iff it has points, none above t_max, and one in band.

    The tall-point rule is applied first, so a cell holding both a tall and an
    in-band point is background. Empty cells are background.
    """
    n = stats.count.size
    idx, z = stats.point_cell, stats.point_z
    tall = np.bincount(idx, weights=(z > th.t_max), minlength=n) > 0
    in_band = np.bincount(idx, weights=(z >= th.t_lower) & (z <= th.t_upper), minlength=n) > 0
    fg = in_band & ~tall & (stats.count.ravel() > 0)
    return fg.reshape(stats.count.shape).astype(np.uint8)


def density_scale(counts: np.ndarray, n_max: int = 32) -> np.ndarray:
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    return np.clip(counts / n_max, 0.0, 1.0)


def foreground_density_map(fg: np.ndarray, ds: np.ndarray) -> np.ndarray:
    if fg.shape != ds.shape:
        raise ValueError(f"shape mismatch {fg.shape} vs {ds.shape}")
    return fg * ds


def confidence_map(occupancy: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Heuristic confidence: Gaussian-blurred visible-surface occupancy in [0, 1]."""
    blurred = gaussian_filter(occupancy.astype(float), sigma=sigma, mode="constant", cval=0.0, truncate=3.0)
    return np.clip(blurred, 0.0, 1.0)


@dataclass
class PriorMaps:
    dynamic: np.ndarray
    confidence: np.ndarray
    density: np.ndarray
    dynamic_levels: list[np.ndarray] = field(default_factory=list)
    confidence_levels: list[np.ndarray] = field(default_factory=list)


def downsample_priors(dynamic: np.ndarray, confidence: np.ndarray, n_levels: int = 3):
    """Max-pool the binary map and average-pool confidence to each level."""
    d_levels, c_levels = [], []
    for l in range(n_levels):
        f = 2 ** (l + 1)
        d_levels.append(max_pool(dynamic.astype(float), f).astype(np.uint8))
        c_levels.append(avg_pool(confidence, f))
    return d_levels, c_levels


def compute_priors(
    lidar_stats: PillarStats,
    radar_stats: PillarStats,
    radar_cloud: SensorCloud,
    v_veh,
    mounts,
    spec: GridSpec,
    th: Thresholds = Thresholds(),
    n_levels: int = 3,
) -> PriorMaps:
    v_rad, _ = compensate_doppler(radar_cloud, v_veh, mounts)
    D = dynamic_map(radar_cloud.radar.xy, v_rad, spec, th.v_th)
    fg = foreground_mask(lidar_stats, th) | foreground_mask(radar_stats, th)
    ds = density_scale(lidar_stats.count + radar_stats.count, spec.n_max)
    V = foreground_density_map(fg, ds)
    C = confidence_map(fg)
    d_levels, c_levels = downsample_priors(D, C, n_levels)
    return PriorMaps(D, C, V, d_levels, c_levels)

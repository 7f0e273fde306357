"""Planar geometry helpers: rotations, oriented boxes, ray casting, visibility."""

from __future__ import annotations

import math

import numpy as np


def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    return math.pi - ((math.pi - a) % (2.0 * math.pi))


def rot(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def to_local(points: np.ndarray, position, yaw: float) -> np.ndarray:
    """World -> frame located at `position` with heading `yaw`."""
    return (np.asarray(points, dtype=float) - np.asarray(position, dtype=float)) @ rot(yaw)


def to_world(points: np.ndarray, position, yaw: float) -> np.ndarray:
    return np.asarray(points, dtype=float) @ rot(yaw).T + np.asarray(position, dtype=float)


def box_corners(center, yaw: float, length: float, width: float) -> np.ndarray:
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    return to_world(local, center, yaw)


def _slab(origins_local: np.ndarray, dirs_local: np.ndarray, half: np.ndarray):
    # origins_local, dirs_local: (..., 2); half: broadcastable (..., 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs_local
        t1 = (-half - origins_local) * inv
        t2 = (half - origins_local) * inv
    # a zero direction component: inside the slab -> (-inf, inf), outside -> empty
    zero = dirs_local == 0.0
    inside = np.abs(origins_local) <= half
    lo = np.where(zero, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(zero, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    return lo.max(axis=-1), hi.min(axis=-1)


def cast_rays(origin, angles: np.ndarray, boxes: np.ndarray, max_range: float):
    """First hit of planar rays against oriented boxes.

    `boxes` is an (B, 5) array of (cx, cy, yaw, length, width). Returns
    (distance, box_index) arrays of length R; misses have distance inf and
    index -1. Boxes containing the origin are ignored.
    """
    angles = np.asarray(angles, dtype=float)
    n = angles.shape[0]
    if len(boxes) == 0 or n == 0:
        return np.full(n, np.inf), np.full(n, -1, dtype=int)
    boxes = np.asarray(boxes, dtype=float)
    origin = np.asarray(origin, dtype=float)
    c, s = np.cos(boxes[:, 2]), np.sin(boxes[:, 2])
    rel = origin[None, :] - boxes[:, :2]
    o_loc = np.stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1]], axis=-1)
    dx, dy = np.cos(angles)[:, None], np.sin(angles)[:, None]
    d_loc = np.stack([c[None] * dx + s[None] * dy, -s[None] * dx + c[None] * dy], axis=-1)
    half = boxes[:, 3:5] / 2.0
    tmin, tmax = _slab(np.broadcast_to(o_loc, d_loc.shape), d_loc, half[None])
    hit = (tmax >= tmin) & (tmin > 0.0) & (tmin <= max_range)
    t = np.where(hit, tmin, np.inf)
    idx = np.argmin(t, axis=1)
    dist = t[np.arange(n), idx]
    idx = np.where(np.isfinite(dist), idx, -1)
    return dist, idx


def segment_blocked(a, b, boxes: np.ndarray, exclude=()) -> bool:
    """Brute-force test: does the open segment a->b pass through any box?"""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 5)
    keep = np.ones(len(boxes), dtype=bool)
    keep[list(exclude)] = False
    boxes = boxes[keep]
    if len(boxes) == 0:
        return False
    a = np.asarray(a, dtype=float)
    d = np.asarray(b, dtype=float) - a
    c, s = np.cos(boxes[:, 2]), np.sin(boxes[:, 2])
    rel = a[None] - boxes[:, :2]
    o = np.stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1]], axis=1)
    dl = np.stack([c * d[0] + s * d[1], -s * d[0] + c * d[1]], axis=1)
    lo, hi = _slab(o, dl, boxes[:, 3:5] / 2.0)
    return bool(np.any(np.minimum(hi, 1.0) - np.maximum(lo, 0.0) > 1e-9))


def points_in_box(points: np.ndarray, center, yaw: float, length: float, width: float) -> np.ndarray:
    loc = to_local(points, center, yaw)
    return (np.abs(loc[..., 0]) <= length / 2.0) & (np.abs(loc[..., 1]) <= width / 2.0)

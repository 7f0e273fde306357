"""LiDAR and six-radar rig simulation by planar ray casting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import cast_rays, rot
from .scene import Scene, VehicleState

LIDAR = -1
# per-vehicle speed cap is 60 m/s, so no closing speed exceeds twice that
DOPPLER_BOUND = 120.0


@dataclass(frozen=True)
class RadarMount:
    index: int
    yaw_deg: float
    translation: tuple[float, float] = (0.0, 0.0)
    fov_deg: float = 120.0
    max_range: float = 150.0

    def __post_init__(self):
        if not 0 < self.fov_deg <= 360:
            raise ValueError("fov must lie in (0, 360]")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")

    @property
    def yaw(self) -> float:
        return math.radians(self.yaw_deg)

    def rotation(self) -> np.ndarray:
        """Extrinsic rotation taking vehicle-frame vectors into the radar frame."""
        return rot(-self.yaw)


# three front, one rear, two mirror radars looking back along the adjacent lanes
DEFAULT_RIG = (
    RadarMount(0, 0.0, (2.3, 0.0)),
    RadarMount(1, 45.0, (2.2, 0.8)),
    RadarMount(2, -45.0, (2.2, -0.8)),
    RadarMount(3, 180.0, (-2.3, 0.0)),
    RadarMount(4, 135.0, (0.9, 1.0)),
    RadarMount(5, -135.0, (0.9, -1.0)),
)


def rig_from_config(entries: list | None) -> tuple[RadarMount, ...]:
    if not entries:
        return DEFAULT_RIG
    return tuple(
        RadarMount(
            index=i,
            yaw_deg=float(e.get("yaw", 0.0)),
            translation=tuple(e.get("offset", (0.0, 0.0))),
            fov_deg=float(e.get("fov", 120.0)),
            max_range=float(e.get("range", 150.0)),
        )
        for i, e in enumerate(entries)
    )


@dataclass(frozen=True)
class LidarSpec:
    n_rays: int = 1024
    max_range: float = 120.0
    range_noise: float = 0.02
    mount_height: float = 1.9


@dataclass
class SensorCloud:
    """Points in the vehicle frame; z is relative to the roof LiDAR origin.

    `source` is -1 for LiDAR and the mount index for radar; `doppler` is NaN
    for LiDAR points. `object_id` records which scene object was hit
    (obstacles are negative).
    """

    xy: np.ndarray
    z: np.ndarray
    doppler: np.ndarray
    source: np.ndarray
    object_id: np.ndarray

    def __post_init__(self):
        is_radar = self.source >= 0
        if np.any(np.isnan(self.doppler) == is_radar):
            raise ValueError("doppler must be present exactly for radar points")
        if np.any(np.abs(self.doppler[is_radar]) > DOPPLER_BOUND):
            raise ValueError("doppler exceeds the closing-speed bound")

    @classmethod
    def empty(cls) -> "SensorCloud":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros(0), np.zeros(0, dtype=int), np.zeros(0, dtype=int))

    def __len__(self) -> int:
        return len(self.z)

    def subset(self, mask) -> "SensorCloud":
        return SensorCloud(self.xy[mask], self.z[mask], self.doppler[mask], self.source[mask], self.object_id[mask])

    @property
    def radar(self) -> "SensorCloud":
        return self.subset(self.source >= 0)

    @property
    def lidar(self) -> "SensorCloud":
        return self.subset(self.source < 0)

    @staticmethod
    def concat(clouds) -> "SensorCloud":
        clouds = [c for c in clouds if len(c)]
        if not clouds:
            return SensorCloud.empty()
        return SensorCloud(
            np.concatenate([c.xy for c in clouds]),
            np.concatenate([c.z for c in clouds]),
            np.concatenate([c.doppler for c in clouds]),
            np.concatenate([c.source for c in clouds]),
            np.concatenate([c.object_id for c in clouds]),
        )


def rotate_ego_velocity(v_veh, mount: RadarMount) -> np.ndarray:
    return mount.rotation() @ np.asarray(v_veh, dtype=float)


def _sample_heights(rng, idx, meta, mount_height):
    lo = np.array([meta[i][2][0] for i in idx])
    hi = np.array([meta[i][2][1] for i in idx])
    return rng.uniform(lo, hi) - mount_height if len(idx) else np.zeros(0)


def radar_scan(
    scene: Scene,
    agent: VehicleState,
    mount: RadarMount,
    seed: int,
    doppler_noise: float = 0.0,
    mount_height: float = LidarSpec.mount_height,
) -> SensorCloud:
    """One radar: rays every degree across the FOV, Doppler per hit point."""
    rng = np.random.default_rng(seed)
    boxes, meta = scene.boxes(exclude_vehicle=agent.id)
    n = max(int(round(mount.fov_deg)), 1)
    rel = np.radians(np.arange(n) - (n - 1) / 2.0)  # ray bearings in the radar frame
    origin = np.asarray(agent.position) + rot(agent.yaw) @ np.asarray(mount.translation)
    heading = agent.yaw + mount.yaw
    dist, idx = cast_rays(origin, heading + rel, boxes, mount.max_range)
    hit = idx >= 0
    if not hit.any():
        return SensorCloud.empty()
    dist, idx, rel = dist[hit], idx[hit], rel[hit]
    p_radar = dist[:, None] * np.stack([np.cos(rel), np.sin(rel)], axis=1)
    u = p_radar / np.linalg.norm(p_radar, axis=1, keepdims=True)

    to_radar = rot(-heading)
    v_abs = np.array([meta[i][1] for i in idx], dtype=float) @ to_radar.T
    v_veh = rot(-agent.yaw) @ np.asarray(agent.velocity, dtype=float)
    v_k = rotate_ego_velocity(v_veh, mount)
    doppler = np.einsum("ij,ij->i", v_abs - v_k[None], u)
    if doppler_noise > 0:
        doppler = doppler + rng.normal(0.0, doppler_noise, size=doppler.shape)

    xy = np.asarray(mount.translation) + p_radar @ rot(mount.yaw).T
    z = _sample_heights(rng, idx, meta, mount_height)
    return SensorCloud(
        xy=xy,
        z=z,
        doppler=doppler,
        source=np.full(len(idx), mount.index, dtype=int),
        object_id=np.array([meta[i][0] for i in idx], dtype=int),
    )


def radar_rig_scan(scene, agent, mounts=DEFAULT_RIG, seed: int = 0, doppler_noise: float = 0.0) -> SensorCloud:
    seeds = np.random.SeedSequence([seed, 1]).spawn(len(mounts))
    return SensorCloud.concat(
        radar_scan(scene, agent, m, int(s.generate_state(1)[0]), doppler_noise) for m, s in zip(mounts, seeds)
    )


def lidar_scan(scene: Scene, agent: VehicleState, spec: LidarSpec, seed: int) -> SensorCloud:
    """Planar 360-degree sweep from the vehicle centre with truncated Gaussian range noise."""
    rng = np.random.default_rng(seed)
    boxes, meta = scene.boxes(exclude_vehicle=agent.id)
    rel = np.linspace(-math.pi, math.pi, spec.n_rays, endpoint=False)
    dist, idx = cast_rays(agent.position, agent.yaw + rel, boxes, spec.max_range)
    hit = idx >= 0
    if not hit.any():
        return SensorCloud.empty()
    dist, idx, rel = dist[hit], idx[hit], rel[hit]
    # range noise truncated at 3 sigma so every return stays near a real surface
    noise = rng.normal(0.0, spec.range_noise, size=dist.shape)
    dist = dist + np.clip(noise, -3 * spec.range_noise, 3 * spec.range_noise)
    xy = dist[:, None] * np.stack([np.cos(rel), np.sin(rel)], axis=1)
    z = _sample_heights(rng, idx, meta, spec.mount_height)
    return SensorCloud(
        xy=xy,
        z=z,
        doppler=np.full(len(idx), np.nan),
        source=np.full(len(idx), LIDAR, dtype=int),
        object_id=np.array([meta[i][0] for i in idx], dtype=int),
    )

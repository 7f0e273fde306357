"""Deterministic synthetic traffic scenes with constant-velocity stepping."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .geometry import normalize_angle, segment_blocked

SPAWN_RETRIES = 100
MAX_SPEED = 60.0
# noise ranges swept in the localisation robustness protocol
POS_NOISE_RANGE = (0.0, 0.6)
YAW_NOISE_RANGE_DEG = (0.0, 1.0)


class PlacementError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, float]
    yaw: float
    length: float
    width: float
    height_profile: tuple[float, float] = (0.0, 2.5)

    def as_box(self) -> tuple[float, float, float, float, float]:
        return (self.center[0], self.center[1], self.yaw, self.length, self.width)


@dataclass(frozen=True)
class VehicleState:
    id: int
    position: tuple[float, float]
    yaw: float
    velocity: tuple[float, float]
    extent: tuple[float, float] = (4.5, 2.0)
    height_profile: tuple[float, float] = (0.0, 1.5)

    def __post_init__(self):
        if self.extent[0] <= 0 or self.extent[1] <= 0:
            raise ValueError(f"vehicle {self.id}: extent must be positive")
        if math.hypot(*self.velocity) >= MAX_SPEED:
            raise ValueError(f"vehicle {self.id}: speed exceeds {MAX_SPEED} m/s")
        if not all(math.isfinite(x) for x in (*self.position, *self.velocity, self.yaw)):
            raise ValueError(f"vehicle {self.id}: non-finite state")
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    def as_box(self) -> tuple[float, float, float, float, float]:
        return (self.position[0], self.position[1], self.yaw, self.extent[0], self.extent[1])

    @property
    def pose(self) -> "AgentPose":
        return AgentPose(self.position, self.yaw)


@dataclass(frozen=True)
class PoseNoise:
    sigma_pos: float
    sigma_yaw_deg: float
    out_of_range: bool = False


@dataclass(frozen=True)
class AgentPose:
    position: tuple[float, float]
    yaw: float
    noise: PoseNoise | None = None


@dataclass(frozen=True)
class Scene:
    frame_id: int
    vehicles: tuple[VehicleState, ...]
    obstacles: tuple[Obstacle, ...]
    agents: tuple[int, ...]
    rng_seed: int

    def __post_init__(self):
        ids = [v.id for v in self.vehicles]
        if len(set(ids)) != len(ids):
            raise ValueError("vehicle ids must be unique")
        missing = set(self.agents) - set(ids)
        if missing:
            raise ValueError(f"agents reference unknown vehicles: {sorted(missing)}")

    def vehicle(self, vid: int) -> VehicleState:
        for v in self.vehicles:
            if v.id == vid:
                return v
        raise KeyError(vid)

    def boxes(self, exclude_vehicle: int | None = None):
        """All solid boxes as an (B, 5) array plus parallel metadata.

        Metadata per box: (object_id, velocity, height_profile). Obstacles get
        negative ids ``-1 - index``.
        """
        rows, meta = [], []
        for v in self.vehicles:
            if v.id == exclude_vehicle:
                continue
            rows.append(v.as_box())
            meta.append((v.id, v.velocity, v.height_profile))
        for k, o in enumerate(self.obstacles):
            rows.append(o.as_box())
            meta.append((-1 - k, (0.0, 0.0), o.height_profile))
        return np.array(rows, dtype=float).reshape(-1, 5), meta

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class ScenarioConfig:
    vehicles: int | list = 0
    agents: int | list = 1
    obstacles: int | list = 0
    speed_range_mps: tuple[float, float] = (0.0, 15.0)
    seed: int = 0
    frames: int = 1
    dt: float = 0.1
    area_m: tuple[float, float] = (100.0, 60.0)
    rig: list | None = None
    grid: dict | str | None = None
    pyramid: dict | str | None = None
    priors: dict = field(default_factory=dict)
    querygen: dict = field(default_factory=dict)
    comm: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ScenarioConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.speed_range_mps = tuple(cfg.speed_range_mps)
        cfg.area_m = tuple(cfg.area_m)
        return cfg


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read scenario ({exc.strerror})") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}:1: scenario must be a JSON object")
    try:
        return ScenarioConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _radius(extent) -> float:
    return 0.5 * math.hypot(*extent)


def _parse_vehicle(d: dict, default_id: int) -> VehicleState:
    return VehicleState(
        id=int(d.get("id", default_id)),
        position=tuple(float(x) for x in d["position"]),
        yaw=float(d.get("yaw", 0.0)),
        velocity=tuple(float(x) for x in d.get("velocity", (0.0, 0.0))),
        extent=tuple(float(x) for x in d.get("extent", (4.5, 2.0))),
        height_profile=tuple(float(x) for x in d.get("height_profile", (0.0, 1.5))),
    )


def _parse_obstacle(d: dict) -> Obstacle:
    return Obstacle(
        center=tuple(float(x) for x in d["center"]),
        yaw=float(d.get("yaw", 0.0)),
        length=float(d["length"]),
        width=float(d["width"]),
        height_profile=tuple(float(x) for x in d.get("height_profile", (0.0, 2.5))),
    )


def generate_scene(config: ScenarioConfig, seed: int) -> Scene:
    """Build a scene from explicit lists or random counts in `config`.

    With integer counts the first `agents` vehicles are connected agents;
    agent 0 (the ego) sits at the origin heading +x. Random placements are
    rejected when circumscribed circles overlap.
    """
    rng = np.random.default_rng(seed)
    lo, hi = config.speed_range_mps
    placed: list[tuple[np.ndarray, float]] = []

    def free(p, r) -> bool:
        return all(np.hypot(*(p - q)) > r + rq + 0.5 for q, rq in placed)

    vehicles: list[VehicleState] = []
    obstacles: list[Obstacle] = []

    if isinstance(config.vehicles, list):
        vehicles = [_parse_vehicle(d, i) for i, d in enumerate(config.vehicles)]
        for v in vehicles:
            placed.append((np.array(v.position), _radius(v.extent)))
        if isinstance(config.agents, list):
            agents = tuple(int(a) for a in config.agents)
        else:
            agents = tuple(v.id for v in vehicles[: int(config.agents)])
    else:
        n_agents = int(config.agents)
        if n_agents < 1:
            raise ConfigError("at least one agent is required")
        total = n_agents + int(config.vehicles)
        ax, ay = config.area_m
        for i in range(total):
            extent = (4.5, 2.0)
            r = _radius(extent)
            if i == 0:
                pos, yaw = np.zeros(2), 0.0
            else:
                for _ in range(SPAWN_RETRIES):
                    pos = rng.uniform((-ax / 2, -ay / 2), (ax / 2, ay / 2))
                    if free(pos, r):
                        break
                else:
                    raise PlacementError(f"could not place vehicle {i} after {SPAWN_RETRIES} tries")
                yaw = float(rng.choice([0.0, math.pi]) + rng.normal(0.0, 0.05))
            speed = float(rng.uniform(lo, hi))
            placed.append((pos, r))
            vehicles.append(
                VehicleState(
                    id=i,
                    position=(float(pos[0]), float(pos[1])),
                    yaw=yaw,
                    velocity=(speed * math.cos(yaw), speed * math.sin(yaw)),
                    extent=extent,
                )
            )
        agents = tuple(range(n_agents))

    if isinstance(config.obstacles, list):
        obstacles = [_parse_obstacle(d) for d in config.obstacles]
    else:
        ax, ay = config.area_m
        for k in range(int(config.obstacles)):
            length, width = float(rng.uniform(3.0, 10.0)), float(rng.uniform(2.0, 4.0))
            r = _radius((length, width))
            for _ in range(SPAWN_RETRIES):
                pos = rng.uniform((-ax / 2, -ay / 2), (ax / 2, ay / 2))
                if free(pos, r):
                    break
            else:
                raise PlacementError(f"could not place obstacle {k} after {SPAWN_RETRIES} tries")
            placed.append((pos, r))
            obstacles.append(
                Obstacle(
                    center=(float(pos[0]), float(pos[1])),
                    yaw=float(rng.uniform(-math.pi, math.pi)),
                    length=length,
                    width=width,
                    height_profile=(0.0, float(rng.uniform(1.5, 4.0))),
                )
            )

    return Scene(
        frame_id=0,
        vehicles=tuple(vehicles),
        obstacles=tuple(obstacles),
        agents=agents,
        rng_seed=int(seed),
    )


def step_scene(scene: Scene, dt: float) -> Scene:
    if not dt > 0:
        raise ValueError("dt must be positive")
    moved = tuple(
        replace(v, position=(v.position[0] + v.velocity[0] * dt, v.position[1] + v.velocity[1] * dt))
        for v in scene.vehicles
    )
    return replace(scene, frame_id=scene.frame_id + 1, vehicles=moved)


def inject_pose_noise(pose: AgentPose, sigma_pos: float, sigma_yaw_deg: float, seed: int) -> AgentPose:
    """Add zero-mean Gaussian noise to position (m) and yaw (deg std)."""
    if sigma_pos < 0 or sigma_yaw_deg < 0:
        raise ValueError("noise standard deviations must be non-negative")
    out_of_range = sigma_pos > POS_NOISE_RANGE[1] or sigma_yaw_deg > YAW_NOISE_RANGE_DEG[1]
    if out_of_range:
        warnings.warn(
            f"pose noise (sigma_pos={sigma_pos}, sigma_yaw={sigma_yaw_deg} deg) outside the studied range",
            stacklevel=2,
        )
    rng = np.random.default_rng(seed)
    dp = rng.normal(0.0, sigma_pos, size=2)
    dyaw = math.radians(float(rng.normal(0.0, sigma_yaw_deg)))
    return AgentPose(
        position=(pose.position[0] + float(dp[0]), pose.position[1] + float(dp[1])),
        yaw=pose.yaw + dyaw,
        noise=PoseNoise(sigma_pos, sigma_yaw_deg, out_of_range),
    )


def line_of_sight(scene: Scene, observer_id: int, target_id: int) -> bool:
    """True when any probe point of the target is unobstructed from the observer.

    Probes are the target centre, its corners and edge midpoints, pulled 5 cm
    inward. The observer and target boxes never block.
    """
    obs = scene.vehicle(observer_id)
    boxes, meta = scene.boxes()
    ids = [m[0] for m in meta]
    exclude = {ids.index(observer_id)}
    if target_id in ids:
        exclude.add(ids.index(target_id))
    return any(not segment_blocked(obs.position, p, boxes, exclude) for p in probe_points(scene.vehicle(target_id)))


def probe_points(v: VehicleState) -> np.ndarray:
    hl, hw = v.extent[0] / 2 - 0.05, v.extent[1] / 2 - 0.05
    local = np.array(
        [[0, 0], [hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw], [hl, 0], [-hl, 0], [0, hw], [0, -hw]], dtype=float
    )
    c, s = math.cos(v.yaw), math.sin(v.yaw)
    return local @ np.array([[c, s], [-s, c]]) + np.asarray(v.position)


def occlusion_template(collaborator: bool = True) -> ScenarioConfig:
    """Ego, a parked van across the lane, a vehicle hidden behind it, and a
    side-on collaborator that can see the hidden vehicle."""
    vehicles = [
        {"id": 0, "position": [0.0, 0.0], "yaw": 0.0, "velocity": [8.0, 0.0]},
        {"id": 1, "position": [18.5, 0.0], "yaw": 0.0, "velocity": [5.0, 0.0]},
    ]
    agents = [0]
    if collaborator:
        vehicles.append({"id": 2, "position": [18.0, -12.0], "yaw": 0.0, "velocity": [4.0, 0.0]})
        agents.append(2)
    return ScenarioConfig(
        vehicles=vehicles,
        agents=agents,
        obstacles=[
            {"center": [12.0, 0.0], "yaw": math.pi / 2, "length": 8.0, "width": 2.0, "height_profile": [0.0, 2.4]}
        ],
        frames=1,
        dt=0.1,
    )

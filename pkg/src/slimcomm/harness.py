"""End-to-end simulation runs, coverage metrics, sweeps and mode comparison."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import comm, fusion, querygen
from .bev import (
    FeaturePyramid,
    GridSpec,
    channels_from_config,
    encode_features,
    grid_from_config,
    pillarize,
    warp_to_frame,
    PAPER_CHANNELS,
)
from .priors import PriorMaps, Thresholds, compute_priors
from .scene import (
    AgentPose,
    ConfigError,
    Scene,
    ScenarioConfig,
    generate_scene,
    inject_pose_noise,
    line_of_sight,
    load_scenario,
    step_scene,
)
from .sensors import LidarSpec, SensorCloud, lidar_scan, radar_rig_scan, rig_from_config

log = logging.getLogger(__name__)

MODES = ("slimcomm", "full-map", "no-erp", "no-hrp", "no-halo", "no-comm")
SPARSE_MODES = ("slimcomm", "no-erp", "no-hrp", "no-halo")
MODEL_SEED = 0


@dataclass
class RunConfig:
    scenario: ScenarioConfig | str | Path
    mode: str = "slimcomm"
    tau: float | None = None
    budgets: tuple[int, ...] | None = None
    seed: int = 0
    paper_shapes: bool = False
    sigma_pos: float = 0.0
    sigma_yaw_deg: float = 0.0
    noise: bool = False
    frames: int | None = None
    divide_by_all: bool = False
    halo_at: str = "anchor"
    out_dir: Path | None = None
    dump_messages: Path | None = None
    dump_fused: Path | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.tau is not None and not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if self.halo_at not in ("anchor", "fine"):
            raise ConfigError(f"halo_at must be 'anchor' or 'fine', got {self.halo_at!r}")

    def load(self) -> ScenarioConfig:
        if isinstance(self.scenario, ScenarioConfig):
            return self.scenario
        return load_scenario(self.scenario)


@dataclass(frozen=True)
class Model:
    """Frozen stand-in weights and the resolved configuration for a run."""

    spec: GridSpec
    channels: tuple[int, ...]
    thresholds: Thresholds
    budget: querygen.QueryBudget
    shadow: querygen.ShadowConfig
    lidar: LidarSpec
    rig: tuple
    generator: querygen.GeneratorParams = field(repr=False, compare=False)
    attention: fusion.AttentionParams = field(repr=False, compare=False)
    gates: fusion.GateParams = field(repr=False, compare=False)
    aggregation: list = field(repr=False, compare=False)

    @property
    def n_levels(self) -> int:
        return len(self.channels)

    def level_spec(self, l: int) -> GridSpec:
        return self.spec.level(l)


@lru_cache(maxsize=8)
def _params(channels: tuple[int, ...]):
    return (
        querygen.GeneratorParams.init(channels, MODEL_SEED + 1),
        fusion.AttentionParams.init(channels, MODEL_SEED + 2),
        fusion.GateParams.init(channels, MODEL_SEED + 3),
        fusion.aggregation_projections(channels, MODEL_SEED + 4),
    )


def build_model(cfg: ScenarioConfig, run: RunConfig) -> Model:
    spec = grid_from_config(cfg.grid)
    channels = PAPER_CHANNELS if run.paper_shapes else channels_from_config(cfg.pyramid)
    qg = dict(cfg.querygen)
    budget = querygen.QueryBudget(
        per_scale=tuple(run.budgets or qg.get("budgets", (200, 100, 50))),
        percentiles=tuple(qg.get("percentiles", (0.5, 0.5, 0.5))),
    )
    shadow = querygen.ShadowConfig(
        r_min=float(qg.get("r_min", 2.0)), r_max=float(qg.get("r_max", 8.0)), sigma_lat=float(qg.get("sigma_lat", 1.5))
    )
    gen, att, gates, agg = _params(tuple(channels))
    return Model(
        spec=spec,
        channels=tuple(channels),
        thresholds=Thresholds(**cfg.priors),
        budget=budget,
        shadow=shadow,
        lidar=LidarSpec(),
        rig=rig_from_config(cfg.rig),
        generator=gen,
        attention=att,
        gates=gates,
        aggregation=agg,
    )


@dataclass
class Perception:
    agent_id: int
    pose: AgentPose
    lidar: SensorCloud
    radar: SensorCloud
    pyramid: FeaturePyramid
    priors: PriorMaps
    density0: np.ndarray


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def perceive(scene: Scene, agent_id: int, model: Model, seed: int) -> Perception:
    """Sense, pillarise, encode and derive priors for one agent."""
    v = scene.vehicle(agent_id)
    lid = lidar_scan(scene, v, model.lidar, _seed(seed, scene.frame_id, agent_id, 1))
    rad = radar_rig_scan(scene, v, model.rig, _seed(seed, scene.frame_id, agent_id, 2))
    ls, rs = pillarize(lid, model.spec), pillarize(rad, model.spec)
    pyr = encode_features(ls, rs, model.channels, MODEL_SEED)
    c, s = math.cos(v.yaw), math.sin(v.yaw)
    v_veh = (c * v.velocity[0] + s * v.velocity[1], -s * v.velocity[0] + c * v.velocity[1])
    pri = compute_priors(ls, rs, rad, v_veh, model.rig, model.spec, model.thresholds, model.n_levels)
    return Perception(agent_id, v.pose, lid, rad, pyr, pri, comm.density_at_level0(pri.density))


@dataclass
class FrameResult:
    frame: int
    mode: str
    ledger: comm.LedgerEntry
    collaborators: int
    visible_coverage: float
    occluded_coverage: float
    occluded_cells: int
    queries: querygen.QuerySet | None
    fused: list[np.ndarray]
    bev: np.ndarray
    messages: list[tuple[str, bytes]]
    offset_loss: float = 0.0

    def row(self) -> dict:
        e = self.ledger
        el = list(e.elements) + [0] * (3 - len(e.elements))
        return {
            "frame": self.frame,
            "mode": self.mode,
            "elements_l0": el[0],
            "elements_l1": el[1],
            "elements_l2": el[2],
            "payload_bytes": e.payload_bytes,
            "cv_log2": f"{e.cv_log2:.6f}",
            "metadata_bytes": e.metadata_bytes,
            "collaborators": self.collaborators,
            "visible_coverage": f"{self.visible_coverage:.6f}",
            "occluded_coverage": f"{self.occluded_coverage:.6f}",
            "occluded_cells": self.occluded_cells,
        }


def gt_cells(scene: Scene, ego_id: int, spec0: GridSpec):
    """Level-0 cells covered by each non-ego vehicle, split by ego visibility."""
    ego = scene.vehicle(ego_id)
    H, W = spec0.shape
    vv, uu = np.mgrid[0:H, 0:W]
    centers = spec0.to_metric(np.stack([uu, vv], axis=-1).astype(float)).reshape(-1, 2)
    visible = np.zeros((H, W), dtype=bool)
    occluded = np.zeros((H, W), dtype=bool)
    c, s = math.cos(ego.yaw), math.sin(ego.yaw)
    for v in scene.vehicles:
        if v.id == ego_id:
            continue
        d = np.asarray(v.position) - np.asarray(ego.position)
        pos = np.array([c * d[0] + s * d[1], -s * d[0] + c * d[1]])
        yaw = v.yaw - ego.yaw
        rel = centers - pos
        cy, sy = math.cos(yaw), math.sin(yaw)
        lx, ly = cy * rel[:, 0] + sy * rel[:, 1], -sy * rel[:, 0] + cy * rel[:, 1]
        inside = ((np.abs(lx) <= v.extent[0] / 2) & (np.abs(ly) <= v.extent[1] / 2)).reshape(H, W)
        cell = spec0.cell_of(pos)[0]
        if cell[0] >= 0:
            inside[cell[1], cell[0]] = True
        target = visible if line_of_sight(scene, ego_id, v.id) else occluded
        target |= inside
    return visible, occluded


def _coverage(gt: np.ndarray, evidence: np.ndarray) -> float:
    n = int(gt.sum())
    if n == 0:
        return 0.0
    H, W = evidence.shape
    pad = np.pad(evidence, 1)
    dil = np.zeros_like(evidence)
    for dv in range(3):
        for du in range(3):
            dil |= pad[dv : dv + H, du : du + W]
    return float((gt & dil).sum() / n)


def run_frame(scene: Scene, model: Model, run: RunConfig, frame_seed: int) -> FrameResult:
    mode = run.mode
    tau = 0.0 if run.tau is None else run.tau
    ego_id = scene.agents[0]
    agents = sorted(scene.agents)
    percepts = {a: perceive(scene, a, model, frame_seed) for a in agents}
    ego = percepts[ego_id]
    shapes = [F.shape[1:] for F in ego.pyramid.levels]

    broadcast_pose = ego.pose
    if run.noise:
        broadcast_pose = inject_pose_noise(ego.pose, run.sigma_pos, run.sigma_yaw_deg, _seed(frame_seed, 99))

    ego_cells = [model.level_spec(l).center_cell for l in range(model.n_levels)]
    qs = querygen.generate_queries(
        ego.pyramid.levels,
        ego.priors.dynamic_levels,
        ego.priors.confidence_levels,
        model.generator,
        model.budget,
        model.shadow,
        ego_cells,
        seed=_seed(frame_seed, 5),
        use_hrp=mode != "no-hrp",
        use_erp=mode != "no-erp",
    )
    for l, sq in enumerate(qs.scales):
        pert = fusion.sampling_perturbation(sq.embeddings, model.attention.levels[l])
        sq.fine = querygen.fine_sampling_locations(sq.nudged, pert, shape=shapes[l])
    loss, _ = querygen.offset_regularization_loss(
        [s.offsets_h for s in qs.scales], [s.offsets_e for s in qs.scales], [s.delta for s in qs.scales]
    )

    dumps: list[tuple[str, bytes]] = []
    qmsg = comm.build_query_message(qs, broadcast_pose, sender=ego_id, frame=scene.frame_id, halo_at=run.halo_at)
    qbytes = comm.encode_query_message(qmsg)
    wire = 0
    mailbox = comm.Mailbox()
    if mode != "no-comm":
        wire += len(qbytes)
        dumps.append((f"frame{scene.frame_id:04d}_query_{ego_id}.bin", qbytes))
        spec0 = model.level_spec(0)
        for j in agents:
            if j == ego_id:
                continue
            pj = percepts[j]
            if math.dist(pj.pose.position, ego.pose.position) > comm.COMM_RANGE_M:
                continue
            received = comm.decode_query_message(qbytes)
            ego_seen = AgentPose((received.pose[0], received.pose[1]), received.pose[2])
            if mode in SPARSE_MODES and not comm.should_collaborate(pj.density0, received, spec0, pj.pose, tau):
                continue
            warped = [
                warp_to_frame(F, model.level_spec(l), pj.pose, ego_seen, "bilinear")
                for l, F in enumerate(pj.pyramid.levels)
            ]
            if mode == "full-map":
                msg = comm.full_map_message(warped, j, scene.frame_id, pj.pose)
            else:
                msg = comm.respond(warped, received, j, pj.pose, halo=mode != "no-halo")
            mailbox.post(scene.frame_id, j, comm.encode_feature_message(msg))

    messages = []
    for frame, sender, payload in mailbox.drain():
        wire += len(payload)
        dumps.append((f"frame{frame:04d}_sender{sender}.bin", payload))
        messages.append(comm.decode_feature_message(payload, model.channels))
    entry = comm.meter_payload(messages, scene.frame_id, mode, model.n_levels, wire)

    nb = fusion.average_collaborators(messages, shapes, model.channels, run.divide_by_all)
    fused, query_hits = [], []
    for l, F in enumerate(ego.pyramid.levels):
        sq = qs.scales[l]
        if mode == "full-map":
            F_cav = nb.values[l]
            hits = np.zeros((0, 2), dtype=int)
        else:
            out, locs, _ = fusion.deformable_cross_attention(
                sq.embeddings, sq.nudged, nb.values[l], model.attention.levels[l], locations=sq.fine
            )
            F_cav = fusion.scatter_to_grid(out, sq.anchor_cells, shapes[l])
            active = np.any(out != 0, axis=1)
            hits = np.floor(locs[active] + 0.5).astype(int).reshape(-1, 2)
        fused.append(fusion.gated_blend(F, F_cav, model.gates.levels[l]))
        query_hits.append(hits)
    bev = fusion.aggregate_scales(fused, model.aggregation)

    evidence = np.any(fused[0] != 0, axis=0)
    H0, W0 = shapes[0]
    h = query_hits[0]
    if len(h):
        h = h[(h[:, 0] >= 0) & (h[:, 0] < W0) & (h[:, 1] >= 0) & (h[:, 1] < H0)]
        evidence[h[:, 1], h[:, 0]] = True
    vis_gt, occ_gt = gt_cells(scene, ego_id, model.level_spec(0))
    return FrameResult(
        frame=scene.frame_id,
        mode=mode,
        ledger=entry,
        collaborators=len(messages),
        visible_coverage=_coverage(vis_gt, evidence),
        occluded_coverage=_coverage(occ_gt, evidence),
        occluded_cells=int(occ_gt.sum()),
        queries=qs,
        fused=fused,
        bev=bev,
        messages=dumps,
        offset_loss=loss,
    )


@dataclass
class RunResult:
    config: RunConfig
    frames: list[FrameResult]

    @property
    def ledger(self) -> comm.BandwidthLedger:
        return comm.BandwidthLedger([f.ledger for f in self.frames])

    def mean(self, attr: str) -> float:
        vals = [getattr(f, attr) for f in self.frames]
        return float(np.mean(vals)) if vals else 0.0

    def mean_payload(self) -> float:
        return float(np.mean([f.ledger.payload_bytes for f in self.frames])) if self.frames else 0.0

    def mean_cv(self) -> float:
        return float(np.mean([f.ledger.cv_log2 for f in self.frames])) if self.frames else 0.0

    def summary(self) -> dict:
        return {
            "mode": self.config.mode,
            "seed": self.config.seed,
            "tau": 0.0 if self.config.tau is None else self.config.tau,
            "frames": len(self.frames),
            "mean_payload_bytes": self.mean_payload(),
            "mean_payload_mb": self.mean_payload() / 1e6,
            "mean_cv_log2": self.mean_cv(),
            "mean_collaborators": self.mean("collaborators"),
            "mean_visible_coverage": self.mean("visible_coverage"),
            "mean_occluded_coverage": self.mean("occluded_coverage"),
            "mean_offset_loss": self.mean("offset_loss"),
            "note": "synthetic scenes: absolute MB is not comparable to dataset figures",
        }


METRIC_COLUMNS = (
    "frame",
    "mode",
    "elements_l0",
    "elements_l1",
    "elements_l2",
    "payload_bytes",
    "cv_log2",
    "metadata_bytes",
    "collaborators",
    "visible_coverage",
    "occluded_coverage",
    "occluded_cells",
)


def run_scenario(run: RunConfig) -> RunResult:
    """Simulate every frame; write outputs when `run.out_dir` is set."""
    cfg = run.load()
    if run.tau is None:
        run = replace(run, tau=float(cfg.comm.get("tau", 0.0)))
    model = build_model(cfg, run)
    # the scenario seed fixes the world; the run seed drives sensing and sampling
    scene = generate_scene(cfg, cfg.seed)
    n_frames = run.frames if run.frames is not None else cfg.frames
    results = []
    for f in range(n_frames):
        if f > 0:
            scene = step_scene(scene, cfg.dt)
        results.append(run_frame(scene, model, run, _seed(run.seed, f)))
    res = RunResult(run, results)
    if run.out_dir is not None:
        write_outputs(res, Path(run.out_dir))
    if run.dump_messages is not None:
        d = Path(run.dump_messages)
        d.mkdir(parents=True, exist_ok=True)
        for fr in results:
            for name, payload in fr.messages:
                (d / name).write_bytes(payload)
    if run.dump_fused is not None:
        d = Path(run.dump_fused)
        d.mkdir(parents=True, exist_ok=True)
        for fr in results:
            stem = f"fused_frame{fr.frame:04d}"
            fr.bev.astype("<f4").tofile(d / f"{stem}.f32")
            (d / f"{stem}.json").write_text(
                json.dumps({"shape": list(fr.bev.shape), "scale": 0, "frame": fr.frame, "dtype": "float32-le"})
            )
    return res


def write_outputs(res: RunResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "metrics.csv", [f.row() for f in res.frames], METRIC_COLUMNS)
    (out / "summary.json").write_text(json.dumps(res.summary(), indent=2, sort_keys=True) + "\n")


def write_table(path: Path, rows: list[dict], columns=None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def sweep_tau(run: RunConfig, taus) -> list[dict]:
    rows = []
    for tau in taus:
        if not 0.0 <= tau <= 1.0:
            raise ConfigError(f"tau {tau} outside [0, 1]")
        res = run_scenario(replace(run, tau=float(tau), out_dir=None, dump_messages=None, dump_fused=None))
        rows.append(
            {
                "tau": float(tau),
                "collaborators": sum(f.collaborators for f in res.frames),
                "payload_bytes": int(sum(f.ledger.payload_bytes for f in res.frames)),
                "cv_log2": round(res.mean_cv(), 6),
                "occluded_coverage": round(res.mean("occluded_coverage"), 6),
                "visible_coverage": round(res.mean("visible_coverage"), 6),
            }
        )
    return rows


def seed_average(run: RunConfig, seeds) -> dict:
    occ, vis, pay, cv, col = [], [], [], [], []
    for s in seeds:
        res = run_scenario(replace(run, seed=int(s), out_dir=None, dump_messages=None, dump_fused=None))
        occ.append(res.mean("occluded_coverage"))
        vis.append(res.mean("visible_coverage"))
        pay.append(res.mean_payload())
        cv.append(res.mean_cv())
        col.append(res.mean("collaborators"))
    return {
        "occluded_coverage": float(np.mean(occ)),
        "visible_coverage": float(np.mean(vis)),
        "payload_bytes": float(np.mean(pay)),
        "cv_log2": float(np.mean(cv)),
        "collaborators": float(np.mean(col)),
    }


def sweep_noise(run: RunConfig, sigma_pos, sigma_yaw, seeds=range(20)) -> list[dict]:
    """Seed-averaged metrics on the full sigma_pos x sigma_yaw grid."""
    if not sigma_pos or not sigma_yaw:
        raise ConfigError("noise sweep lists must be non-empty")
    seeds = list(seeds)
    rows = []
    for sp in sigma_pos:
        for sy in sigma_yaw:
            avg = seed_average(replace(run, noise=True, sigma_pos=float(sp), sigma_yaw_deg=float(sy)), seeds)
            rows.append({"sigma_pos_m": float(sp), "sigma_yaw_deg": float(sy), "seeds": len(seeds), **_round(avg)})
    return rows


def compare_modes(run: RunConfig, seeds=range(20), modes=MODES) -> list[dict]:
    rows = []
    for m in modes:
        avg = seed_average(replace(run, mode=m), list(seeds))
        rows.append({"mode": m, **_round(avg)})
    by = {r["mode"]: r for r in rows}
    if "slimcomm" in by and "no-erp" in by:
        delta = by["slimcomm"]["occluded_coverage"] - by["no-erp"]["occluded_coverage"]
        for r in rows:
            r["erp_ablation_delta"] = round(delta, 6)
    return rows


def _round(d: dict) -> dict:
    return {k: round(v, 6) for k, v in d.items()}


def to_markdown(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0].keys())
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(str(r[c]) for c in cols) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def check_gradients(probes: int = 20, seed: int = 0, eps: float = 1e-4, channels=(8, 16, 32)) -> dict:
    """Central-difference checks of the offset loss and the attention-logit path.

    Probe points for the hinge loss are redrawn until they sit at least
    100*eps away from the kink and from zero-length offsets.
    """
    rng = np.random.default_rng(seed)
    loss_err, attn_err = [], []
    while len(loss_err) < probes:
        sizes = [(int(rng.integers(2, 12)), int(rng.integers(2, 12))) for _ in range(3)]
        oh = [rng.normal(0, 1.0, (nh, 2)) for nh, _ in sizes]
        oe = [rng.normal(0, 2.0, (ne, 2)) for _, ne in sizes]
        gaps = [np.linalg.norm(e, axis=1).mean() - np.linalg.norm(h, axis=1).mean() for h, e in zip(oh, oe)]
        deltas = [g + rng.choice([-1, 1]) * rng.uniform(0.2, 2.0) for g in gaps]
        norms = np.concatenate([np.linalg.norm(x, axis=1) for x in oh + oe])
        if norms.min() < 100 * eps:
            continue
        split = np.cumsum([0] + [n for s in sizes for n in s])
        x0 = np.concatenate([x.ravel() for pair in zip(oh, oe) for x in pair])

        def unpack(x):
            parts = [x[2 * split[i] : 2 * split[i + 1]].reshape(-1, 2) for i in range(len(split) - 1)]
            return parts[0::2], parts[1::2]

        def f(x):
            h, e = unpack(x)
            return querygen.offset_regularization_loss(h, e, deltas)[0]

        def g(x):
            h, e = unpack(x)
            gh, ge = querygen.offset_regularization_grad(h, e, deltas)
            return np.concatenate([y.ravel() for pair in zip(gh, ge) for y in pair])

        loss_err.append(fusion.finite_difference_check(f, g, x0, eps))

    params = fusion.AttentionParams.init(channels, seed + 1)
    for k in range(probes):
        l = k % len(channels)
        p = params.levels[l]
        C = channels[l]
        n = int(rng.integers(1, 5))
        values = rng.normal(size=(n, p.heads, querygen.N_POINTS, C // p.heads))
        upstream = rng.normal(size=(n, C))
        z0 = rng.normal(size=(n, p.heads, querygen.N_POINTS))

        def f(z):
            return float(np.sum(upstream * fusion.attention_combine(z, values, p.w_out)))

        def g(z):
            return fusion.attention_logit_grad(z, values, p.w_out, upstream)

        attn_err.append(fusion.finite_difference_check(f, g, z0, eps))
    return {
        "offset_loss_max_rel_err": float(max(loss_err)),
        "attention_logits_max_rel_err": float(max(attn_err)),
        "probes": probes,
        "eps": eps,
    }

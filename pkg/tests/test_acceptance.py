"""Acceptance suite: one test per criterion, reported as PASS/FAIL lines.

Run ``pytest tests/test_acceptance.py`` and read the "acceptance criteria"
section of the terminal summary.
"""

from __future__ import annotations

import itertools
import math
import shutil
import struct
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from shapely.geometry import LineString

from conftest import box_polygon, single_target_scene
from slimcomm import comm, harness
from slimcomm.bev import PAPER_CHANNELS, PAPER_GRID, SMALL_GRID, bilinear_sample_many, pillarize
from slimcomm.comm import (
    QueryMessage,
    SparseFeatureMessage,
    decode_feature_message,
    decode_query_message,
    encode_feature_message,
    encode_query_message,
    halo_extract,
    meter_payload,
    respond,
)
from slimcomm.fusion import (
    AttentionLevel,
    AttentionParams,
    GateLevel,
    average_collaborators,
    deformable_cross_attention,
    gated_blend,
)
from slimcomm.harness import RunConfig
from slimcomm.priors import compensate_doppler, dynamic_map, foreground_mask
from slimcomm.querygen import HEADS, N_POINTS, STENCIL
from slimcomm.scene import AgentPose, ScenarioConfig, Scene, VehicleState, generate_scene, load_scenario
from slimcomm.sensors import DEFAULT_RIG, LIDAR, SensorCloud, radar_rig_scan

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
OCCLUSION = CONFIGS / "occlusion.json"
DENSE = CONFIGS / "dense.json"
SEEDS = range(20)


def _detail(request, text: str) -> None:
    request.node.user_properties.append(("detail", text))


def _v_veh(v: VehicleState):
    c, s = math.cos(v.yaw), math.sin(v.yaw)
    return (c * v.velocity[0] + s * v.velocity[1], -s * v.velocity[0] + c * v.velocity[1])


def _dynamic(scene: Scene, agent: int = 0, spec=PAPER_GRID) -> np.ndarray:
    ego = scene.vehicle(agent)
    rad = radar_rig_scan(scene, ego, DEFAULT_RIG, 0)  # noiseless Doppler by default
    v, _ = compensate_doppler(rad, _v_veh(ego), DEFAULT_RIG)
    return dynamic_map(rad.radar.xy, v, spec)


def _with_ego_speed(scene: Scene, speed: float) -> Scene:
    ego = scene.vehicles[0]
    moved = replace(ego, velocity=(speed * math.cos(ego.yaw), speed * math.sin(ego.yaw)))
    return replace(scene, vehicles=(moved,) + scene.vehicles[1:])


@pytest.mark.criterion(1, "Doppler cancellation on a static scene")
def test_doppler_cancellation(request):
    cfg = ScenarioConfig(vehicles=12, agents=1, obstacles=6, speed_range_mps=(0.0, 0.0), area_m=(80.0, 40.0))
    base = generate_scene(cfg, 7)
    assert len(base.vehicles) - 1 + len(base.obstacles) >= 10
    t0 = time.perf_counter()
    counts = [int(_dynamic(_with_ego_speed(base, s)).sum()) for s in (0.0, 5.0, 15.0, 30.0)]

    # flip the nearest radar-visible vehicle to 3 m/s directly away from the ego
    scene = _with_ego_speed(base, 15.0)
    rad = radar_rig_scan(scene, scene.vehicles[0], DEFAULT_RIG, 0)
    seen = sorted({int(i) for i in rad.object_id if i > 0}, key=lambda i: math.dist(scene.vehicle(i).position, (0, 0)))
    tgt = scene.vehicle(seen[0])
    u = np.asarray(tgt.position) / np.linalg.norm(tgt.position)
    flipped = replace(tgt, velocity=tuple(3.0 * u))
    moving = int(_dynamic(replace(scene, vehicles=tuple(flipped if v.id == tgt.id else v for v in scene.vehicles))).sum())
    elapsed = time.perf_counter() - t0
    _detail(request, f"static counts {counts}, moving target cells {moving}, {elapsed:.2f} s")
    assert counts == [0, 0, 0, 0]
    assert moving >= 1
    assert elapsed < 1.0


@pytest.mark.criterion(2, "Dynamic threshold exactness at 0.99 / 1.01 m/s")
def test_threshold_exactness(request):
    flagged = {}
    for ego_speed in (0.0, 10.0):
        for speed in (0.99, 1.01):
            # target dead ahead, moving along the line of sight in the world frame
            scene = single_target_scene((25.0, 0.0), velocity=(speed, 0.0), ego_velocity=(ego_speed, 0.0))
            flagged[(ego_speed, speed)] = int(_dynamic(scene).sum())
    _detail(request, f"flagged cells {flagged}")
    for ego_speed in (0.0, 10.0):
        assert flagged[(ego_speed, 0.99)] == 0
        assert flagged[(ego_speed, 1.01)] >= 1


def _fg_cell(z_values) -> int:
    spec = SMALL_GRID
    xy = np.repeat(spec.to_metric(np.array([[10, 10]])), len(z_values), axis=0)
    n = len(z_values)
    cloud = SensorCloud(xy, np.array(z_values, float), np.full(n, np.nan), np.full(n, LIDAR), np.zeros(n, dtype=int))
    return int(foreground_mask(pillarize(cloud, spec))[10, 10])


@pytest.mark.criterion(3, "Foreground-mask truth table")
def test_foreground_truth_table(request):
    cases = {(1.5,): 0, (-2.0, -1.5): 0, (-0.5, 1.5): 0}
    got = {z: _fg_cell(list(z)) for z in cases}
    _detail(request, f"{got}")
    assert got == cases


PAPER_BOUND = sum(2 * n * 9 * c for n, c in zip((200, 100, 50), PAPER_CHANNELS))


@pytest.mark.criterion(4, "Budget exactness and payload bound at paper shapes")
def test_budget_exactness(request):
    # oracle: dense element count from the full-size pyramid shapes
    H, W = PAPER_GRID.shape
    full = sum(c * (H // 2 ** (l + 1)) * (W // 2 ** (l + 1)) for l, c in enumerate(PAPER_CHANNELS))
    assert full == 7_884_800 and PAPER_BOUND == 1_382_400
    worst, n_msgs = 0, 0
    runs = [RunConfig(OCCLUSION, paper_shapes=True), RunConfig(DENSE, paper_shapes=True, frames=1)]
    for run in runs:
        for frame in harness.run_scenario(run).frames:
            for l, sq in enumerate(frame.queries.scales):
                assert len(sq.anchors) == 2 * (200, 100, 50)[l]
            for name, payload in frame.messages:
                if "sender" not in name:
                    continue
                e = meter_payload([decode_feature_message(payload, PAPER_CHANNELS)], n_scales=3)
                worst = max(worst, e.total_elements)
                n_msgs += 1
                assert e.total_elements <= PAPER_BOUND
                assert e.total_elements / full <= 0.1754
    _detail(request, f"{n_msgs} responses, max elements {worst}, max ratio {worst / full:.4f}, bound ratio {PAPER_BOUND / full:.4f}")
    assert n_msgs > 0


def _count_wire_elements(data: bytes, channels) -> list[int]:
    """Independent parser: count non-zero float32 values per scale block."""
    magic, _, mtype, _, _, n_scales = struct.unpack_from("<4sHBIIH", data, 0)
    assert magic == b"SLIM"
    width = 9 if mtype == comm.TYPE_HALO else 1
    off = 17 + 12
    out = []
    for l in range(n_scales):
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        n = 0
        for _ in range(count):
            vals = np.frombuffer(data, dtype="<f4", count=width * channels[l], offset=off + 4)
            n += int(np.count_nonzero(vals))
            off += 4 + 4 * width * channels[l]
        out.append(n)
    assert off == len(data)
    return out


def _random_feature_message(rng, channels=(8, 16, 32)) -> SparseFeatureMessage:
    halo = bool(rng.integers(2))
    n_scales = int(rng.integers(1, len(channels) + 1))
    cells, values = [], []
    for l in range(n_scales):
        n = int(rng.integers(0, 8))
        v = rng.normal(size=(n, channels[l] * (9 if halo else 1))).astype(np.float32)
        v[rng.random(v.shape) < 0.3] = 0.0
        v[rng.random(n) < 0.2] = 0.0  # some all-zero entries
        cells.append(rng.integers(0, 0xFFFF, size=(n, 2)))
        values.append(v)
    pose = tuple(float(x) for x in rng.normal(0, 100, 3).astype(np.float32))
    return SparseFeatureMessage(int(rng.integers(0, 2**32)), int(rng.integers(0, 2**32)), pose, cells, values, halo)


@pytest.mark.criterion(5, "Bandwidth meter, codec round trips and dedup")
def test_bandwidth_meter_and_codec(request):
    rng = np.random.default_rng(2024)
    channels = (8, 16, 32)
    shapes = [(50, 176), (25, 88), (13, 44)]
    ego = AgentPose((0.0, 0.0), 0.0)
    for frame in range(100):
        msgs, expected = [], 0
        for sender in range(1, int(rng.integers(1, 4)) + 1):
            feats = [rng.normal(size=(c, h, w)) * (rng.random((h, w)) < 0.4) for c, (h, w) in zip(channels, shapes)]
            cells = [np.stack([rng.integers(0, w, 20), rng.integers(0, h, 20)], axis=1) for h, w in shapes]
            q = QueryMessage(0, frame, (0.0, 0.0, 0.0), cells)
            data = encode_feature_message(respond(feats, q, sender, ego, halo=bool(rng.integers(2))))
            expected += sum(_count_wire_elements(data, channels))
            msgs.append(decode_feature_message(data, channels))
        e = meter_payload(msgs, frame, n_scales=3)
        assert sum(e.elements) == expected
        assert e.payload_bytes == 4 * expected

    for _ in range(1000):
        msg = _random_feature_message(rng)
        assert decode_feature_message(encode_feature_message(msg), channels) == msg.nonzero_entries()
        q = QueryMessage(
            int(rng.integers(0, 2**32)),
            int(rng.integers(0, 2**32)),
            tuple(float(x) for x in rng.normal(0, 100, 3).astype(np.float32)),
            [rng.integers(0, 0xFFFF, size=(int(rng.integers(0, 30)), 2)) for _ in range(int(rng.integers(0, 4)))],
        )
        assert decode_query_message(encode_query_message(q)) == q

    grew = 0
    for _ in range(200):
        F = rng.normal(size=(8, 12, 12)).astype(np.float32)
        cells = rng.integers(0, 12, size=(int(rng.integers(1, 40)), 2))
        deduped = meter_payload([respond([F], QueryMessage(0, 0, (0.0, 0.0, 0.0), [cells]), 1, ego)], n_scales=1)
        raw = meter_payload([SparseFeatureMessage(1, 0, (0.0, 0.0, 0.0), [cells], [halo_extract(F, cells)])], n_scales=1)
        grew += deduped.payload_bytes > raw.payload_bytes
    _detail(request, "100 metered frames, 1000 feature + 1000 query round trips, 200 dedup trials")
    assert grew == 0


@pytest.mark.criterion(6, "Finite-difference gradient checks")
def test_gradient_checks(request):
    t0 = time.perf_counter()
    report = harness.check_gradients(probes=20, eps=1e-4)
    elapsed = time.perf_counter() - t0
    _detail(
        request,
        f"loss {report['offset_loss_max_rel_err']:.2e}, attention {report['attention_logits_max_rel_err']:.2e}, {elapsed:.2f} s",
    )
    assert report["probes"] == 20
    assert report["offset_loss_max_rel_err"] < 1e-4
    assert report["attention_logits_max_rel_err"] < 1e-4
    assert elapsed < 10.0


@pytest.mark.criterion(7, "Fusion degeneracies")
def test_fusion_degeneracies(request):
    rng = np.random.default_rng(11)
    C = 8

    one_hot_err = 0.0
    level = AttentionLevel(np.eye(C), np.zeros((HEADS * N_POINTS * 2, C)), np.zeros((HEADS * N_POINTS, C)), np.eye(C), HEADS)
    for point in range(N_POINTS):
        vmap = rng.normal(size=(C, 14, 16))
        nudged = rng.uniform(1, 12, size=(5, 2))
        logits = np.full((5, HEADS, N_POINTS), -1e3)
        logits[:, :, point] = 0.0
        out, _, _ = deformable_cross_attention(np.zeros((5, C)), nudged, vmap, level, logits=logits)
        one_hot_err = max(one_hot_err, float(np.abs(out - bilinear_sample_many(vmap, nudged + STENCIL[point])).max()))

    F, Fc = rng.uniform(-1, 1, (2, C, 9, 11))
    w = np.zeros((C, 2 * C))
    ego_err = float(np.abs(gated_blend(F, Fc, GateLevel(w, np.full(C, -20.0))) - F).max())
    cav_err = float(np.abs(gated_blend(F, Fc, GateLevel(w, np.full(C, 20.0))) - Fc).max())

    shapes = [(10, 12)]
    msgs = [
        SparseFeatureMessage(s, 0, (0.0, 0.0, 0.0), [rng.integers(0, 10, (8, 2))], [rng.normal(size=(8, 9 * C))], True)
        for s in (5, 2, 9, 4)
    ]
    ref = average_collaborators(msgs, shapes, (C,))
    perm_exact = all(
        np.array_equal(average_collaborators(list(p), shapes, (C,)).values[0], ref.values[0])
        for p in itertools.permutations(msgs)
    )

    p = AttentionParams.init((C,), 3).levels[0]
    _, _, weights = deformable_cross_attention(rng.normal(size=(50, C)) * 10, rng.uniform(0, 9, (50, 2)), ref.values[0], p)
    sum_err = float(np.abs(weights.sum(axis=-1) - 1.0).max())

    _detail(request, f"one-hot {one_hot_err:.1e}, gate {max(ego_err, cav_err):.1e}, weight sum {sum_err:.1e}")
    assert one_hot_err <= 1e-6
    assert ego_err <= 1e-8 and cav_err <= 1e-8
    assert perm_exact
    assert sum_err <= 1e-6


@pytest.mark.criterion(8, "Occlusion recovery over 20 seeds")
def test_occlusion_recovery(request):
    scene = generate_scene(load_scenario(OCCLUSION), 0)
    wall = box_polygon(scene.obstacles[0].as_box())
    hidden, collab = scene.vehicle(1), scene.vehicle(2)
    assert not LineString([collab.position, hidden.position]).intersects(wall)
    assert LineString([scene.vehicle(0).position, hidden.position]).intersects(wall)
    cov = {
        m: harness.seed_average(RunConfig(OCCLUSION, mode=m), SEEDS)["occluded_coverage"]
        for m in ("slimcomm", "no-erp", "no-comm")
    }
    _detail(request, ", ".join(f"{m} {v:.3f}" for m, v in cov.items()))
    assert cov["slimcomm"] > cov["no-erp"]
    assert cov["no-comm"] == 0.0


@pytest.mark.criterion(9, "Communication threshold monotonicity")
def test_tau_monotonicity(request):
    summary = []
    for cfg in (OCCLUSION, DENSE):
        rows = harness.sweep_tau(RunConfig(cfg), [0.0, 0.25, 0.5, 0.75])
        summary.append(f"{cfg.stem}: " + " ".join(f"{r['collaborators']}/{r['payload_bytes']}" for r in rows))
        for a, b in zip(rows, rows[1:]):
            assert b["collaborators"] <= a["collaborators"]
            assert b["payload_bytes"] <= a["payload_bytes"]
    _detail(request, "collaborators/bytes " + "; ".join(summary))


@pytest.mark.criterion(10, "Pose-noise sweep protocol")
def test_noise_protocol(request, tmp_path):
    sigma_pos, sigma_yaw = [0.0, 0.3, 0.6], [0.0, 0.5, 1.0]
    base = RunConfig(OCCLUSION)
    first = harness.sweep_noise(base, sigma_pos, sigma_yaw, SEEDS)
    second = harness.sweep_noise(base, sigma_pos, sigma_yaw, SEEDS)
    harness.write_table(tmp_path / "a.csv", first)
    harness.write_table(tmp_path / "b.csv", second)
    assert [(r["sigma_pos_m"], r["sigma_yaw_deg"]) for r in first] == list(itertools.product(sigma_pos, sigma_yaw))
    assert all(r["seeds"] == 20 for r in first)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    for seed in SEEDS:
        noisy = harness.run_scenario(replace(base, seed=seed, noise=True))
        clean = harness.run_scenario(replace(base, seed=seed))
        for a, b in zip(noisy.frames, clean.frames):
            assert a.row() == b.row()
            assert np.array_equal(a.bev, b.bev)
    clean_avg = harness.seed_average(base, SEEDS)
    assert {k: first[0][k] for k in clean_avg} == {k: round(v, 6) for k, v in clean_avg.items()}
    _detail(request, f"9-cell grid x 20 seeds, occluded coverage at sigma=0 {first[0]['occluded_coverage']}")


def _cli() -> list[str]:
    exe = shutil.which("slimcomm")
    return [exe] if exe else [sys.executable, "-m", "slimcomm.cli"]


@pytest.mark.criterion(11, "End-to-end determinism of slimcomm run")
def test_end_to_end_determinism(request, tmp_path):
    for cfg in (OCCLUSION, DENSE):
        outs = []
        for k in range(2):
            out = tmp_path / f"{cfg.stem}{k}"
            proc = subprocess.run(
                _cli() + ["run", "--config", str(cfg), "--seed", "5", "--out", str(out)], capture_output=True, text=True
            )
            assert proc.returncode == 0, proc.stderr
            outs.append((out / "metrics.csv").read_bytes())
        assert outs[0] == outs[1]
    _detail(request, "metrics.csv byte-identical for both configs")

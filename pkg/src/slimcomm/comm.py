"""Query broadcast, collaborator selection, halo-enriched sparse messages,
the binary wire format and bandwidth metering.

Wire layout (little endian)::

    header  magic "SLIM" | version u16 | type u8 | sender u32 | frame u32 | n_scales u16   (17 B)
    pose    x f32 | y f32 | yaw f32                                                     (12 B)
    scale   count u32, then `count` entries of  u u16 | v u16 [| width x f32]

Query messages carry coordinates only. Feature messages carry 9*C_l floats
per entry (halo) or C_l (centre only); the receiver knows C_l from the
shared encoder configuration.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bev import GridSpec, max_pool, warp_to_frame
from .querygen import QuerySet
from .scene import AgentPose

MAGIC = b"SLIM"
VERSION = 1
TYPE_QUERY = 1
TYPE_HALO = 2
TYPE_CENTER = 3
HEADER = struct.Struct("<4sHBIIH")
POSE = struct.Struct("<3f")
COUNT = struct.Struct("<I")
CELL = struct.Struct("<HH")
BYTES_PER_ELEMENT = 4
COMM_RANGE_M = 70.0
# row-major neighbour order over (dv, du)
HALO_OFFSETS = tuple((du, dv) for dv in (-1, 0, 1) for du in (-1, 0, 1))


class DecodeError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


@dataclass
class QueryMessage:
    sender: int
    frame: int
    pose: tuple[float, float, float]
    cells: list[np.ndarray]  # per scale (K, 2) int (u, v)

    def __eq__(self, other):
        return (
            isinstance(other, QueryMessage)
            and (self.sender, self.frame, self.pose) == (other.sender, other.frame, other.pose)
            and len(self.cells) == len(other.cells)
            and all(np.array_equal(a, b) for a, b in zip(self.cells, other.cells))
        )


@dataclass
class SparseFeatureMessage:
    sender: int
    frame: int
    pose: tuple[float, float, float]
    cells: list[np.ndarray]  # per scale (K, 2) int
    values: list[np.ndarray]  # per scale (K, width) float32
    halo: bool = True

    def __eq__(self, other):
        return (
            isinstance(other, SparseFeatureMessage)
            and (self.sender, self.frame, self.pose, self.halo) == (other.sender, other.frame, other.pose, other.halo)
            and len(self.cells) == len(other.cells)
            and all(np.array_equal(a, b) for a, b in zip(self.cells, other.cells))
            and all(np.array_equal(a, b) for a, b in zip(self.values, other.values))
        )

    def nonzero_entries(self) -> "SparseFeatureMessage":
        """Drop entries whose feature vector is entirely zero."""
        cells, values = [], []
        for c, v in zip(self.cells, self.values):
            keep = np.any(v != 0, axis=1) if len(v) else np.zeros(0, dtype=bool)
            cells.append(c[keep])
            values.append(v[keep])
        return SparseFeatureMessage(self.sender, self.frame, self.pose, cells, values, self.halo)


def _f32_pose(pose: AgentPose) -> tuple[float, float, float]:
    return tuple(float(x) for x in np.array([pose.position[0], pose.position[1], pose.yaw], dtype=np.float32))


def build_query_message(
    queries: QuerySet, pose: AgentPose, sender: int = 0, frame: int = 0, halo_at: str = "anchor"
) -> QueryMessage:
    """Query cells per scale in row-major order (duplicates kept).

    ``halo_at="anchor"`` sends the rounded nudged anchors; ``"fine"`` sends
    the rounded fine sampling locations instead (requires ``sq.fine``).
    """
    if halo_at not in ("anchor", "fine"):
        raise ValueError(f"halo_at must be 'anchor' or 'fine', got {halo_at!r}")
    cells = []
    for l, sq in enumerate(queries.scales):
        if halo_at == "fine":
            if sq.fine is None:
                raise ValueError("fine sampling locations have not been computed")
            H, W = queries.shapes[l]
            c = np.floor(sq.fine.reshape(-1, 2) + 0.5).astype(int)
            c = np.clip(c, 0, [W - 1, H - 1])
        else:
            c = sq.anchor_cells.reshape(-1, 2)
        order = np.lexsort((c[:, 0], c[:, 1]))
        cells.append(c[order])
    return QueryMessage(sender, frame, _f32_pose(pose), cells)


def _header(msg_type, sender, frame, pose, n_scales) -> bytes:
    return HEADER.pack(MAGIC, VERSION, msg_type, sender, frame, n_scales) + POSE.pack(*pose)


def _check_cells(c: np.ndarray):
    if len(c) and (c.min() < 0 or c.max() > 0xFFFF):
        raise ValueError("cell coordinates must fit in u16")


def encode_query_message(msg: QueryMessage) -> bytes:
    parts = [_header(TYPE_QUERY, msg.sender, msg.frame, msg.pose, len(msg.cells))]
    for c in msg.cells:
        c = np.asarray(c).reshape(-1, 2)
        _check_cells(c)
        parts.append(COUNT.pack(len(c)))
        parts.append(c.astype("<u2").tobytes())
    return b"".join(parts)


def encode_feature_message(msg: SparseFeatureMessage) -> bytes:
    """Serialise, omitting all-zero entries."""
    msg = msg.nonzero_entries()
    parts = [_header(TYPE_HALO if msg.halo else TYPE_CENTER, msg.sender, msg.frame, msg.pose, len(msg.cells))]
    for c, v in zip(msg.cells, msg.values):
        c = np.asarray(c).reshape(-1, 2)
        _check_cells(c)
        parts.append(COUNT.pack(len(c)))
        if len(c):
            rec = np.empty(len(c), dtype=[("uv", "<u2", 2), ("x", "<f4", v.shape[1])])
            rec["uv"] = c
            rec["x"] = v
            parts.append(rec.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.data):
            raise DecodeError(f"truncated {what}: need {n} bytes, have {len(self.data) - self.pos}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def _decode_header(r: _Reader, expected_types):
    magic, version, msg_type, sender, frame, n_scales = HEADER.unpack(r.take(HEADER.size, "header"))
    if magic != MAGIC:
        raise DecodeError(f"bad magic {bytes(magic)!r}", 0)
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}", 4)
    if msg_type not in expected_types:
        raise DecodeError(f"unexpected message type {msg_type}", 6)
    pose = tuple(float(x) for x in POSE.unpack(r.take(POSE.size, "pose")))
    return msg_type, sender, frame, n_scales, pose


def decode_query_message(data: bytes) -> QueryMessage:
    r = _Reader(data)
    _, sender, frame, n_scales, pose = _decode_header(r, (TYPE_QUERY,))
    cells = []
    for _ in range(n_scales):
        (n,) = COUNT.unpack(r.take(COUNT.size, "scale count"))
        raw = r.take(n * CELL.size, "query cells")
        cells.append(np.frombuffer(raw, dtype="<u2").reshape(n, 2).astype(int))
    if r.pos != len(r.data):
        raise DecodeError("trailing bytes", r.pos)
    return QueryMessage(sender, frame, pose, cells)


def decode_feature_message(data: bytes, channels) -> SparseFeatureMessage:
    r = _Reader(data)
    msg_type, sender, frame, n_scales, pose = _decode_header(r, (TYPE_HALO, TYPE_CENTER))
    if n_scales > len(channels):
        raise DecodeError(f"message has {n_scales} scales, receiver knows {len(channels)}", 15)
    halo = msg_type == TYPE_HALO
    cells, values = [], []
    for l in range(n_scales):
        width = channels[l] * (9 if halo else 1)
        (n,) = COUNT.unpack(r.take(COUNT.size, f"scale {l} count"))
        dt = np.dtype([("uv", "<u2", 2), ("x", "<f4", width)])
        rec = np.frombuffer(r.take(n * dt.itemsize, f"scale {l} entries"), dtype=dt)
        cells.append(rec["uv"].astype(int).reshape(n, 2))
        values.append(rec["x"].astype(np.float32).reshape(n, width))
    if r.pos != len(r.data):
        raise DecodeError("trailing bytes", r.pos)
    return SparseFeatureMessage(sender, frame, pose, cells, values, halo)


def dedup_locations(cells) -> np.ndarray:
    """Unique cells in first-occurrence order."""
    cells = np.asarray(cells, dtype=int).reshape(-1, 2)
    if len(cells) == 0:
        return cells
    _, first = np.unique(cells, axis=0, return_index=True)
    return cells[np.sort(first)]


def halo_cells(cells) -> np.ndarray:
    cells = np.asarray(cells, dtype=int).reshape(-1, 2)
    return (cells[:, None, :] + np.array(HALO_OFFSETS)[None]).reshape(-1, 2)


def halo_extract(features: np.ndarray, cells) -> np.ndarray:
    """(K, 9*C) vectors: the 3x3 neighbourhood of each cell, channel-concatenated.

    Neighbour blocks follow HALO_OFFSETS; neighbours outside the grid are zero.
    """
    C, H, W = features.shape
    cells = np.asarray(cells, dtype=int).reshape(-1, 2)
    out = np.zeros((len(cells), 9, C), dtype=features.dtype)
    for k, (du, dv) in enumerate(HALO_OFFSETS):
        u, v = cells[:, 0] + du, cells[:, 1] + dv
        ok = (u >= 0) & (u < W) & (v >= 0) & (v < H)
        out[ok, k] = features[:, v[ok], u[ok]].T
    return out.reshape(len(cells), 9 * C)


def center_extract(features: np.ndarray, cells) -> np.ndarray:
    cells = np.asarray(cells, dtype=int).reshape(-1, 2)
    return features[:, cells[:, 1], cells[:, 0]].T.copy()


def density_at_level0(density: np.ndarray) -> np.ndarray:
    """Pillar-resolution density reduced to pyramid level 0 by max pooling."""
    return max_pool(density, 2)


def should_collaborate(
    density_j: np.ndarray,
    msg: QueryMessage,
    spec0: GridSpec,
    pose_j: AgentPose,
    tau: float = 0.0,
) -> bool:
    """Strict test: warped level-0 density exceeds tau at some level-0 query cell.

    `density_j` is the candidate's density map at level-0 resolution in its
    own frame; the ego pose comes from the broadcast message.
    """
    if not msg.cells or len(msg.cells[0]) == 0:
        return False
    ego = AgentPose((msg.pose[0], msg.pose[1]), msg.pose[2])
    warped = warp_to_frame(density_j, spec0, pose_j, ego, "bilinear")
    c = msg.cells[0]
    return bool(warped[c[:, 1], c[:, 0]].max() > tau)


def respond(
    warped_features,
    msg: QueryMessage,
    sender: int,
    pose: AgentPose,
    halo: bool = True,
) -> SparseFeatureMessage:
    """Answer a query broadcast from features already warped into the ego frame."""
    cells, values = [], []
    for F, c in zip(warped_features, msg.cells):
        uniq = dedup_locations(c)
        vals = halo_extract(F, uniq) if halo else center_extract(F, uniq)
        cells.append(uniq)
        values.append(vals.astype(np.float32))
    return SparseFeatureMessage(sender, msg.frame, _f32_pose(pose), cells, values, halo).nonzero_entries()


def full_map_message(warped_features, sender: int, frame: int, pose: AgentPose) -> SparseFeatureMessage:
    """Dense baseline: every cell with a non-zero feature vector, centre only."""
    cells, values = [], []
    for F in warped_features:
        vv, uu = np.nonzero(np.any(F != 0, axis=0))
        c = np.stack([uu, vv], axis=1)
        cells.append(c)
        values.append(F[:, vv, uu].T.astype(np.float32))
    return SparseFeatureMessage(sender, frame, _f32_pose(pose), cells, values, halo=False)


def full_map_payload(levels) -> tuple[int, int]:
    """Non-zero elements and bytes of a dense pyramid exchange."""
    n = int(sum(np.count_nonzero(F) for F in levels))
    return n, BYTES_PER_ELEMENT * n


@dataclass
class LedgerEntry:
    frame: int
    mode: str
    elements: tuple[int, ...]
    payload_bytes: int
    cv_log2: float
    metadata_bytes: int
    cv_defined: bool

    @property
    def total_elements(self) -> int:
        return int(sum(self.elements))


def meter_payload(
    messages, frame: int = 0, mode: str = "slimcomm", n_scales: int = 3, wire_bytes: int = 0
) -> LedgerEntry:
    """Count transmitted non-zero feature elements per scale.

    B = 4 * sum(N_l); CV = log2(sum(N_l)), reported as 0 with
    ``cv_defined=False`` when nothing is sent. `wire_bytes` is the total
    encoded size (queries and responses); whatever exceeds B is metadata.
    """
    elements = [0] * n_scales
    for m in messages:
        for l, v in enumerate(m.values):
            elements[l] += int(np.count_nonzero(v))
    total = sum(elements)
    payload = BYTES_PER_ELEMENT * total
    return LedgerEntry(
        frame=frame,
        mode=mode,
        elements=tuple(elements),
        payload_bytes=payload,
        cv_log2=math.log2(total) if total > 0 else 0.0,
        metadata_bytes=max(wire_bytes - payload, 0),
        cv_defined=total > 0,
    )


@dataclass
class BandwidthLedger:
    entries: list[LedgerEntry] = field(default_factory=list)

    COLUMNS = ("frame", "mode", "elements_l0", "elements_l1", "elements_l2", "payload_bytes", "cv_log2", "metadata_bytes")

    def add(self, entry: LedgerEntry) -> None:
        self.entries.append(entry)

    def rows(self):
        for e in self.entries:
            el = list(e.elements) + [0] * (3 - len(e.elements))
            yield [e.frame, e.mode, *el[:3], e.payload_bytes, f"{e.cv_log2:.6f}", e.metadata_bytes]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            w.writerows(self.rows())


class Mailbox:
    """In-process message queue delivering in (frame, sender) order."""

    def __init__(self):
        self._items: list[tuple[int, int, bytes]] = []

    def post(self, frame: int, sender: int, payload: bytes) -> None:
        self._items.append((frame, sender, payload))

    def drain(self) -> list[tuple[int, int, bytes]]:
        items = sorted(self._items, key=lambda t: (t[0], t[1]))
        self._items = []
        return items

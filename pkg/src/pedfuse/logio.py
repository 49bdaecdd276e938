"""Line-delimited JSON measurement logs and trajectory files.

Every line is one record::

    {"t": 12.5, "agent": 0, "type": "range", "payload": {"anchor": 2, "d": 4.13}}

Measurement types and payload fields:

============  ===========================================================================
step          ``q`` relative rotation (w, x, y, z), ``u`` unit direction
velocity      ``v`` (vx, vy) in the start frame, unscaled m/s, ``dt`` seconds
range         ``anchor`` anchor id, ``d`` meters
ble_scan      ``readings`` {source id: RSSI dBm}
wifi_scan     ``readings`` {source id: RSSI dBm}
groundtruth   ``p`` position (x, y, z), ``q`` orientation (w, x, y, z), optional ``s`` true scale
============  ===========================================================================

Trajectory files additionally use ``pose`` (``p``, ``q``, ``s`` scale or
null) and ``anchor`` (``id``, ``p``; agent -1) records.  Unknown types are
skipped with a warning.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .factors import StepMeasurement, VelocityMeasurement
from .frontend import Fingerprint
from .manifold import Pose, matrix_to_quat, quat_to_matrix

log = logging.getLogger(__name__)

MEASUREMENT_TYPES = ("step", "velocity", "range", "ble_scan", "wifi_scan", "groundtruth")
TRAJECTORY_TYPES = ("pose", "anchor")
KNOWN_TYPES = MEASUREMENT_TYPES + TRAJECTORY_TYPES

_REQUIRED = {
    "step": ("q", "u"),
    "velocity": ("v", "dt"),
    "range": ("anchor", "d"),
    "ble_scan": ("readings",),
    "wifi_scan": ("readings",),
    "groundtruth": ("p", "q"),
    "pose": ("p", "q"),
    "anchor": ("id", "p"),
}


class LogFormatError(ValueError):
    pass


@dataclass
class LogRecord:
    t: float
    agent: int
    type: str
    payload: dict = field(default_factory=dict)


def _plain(x):
    if isinstance(x, np.ndarray):
        return [_plain(v) for v in x.tolist()]
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    return x


def serialize(rec: LogRecord) -> str:
    body = {"t": float(rec.t), "agent": int(rec.agent), "type": rec.type, "payload": _plain(rec.payload)}
    return json.dumps(body, sort_keys=False, separators=(",", ":"), allow_nan=False)


def parse(line: str) -> Optional[LogRecord]:
    """Parse one line; returns None (with a warning) for unknown record types."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise LogFormatError(f"invalid JSON: {exc}") from None
    try:
        rtype = obj["type"]
        rec = LogRecord(float(obj["t"]), int(obj["agent"]), rtype, dict(obj.get("payload", {})))
    except (KeyError, TypeError, ValueError) as exc:
        raise LogFormatError(f"malformed record: {exc}") from None
    if rtype not in KNOWN_TYPES:
        log.warning("skipping unknown record type %r", rtype)
        return None
    missing = [f for f in _REQUIRED[rtype] if f not in rec.payload]
    if missing:
        raise LogFormatError(f"{rtype} record missing payload fields {missing}")
    if rtype in ("ble_scan", "wifi_scan"):
        rec.payload["readings"] = {str(k): float(v) for k, v in rec.payload["readings"].items()}
    return rec


def read_records(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = parse(line)
            except LogFormatError as exc:
                raise LogFormatError(f"{path}:{n}: {exc}") from None
            if rec is not None:
                out.append(rec)
    return out


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_records(path, records: Iterable[LogRecord]) -> None:
    write_text_atomic(path, "".join(serialize(r) + "\n" for r in records))


# ---------------------------------------------------------------------------
# domain conversion
# ---------------------------------------------------------------------------

def step_record(agent: int, m: StepMeasurement) -> LogRecord:
    return LogRecord(m.timestamp, agent, "step", {"q": matrix_to_quat(m.relative_rotation), "u": m.direction})


def velocity_record(agent: int, m: VelocityMeasurement) -> LogRecord:
    return LogRecord(m.timestamp, agent, "velocity", {"v": m.velocity, "dt": m.dt})


def scan_record(agent: int, fp: Fingerprint) -> LogRecord:
    return LogRecord(fp.timestamp, agent, f"{fp.source_kind}_scan", {"readings": dict(sorted(fp.readings.items()))})


def pose_record(t: float, agent: int, pose: Pose, rtype: str = "pose", scale=None) -> LogRecord:
    payload = {"p": pose.translation, "q": pose.quaternion}
    if rtype == "pose":
        payload["s"] = None if scale is None else float(scale)
    return LogRecord(t, agent, rtype, payload)


def anchor_record(anchor_id: int, position) -> LogRecord:
    return LogRecord(0.0, -1, "anchor", {"id": int(anchor_id), "p": np.asarray(position, dtype=float)})


def to_step(rec: LogRecord) -> StepMeasurement:
    return StepMeasurement(quat_to_matrix(rec.payload["q"]), np.asarray(rec.payload["u"], dtype=float), rec.t)


def to_velocity(rec: LogRecord) -> VelocityMeasurement:
    return VelocityMeasurement(np.asarray(rec.payload["v"], dtype=float), float(rec.payload["dt"]), rec.t)


def to_fingerprint(rec: LogRecord) -> Fingerprint:
    return Fingerprint(rec.t, rec.type.split("_")[0], rec.payload["readings"])


def to_pose(rec: LogRecord) -> Pose:
    return Pose.from_quaternion(rec.payload["q"], rec.payload["p"])


@dataclass
class Trajectory:
    """Timestamped positions and yaw angles of one agent."""

    t: np.ndarray
    p: np.ndarray
    yaw: np.ndarray

    @classmethod
    def from_poses(cls, items) -> "Trajectory":
        items = list(items)
        t = np.array([x[0] for x in items], dtype=float)
        p = np.array([x[1].translation for x in items], dtype=float).reshape(-1, 3)
        yaw = np.array([x[1].yaw for x in items], dtype=float)
        return cls(t, p, yaw)

    def __len__(self) -> int:
        return len(self.t)


def trajectories_from_records(records: Iterable[LogRecord], rtype: str) -> dict:
    """Per-agent trajectories built from ``pose`` or ``groundtruth`` records."""
    per: dict = {}
    for r in records:
        if r.type == rtype:
            per.setdefault(r.agent, []).append((r.t, to_pose(r)))
    return {a: Trajectory.from_poses(sorted(v, key=lambda x: x[0])) for a, v in sorted(per.items())}


def anchors_from_records(records: Iterable[LogRecord]) -> dict:
    return {int(r.payload["id"]): np.asarray(r.payload["p"], dtype=float) for r in records if r.type == "anchor"}

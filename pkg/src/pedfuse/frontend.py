"""Sensor frontend: step detection and RSSI fingerprint loop candidates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.signal import butter, find_peaks, sosfiltfilt

from .factors import StepMeasurement
from .manifold import quat_to_matrix

RSSI_FLOOR = -100.0


@dataclass(frozen=True, eq=False)
class ImuSample:
    timestamp: float
    accel: np.ndarray
    orientation: np.ndarray  # unit quaternion (w, x, y, z)


@dataclass(frozen=True)
class Fingerprint:
    timestamp: float
    source_kind: str  # ble | wifi
    readings: Mapping[str, float]

    def __post_init__(self):
        if self.source_kind not in ("ble", "wifi"):
            raise ValueError(f"unknown source kind {self.source_kind!r}")
        for sid, v in self.readings.items():
            if not -120.0 <= v <= 0.0:
                raise ValueError(f"RSSI {v} dBm for {sid!r} outside [-120, 0]")


@dataclass(frozen=True)
class LoopCandidate:
    step_i: int
    step_j: int
    similarity: float
    source_kind: str
    agent_i: int = 0
    agent_j: int = 0


@dataclass(frozen=True)
class StepDetectorParams:
    cutoff_hz: float = 3.0
    peak_threshold: float = 11.0  # m/s^2, on the filtered magnitude
    refractory: float = 0.3  # s


@dataclass(frozen=True)
class LoopParams:
    threshold: float = 0.95
    min_readings: int = 10
    min_separation: int = 30
    dedup_window: int = 10


# ---------------------------------------------------------------------------
# step detection
# ---------------------------------------------------------------------------

def _lowpass(x: np.ndarray, fs: float, cutoff: float) -> np.ndarray:
    if cutoff >= 0.5 * fs:
        return x
    sos = butter(2, cutoff, fs=fs, output="sos")
    if len(x) <= 3 * (2 * len(sos) + 1):
        return x
    return sosfiltfilt(sos, x)


def detect_steps(samples: Sequence[ImuSample], params: StepDetectorParams = StepDetectorParams()) -> list:
    """One StepMeasurement per acceleration-magnitude peak.

    Peaks above ``peak_threshold`` are taken earliest-first, skipping any that
    fall within ``refractory`` seconds of the last accepted one.  The relative
    rotation of each step is the device orientation change since the previous
    step (or since the first sample, for the first step).
    """
    if len(samples) < 2:
        return []
    t = np.array([s.timestamp for s in samples], dtype=float)
    if np.any(np.diff(t) <= 0):
        raise ValueError("IMU timestamps must be strictly increasing")
    mag = np.linalg.norm(np.array([s.accel for s in samples], dtype=float), axis=1)
    fs = (len(t) - 1) / (t[-1] - t[0])
    mag = _lowpass(mag, fs, params.cutoff_hz)

    peaks, _ = find_peaks(mag, height=params.peak_threshold)
    accepted = []
    for p in peaks:
        if not accepted or t[p] - t[accepted[-1]] >= params.refractory:
            accepted.append(p)

    steps = []
    prev_R = quat_to_matrix(samples[0].orientation)
    for p in accepted:
        R = quat_to_matrix(samples[p].orientation)
        steps.append(StepMeasurement(prev_R.T @ R, timestamp=float(t[p])))
        prev_R = R
    return steps


# ---------------------------------------------------------------------------
# fingerprints
# ---------------------------------------------------------------------------

def _strength(rssi) -> np.ndarray:
    return np.maximum(np.asarray(rssi, dtype=float) - RSSI_FLOOR, 0.0)


def fingerprint_similarity(fa: Fingerprint, fb: Fingerprint) -> float:
    """Cosine similarity of floored strengths (rssi + 100) over the union of sources."""
    if fa.source_kind != fb.source_kind:
        raise ValueError(f"cannot compare {fa.source_kind} with {fb.source_kind} fingerprints")
    ids = sorted(set(fa.readings) | set(fb.readings))
    a = _strength([fa.readings.get(i, RSSI_FLOOR) for i in ids])
    b = _strength([fb.readings.get(i, RSSI_FLOOR) for i in ids])
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), 0.0, 1.0))


def _strength_matrix(scans: Sequence[Fingerprint], vocab: dict) -> np.ndarray:
    m = np.full((len(scans), len(vocab)), RSSI_FLOOR)
    for r, s in enumerate(scans):
        for sid, v in s.readings.items():
            m[r, vocab[sid]] = v
    m = _strength(m)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def _nearest(times: np.ndarray, t: np.ndarray) -> np.ndarray:
    i = np.clip(np.searchsorted(times, t), 1, max(len(times) - 1, 1))
    if len(times) == 1:
        return np.zeros(len(t), dtype=int)
    left = np.abs(t - times[i - 1]) <= np.abs(times[i] - t)
    return np.where(left, i - 1, i)


def _dedup(cands: list, window: int) -> list:
    kept: list = []
    for c in sorted(cands, key=lambda c: (-c.similarity, c.agent_i, c.step_i, c.agent_j, c.step_j)):
        clash = any(
            k.agent_i == c.agent_i and k.agent_j == c.agent_j
            and abs(k.step_i - c.step_i) <= window and abs(k.step_j - c.step_j) <= window
            for k in kept
        )
        if not clash:
            kept.append(c)
    return sorted(kept, key=lambda c: (c.agent_i, c.step_i, c.agent_j, c.step_j))


def _usable(scans, params):
    return [s for s in scans if len(s.readings) >= params.min_readings]


def find_loops(scans: Sequence[Fingerprint], step_times: Sequence[float],
               params: LoopParams = LoopParams(), agent: int = 0) -> list:
    """Loop candidates between non-consecutive steps of one agent.

    Each scan is assigned to the step with the nearest timestamp; pairs of
    scans whose similarity reaches the threshold and whose steps are at least
    ``min_separation`` apart become candidates, deduplicated within
    ``dedup_window`` steps.  Source kinds are never mixed.
    """
    step_times = np.asarray(step_times, dtype=float)
    if len(step_times) == 0:
        return []
    out: list = []
    for kind in ("ble", "wifi"):
        group = sorted(_usable([s for s in scans if s.source_kind == kind], params), key=lambda s: s.timestamp)
        if len(group) < 2:
            continue
        vocab = {sid: i for i, sid in enumerate(sorted({sid for s in group for sid in s.readings}))}
        X = _strength_matrix(group, vocab)
        sim = X @ X.T
        steps = _nearest(step_times, np.array([s.timestamp for s in group]))
        i, j = np.triu_indices(len(group), k=1)
        ok = (np.abs(steps[j] - steps[i]) >= params.min_separation) & (sim[i, j] >= params.threshold)
        cands = []
        for a, b in zip(i[ok], j[ok]):
            si, sj = sorted((int(steps[a]), int(steps[b])))
            cands.append(LoopCandidate(si, sj, float(min(sim[a, b], 1.0)), kind, agent, agent))
        out.extend(_dedup(cands, params.dedup_window))
    return out


def find_inter_agent_loops(scans_a: Sequence[Fingerprint], times_a: Sequence[float], agent_a: int,
                           scans_b: Sequence[Fingerprint], times_b: Sequence[float], agent_b: int,
                           params: LoopParams = LoopParams()) -> list:
    """Loop candidates between two agents (no separation rule applies)."""
    times_a = np.asarray(times_a, dtype=float)
    times_b = np.asarray(times_b, dtype=float)
    if len(times_a) == 0 or len(times_b) == 0:
        return []
    out: list = []
    for kind in ("ble", "wifi"):
        ga = _usable([s for s in scans_a if s.source_kind == kind], params)
        gb = _usable([s for s in scans_b if s.source_kind == kind], params)
        if not ga or not gb:
            continue
        vocab = {sid: i for i, sid in enumerate(sorted({sid for s in ga + gb for sid in s.readings}))}
        sim = _strength_matrix(ga, vocab) @ _strength_matrix(gb, vocab).T
        sa = _nearest(times_a, np.array([s.timestamp for s in ga]))
        sb = _nearest(times_b, np.array([s.timestamp for s in gb]))
        ii, jj = np.nonzero(sim >= params.threshold)
        cands = [LoopCandidate(int(sa[a]), int(sb[b]), float(min(sim[a, b], 1.0)), kind, agent_a, agent_b)
                 for a, b in zip(ii, jj)]
        out.extend(_dedup(cands, params.dedup_window))
    return out

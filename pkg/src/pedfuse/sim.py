"""Deterministic synthetic scenarios: ground truth plus every measurement stream.

Ground truth is planar (z = 0).  Agents walk a 2D polyline at constant
cadence; consecutive step points are exactly ``true_scale`` apart (chord
length), so a noiseless step chain reproduces the truth exactly.  Each
measurement stream draws from its own seeded generator, which keeps the
motion noise of a run identical when, say, the anchor layout changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .factors import StepMeasurement, VelocityMeasurement
from .frontend import Fingerprint
from .logio import LogRecord, anchor_record, pose_record, scan_record, step_record, velocity_record
from .manifold import Pose, rotz

AREA = (30.0, 20.0)
_STREAMS = {"pdr": 1, "ronin": 2, "uwb": 3, "ble": 4, "wifi": 5, "shadow": 6}


@dataclass(frozen=True)
class NoiseModel:
    heading_sigma: float = 0.02  # rad per step
    range_sigma: float = 0.1
    nlos_prob: float = 0.05
    nlos_bias: tuple = (1.0, 3.0)
    rssi_sigma: float = 4.0
    pathloss_exponent: float = 2.5
    velocity_sigma: float = 0.05

    def __post_init__(self):
        for name in ("heading_sigma", "range_sigma", "rssi_sigma", "velocity_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.nlos_prob <= 1.0:
            raise ValueError("nlos_prob must be in [0, 1]")
        if self.nlos_bias[0] > self.nlos_bias[1]:
            raise ValueError("nlos_bias must be (lo, hi) with lo <= hi")

    @classmethod
    def noiseless(cls) -> "NoiseModel":
        return cls(0.0, 0.0, 0.0, (0.0, 0.0), 0.0, 2.5, 0.0)


@dataclass(frozen=True, eq=False)
class AgentPath:
    waypoints: np.ndarray  # (K, 2) meters
    speed: float = 1.4
    true_scale: float = 0.7
    start_time: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "waypoints", w)
        if not self.speed > 0:
            raise ValueError("walking speed must be positive")
        if not 0.2 <= self.true_scale <= 3.0:
            raise ValueError("true scale must lie in [0.2, 3.0]")
        if len(w) < 2 or np.sum(np.linalg.norm(np.diff(w, axis=0), axis=1)) < self.true_scale:
            raise ValueError("degenerate path: needs at least one step of length")


@dataclass(frozen=True)
class Beacon:
    position: tuple
    kind: str  # ble | wifi
    tx_power: float  # dBm at 1 m


@dataclass(frozen=True, eq=False)
class Scenario:
    seed: int
    agents: tuple
    anchors: tuple = ()
    beacons: tuple = ()
    noise: NoiseModel = field(default_factory=NoiseModel)
    uwb_hz: float = 10.0
    ble_hz: float = 1.0
    wifi_hz: float = 3.0
    ronin_hz: float = 5.0
    scan_window: float = 1.0  # RF snapshot lags the scan timestamp by U(0, scan_window)
    rssi_sensitivity: float = -95.0
    shadowing_sigma: float = 0.0  # dB, static log-normal shadowing per transmitter
    shadowing_distance: float = 3.0  # m, correlation length of the shadowing field
    name: str = "custom"
    runs: int = 1
    sweep_axis: str = ""
    sweep_values: tuple = ()

    def __post_init__(self):
        for name in ("uwb_hz", "ble_hz", "wifi_hz", "ronin_hz"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.agents:
            raise ValueError("scenario needs at least one agent")

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=int(seed))


@dataclass
class SimOutput:
    log: list
    truth: list


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def step_points(waypoints: np.ndarray, step: float) -> np.ndarray:
    """Points along the polyline, each exactly ``step`` (chord) from the previous one."""
    w = np.asarray(waypoints, dtype=float)
    pts = [w[0].copy()]
    seg, tau = 0, 0.0
    while True:
        cur = pts[-1]
        found = False
        for i in range(seg, len(w) - 1):
            a, b = w[i], w[i + 1]
            ab = b - a
            L2 = float(ab @ ab)
            if L2 == 0:
                continue
            # |a + x ab - cur|^2 = step^2, take the exit root (cur is inside the circle)
            ac = a - cur
            B = 2 * float(ab @ ac)
            C = float(ac @ ac) - step * step
            disc = B * B - 4 * L2 * C
            if disc < 0:
                continue
            x = (-B + np.sqrt(disc)) / (2 * L2)
            lo = tau if i == seg else 0.0
            if lo - 1e-12 <= x <= 1.0 + 1e-12:
                pts.append(a + x * ab)
                seg, tau = i, x
                found = True
                break
        if not found:
            return np.array(pts)


def _interp(times: np.ndarray, pts: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.stack([np.interp(t, times, pts[:, 0]), np.interp(t, times, pts[:, 1])], axis=-1)


def _segment_heading(times: np.ndarray, headings: np.ndarray, t: np.ndarray) -> np.ndarray:
    i = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(headings) - 1)
    return headings[i]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _rng(seed: int, agent: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, agent, _STREAMS[stream]]))


class ShadowField:
    """Static, spatially correlated shadowing (dB) for a set of transmitters.

    Random Fourier features approximate a zero-mean Gaussian field with
    covariance ``sigma^2 exp(-|dp|^2 / (2 L^2))``; the field is shared by every
    agent and scan, which is what makes revisited places look alike.
    """

    def __init__(self, rng: np.random.Generator, count: int, sigma: float, length: float, features: int = 64):
        self.sigma = float(sigma)
        self.k = rng.normal(0.0, 1.0 / length, (count, features, 2))
        self.phase = rng.uniform(0.0, 2 * np.pi, (count, features))
        self.norm = np.sqrt(2.0 / features)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """(N, 2) positions -> (N, count) shadowing in dB."""
        if self.sigma == 0.0:
            return np.zeros((len(points), self.k.shape[0]))
        arg = np.einsum("nd,bfd->nbf", points, self.k) + self.phase[None]
        return self.sigma * self.norm * np.cos(arg).sum(axis=2)


def _grid(t0: float, t1: float, hz: float, include_start: bool) -> np.ndarray:
    k0 = 0 if include_start else 1
    k1 = int(np.floor((t1 - t0) * hz + 1e-9))
    return t0 + np.arange(k0, k1 + 1) / hz


def generate(scenario: Scenario) -> SimOutput:
    """Measurement log and ground-truth records for ``scenario`` (pure function)."""
    nz = scenario.noise
    log: list = []
    truth: list = []
    anchors = [np.asarray(a, dtype=float).reshape(3) for a in scenario.anchors]
    for aid, a in enumerate(anchors):
        truth.append(anchor_record(aid, a))

    shadow = ShadowField(_rng(scenario.seed, 0, "shadow"), len(scenario.beacons), scenario.shadowing_sigma,
                         scenario.shadowing_distance)
    for ai, agent in enumerate(scenario.agents):
        pts = step_points(agent.waypoints, agent.true_scale)
        if len(pts) < 2:
            raise ValueError(f"agent {ai}: degenerate path")
        n = len(pts) - 1
        period = agent.true_scale / agent.speed
        t0 = float(agent.start_time)
        tk = t0 + np.arange(n + 1) * period
        d = np.diff(pts, axis=0)
        heading = np.arctan2(d[:, 1], d[:, 0])
        heading = np.append(heading, heading[-1])
        t_end = tk[-1]

        # PDR steps
        rng = _rng(scenario.seed, ai, "pdr")
        dtheta = np.diff(heading) + rng.normal(0.0, nz.heading_sigma, n)
        for k in range(n):
            log.append(step_record(ai, StepMeasurement(rotz(dtheta[k]), timestamp=float(tk[k + 1]))))

        # RoNIN-style world-frame velocity, expressed in the agent's start frame
        rng = _rng(scenario.seed, ai, "ronin")
        tv = _grid(t0, t_end, scenario.ronin_hz, include_start=True)
        dtv = 1.0 / scenario.ronin_hz
        pos_v = _interp(tk, pts, tv)
        vel = np.diff(pos_v, axis=0) / dtv
        drift_sigma = nz.heading_sigma * np.sqrt(dtv / period)
        # the first interval is expressed exactly in the start frame
        drift = np.concatenate([[0.0], np.cumsum(rng.normal(0.0, drift_sigma, len(vel) - 1))])
        ang = -heading[0] + drift
        c, s = np.cos(ang), np.sin(ang)
        v_local = np.stack([c * vel[:, 0] - s * vel[:, 1], s * vel[:, 0] + c * vel[:, 1]], axis=1)
        v_meas = v_local / agent.true_scale + rng.normal(0.0, nz.velocity_sigma, v_local.shape)
        for m in range(len(vel)):
            log.append(velocity_record(ai, VelocityMeasurement(v_meas[m], dtv, float(tv[m + 1]))))

        # ground truth at every pose instant of either motion model
        tg = np.unique(np.concatenate([tk, tv]))
        pg = _interp(tk, pts, tg)
        hg = _segment_heading(tk, heading, tg)
        for t, p, h in zip(tg, pg, hg):
            rec = pose_record(float(t), ai, Pose(rotz(h), [p[0], p[1], 0.0]), "groundtruth")
            rec.payload["s"] = float(agent.true_scale)
            truth.append(rec)

        # UWB ranges
        if anchors:
            rng = _rng(scenario.seed, ai, "uwb")
            tu = _grid(t0, t_end, scenario.uwb_hz, include_start=True)
            pu = np.column_stack([_interp(tk, pts, tu), np.zeros(len(tu))])
            for aid, a in enumerate(anchors):
                true_d = np.linalg.norm(pu - a, axis=1)
                clean = true_d + rng.normal(0.0, nz.range_sigma, len(tu))
                nlos = rng.random(len(tu)) < nz.nlos_prob
                biased = true_d + rng.uniform(nz.nlos_bias[0], nz.nlos_bias[1], len(tu))
                meas = np.maximum(np.where(nlos, biased, clean), 0.0)
                for t, dm in zip(tu, meas):
                    log.append(LogRecord(float(t), ai, "range", {"anchor": aid, "d": float(dm)}))

        # BLE / WiFi scans
        for kind, hz in (("ble", scenario.ble_hz), ("wifi", scenario.wifi_hz)):
            bcs = [(i, b) for i, b in enumerate(scenario.beacons) if b.kind == kind]
            if not bcs:
                continue
            rng = _rng(scenario.seed, ai, kind)
            ts = _grid(t0, t_end, hz, include_start=False)
            lag = rng.uniform(0.0, scenario.scan_window, len(ts))
            ps = _interp(tk, pts, np.maximum(ts - lag, t0))
            bpos = np.array([b.position[:2] for _, b in bcs], dtype=float)
            tx = np.array([b.tx_power for _, b in bcs])
            dist = np.linalg.norm(ps[:, None, :] - bpos[None, :, :], axis=2)
            rssi = tx - 10.0 * nz.pathloss_exponent * np.log10(np.maximum(dist, 0.1))
            rssi = rssi + shadow(ps)[:, [i for i, _ in bcs]]
            rssi = np.clip(rssi + rng.normal(0.0, nz.rssi_sigma, rssi.shape), -120.0, 0.0)
            for r, t in enumerate(ts):
                readings = {f"{kind}-{i:02d}": round(float(rssi[r, c]), 1)
                            for c, (i, _) in enumerate(bcs) if rssi[r, c] >= scenario.rssi_sensitivity}
                log.append(scan_record(ai, Fingerprint(float(t), kind, readings)))

    order = {t: i for i, t in enumerate(("groundtruth", "step", "velocity", "range", "ble_scan", "wifi_scan", "anchor"))}
    log.sort(key=lambda r: (r.t, r.agent, order[r.type], r.payload.get("anchor", 0)))
    truth.sort(key=lambda r: (r.type != "anchor", r.t, r.agent))
    return SimOutput(log, truth)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

_XS = (2.0, 9.5, 17.0, 24.5, 28.0)
_YS = (2.0, 10.0, 18.0)


def corridor_tour(rng: np.random.Generator, length: float, start=(0, 0), first=(1, 0)) -> np.ndarray:
    """Random walk over a corridor grid, no immediate backtracking, ~``length`` meters."""
    node = tuple(start)
    path = [node, (node[0] + first[0], node[1] + first[1])]
    total = 0.0

    def xy(nd):
        return np.array([_XS[nd[0]], _YS[nd[1]]])

    total += float(np.linalg.norm(xy(path[1]) - xy(path[0])))
    while total < length:
        cur, prev = path[-1], path[-2]
        nbrs = [(cur[0] + dx, cur[1] + dy) for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1))]
        nbrs = [q for q in nbrs if 0 <= q[0] < len(_XS) and 0 <= q[1] < len(_YS) and q != prev]
        nxt = nbrs[int(rng.integers(len(nbrs)))]
        total += float(np.linalg.norm(xy(nxt) - xy(cur)))
        path.append(nxt)
    w = np.array([xy(q) for q in path])
    # trim the last leg so the walk is close to the requested length
    over = total - length
    last = w[-1] - w[-2]
    L = np.linalg.norm(last)
    if over > 0 and L > over + 0.5:
        w[-1] = w[-2] + last * (L - over) / L
    return w


def _anchors(rng: np.random.Generator, k: int) -> tuple:
    out = []
    while len(out) < k:
        p = np.array([rng.uniform(1.0, AREA[0] - 1.0), rng.uniform(1.0, AREA[1] - 1.0), 0.0])
        if all(np.linalg.norm(p - q) > 6.0 for q in out):
            out.append(p)
    return tuple(tuple(float(v) for v in p) for p in out)


def _beacons(rng: np.random.Generator, n_ble: int = 24, n_wifi: int = 16) -> tuple:
    out = []
    for kind, n, tx in (("ble", n_ble, -59.0), ("wifi", n_wifi, WIFI_TX_POWER)):
        for _ in range(n):
            p = (float(rng.uniform(0.0, AREA[0])), float(rng.uniform(0.0, AREA[1])), 0.0)
            out.append(Beacon(p, kind, tx))
    return tuple(out)


# RF environment shared by every preset
WIFI_TX_POWER = -60.0  # dBm at 1 m
SHADOWING_SIGMA = 8.0  # dB
SHADOWING_DISTANCE = 3.0  # m
SCAN_WINDOW = 1.0  # s; at 1.4 m/s plus nearest-pose rounding, association error stays near 1.5 m

PRESETS = ("anchors_sweep", "scale_sweep", "anchor_noise_sweep", "loops_only", "multi_agent")


def preset(name: str, seed: int = 0) -> Scenario:
    """Named desk-scale scenario in a 30 m x 20 m corridor grid.

    =================== ======= ======== ===============================================
    name                agents  anchors  sweep
    =================== ======= ======== ===============================================
    anchors_sweep       1       4        anchor count 0..4, 10 runs
    scale_sweep         1       1        initial scale 0.5, 1.0, 2.0 (true scale 0.7)
    anchor_noise_sweep  1       4        initial anchor noise sigma 0, 1, 2, 3 m
    loops_only          1       0        loop mode none / proximity / coarse, 10 runs
    multi_agent         4       4        none (BLE + WiFi + UWB, shared start)
    =================== ======= ======== ===============================================
    """
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, 0xC0FFEE]))
    beacons = _beacons(rng)
    rf = dict(shadowing_sigma=SHADOWING_SIGMA, shadowing_distance=SHADOWING_DISTANCE, scan_window=SCAN_WINDOW)
    anchors4 = _anchors(rng, 4)

    def agent(steps: int, scale: float = 0.7, start_time: float = 0.0) -> AgentPath:
        # corners cut a little length, so walk slightly further and keep exactly ``steps`` steps
        pts = step_points(corridor_tour(rng, steps * scale + 10.0), scale)[:steps + 1]
        if len(pts) < steps + 1:
            raise RuntimeError("corridor tour too short for the requested step count")
        return AgentPath(pts, speed=2.0 * scale, true_scale=scale, start_time=start_time)

    if name == "anchors_sweep":
        return Scenario(seed, (agent(250),), anchors4, beacons, name=name, **rf, runs=10,
                        sweep_axis="anchors", sweep_values=(0, 1, 2, 3, 4))
    if name == "scale_sweep":
        return Scenario(seed, (agent(200),), anchors4[:1], beacons, name=name, **rf, runs=1,
                        sweep_axis="init_scale", sweep_values=(0.5, 1.0, 2.0))
    if name == "anchor_noise_sweep":
        return Scenario(seed, (agent(250),), anchors4, beacons, name=name, **rf, runs=5,
                        sweep_axis="anchor_noise", sweep_values=(0.0, 1.0, 2.0, 3.0))
    if name == "loops_only":
        return Scenario(seed, (agent(350),), (), beacons, name=name, **rf, runs=10,
                        sweep_axis="loop_mode", sweep_values=("none", "proximity", "coarse"))
    agents = tuple(agent(300, scale, 5.0 * i) for i, scale in enumerate((0.7, 0.65, 0.75, 0.8)))
    return Scenario(seed, agents, anchors4, beacons, name=name, **rf, runs=1)

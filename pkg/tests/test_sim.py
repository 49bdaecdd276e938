from dataclasses import replace

import numpy as np
import pytest

from pedfuse.logio import serialize, to_step, to_velocity, trajectories_from_records
from pedfuse.metrics import compute_rmse
from pedfuse.pipeline import PipelineOptions, run_solve
from pedfuse.sim import (
    PRESETS,
    AgentPath,
    Beacon,
    NoiseModel,
    Scenario,
    ShadowField,
    generate,
    preset,
    step_points,
)


def straight(length=10.0, scale=0.7, **kw):
    return Scenario(0, (AgentPath(np.array([[0.0, 0.0], [length, 0.0]]), speed=1.4, true_scale=scale),),
                    noise=NoiseModel.noiseless(), **kw)


def of_type(records, rtype):
    return [r for r in records if r.type == rtype]


def dump(out):
    return "\n".join(serialize(r) for r in out.log + out.truth)


class TestGenerate:
    def test_noiseless_straight_steps(self):
        out = generate(straight())
        steps = of_type(out.log, "step")
        assert len(steps) == int(np.floor(10.0 / 0.7))
        for r in steps:
            m = to_step(r)
            np.testing.assert_allclose(m.relative_rotation, np.eye(3), atol=1e-15)
            np.testing.assert_array_equal(m.direction, [1.0, 0.0, 0.0])

    def test_step_points_spacing(self):
        w = np.array([[0, 0], [5, 0], [5, 4], [1, 4]], dtype=float)
        pts = step_points(w, 0.7)
        np.testing.assert_allclose(np.linalg.norm(np.diff(pts, axis=0), axis=1), 0.7, atol=1e-12)

    def test_velocity_divided_by_scale(self):
        out = generate(straight(scale=0.7))
        vs = [to_velocity(r) for r in of_type(out.log, "velocity")]
        assert all(m.dt == pytest.approx(0.2) for m in vs)
        # walking 1.4 m/s at scale 0.7 measures 2.0 unscaled units
        np.testing.assert_allclose([m.velocity for m in vs[1:-1]], [[2.0, 0.0]] * (len(vs) - 2), atol=1e-9)

    def test_rates(self):
        sc = replace(straight(20.0), anchors=((0.0, 3.0, 1.0),),
                     beacons=(Beacon((5.0, 1.0, 0.0), "ble", -50.0), Beacon((5.0, -1.0, 0.0), "wifi", -50.0)))
        out = generate(sc)
        duration = max(r.t for r in out.log)
        assert len(of_type(out.log, "range")) == pytest.approx(10 * duration, abs=2)
        assert len(of_type(out.log, "ble_scan")) == pytest.approx(duration, abs=1.5)
        assert len(of_type(out.log, "wifi_scan")) == pytest.approx(3 * duration, abs=1.5)

    def test_timestamps_sorted(self):
        out = generate(preset("multi_agent", 1))
        t = [r.t for r in out.log]
        assert t == sorted(t)

    def test_truth_scale(self):
        out = generate(preset("multi_agent", 0))
        gt = of_type(out.truth, "groundtruth")
        assert {r.agent: r.payload["s"] for r in gt} == {0: 0.7, 1: 0.65, 2: 0.75, 3: 0.8}

    def test_pathloss(self):
        sc = replace(straight(3.0), beacons=(Beacon((0.0, 0.0, 0.0), "ble", -40.0),), rssi_sensitivity=-120.0,
                     scan_window=0.0)
        out = generate(sc)
        truth = trajectories_from_records(out.truth, "groundtruth")[0]
        for r in of_type(out.log, "ble_scan"):
            # zero scan lag and shadowing: the snapshot sits exactly at the scan time
            x = np.interp(r.t, truth.t, truth.p[:, 0])
            expected = -40.0 - 25.0 * np.log10(max(x, 0.1))
            assert r.payload["readings"]["ble-00"] == pytest.approx(expected, abs=0.051)

    def test_degenerate_path(self):
        with pytest.raises(ValueError):
            AgentPath(np.array([[1.0, 1.0]]))
        with pytest.raises(ValueError):
            AgentPath(np.array([[0.0, 0.0], [0.1, 0.0]]), true_scale=0.7)

    def test_invalid_scenario(self):
        with pytest.raises(ValueError):
            AgentPath(np.array([[0.0, 0.0], [5.0, 0.0]]), speed=0.0)
        with pytest.raises(ValueError):
            AgentPath(np.array([[0.0, 0.0], [5.0, 0.0]]), true_scale=3.5)
        with pytest.raises(ValueError):
            replace(straight(), uwb_hz=0.0)
        with pytest.raises(ValueError):
            NoiseModel(nlos_prob=1.5)
        with pytest.raises(ValueError):
            NoiseModel(nlos_bias=(3.0, 1.0))
        with pytest.raises(ValueError):
            NoiseModel(range_sigma=-0.1)


class TestDeterminism:
    @pytest.mark.parametrize("name", PRESETS)
    def test_same_seed_identical(self, name):
        assert dump(generate(preset(name, 5))) == dump(generate(preset(name, 5)))

    def test_seed_changes_output(self):
        assert dump(generate(preset("loops_only", 1))) != dump(generate(preset("loops_only", 2)))

    def test_streams_independent(self):
        # changing the anchor layout leaves the motion noise untouched
        sc = preset("anchors_sweep", 4)
        a = of_type(generate(sc).log, "step")
        b = of_type(generate(replace(sc, anchors=sc.anchors[:1])).log, "step")
        assert [serialize(r) for r in a] == [serialize(r) for r in b]


class TestStatistics:
    def long_run(self, noise):
        sc = Scenario(11, (AgentPath(np.array([[0.0, 0.0], [1400.0, 0.0]]), speed=1.4, true_scale=0.7),),
                      anchors=((700.0, 5.0, 1.0),), noise=noise)
        out = generate(sc)
        truth = trajectories_from_records(out.truth, "groundtruth")[0]
        ranges = of_type(out.log, "range")
        t = np.array([r.t for r in ranges])
        x = np.interp(t, truth.t, truth.p[:, 0])
        true_d = np.sqrt((x - 700.0) ** 2 + 25.0 + 1.0)
        return np.array([r.payload["d"] for r in ranges]) - true_d

    def test_nlos_fraction(self):
        err = self.long_run(NoiseModel(range_sigma=0.0, nlos_prob=0.05))
        assert len(err) >= 10_000
        frac = float(np.mean(err > 0.5))
        assert 0.04 <= frac <= 0.06

    def test_nlos_bias_range(self):
        err = self.long_run(NoiseModel(range_sigma=0.0, nlos_prob=0.05))
        biased = err[err > 0.5]
        assert biased.min() >= 1.0 - 1e-9 and biased.max() <= 3.0 + 1e-9

    def test_clean_errors_unbiased(self):
        err = self.long_run(NoiseModel(range_sigma=0.1, nlos_prob=0.0))
        assert len(err) >= 10_000
        assert abs(err.mean()) <= 3 * 0.1 / np.sqrt(len(err))
        assert err.std() == pytest.approx(0.1, rel=0.05)


class TestShadowField:
    def test_statistics(self):
        f = ShadowField(np.random.default_rng(0), 200, 8.0, 3.0)
        v = f(np.array([[1.0, 2.0], [1.1, 2.0], [25.0, 15.0]]))
        assert v.shape == (3, 200)
        assert np.std(v[0]) == pytest.approx(8.0, rel=0.2)
        # nearby points are strongly correlated, distant ones are not
        assert np.corrcoef(v[0], v[1])[0, 1] > 0.95
        assert abs(np.corrcoef(v[0], v[2])[0, 1]) < 0.3

    def test_zero_sigma(self):
        f = ShadowField(np.random.default_rng(0), 3, 0.0, 3.0)
        np.testing.assert_array_equal(f(np.zeros((4, 2))), 0.0)


class TestPresets:
    def test_names(self):
        with pytest.raises(ValueError):
            preset("office")

    def test_multi_agent(self):
        sc = preset("multi_agent")
        assert len(sc.agents) == 4 and len(sc.anchors) == 4
        assert {b.kind for b in sc.beacons} == {"ble", "wifi"}

    def test_loops_only(self):
        sc = preset("loops_only")
        assert sc.anchors == () and sc.runs >= 10
        assert sc.ble_hz == 1.0 and sc.wifi_hz == 3.0

    def test_scale_sweep(self):
        sc = preset("scale_sweep")
        assert {0.5, 2.0} <= set(sc.sweep_values)
        assert len(sc.anchors) == 1
        assert sc.agents[0].true_scale == 0.7
        assert len(step_points(sc.agents[0].waypoints, 0.7)) - 1 == 200

    def test_anchor_presets(self):
        assert preset("anchors_sweep").sweep_values == (0, 1, 2, 3, 4)
        assert preset("anchor_noise_sweep").sweep_values == (0.0, 1.0, 2.0, 3.0)

    @pytest.mark.parametrize("name", PRESETS)
    def test_inside_area(self, name):
        sc = preset(name, 3)
        for a in sc.agents:
            w = a.waypoints
            assert np.all(w >= 0) and np.all(w[:, 0] <= 30) and np.all(w[:, 1] <= 20)
            n = len(step_points(w, a.true_scale)) - 1
            assert 150 <= n <= 400


@pytest.mark.parametrize("motion", ["pdr", "ronin"])
@pytest.mark.parametrize("anchors", [0, 1, 2, 3, 4])
def test_noiseless_fidelity(motion, anchors):
    sc = replace(preset("anchors_sweep", 3), noise=NoiseModel.noiseless(), shadowing_sigma=0.0)
    out = generate(sc)
    truth = trajectories_from_records(out.truth, "groundtruth")[0]
    res = run_solve(out.log, PipelineOptions(motion=motion, anchors=anchors, loop_mode="none", init_scale=0.7))
    assert compute_rmse(res.trajectories()[0], truth) <= 1e-6


@pytest.mark.parametrize("motion", ["pdr", "ronin"])
def test_gauge_invariance(motion):
    th, off = 0.7, np.array([5.0, -3.0])
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])

    def tf(p):
        p = np.asarray(p, dtype=float)
        return tuple(R @ p[:2] + off) + tuple(p[2:])

    base = replace(preset("anchors_sweep", 3), shadowing_sigma=0.0)
    moved = replace(
        base,
        agents=tuple(replace(a, waypoints=np.array([tf(w) for w in a.waypoints])) for a in base.agents),
        anchors=tuple(tf(a) for a in base.anchors),
        beacons=tuple(replace(b, position=tf(b.position)) for b in base.beacons),
    )
    opts = PipelineOptions(motion=motion, anchors=4, loop_mode="coarse")
    a = run_solve(generate(base).log, opts).graph.trajectory(0)
    b = run_solve(generate(moved).log, opts).graph.trajectory(0)
    diff = max(np.max(np.abs(p.translation - q.translation)) for (_, p), (_, q) in zip(a, b))
    assert len(a) == len(b) and diff <= 1e-6

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cryoprobe.instrument import (Axis, InstrumentError, NoiseModel, ProbeSession, ScanFormatError,
                                  ScanPlan, UnknownGateError, cross_conductance, lockin_signal,
                                  measure_current, read_scan, run_scan, scan_from_text, scan_to_text,
                                  tunnel_rate, visibility)
from cryoprobe.wafer import FaultRates, WaferSpec, disorder_for_barrier_depth, generate_wafer

KB = 1.380649e-23 / 1.602176634e-19


@pytest.fixture(scope="module")
def flat_wafer():
    # no sensor background, no faults: line shapes can be checked directly
    dis = disorder_for_barrier_depth(50, background_amplitude=0.0, fault_rates=FaultRates())
    return generate_wafer(WaferSpec(die_count=2, devices_per_die=1, seed=5, disorder=dis))


def channel_at(session, offset_in_widths, channel="qubit"):
    t = session.truth
    return {g: t.gates[g].true_vt + offset_in_widths * t.gates[g].pinchoff_width
            for g in session.layout.channels[channel]}


def closed_form_current(truth, volts, bias=1e-3, on=5e-9):
    i = on * bias / 1e-3
    for g, v in volts.items():
        gt = truth.gates[g]
        i *= 1.0 / (1.0 + math.exp(-(v - gt.true_vt) / gt.pinchoff_width))
    return i


def sensing_volts(session, dot_id, vp, vb1, vb2):
    t = session.truth
    dot = t.dots[dot_id]
    sensor = t.dots[dot.paired_sensor]
    return {dot.plunger: vp, dot.barriers[0]: vb1, dot.barriers[1]: vb2,
            sensor.plunger: sensor.sensor_optimum}


def test_saturation_and_pinchoff(quiet_session):
    s = quiet_session
    v = channel_at(s, 10.0)
    v["SCR"] = 0.0
    assert measure_current(s, v) == pytest.approx(5e-9, rel=0.01)
    v["P4"] = s.truth.gates["P4"].true_vt - 10 * s.truth.gates["P4"].pinchoff_width
    assert measure_current(s, v) < 5e-9 * 1e-4


def test_current_matches_closed_form(quiet_session):
    s = quiet_session
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = channel_at(s, 0.0)
        for g in v:
            v[g] += rng.uniform(-0.03, 0.12)
        expect = closed_form_current(s.truth, v)
        v["SCR"] = 0.0
        assert measure_current(s, v) == pytest.approx(expect, rel=1e-12)


def test_unknown_gate(quiet_session):
    v = channel_at(quiet_session, 1.0)
    v["NOPE"] = 1.0
    with pytest.raises(UnknownGateError):
        measure_current(quiet_session, v)
    with pytest.raises(InstrumentError):
        measure_current(quiet_session, {"P1": 1.0})


@settings(max_examples=40, deadline=None)
@given(gate_idx=st.integers(0, 26), v1=st.floats(0.0, 1.5), dv=st.floats(0.0, 0.5))
def test_current_monotone_in_each_gate(small_wafer, gate_idx, v1, dv):
    with ProbeSession(small_wafer, 1, 0, noise=NoiseModel.zero()) as s:
        base = channel_at(s, 1.0)
        base["SCR"] = 0.3
        g = s.layout.channels["qubit"][gate_idx]
        lo, hi = dict(base), dict(base)
        lo[g], hi[g] = v1, v1 + dv
        assert measure_current(s, hi) >= measure_current(s, lo)


def test_cross_conductance_screening(quiet_session):
    s = quiet_session
    volts = {}
    for c in s.layout.channels:
        volts.update(channel_at(s, 3.0, c))
    floor = 1e-12
    volts["SCR"] = s.truth.gates["SCR"].true_vt - 0.2
    assert abs(cross_conductance(s, "qubit", "sensor1", volts)) < floor
    volts["SCR"] = s.truth.gates["SCR"].true_vt + 0.2
    assert cross_conductance(s, "qubit", "sensor1", volts) > floor
    with pytest.raises(InstrumentError):
        cross_conductance(s, "qubit", "qubit", volts)


def test_cross_conductance_analytic(quiet_session):
    s = quiet_session
    volts = {}
    for c in s.layout.channels:
        volts.update(channel_at(s, 0.7, c))
    volts["SCR"] = s.truth.gates["SCR"].true_vt + 0.013
    m, t = s.model, s.truth
    open_frac = 0.013 / m.screening_width
    w = s.wafer.spec.disorder.pinchoff_width
    gids = s.layout.channels["sensor2"]
    drive = np.mean([volts[g] - t.gates[g].true_vt for g in gids]) / w
    # d/dV of G*open*w*softplus(drive) with drive advancing 1/w per volt
    expect = m.leak_conductance * open_frac / (1.0 + math.exp(-drive))
    got = cross_conductance(s, "qubit", "sensor2", volts, half_step=1e-6)
    assert got == pytest.approx(expect, rel=1e-6)


def test_cross_conductance_decreases_with_screen(quiet_session):
    s = quiet_session
    volts = {}
    for c in s.layout.channels:
        volts.update(channel_at(s, 2.0, c))
    vals = []
    for vs in np.linspace(0.7, 0.0, 15):
        volts["SCR"] = vs
        vals.append(cross_conductance(s, "qubit", "sensor3", volts))
    assert np.all(np.diff(vals) <= 1e-18)
    assert vals[-1] == pytest.approx(0.0, abs=1e-15)


def test_line_peak_and_fwhm(flat_wafer):
    with ProbeSession(flat_wafer, 0, 0, noise=NoiseModel.zero()) as s:
        dot = s.truth.dots["Q5"]
        # barriers where the tunnel rate is ~1 MHz: fully visible, unbroadened
        d = s.truth.dots["Q5"].tunnel_rate_scale * math.log(1e6 / dot.tunnel_rate_prefactor)
        vb1, vb2 = dot.barrier_reference[0] + d, dot.barrier_reference[1] + d
        center = dot.true_v1e - (dot.barrier_lever_arms[0] * d + dot.barrier_lever_arms[1] * d) / dot.lever_arm
        vp = np.linspace(center - 0.02, center + 0.02, 40001)
        sig = lockin_signal(s, "Q5", sensing_volts(s, "Q5", vp, vb1, vb2))
        k = int(np.argmax(sig))
        assert abs(vp[k] - center) <= 2e-6
        above = vp[sig >= 0.5 * sig[k]]
        fwhm = above[-1] - above[0]
        expect = 2 * np.arccosh(np.sqrt(2)) * 2 * KB * s.model.electron_temperature / dot.lever_arm
        assert fwhm == pytest.approx(expect, rel=1e-3)


def test_line_vanishes_below_lockin_frequency(flat_wafer):
    with ProbeSession(flat_wafer, 0, 0, noise=NoiseModel.zero()) as s:
        dot = s.truth.dots["Q2"]
        d = dot.tunnel_rate_scale * math.log(0.1 * 1e3 / dot.tunnel_rate_prefactor)
        vb1, vb2 = dot.barrier_reference[0] + d, dot.barrier_reference[1] + d
        assert tunnel_rate(dot, vb1, vb2) == pytest.approx(100.0)
        vp = np.linspace(dot.true_v1e - 0.2, dot.true_v1e + 0.3, 500)
        sig = lockin_signal(s, "Q2", sensing_volts(s, "Q2", vp, vb1, vb2))
        assert np.all(sig == 0.0)


def test_visibility_function():
    assert visibility(10.0, 1e3) == 0.0
    assert visibility(1e3, 1e3) == 0.0
    assert visibility(1e4, 1e3) == 1.0
    assert visibility(10 ** 3.5, 1e3) == pytest.approx(0.5)


def test_sensor_must_be_tuned(quiet_session):
    dot = quiet_session.truth.dots["Q1"]
    with pytest.raises(InstrumentError):
        lockin_signal(quiet_session, "Q1", {dot.plunger: 0.5, dot.barriers[0]: 0.8, dot.barriers[1]: 0.8})
    with pytest.raises(InstrumentError):
        lockin_signal(quiet_session, "S1", {"SP1": 0.5, "SBa1": 0.8, "SBb1": 0.8})


def _sensing_plan(s, dot_id, nx=7, ny=5):
    dot = s.truth.dots[dot_id]
    sensor = s.truth.dots[dot.paired_sensor]
    r0, r1 = dot.barrier_reference
    return ScanPlan("plunger-vs-barriers", (Axis(dot.plunger, dot.true_v1e - 0.1, dot.true_v1e + 0.1),),
                    (Axis(dot.barriers[0], r0 - 0.2, r0 + 0.2), Axis(dot.barriers[1], r1 - 0.1, r1 + 0.3)),
                    nx, ny, {sensor.plunger: sensor.sensor_optimum}, (dot_id,))


def test_raster_equals_pointwise(quiet_session):
    s = quiet_session
    plan = _sensing_plan(s, "Q6", 2, 2)
    grid = run_scan(s, plan)
    for r in range(2):
        for c in range(2):
            v = dict(plan.fixed)
            v[plan.sweep[0].gate] = plan.sweep_values()[c]
            v[plan.step[0].gate] = plan.step_values(0)[r]
            v[plan.step[1].gate] = plan.step_values(1)[r]
            assert grid.values[r, c] == lockin_signal(s, "Q6", v)
    t = s.truth
    qv = channel_at(s, 3.0)
    qv["SCR"] = 0.0
    bplan = ScanPlan("barrier-barrier", (Axis("B3", 0.6, 0.9),), (Axis("B4", 0.6, 0.9),), 2, 2,
                     {g: v for g, v in qv.items() if g not in ("B3", "B4")}, ("Q3",))
    bgrid = run_scan(s, bplan)
    for r, vb in enumerate((0.6, 0.9)):
        for c, va in enumerate((0.6, 0.9)):
            v = dict(bplan.fixed, B3=va, B4=vb)
            assert bgrid.values[r, c] == pytest.approx(closed_form_current(t, {g: v[g] for g in s.layout.channels["qubit"]}), rel=1e-12)


def test_noise_free_scan_is_pure(small_wafer):
    grids = []
    for _ in range(2):
        with ProbeSession(small_wafer, 2, 1, noise=NoiseModel.zero()) as s:
            grids.append(run_scan(s, _sensing_plan(s, "Q9", 21, 9)).values)
    assert np.array_equal(grids[0], grids[1])


def test_noisy_session_is_seeded(small_wafer):
    out = []
    for _ in range(2):
        with ProbeSession(small_wafer, 3, 1) as s:
            out.append(run_scan(s, _sensing_plan(s, "Q2", 21, 9)).values)
    assert np.array_equal(out[0], out[1])


def test_rows_below_cutoff_are_exactly_zero(flat_wafer):
    with ProbeSession(flat_wafer, 1, 0, noise=NoiseModel.zero()) as s:
        dot = s.truth.dots["Q4"]
        sensor = s.truth.dots[dot.paired_sensor]
        r0, r1 = dot.barrier_reference
        lo, hi = (dot.tunnel_rate_scale * math.log(f / dot.tunnel_rate_prefactor) for f in (10.0, 1e6))
        plan = ScanPlan("plunger-vs-barriers", (Axis(dot.plunger, dot.true_v1e - 0.1, dot.true_v1e + 0.1),),
                        (Axis(dot.barriers[0], r0 + lo, r0 + hi), Axis(dot.barriers[1], r1 + lo, r1 + hi)),
                        41, 31, {sensor.plunger: sensor.sensor_optimum}, ("Q4",))
        grid = run_scan(s, plan)
        rates = tunnel_rate(dot, grid.plan.step_values(0), grid.plan.step_values(1))
        dark = rates < 1e3
        assert dark.any() and (~dark).any()
        assert np.all(grid.values[dark] == 0.0)
        assert np.all(grid.values[~dark].max(axis=1) > 0)


def test_transition_locus_is_straight(flat_wafer):
    with ProbeSession(flat_wafer, 1, 0, noise=NoiseModel.zero()) as s:
        dot = s.truth.dots["Q8"]
        r0, r1 = dot.barrier_reference
        sensor = s.truth.dots[dot.paired_sensor]
        # tunnel rate from 10 kHz to 1 GHz: visible and barely broadened
        lo, hi = (dot.tunnel_rate_scale * math.log(f / dot.tunnel_rate_prefactor) for f in (1e4, 1e9))
        plan = ScanPlan("plunger-vs-barriers", (Axis(dot.plunger, dot.true_v1e - 0.15, dot.true_v1e + 0.1),),
                        (Axis(dot.barriers[0], r0 + lo, r0 + hi), Axis(dot.barriers[1], r1 + lo, r1 + hi)),
                        401, 31, {sensor.plunger: sensor.sensor_optimum}, ("Q8",))
        grid = run_scan(s, plan)
        vp, vb = grid.sweep_axis, grid.step_axis
        expect = -(dot.barrier_lever_arms[0] + dot.barrier_lever_arms[1]) / dot.lever_arm
        rows, peaks = [], []
        for r in range(len(vb)):
            if grid.values[r].max() <= 0:
                continue
            # keep only the 1e line: mask beyond half an addition voltage
            near = np.abs(vp - (dot.true_v1e + expect * (vb[r] - r0))) < 0.4 * dot.addition_voltage
            rows.append(r)
            peaks.append(vp[near][np.argmax(grid.values[r][near])])
        rows, peaks = np.array(rows), np.array(peaks)
        slope, icpt = np.polyfit(vb[rows], peaks, 1)
        resid = peaks - (slope * vb[rows] + icpt)
        assert len(rows) > 10
        assert np.max(np.abs(resid)) < vp[1] - vp[0]
        assert slope == pytest.approx(expect, rel=0.02)


def test_scan_text_roundtrip(tmp_path, small_wafer):
    with ProbeSession(small_wafer, 0, 1) as s:
        grid = run_scan(s, _sensing_plan(s, "Q1", 13, 7))
    text = scan_to_text(grid)
    back = scan_from_text(text)
    assert np.array_equal(back.values, grid.values)
    assert back.plan == grid.plan
    assert scan_to_text(back) == text
    grid.write(tmp_path / "a.csv")
    assert np.array_equal(read_scan(tmp_path / "a.csv").values, grid.values)
    with pytest.raises(ScanFormatError):
        scan_from_text(text.replace("v1", "v9", 1))
    with pytest.raises(ScanFormatError):
        scan_from_text("hello")


def test_plan_validation(quiet_session):
    with pytest.raises(InstrumentError):
        ScanPlan("plunger-vs-barriers", (Axis("P1", 0.5, 0.4),), (Axis("B1", 0.1, 0.2),), 5, 5)
    with pytest.raises(InstrumentError):
        ScanPlan("plunger-vs-barriers", (Axis("P1", 0.4, 0.5),), (Axis("B1", 0.1, 0.2),), 1, 5)
    plan = ScanPlan("barrier-barrier", (Axis("XX", 0.1, 0.2),), (Axis("B1", 0.1, 0.2),), 3, 3)
    with pytest.raises(UnknownGateError):
        run_scan(quiet_session, plan)


def test_one_session_per_device(small_wafer):
    with ProbeSession(small_wafer, 0, 0):
        with pytest.raises(InstrumentError):
            with ProbeSession(small_wafer, 0, 0):
                pass
    with ProbeSession(small_wafer, 0, 0):
        pass


def test_noise_model_validation():
    with pytest.raises(ValueError):
        NoiseModel(white_noise_rms=-1.0)
    z = NoiseModel.zero()
    assert (z.white_noise_rms, z.sensor_jump_rate) == (0.0, 0.0)

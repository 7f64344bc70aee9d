import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cryoprobe.wafer import (DisorderModel, FaultRates, InjectedFault, LayoutError, WaferSpec,
                             die_map, disorder_for_barrier_depth, generate_wafer, load_wafer_spec,
                             mirror_pairs, spec_from_dict, spec_to_dict, toy_layout,
                             true_transition_voltage, twelve_dot_layout)


def test_layout_counts():
    lay = twelve_dot_layout()
    assert len(lay.qubit_dot_ids) == 12
    assert len(lay.sensor_dot_ids) == 4
    # 10208 gates / 232 devices
    assert len(lay.gates) == 44
    arr = lay.array_gates
    assert len(arr) == 25
    assert sum(lay.gate(g).role == "plunger" for g in arr) == 12
    assert sum(lay.gate(g).role == "barrier" for g in arr) == 13
    assert len(lay.line_gates) == 27


def test_every_plunger_has_two_adjacent_barriers():
    lay = twelve_dot_layout()
    arr = lay.array_gates
    for d in lay.dots:
        if d.side != "qubit":
            continue
        i = arr.index(d.plunger)
        assert (arr[i - 1], arr[i + 1]) == d.barriers


def test_mirror_pairs_12qd():
    lay = twelve_dot_layout()
    pairs = mirror_pairs(lay)
    assert len(pairs) == 12
    flat = [g for p in pairs for g in p]
    assert len(set(flat)) == 24
    centre = set(lay.array_gates) - set(flat)
    assert centre == {"B7"}
    for a, b in pairs:
        assert lay.gate(a).role == lay.gate(b).role
        assert lay.gate(a).position == -lay.gate(b).position
    roles = [lay.gate(a).role for a, _ in pairs]
    assert roles.count("plunger") == 6 and roles.count("barrier") == 6


def test_mirror_pairs_toy_and_asymmetric():
    assert mirror_pairs(toy_layout("PBP")) == [("P1", "P2")]
    with pytest.raises(LayoutError):
        mirror_pairs(toy_layout("PBB"))


def test_generate_is_deterministic():
    spec = WaferSpec(die_count=3, devices_per_die=2, seed=7)
    a, b = generate_wafer(spec), generate_wafer(spec)
    assert a.dumps() == b.dumps()
    assert a.digest() == b.digest()
    c = generate_wafer(dataclasses.replace(spec, seed=8))
    assert c.digest() != a.digest()


def test_invalid_spec():
    with pytest.raises(ValueError):
        WaferSpec(die_count=0)
    with pytest.raises(ValueError):
        WaferSpec(devices_per_die=0)
    with pytest.raises(ValueError):
        WaferSpec(sige_barrier_depth=40)
    with pytest.raises(ValueError):
        DisorderModel(random_sigma_vt=-0.01)
    with pytest.raises(ValueError):
        DisorderModel(fault_rates=FaultRates(gate=1.5))


def test_degenerate_disorder_shares_vt_per_role():
    dis = disorder_for_barrier_depth(50, random_sigma_vt=0.0, systematic={},
                                     fault_rates=FaultRates(), outer_gate_shift=0.0)
    w = generate_wafer(WaferSpec(die_count=3, devices_per_die=2, disorder=dis))
    by_role = {}
    for dev in w.devices.values():
        for g in dev.gates.values():
            by_role.setdefault(g.role, set()).add(round(g.true_vt, 12))
    assert all(len(v) == 1 for v in by_role.values())


def test_random_sigma_recovered():
    # 232 devices, no systematic term: sample std per gate near 58 mV
    dis = disorder_for_barrier_depth(50, systematic={}, fault_rates=FaultRates())
    w = generate_wafer(WaferSpec(disorder=dis, seed=3))
    lay = w.layout
    stds = []
    for g in lay.array_gates:
        v = [dev.gates[g].true_vt for dev in w.devices.values()]
        stds.append(np.std(v, ddof=1))
    assert abs(np.sqrt(np.mean(np.square(stds))) - 0.058) < 0.1 * 0.058


def test_die_map_counts_and_labels():
    dies = die_map(58)
    assert len(dies) == 58
    assert len({d.label for d in dies}) == 58
    assert all(np.hypot(d.x, d.y) <= 1.0 for d in dies)


def test_transition_voltage_ladder(small_wafer):
    dot = small_wafer.device(0, 0).dots["Q3"]
    assert true_transition_voltage(dot, 1) == dot.true_v1e
    v = [true_transition_voltage(dot, n, 0.9) for n in range(1, 6)]
    assert np.all(np.diff(v) > 0)
    assert v[1] - v[0] == pytest.approx(dot.addition_voltage, rel=1e-12)
    with pytest.raises(ValueError):
        true_transition_voltage(dot, 0)


def test_calibrated_median_addition_voltage():
    for depth, target in ((50, 0.079), (30, 0.059)):
        w = generate_wafer(WaferSpec(sige_barrier_depth=depth, disorder=disorder_for_barrier_depth(depth)))
        adds = [d.addition_voltage for dev in w.devices.values() for d in dev.dots.values()
                if d.side == "qubit"]
        assert np.median(adds) == pytest.approx(target, abs=0.002)


def test_mirror_difference_cancels_device_offset(small_wafer):
    lay = small_wafer.layout
    dev = small_wafer.device(1, 1)
    shift = 0.137
    for a, b in lay.mirror_pairs:
        d0 = dev.gates[a].true_vt - dev.gates[b].true_vt
        d1 = (dev.gates[a].true_vt + shift) - (dev.gates[b].true_vt + shift)
        assert d1 == pytest.approx(d0, abs=1e-15)


def test_injected_faults_applied():
    spec = WaferSpec(die_count=2, devices_per_die=1,
                     disorder=disorder_for_barrier_depth(50, fault_rates=FaultRates()),
                     injected_faults=(InjectedFault(1, 0, "marginal", "SBa2"),
                                      InjectedFault(0, 0, "dead", "O_S1")))
    w = generate_wafer(spec)
    assert w.device(1, 0).gates["SBa2"].fault == "marginal"
    assert w.device(1, 0).gates["SBa2"].true_vt < 0.2
    assert w.device(1, 0).dots["S2"].faulty
    assert not w.device(0, 0).ohmics["O_S1"]
    bad = dataclasses.replace(spec, injected_faults=(InjectedFault(0, 0, "melted", "P1"),))
    with pytest.raises(ValueError):
        generate_wafer(bad)


def test_spec_roundtrip(tmp_path):
    spec = WaferSpec(die_count=5, seed=99, sige_barrier_depth=30,
                     disorder=disorder_for_barrier_depth(30),
                     injected_faults=(InjectedFault(1, 2, "open", "P3"),))
    again = spec_from_dict(spec_to_dict(spec))
    assert generate_wafer(again).digest() == generate_wafer(spec).digest()
    p = tmp_path / "w.yaml"
    p.write_text("wafer:\n  die_count: 2\n  seed: 4\n")
    s = load_wafer_spec(p)
    assert (s.die_count, s.seed) == (2, 4)
    with pytest.raises(ValueError):
        spec_from_dict({"die_cnt": 3})


@settings(max_examples=25, deadline=None)
@given(offset=st.floats(-0.5, 0.5), n=st.integers(1, 6))
def test_barrier_shift_moves_all_transitions_equally(small_wafer, offset, n):
    dot = small_wafer.device(2, 0).dots["Q7"]
    ref = dot.barrier_reference[0]
    d_n = true_transition_voltage(dot, n, ref + offset) - true_transition_voltage(dot, n, ref)
    d_1 = true_transition_voltage(dot, 1, ref + offset) - true_transition_voltage(dot, 1, ref)
    assert d_n == pytest.approx(d_1, abs=1e-12)

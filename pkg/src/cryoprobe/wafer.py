"""Synthetic 300 mm wafers of 12-quantum-dot devices with ground-truth oracles.

A :class:`Wafer` is a deterministic function of its :class:`WaferSpec`. Every
quantity that the measurement pipeline later estimates (gate thresholds, dot
transition voltages, tunnel rates, injected faults) is stored here so tests can
compare estimates against the truth.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

WAFER_FORMAT = "cryoprobe.wafer"
WAFER_FORMAT_VERSION = 1

ROLES = ("plunger", "barrier", "reservoir", "screening")
BARRIER_DEPTHS_NM = (30, 50)


class LayoutError(ValueError):
    """Raised for device layouts that violate structural requirements."""


# --------------------------------------------------------------------------
# Layout
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GateRole:
    """One electrostatic gate of a device layout.

    ``position`` is the coordinate along the linear qubit array (0 at the
    symmetry axis) and is ``None`` for gates that do not sit on the array.
    """

    gate_id: str
    role: str
    channel: str
    side: str = "qubit"
    position: float | None = None


@dataclass(frozen=True)
class DotSite:
    dot_id: str
    plunger: str
    barriers: tuple[str, str]
    channel: str
    side: str
    paired_sensor: str | None = None


@dataclass(frozen=True)
class DeviceLayout:
    qubit_dots: int
    sensor_dots: int
    gates: tuple[GateRole, ...]
    dots: tuple[DotSite, ...]
    channels: Mapping[str, tuple[str, ...]]
    ohmics: Mapping[str, tuple[str, ...]]
    screening_gate: str | None = None
    name: str = "custom"

    def __post_init__(self):
        ids = [g.gate_id for g in self.gates]
        if len(set(ids)) != len(ids):
            raise LayoutError("duplicate gate ids in layout")
        known = set(ids)
        for g in self.gates:
            if g.role not in ROLES:
                raise LayoutError(f"unknown gate role {g.role!r}")
        for dot in self.dots:
            for gid in (dot.plunger, *dot.barriers):
                if gid not in known:
                    raise LayoutError(f"dot {dot.dot_id} references unknown gate {gid}")
        for chan, gids in self.channels.items():
            for gid in gids:
                if gid not in known:
                    raise LayoutError(f"channel {chan} references unknown gate {gid}")

    @property
    def gate_ids(self) -> list[str]:
        return [g.gate_id for g in self.gates]

    def gate(self, gate_id: str) -> GateRole:
        for g in self.gates:
            if g.gate_id == gate_id:
                return g
        raise KeyError(gate_id)

    def dot(self, dot_id: str) -> DotSite:
        for d in self.dots:
            if d.dot_id == dot_id:
                return d
        raise KeyError(dot_id)

    def channel_of(self, gate_id: str) -> str:
        return self.gate(gate_id).channel

    @property
    def array_gates(self) -> list[str]:
        """Plunger and barrier gates of the linear qubit array, in order."""
        gates = [g for g in self.gates
                 if g.side == "qubit" and g.role in ("plunger", "barrier") and g.position is not None]
        return [g.gate_id for g in sorted(gates, key=lambda g: g.position)]

    @property
    def line_gates(self) -> list[str]:
        """All gates over the qubit channel (array plus reservoirs), in order."""
        gates = [g for g in self.gates if g.side == "qubit" and g.position is not None]
        return [g.gate_id for g in sorted(gates, key=lambda g: g.position)]

    @property
    def qubit_dot_ids(self) -> list[str]:
        return [d.dot_id for d in self.dots if d.side == "qubit"]

    @property
    def sensor_dot_ids(self) -> list[str]:
        return [d.dot_id for d in self.dots if d.side == "sensor"]

    @property
    def mirror_pairs(self) -> list[tuple[str, str]]:
        return mirror_pairs(self)


def twelve_dot_layout() -> DeviceLayout:
    """The 44-gate 12QD device: a 27-gate qubit line, four sensors, one screen.

    Qubit line: R_L, B1, P1, B2, ..., P12, B13, R_R over one channel. Each of
    the four sensor channels carries a reservoir gate SR and a sensor dot
    (SBa, SP, SBb). The sensor channels have individual source contacts and
    share a common drain, giving 7 ohmics per device.
    """
    gates: list[GateRole] = []
    # array coordinate: barrier k at 2k - 14, plunger k at 2k - 13, so B7 sits at 0
    gates.append(GateRole("R_L", "reservoir", "qubit", "qubit", -14.0))
    for k in range(1, 14):
        gates.append(GateRole(f"B{k}", "barrier", "qubit", "qubit", 2.0 * k - 14.0))
        if k <= 12:
            gates.append(GateRole(f"P{k}", "plunger", "qubit", "qubit", 2.0 * k - 13.0))
    gates.append(GateRole("R_R", "reservoir", "qubit", "qubit", 14.0))
    for s in range(1, 5):
        chan = f"sensor{s}"
        gates.append(GateRole(f"SR{s}", "reservoir", chan, "sensor"))
        gates.append(GateRole(f"SBa{s}", "barrier", chan, "sensor"))
        gates.append(GateRole(f"SP{s}", "plunger", chan, "sensor"))
        gates.append(GateRole(f"SBb{s}", "barrier", chan, "sensor"))
    gates.append(GateRole("SCR", "screening", "none", "center"))

    dots = [DotSite(f"Q{k}", f"P{k}", (f"B{k}", f"B{k + 1}"), "qubit", "qubit",
                    paired_sensor=f"S{(k - 1) // 3 + 1}") for k in range(1, 13)]
    dots += [DotSite(f"S{s}", f"SP{s}", (f"SBa{s}", f"SBb{s}"), f"sensor{s}", "sensor")
             for s in range(1, 5)]

    channels = {"qubit": tuple(g.gate_id for g in gates if g.channel == "qubit")}
    for s in range(1, 5):
        channels[f"sensor{s}"] = tuple(g.gate_id for g in gates if g.channel == f"sensor{s}")
    ohmics = {"O_QS": ("qubit",), "O_QD": ("qubit",)}
    for s in range(1, 5):
        ohmics[f"O_S{s}"] = (f"sensor{s}",)
    ohmics["O_SD"] = tuple(f"sensor{s}" for s in range(1, 5))
    return DeviceLayout(12, 4, tuple(gates), tuple(dots), channels, ohmics, "SCR", name="12qd")


def toy_layout(roles: Sequence[str]) -> DeviceLayout:
    """Linear single-channel layout from a role string such as ``"PBP"``."""
    letters = {"P": "plunger", "B": "barrier", "R": "reservoir"}
    n = len(roles)
    gates = []
    counts: dict[str, int] = {}
    for i, r in enumerate(roles):
        counts[r] = counts.get(r, 0) + 1
        gates.append(GateRole(f"{r}{counts[r]}", letters[r], "qubit", "qubit",
                              float(i) - (n - 1) / 2.0))
    return DeviceLayout(0, 0, tuple(gates), (), {"qubit": tuple(g.gate_id for g in gates)}, {},
                        name="toy-" + "".join(roles))


def mirror_pairs(layout: DeviceLayout) -> list[tuple[str, str]]:
    """Mirror-symmetric plunger/barrier gate pairs of the qubit array.

    Gates are matched by reflecting their array coordinate about 0. A gate on
    the axis stays unpaired. Pairs are ordered from the array edge inward,
    left member first.

    Raises:
        LayoutError: if a gate has no partner of the same role at the
            mirrored coordinate.
    """
    gates = [g for g in layout.gates
             if g.side == "qubit" and g.role in ("plunger", "barrier") and g.position is not None]
    if not gates:
        raise LayoutError("layout has no array gates to pair")
    by_pos = {round(g.position, 9): g for g in gates}
    pairs = []
    for g in sorted(gates, key=lambda g: g.position):
        if abs(g.position) < 1e-9:
            continue
        partner = by_pos.get(round(-g.position, 9))
        if partner is None or partner.role != g.role:
            raise LayoutError(f"gate {g.gate_id} has no mirror partner; layout is not symmetric")
        if g.position < 0:
            pairs.append((g.gate_id, partner.gate_id))
    return pairs


# --------------------------------------------------------------------------
# Disorder and spec
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FaultRates:
    """Per-component fault probabilities.

    ``ohmic`` kills a contact. ``gate`` leaves a gate open (no pinch-off).
    ``dot`` makes one of the dot's three defining gates marginal: an
    anomalously low pinch-off voltage with a soft pinch-off, so no usable
    tune-up corner forms. ``dot_sides`` limits which dots can fail.
    """

    ohmic: float = 0.0
    gate: float = 0.0
    dot: float = 0.0
    dot_sides: tuple[str, ...] = ("sensor",)


@dataclass(frozen=True)
class DisorderModel:
    """Systematic + random disorder, plus the dot electrostatics constants.

    ``systematic`` maps ``(i, j)`` to the coefficient of ``x**i * y**j`` in
    volts, with ``(x, y)`` the device position normalized to the wafer radius.
    """

    systematic: Mapping[tuple[int, int], float] = field(default_factory=dict)
    random_sigma_vt: float = 0.058
    dot_random_sigma_v1e: float = 0.019
    addition_voltage_mean: float = 0.079
    addition_voltage_sigma: float = 0.0083
    fault_rates: FaultRates = field(default_factory=FaultRates)
    role_baselines: Mapping[str, float] = field(default_factory=lambda: {
        "plunger": 0.70, "barrier": 0.85, "reservoir": 0.60, "screening": 0.35})
    outer_gate_shift: float = -0.05
    pinchoff_width: float = 0.030
    plunger_lever_arm: float = 0.08
    plunger_lever_arm_sigma: float = 0.004
    barrier_lever_arm: float = 0.012
    barrier_lever_arm_sigma: float = 0.002
    neighbor_lever_arm: float = 0.012
    v1e_offset: float = -0.040
    cutoff_offset_mean: float = -0.17
    cutoff_offset_sigma: float = 0.05
    tunnel_rate_scale: float = 0.020
    sensor_optimum_offset: float = 0.06
    background_amplitude: float = 0.3
    marginal_vt_range: tuple[float, float] = (0.05, 0.18)
    marginal_width: float = 0.12

    def __post_init__(self):
        sigmas = (self.random_sigma_vt, self.dot_random_sigma_v1e, self.addition_voltage_sigma,
                  self.plunger_lever_arm_sigma, self.barrier_lever_arm_sigma,
                  self.cutoff_offset_sigma)
        if any(s < 0 for s in sigmas):
            raise ValueError("disorder sigmas must be >= 0")
        fr = self.fault_rates
        for name in ("ohmic", "gate", "dot"):
            p = getattr(fr, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"fault rate {name}={p} outside [0, 1]")
        if self.pinchoff_width <= 0:
            raise ValueError("pinchoff_width must be > 0")
        if not 0 < self.plunger_lever_arm <= 1:
            raise ValueError("plunger lever arm must lie in (0, 1]")
        if self.addition_voltage_mean <= 0:
            raise ValueError("addition voltage mean must be > 0")

    def systematic_at(self, x: float, y: float) -> float:
        # fixed term order so the value does not depend on dict insertion order
        return float(sum(c * x ** i * y ** j for (i, j), c in sorted(self.systematic.items())))


def disorder_for_barrier_depth(depth_nm: int, **overrides) -> DisorderModel:
    """Disorder presets calibrated to the 30 nm and 50 nm SiGe-barrier wafers."""
    if depth_nm == 50:
        base = dict(addition_voltage_mean=0.079, addition_voltage_sigma=0.0083,
                    dot_random_sigma_v1e=0.019, cutoff_offset_sigma=0.06)
    elif depth_nm == 30:
        base = dict(addition_voltage_mean=0.059, addition_voltage_sigma=0.0059,
                    dot_random_sigma_v1e=0.015, cutoff_offset_sigma=0.05)
    else:
        raise ValueError(f"barrier depth must be one of {BARRIER_DEPTHS_NM}, got {depth_nm}")
    base["systematic"] = {(1, 0): 0.020, (0, 1): -0.015, (2, 0): 0.060, (0, 2): 0.060}
    base["fault_rates"] = FaultRates(dot=9 / 928)
    base.update(overrides)
    return DisorderModel(**base)


@dataclass(frozen=True)
class WaferSpec:
    die_count: int = 58
    devices_per_die: int = 4
    layout: DeviceLayout = field(default_factory=twelve_dot_layout)
    disorder: DisorderModel = field(default_factory=lambda: disorder_for_barrier_depth(50))
    sige_barrier_depth: int = 50
    seed: int = 0
    wafer_id: str = "W0"
    injected_faults: tuple["InjectedFault", ...] = ()

    def __post_init__(self):
        if self.die_count < 1:
            raise ValueError("die_count must be >= 1")
        if self.devices_per_die < 1:
            raise ValueError("devices_per_die must be >= 1")
        if self.sige_barrier_depth not in BARRIER_DEPTHS_NM:
            raise ValueError(f"sige_barrier_depth must be one of {BARRIER_DEPTHS_NM}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class InjectedFault:
    """A scripted fault overriding the sampled ones.

    ``kind`` is ``"marginal"`` or ``"open"`` for gates, ``"dead"`` for ohmics.
    """

    die: int
    device: int
    kind: str
    target: str


# --------------------------------------------------------------------------
# Ground truth
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GateGroundTruth:
    gate_id: str
    role: str
    true_vt: float
    pinchoff_width: float
    lever_arms: Mapping[str, float] = field(default_factory=dict)
    fault: str | None = None

    def __post_init__(self):
        if self.pinchoff_width <= 0:
            raise ValueError("pinchoff_width must be > 0")
        for a in self.lever_arms.values():
            if not 0 < a <= 1:
                raise ValueError("lever arms must lie in (0, 1]")


@dataclass(frozen=True)
class DotGroundTruth:
    """Constant-interaction dot parameters.

    Transition ``N`` sits at plunger voltage
    ``true_v1e + (N - 1) * addition_voltage`` when both barriers are at
    ``barrier_reference``; barrier detuning moves it by the lever-arm ratio.
    The tunnel rate is ``tunnel_rate_prefactor * exp(d / tunnel_rate_scale)``
    with ``d`` the mean barrier offset from the reference.
    """

    dot_id: str
    plunger: str
    barriers: tuple[str, str]
    side: str
    charging_energy: float
    true_v1e: float
    addition_voltage: float
    tunnel_rate_prefactor: float
    tunnel_rate_scale: float
    paired_sensor: str | None
    lever_arm: float
    barrier_lever_arms: tuple[float, float]
    barrier_reference: tuple[float, float]
    sensor_optimum: float
    background_phase: float
    faulty: bool = False

    def __post_init__(self):
        if self.charging_energy <= 0:
            raise ValueError("charging_energy must be > 0")
        if self.tunnel_rate_prefactor <= 0:
            raise ValueError("tunnel_rate_prefactor must be > 0")


@dataclass(frozen=True)
class Die:
    index: int
    col: int
    row: int
    x: float
    y: float

    @property
    def label(self) -> str:
        return f"die-{self.col:02d}-{self.row:02d}"


@dataclass(frozen=True)
class DeviceGroundTruth:
    die: int
    device: int
    x: float
    y: float
    gates: Mapping[str, GateGroundTruth]
    dots: Mapping[str, DotGroundTruth]
    ohmics: Mapping[str, bool]

    @property
    def faults(self) -> list[tuple[str, str]]:
        out = [(g.gate_id, g.fault) for g in self.gates.values() if g.fault]
        out += [(o, "dead") for o, ok in self.ohmics.items() if not ok]
        return out


@dataclass(frozen=True)
class Wafer:
    spec: WaferSpec
    dies: tuple[Die, ...]
    devices: Mapping[tuple[int, int], DeviceGroundTruth]

    @property
    def layout(self) -> DeviceLayout:
        return self.spec.layout

    @property
    def wafer_id(self) -> str:
        return self.spec.wafer_id

    def device(self, die: int, device: int) -> DeviceGroundTruth:
        return self.devices[(die, device)]

    def to_dict(self) -> dict:
        return {
            "format": WAFER_FORMAT,
            "version": WAFER_FORMAT_VERSION,
            "spec": spec_to_dict(self.spec),
            "dies": [dataclasses.asdict(d) for d in self.dies],
            "devices": [_device_to_dict(self.devices[k]) for k in sorted(self.devices)],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def _device_to_dict(dev: DeviceGroundTruth) -> dict:
    return {
        "die": dev.die, "device": dev.device, "x": dev.x, "y": dev.y,
        "gates": {k: dataclasses.asdict(g) for k, g in dev.gates.items()},
        "dots": {k: dataclasses.asdict(d) for k, d in dev.dots.items()},
        "ohmics": dict(dev.ohmics),
    }


def load_wafer_truth(path: str | Path) -> dict:
    """Read a serialized ground-truth file, checking its format version."""
    data = json.loads(Path(path).read_text())
    if data.get("format") != WAFER_FORMAT or data.get("version") != WAFER_FORMAT_VERSION:
        raise ValueError(f"unsupported wafer file: format={data.get('format')!r} "
                         f"version={data.get('version')!r}, expected {WAFER_FORMAT} "
                         f"v{WAFER_FORMAT_VERSION}")
    return data


def die_map(die_count: int) -> list[Die]:
    """The ``die_count`` die closest to the wafer center on a square grid.

    Die centers sit on a half-integer lattice; ties in radius are broken by
    angle so the map is deterministic. Positions are normalized so the
    excluded outer ring would start at radius 1.
    """
    n = int(math.ceil(math.sqrt(die_count))) + 2
    pts = [(i + 0.5, j + 0.5) for i in range(-n, n) for j in range(-n, n)]
    pts.sort(key=lambda p: (round(p[0] ** 2 + p[1] ** 2, 9), math.atan2(p[1], p[0])))
    chosen = pts[:die_count]
    radius = max(math.hypot(*p) for p in chosen) + 1.0
    imin = min(int(math.floor(p[0])) for p in chosen)
    jmin = min(int(math.floor(p[1])) for p in chosen)
    dies = []
    for idx, (px, py) in enumerate(sorted(chosen, key=lambda p: (-p[1], p[0]))):
        dies.append(Die(idx, int(math.floor(px)) - imin, int(math.floor(py)) - jmin,
                        px / radius, py / radius))
    return dies


def _device_offsets(devices_per_die: int) -> list[tuple[float, float]]:
    side = int(math.ceil(math.sqrt(devices_per_die)))
    offs = []
    for k in range(devices_per_die):
        i, j = k % side, k // side
        offs.append(((i + 0.5) / side - 0.5, 0.5 - (j + 0.5) / side))
    return offs


def generate_wafer(spec: WaferSpec) -> Wafer:
    """Sample a wafer. Each device draws from its own stream keyed on
    ``(seed, die, device)``, so the result is reproducible bit-for-bit."""
    dies = die_map(spec.die_count)
    pitch = _die_pitch(dies)
    offsets = _device_offsets(spec.devices_per_die)
    injected: dict[tuple[int, int], list[InjectedFault]] = {}
    for f in spec.injected_faults:
        injected.setdefault((f.die, f.device), []).append(f)
    devices = {}
    for die in dies:
        for k, (ox, oy) in enumerate(offsets):
            seq = np.random.SeedSequence([spec.seed, die.index, k])
            rng = np.random.default_rng(seq)
            devices[(die.index, k)] = _sample_device(
                spec, rng, die.index, k, die.x + ox * pitch, die.y + oy * pitch,
                injected.get((die.index, k), []))
    return Wafer(spec, tuple(dies), devices)


def _die_pitch(dies: Sequence[Die]) -> float:
    if len(dies) < 2:
        return 0.1
    d = min(math.hypot(a.x - b.x, a.y - b.y) for a in dies[:8] for b in dies if a is not b)
    return d


def _sample_device(spec: WaferSpec, rng: np.random.Generator, die: int, device: int,
                   x: float, y: float, injected: Sequence[InjectedFault]) -> DeviceGroundTruth:
    lay, dis = spec.layout, spec.disorder
    fr = dis.fault_rates
    sys_vt = dis.systematic_at(x, y)
    outer = _outer_array_gates(lay)

    # fixed draw order: gate vts, gate faults, ohmic faults, dot parameters, dot faults
    vt_noise = rng.normal(0.0, 1.0, len(lay.gates)) * dis.random_sigma_vt
    gate_open = rng.random(len(lay.gates)) < fr.gate
    ohmic_dead = rng.random(len(lay.ohmics)) < fr.ohmic

    vts = {}
    faults: dict[str, str | None] = {}
    for g, n, op in zip(lay.gates, vt_noise, gate_open):
        base = dis.role_baselines[g.role]
        if g.gate_id in outer:
            base += dis.outer_gate_shift
        vts[g.gate_id] = base + sys_vt + float(n)
        faults[g.gate_id] = "open" if (op and g.role != "screening") else None

    dot_params = {}
    for d in lay.dots:
        u = rng.normal(0.0, 1.0, 6)
        phase = float(rng.uniform(0, 2 * math.pi))
        fail_draw = float(rng.random())
        which = int(rng.integers(3))
        mvt = float(rng.uniform(*dis.marginal_vt_range))
        dot_params[d.dot_id] = (u, phase, fail_draw, which, mvt)
        if d.side in fr.dot_sides and fail_draw < fr.dot:
            gid = (d.plunger, *d.barriers)[which]
            faults[gid] = "marginal"
            vts[gid] = mvt

    ohmics = {o: not dead for o, dead in zip(lay.ohmics, ohmic_dead)}
    for f in injected:
        if f.kind == "dead":
            if f.target not in ohmics:
                raise KeyError(f"unknown ohmic {f.target}")
            ohmics[f.target] = False
        elif f.kind in ("marginal", "open"):
            if f.target not in vts:
                raise KeyError(f"unknown gate {f.target}")
            faults[f.target] = f.kind
            if f.kind == "marginal":
                lo, hi = dis.marginal_vt_range
                vts[f.target] = 0.5 * (lo + hi)
        else:
            raise ValueError(f"unknown fault kind {f.kind!r}")

    lever: dict[str, dict[str, float]] = {g.gate_id: {} for g in lay.gates}
    dots = {}
    for d in lay.dots:
        u, phase, _, _, _ = dot_params[d.dot_id]
        a_p = float(np.clip(dis.plunger_lever_arm + dis.plunger_lever_arm_sigma * u[0], 0.01, 1.0))
        a_b = tuple(float(np.clip(dis.barrier_lever_arm + dis.barrier_lever_arm_sigma * v,
                                  1e-3, 1.0)) for v in u[1:3])
        add_v = max(dis.addition_voltage_mean + dis.addition_voltage_sigma * float(u[3]),
                    0.2 * dis.addition_voltage_mean)
        v1e = vts[d.plunger] + dis.v1e_offset + dis.dot_random_sigma_v1e * float(u[4])
        cutoff = dis.cutoff_offset_mean + dis.cutoff_offset_sigma * float(u[5])
        gamma0 = 1e3 * math.exp(-cutoff / dis.tunnel_rate_scale)
        lever[d.plunger][d.dot_id] = a_p
        lever[d.barriers[0]][d.dot_id] = a_b[0]
        lever[d.barriers[1]][d.dot_id] = a_b[1]
        faulty = any(faults[g] for g in (d.plunger, *d.barriers))
        dots[d.dot_id] = DotGroundTruth(
            dot_id=d.dot_id, plunger=d.plunger, barriers=d.barriers, side=d.side,
            charging_energy=a_p * add_v, true_v1e=v1e, addition_voltage=add_v,
            tunnel_rate_prefactor=gamma0, tunnel_rate_scale=dis.tunnel_rate_scale,
            paired_sensor=d.paired_sensor, lever_arm=a_p, barrier_lever_arms=a_b,
            barrier_reference=(vts[d.barriers[0]], vts[d.barriers[1]]),
            sensor_optimum=vts[d.plunger] + dis.sensor_optimum_offset,
            background_phase=phase, faulty=faulty)

    gates = {}
    for g in lay.gates:
        w = dis.marginal_width if faults[g.gate_id] == "marginal" else dis.pinchoff_width
        gates[g.gate_id] = GateGroundTruth(g.gate_id, g.role, vts[g.gate_id], w,
                                           lever[g.gate_id], faults[g.gate_id])
    return DeviceGroundTruth(die, device, x, y, gates, dots, ohmics)


def _outer_array_gates(layout: DeviceLayout) -> set[str]:
    arr = layout.array_gates
    return {arr[0], arr[-1]} if len(arr) >= 2 else set()


def true_transition_voltage(dot: DotGroundTruth, electron_number: int,
                            barrier_setpoint: float | tuple[float, float] | None = None) -> float:
    """Plunger voltage of the ``electron_number``-th charge transition.

    Args:
        dot: dot ground truth.
        electron_number: N >= 1.
        barrier_setpoint: left-barrier voltage (the right barrier then keeps
            the same offset from its reference), an explicit
            ``(left, right)`` pair, or ``None`` for the reference point.
    """
    if electron_number < 1:
        raise ValueError("electron_number must be >= 1")
    if barrier_setpoint is None:
        db = (0.0, 0.0)
    elif isinstance(barrier_setpoint, (tuple, list)):
        db = (barrier_setpoint[0] - dot.barrier_reference[0],
              barrier_setpoint[1] - dot.barrier_reference[1])
    else:
        off = barrier_setpoint - dot.barrier_reference[0]
        db = (off, off)
    shift = (dot.barrier_lever_arms[0] * db[0] + dot.barrier_lever_arms[1] * db[1]) / dot.lever_arm
    return dot.true_v1e + (electron_number - 1) * dot.addition_voltage - shift


# --------------------------------------------------------------------------
# Config files
# --------------------------------------------------------------------------


def spec_to_dict(spec: WaferSpec) -> dict:
    dis = spec.disorder
    d = dataclasses.asdict(dis)
    d["systematic"] = [[i, j, c] for (i, j), c in sorted(dis.systematic.items())]
    d["fault_rates"] = dataclasses.asdict(dis.fault_rates)
    d["fault_rates"]["dot_sides"] = list(dis.fault_rates.dot_sides)
    d["marginal_vt_range"] = list(dis.marginal_vt_range)
    d["role_baselines"] = dict(dis.role_baselines)
    return {
        "wafer_id": spec.wafer_id,
        "seed": spec.seed,
        "die_count": spec.die_count,
        "devices_per_die": spec.devices_per_die,
        "layout": spec.layout.name,
        "sige_barrier_depth": spec.sige_barrier_depth,
        "disorder": d,
        "injected_faults": [dataclasses.asdict(f) for f in spec.injected_faults],
    }


def spec_from_dict(data: Mapping) -> WaferSpec:
    """Build a spec from nested config data. Missing disorder keys fall back
    to the preset for the configured barrier depth."""
    data = dict(data)
    depth = int(data.get("sige_barrier_depth", 50))
    layout_name = data.get("layout", "12qd")
    if layout_name != "12qd":
        raise ValueError(f"unknown layout {layout_name!r}; only '12qd' is defined")
    dis_in = dict(data.get("disorder") or {})
    if "systematic" in dis_in:
        dis_in["systematic"] = {(int(i), int(j)): float(c) for i, j, c in dis_in["systematic"]}
    if "fault_rates" in dis_in:
        fr = dict(dis_in["fault_rates"])
        if "dot_sides" in fr:
            fr["dot_sides"] = tuple(fr["dot_sides"])
        dis_in["fault_rates"] = FaultRates(**fr)
    if "marginal_vt_range" in dis_in:
        dis_in["marginal_vt_range"] = tuple(dis_in["marginal_vt_range"])
    known = {f.name for f in dataclasses.fields(DisorderModel)}
    unknown = set(dis_in) - known
    if unknown:
        raise ValueError(f"unknown disorder keys: {sorted(unknown)}")
    disorder = disorder_for_barrier_depth(depth, **dis_in)
    faults = tuple(InjectedFault(**f) for f in data.get("injected_faults", []))
    top_known = {"wafer_id", "seed", "die_count", "devices_per_die", "layout",
                 "sige_barrier_depth", "disorder", "injected_faults"}
    unknown = set(data) - top_known
    if unknown:
        raise ValueError(f"unknown wafer spec keys: {sorted(unknown)}")
    return WaferSpec(
        die_count=int(data.get("die_count", 58)),
        devices_per_die=int(data.get("devices_per_die", 4)),
        layout=twelve_dot_layout(),
        disorder=disorder,
        sige_barrier_depth=depth,
        seed=int(data.get("seed", 0)),
        wafer_id=str(data.get("wafer_id", "W0")),
        injected_faults=faults,
    )


def load_wafer_spec(path: str | Path) -> WaferSpec:
    """Read a YAML wafer config. A top-level ``wafer:`` section is accepted."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    if "wafer" in data and isinstance(data["wafer"], dict):
        data = data["wafer"]
    return spec_from_dict(data)

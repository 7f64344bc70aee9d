"""Virtual instrument layer: electrical response of a wafer device.

Transport current follows a product of logistic pinch-off factors over the
gates of a channel. The charge-sensing lock-in output is a sum of thermally
(and tunnel-) broadened sech^2 lines, gated by a tunnel-rate visibility
cutoff and scaled by the paired sensor's sensitivity, which drifts in
discrete jumps between scan lines.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import constants
from scipy.special import expit

from .wafer import DeviceGroundTruth, DotGroundTruth, Wafer

SCAN_FORMAT = "cryoprobe-scan"
SCAN_FORMAT_VERSION = 1
SCAN_KINDS = ("barrier-barrier", "plunger-vs-barriers", "plunger-plunger")

KB_OVER_E = constants.k / constants.e  # V/K
HBAR_OVER_E = constants.hbar / constants.e  # eV*s
REFERENCE_BIAS = 1e-3


class InstrumentError(ValueError):
    pass


class UnknownGateError(InstrumentError, KeyError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    """Measurement noise.

    Attributes:
        white_noise_rms: additive lock-in noise, in lock-in units.
        current_noise_rms: additive current noise, in amps.
        sensor_jump_rate: probability of a sensor offset jump per scan line.
        sensor_jump_sigma: std of a jump, in volts of sensor-plunger offset.
    """

    white_noise_rms: float = 0.03
    current_noise_rms: float = 0.5e-12
    sensor_jump_rate: float = 0.0029
    sensor_jump_sigma: float = 0.08

    def __post_init__(self):
        if min(self.white_noise_rms, self.current_noise_rms, self.sensor_jump_rate,
               self.sensor_jump_sigma) < 0:
            raise ValueError("noise parameters must be >= 0")

    @classmethod
    def zero(cls) -> "NoiseModel":
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class InstrumentModel:
    """Device-independent response constants of the simulated setup."""

    on_current: float = 5e-9
    electron_temperature: float = 1.6
    leak_conductance: float = 2e-9
    screening_width: float = 0.02
    lockin_amplitude: float = 1.0
    sensor_width: float = 0.04
    background_period: float = 1.0
    background_jump_coupling: float = 2.0
    mutual_charging_voltage: float = 0.02
    max_electrons: int = 8


_open_sessions: set[tuple[str, int, int]] = set()
_sessions_lock = threading.Lock()


class ProbeSession:
    """Contact to one device of a wafer.

    The session owns the noise stream (seeded from wafer seed, die, device)
    and the sensor offset state, which only changes during measurements.
    Use as a context manager to enforce one open session per device.
    """

    def __init__(self, wafer: Wafer, die: int, device: int, noise: NoiseModel | None = None,
                 model: InstrumentModel | None = None):
        self.wafer = wafer
        self.die = die
        self.device = device
        self.truth: DeviceGroundTruth = wafer.device(die, device)
        self.layout = wafer.layout
        self.noise = noise if noise is not None else NoiseModel()
        self.model = model if model is not None else InstrumentModel()
        self.rng = np.random.default_rng(np.random.SeedSequence([wafer.spec.seed, die, device, 1]))
        self.sensor_offset = {d: 0.0 for d in self.layout.sensor_dot_ids}
        self._key = (wafer.wafer_id, die, device)
        self._gate_index = set(self.layout.gate_ids)

    def __enter__(self):
        with _sessions_lock:
            if self._key in _open_sessions:
                raise InstrumentError(f"a session on {self.device_id} is already open")
            _open_sessions.add(self._key)
        return self

    def __exit__(self, *exc):
        with _sessions_lock:
            _open_sessions.discard(self._key)
        return False

    @property
    def device_id(self) -> str:
        return f"{self.wafer.wafer_id}/{self.wafer.dies[self.die].label}/dev-{self.device}"

    @property
    def kt(self) -> float:
        """Thermal energy k_B*T_e in eV."""
        return KB_OVER_E * self.model.electron_temperature

    def _check_gates(self, gate_voltages: Mapping[str, object]) -> None:
        for g in gate_voltages:
            if g not in self._gate_index:
                raise UnknownGateError(f"unknown gate id {g!r}")

    def _noise(self, sigma: float, shape) -> np.ndarray | float:
        if sigma <= 0:
            return 0.0
        return self.rng.normal(0.0, sigma, shape)

    def cross_conductance_floor(self, half_step: float = 2e-3, k: float = 3.0) -> float:
        """Noise floor of a symmetric finite-difference conductance."""
        sigma = self.noise.current_noise_rms * math.sqrt(2.0) / (2.0 * half_step)
        return max(k * sigma, 1e-15)

    def jump_sensor(self, sensor_dot: str) -> None:
        """Possibly apply one sensor offset jump (called between scan lines)."""
        nz = self.noise
        if nz.sensor_jump_rate <= 0 or nz.sensor_jump_sigma <= 0:
            return
        if self.rng.random() < nz.sensor_jump_rate:
            self.sensor_offset[sensor_dot] += float(self.rng.normal(0.0, nz.sensor_jump_sigma))


# --------------------------------------------------------------------------
# Transport
# --------------------------------------------------------------------------


def _gate_factor(truth: DeviceGroundTruth, gid: str, v) -> np.ndarray:
    g = truth.gates[gid]
    if g.fault == "open":
        return np.ones_like(np.asarray(v, dtype=float))
    return expit((np.asarray(v, dtype=float) - g.true_vt) / g.pinchoff_width)


def _channel_conducts(truth: DeviceGroundTruth, layout, channel: str) -> bool:
    return all(ok for o, ok in truth.ohmics.items() if channel in layout.ohmics[o])


def _mean_channel_drive(truth, layout, channel, gate_voltages):
    gids = layout.channels[channel]
    v = sum(np.asarray(gate_voltages.get(g, 0.0), dtype=float) for g in gids) / len(gids)
    vt = sum(truth.gates[g].true_vt for g in gids) / len(gids)
    return v - vt


def _leak(session: ProbeSession, a: str, b: str, gate_voltages) -> np.ndarray:
    """Cross-channel current into ``a`` driven by channel ``b`` under the screen."""
    lay, truth, m = session.layout, session.truth, session.model
    scr = lay.screening_gate
    if scr is None:
        return np.zeros(())
    vs = np.asarray(gate_voltages.get(scr, 0.0), dtype=float)
    open_frac = np.maximum(vs - truth.gates[scr].true_vt, 0.0) / m.screening_width
    w = session.wafer.spec.disorder.pinchoff_width
    drive = _mean_channel_drive(truth, lay, b, gate_voltages) / w
    return m.leak_conductance * open_frac * w * np.logaddexp(0.0, drive)


def _leak_partners(layout, channel: str) -> list[str]:
    if channel == "qubit":
        return [c for c in layout.channels if c != "qubit"]
    return ["qubit"] if "qubit" in layout.channels else []


def measure_current(session: ProbeSession, gate_voltages: Mapping[str, object],
                    bias: float = REFERENCE_BIAS, channel: str = "qubit"):
    """Source-drain current of ``channel``.

    Values in ``gate_voltages`` may be scalars or broadcastable arrays. Gates of
    other channels default to 0 V when absent.

    Raises:
        UnknownGateError: for gate ids not in the layout.
        InstrumentError: if a gate of ``channel`` is not assigned.
    """
    session._check_gates(gate_voltages)
    lay, truth = session.layout, session.truth
    if channel not in lay.channels:
        raise InstrumentError(f"unknown channel {channel!r}")
    gids = lay.channels[channel]
    missing = [g for g in gids if g not in gate_voltages]
    if missing:
        raise InstrumentError(f"channel {channel} gates not assigned: {missing}")
    current = np.asarray(session.model.on_current * bias / REFERENCE_BIAS)
    if not _channel_conducts(truth, lay, channel):
        current = current * 0.0
    for g in gids:
        current = current * _gate_factor(truth, g, gate_voltages[g])
    for other in _leak_partners(lay, channel):
        current = current + _leak(session, channel, other, gate_voltages) * (bias / REFERENCE_BIAS)
    current = current + session._noise(session.noise.current_noise_rms, np.shape(current))
    return float(current) if np.ndim(current) == 0 else current


def cross_conductance(session: ProbeSession, channel_a: str, channel_b: str,
                      gate_voltages: Mapping[str, float], half_step: float = 2e-3,
                      bias: float = REFERENCE_BIAS) -> float:
    """dI_a/dV_b in A/V, by symmetric finite difference of all channel-b gates."""
    if channel_a == channel_b:
        raise InstrumentError("cross conductance needs two distinct channels")
    lay = session.layout
    for c in (channel_a, channel_b):
        if c not in lay.channels:
            raise InstrumentError(f"unknown channel {c!r}")
    up, dn = dict(gate_voltages), dict(gate_voltages)
    for g in lay.channels[channel_b]:
        up[g] = gate_voltages.get(g, 0.0) + half_step
        dn[g] = gate_voltages.get(g, 0.0) - half_step
    i_up = measure_current(session, up, bias, channel_a)
    i_dn = measure_current(session, dn, bias, channel_a)
    return float((i_up - i_dn) / (2.0 * half_step))


# --------------------------------------------------------------------------
# Charge sensing
# --------------------------------------------------------------------------


def tunnel_rate(dot: DotGroundTruth, vb1, vb2) -> np.ndarray:
    d = 0.5 * ((np.asarray(vb1) - dot.barrier_reference[0]) + (np.asarray(vb2) - dot.barrier_reference[1]))
    return dot.tunnel_rate_prefactor * np.exp(d / dot.tunnel_rate_scale)


def visibility(rate, lockin_frequency: float) -> np.ndarray:
    """0 below the lock-in frequency, rising to 1 one decade above it."""
    ratio = np.asarray(rate, dtype=float) / lockin_frequency
    return np.clip(np.log10(np.maximum(ratio, 1e-300)), 0.0, 1.0)


def _sensor_sensitivity(session: ProbeSession, dot: DotGroundTruth, gate_voltages) -> np.ndarray:
    if dot.paired_sensor is None:
        raise InstrumentError(f"dot {dot.dot_id} has no paired sensor")
    truth, lay = session.truth, session.layout
    sensor = truth.dots[dot.paired_sensor]
    if sensor.plunger not in gate_voltages:
        raise InstrumentError(f"sensor plunger {sensor.plunger} not set; sensor is not tuned")
    if sensor.faulty or not _channel_conducts(truth, lay, lay.dot(sensor.dot_id).channel):
        return np.zeros(())
    v = np.asarray(gate_voltages[sensor.plunger], dtype=float) + session.sensor_offset[sensor.dot_id]
    return np.exp(-((v - sensor.sensor_optimum) / session.model.sensor_width) ** 2)


def _lines(session: ProbeSession, dot: DotGroundTruth, vp, vb1, vb2, lockin_frequency,
           extra_shift=0.0) -> np.ndarray:
    vp, vb1, vb2 = (np.asarray(v, dtype=float) for v in (vp, vb1, vb2))
    db1 = vb1 - dot.barrier_reference[0]
    db2 = vb2 - dot.barrier_reference[1]
    shift = (dot.barrier_lever_arms[0] * db1 + dot.barrier_lever_arms[1] * db2) / dot.lever_arm
    rate = tunnel_rate(dot, vb1, vb2)
    vis = visibility(rate, lockin_frequency)
    beta = np.sqrt(1.0 + (HBAR_OVER_E * rate / session.kt) ** 2)
    scale = dot.lever_arm / (2.0 * session.kt * beta)
    total = np.zeros(np.broadcast(vp, vb1, vb2).shape)
    for n in range(1, session.model.max_electrons + 1):
        vn = dot.true_v1e + (n - 1) * dot.addition_voltage - shift + extra_shift
        total = total + 1.0 / np.cosh(np.clip((vp - vn) * scale, -700, 700)) ** 2
    # broadening keeps the line area (one electron) fixed, so the peak drops as 1/beta
    return vis * total / beta


def _background(session: ProbeSession, dot: DotGroundTruth, vp, vb, sensor_id: str):
    amp = session.wafer.spec.disorder.background_amplitude
    m = session.model
    phase = 2.0 * math.pi * (np.asarray(vp) + 0.5 * np.asarray(vb)) / m.background_period
    return amp * np.cos(phase + dot.background_phase) + m.background_jump_coupling * amp * session.sensor_offset[sensor_id]


def lockin_signal(session: ProbeSession, dot_id: str, gate_voltages: Mapping[str, object],
                  lockin_frequency: float = 1e3):
    """Demodulated charge-sensor output while sweeping gates of ``dot_id``.

    Raises:
        InstrumentError: if the dot has no paired sensor or the sensor plunger
            is not set.
    """
    session._check_gates(gate_voltages)
    truth = session.truth
    dot = truth.dots[dot_id]
    sens = _sensor_sensitivity(session, dot, gate_voltages)
    for g in (dot.plunger, *dot.barriers):
        if g not in gate_voltages:
            raise InstrumentError(f"gate {g} of dot {dot_id} not assigned")
    vp = gate_voltages[dot.plunger]
    vb1, vb2 = gate_voltages[dot.barriers[0]], gate_voltages[dot.barriers[1]]
    if dot.faulty:
        lines = 0.0
    else:
        lines = _lines(session, dot, vp, vb1, vb2, lockin_frequency)
    sig = session.model.lockin_amplitude * sens * lines
    sig = sig + _background(session, dot, vp, vb1, dot.paired_sensor)
    sig = np.asarray(sig) + session._noise(session.noise.white_noise_rms, np.shape(sig))
    return float(sig) if np.ndim(sig) == 0 else sig


def _occupation(dot: DotGroundTruth, vp, shift) -> np.ndarray:
    n = np.floor((np.asarray(vp) - (dot.true_v1e - shift)) / dot.addition_voltage) + 1
    return np.maximum(n, 0)


def dqd_signal(session: ProbeSession, dots: tuple[str, str], gate_voltages: Mapping[str, object],
               lockin_frequency: float = 1e3):
    """Lock-in output of a double dot swept in its two plungers.

    Each dot's transitions are shifted by the neighbor plunger (cross lever
    arm) and by a mutual charging term per electron on the neighbor.
    """
    session._check_gates(gate_voltages)
    truth = session.truth
    da, db = (truth.dots[d] for d in dots)
    dis = session.wafer.spec.disorder
    sens = _sensor_sensitivity(session, da, gate_voltages)
    out = 0.0
    for me, other in ((da, db), (db, da)):
        vp = np.asarray(gate_voltages[me.plunger], dtype=float)
        vo = np.asarray(gate_voltages[other.plunger], dtype=float)
        vb1, vb2 = gate_voltages[me.barriers[0]], gate_voltages[me.barriers[1]]
        cross = dis.neighbor_lever_arm / me.lever_arm * (vo - session.truth.gates[other.plunger].true_vt)
        cross_other = dis.neighbor_lever_arm / other.lever_arm * (vp - session.truth.gates[me.plunger].true_vt)
        n_other = _occupation(other, vo, cross_other)
        shift = -cross + session.model.mutual_charging_voltage * n_other
        if not me.faulty:
            out = out + _lines(session, me, vp, vb1, vb2, lockin_frequency, extra_shift=shift)
    sig = session.model.lockin_amplitude * sens * out
    sig = sig + _background(session, da, gate_voltages[da.plunger], gate_voltages[db.plunger],
                            da.paired_sensor)
    sig = np.asarray(sig) + session._noise(session.noise.white_noise_rms, np.shape(sig))
    return sig


# --------------------------------------------------------------------------
# Scans
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Axis:
    gate: str
    start: float
    stop: float


@dataclass(frozen=True)
class ScanPlan:
    """A 2D raster. The stepped axes advance together (outer loop); the swept
    axes advance together within a line (inner loop)."""

    kind: str
    sweep: tuple[Axis, ...]
    step: tuple[Axis, ...]
    sweep_points: int
    step_points: int
    fixed: Mapping[str, float] = field(default_factory=dict)
    dots: tuple[str, ...] = ()
    channel: str = "qubit"
    lockin_frequency: float = 1e3
    bias: float = REFERENCE_BIAS

    def __post_init__(self):
        if self.kind not in SCAN_KINDS:
            raise InstrumentError(f"unknown scan kind {self.kind!r}; expected one of {SCAN_KINDS}")
        if self.sweep_points < 2 or self.step_points < 2:
            raise InstrumentError("scan axes need at least 2 points")
        if not self.sweep or not self.step:
            raise InstrumentError("scan needs at least one swept and one stepped gate")
        for ax in (*self.sweep, *self.step):
            if not ax.start < ax.stop:
                raise InstrumentError(f"axis {ax.gate}: start must be < stop")

    def sweep_values(self, i: int = 0) -> np.ndarray:
        ax = self.sweep[i]
        return np.linspace(ax.start, ax.stop, self.sweep_points)

    def step_values(self, i: int = 0) -> np.ndarray:
        ax = self.step[i]
        return np.linspace(ax.start, ax.stop, self.step_points)


@dataclass
class ScanGrid:
    plan: ScanPlan
    values: np.ndarray
    device_id: str = ""
    seed: int = 0
    units: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.plan.step_points, self.plan.sweep_points):
            raise InstrumentError(f"values shape {self.values.shape} does not match plan "
                                  f"({self.plan.step_points}, {self.plan.sweep_points})")
        if not np.all(np.isfinite(self.values)):
            raise InstrumentError("scan values must be finite")

    @property
    def sweep_axis(self) -> np.ndarray:
        return self.plan.sweep_values(0)

    @property
    def step_axis(self) -> np.ndarray:
        return self.plan.step_values(0)

    def with_values(self, values: np.ndarray) -> "ScanGrid":
        return ScanGrid(self.plan, values, self.device_id, self.seed, self.units)

    def to_text(self) -> str:
        return scan_to_text(self)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(scan_to_text(self))


def _plan_gates(plan: ScanPlan) -> list[str]:
    return [a.gate for a in (*plan.sweep, *plan.step)] + list(plan.fixed)


def run_scan(session: ProbeSession, plan: ScanPlan) -> ScanGrid:
    """Acquire a raster line by line. For charge-sensing kinds the sensor may
    jump between lines.

    Raises:
        UnknownGateError: if the plan references gates absent from the device.
    """
    for g in _plan_gates(plan):
        if g not in session._gate_index:
            raise UnknownGateError(f"plan references absent gate {g!r}")
    for d in plan.dots:
        if d not in session.truth.dots:
            raise InstrumentError(f"plan references absent dot {d!r}")
    sweeps = [plan.sweep_values(i) for i in range(len(plan.sweep))]
    steps = [plan.step_values(i) for i in range(len(plan.step))]
    values = np.empty((plan.step_points, plan.sweep_points))
    sensing = plan.kind != "barrier-barrier"
    sensor = None
    if sensing:
        if not plan.dots:
            raise InstrumentError("charge-sensing plans need the dot id(s)")
        sensor = session.truth.dots[plan.dots[0]].paired_sensor
    for r in range(plan.step_points):
        if sensing and r > 0 and sensor is not None:
            session.jump_sensor(sensor)
        volts: dict[str, object] = dict(plan.fixed)
        for ax, vals in zip(plan.sweep, sweeps):
            volts[ax.gate] = vals
        for ax, vals in zip(plan.step, steps):
            volts[ax.gate] = float(vals[r])
        if plan.kind == "barrier-barrier":
            row = measure_current(session, volts, plan.bias, plan.channel)
        elif plan.kind == "plunger-vs-barriers":
            row = lockin_signal(session, plan.dots[0], volts, plan.lockin_frequency)
        else:
            row = dqd_signal(session, (plan.dots[0], plan.dots[1]), volts, plan.lockin_frequency)
        values[r] = np.broadcast_to(row, (plan.sweep_points,))
    units = "A" if plan.kind == "barrier-barrier" else "lockin"
    return ScanGrid(plan, values, session.device_id, session.wafer.spec.seed, units)


# --------------------------------------------------------------------------
# Scan files
# --------------------------------------------------------------------------


def _axes_text(axes: Sequence[Axis]) -> str:
    return ";".join(f"{a.gate},{a.start!r},{a.stop!r}" for a in axes)


def _parse_axes(text: str) -> tuple[Axis, ...]:
    out = []
    for part in text.split(";"):
        g, a, b = part.split(",")
        out.append(Axis(g, float(a), float(b)))
    return tuple(out)


def scan_to_text(grid: ScanGrid) -> str:
    p = grid.plan
    fixed = ";".join(f"{k}={float(v)!r}" for k, v in sorted(p.fixed.items()))
    head = [
        f"# {SCAN_FORMAT} v{SCAN_FORMAT_VERSION}",
        f"# device: {grid.device_id}",
        f"# kind: {p.kind}",
        f"# seed: {grid.seed}",
        f"# dots: {','.join(p.dots)}",
        f"# channel: {p.channel}",
        f"# bias: {p.bias!r}",
        f"# lockin_frequency: {p.lockin_frequency!r}",
        f"# sweep: {_axes_text(p.sweep)}",
        f"# step: {_axes_text(p.step)}",
        f"# points: {p.sweep_points},{p.step_points}",
        f"# fixed: {fixed}",
        f"# units: {grid.units}",
    ]
    rows = [",".join(repr(float(v)) for v in row) for row in grid.values]
    return "\n".join(head + rows) + "\n"


class ScanFormatError(InstrumentError):
    pass


def scan_from_text(text: str) -> ScanGrid:
    """Parse a scan file. Round-trips :func:`scan_to_text` bit-exactly."""
    lines = text.splitlines()
    if not lines or not lines[0].startswith(f"# {SCAN_FORMAT} v"):
        raise ScanFormatError("not a scan file")
    version = int(lines[0].split(" v")[-1])
    if version != SCAN_FORMAT_VERSION:
        raise ScanFormatError(f"scan format version {version} unsupported (expected {SCAN_FORMAT_VERSION})")
    meta = {}
    body = []
    for ln in lines[1:]:
        if ln.startswith("# "):
            k, _, v = ln[2:].partition(": ")
            meta[k.strip().rstrip(":")] = v
        elif ln.strip():
            body.append(ln)
    try:
        ns, nt = (int(x) for x in meta["points"].split(","))
        fixed = {}
        if meta.get("fixed"):
            for item in meta["fixed"].split(";"):
                k, v = item.split("=")
                fixed[k] = float(v)
        plan = ScanPlan(
            kind=meta["kind"], sweep=_parse_axes(meta["sweep"]), step=_parse_axes(meta["step"]),
            sweep_points=ns, step_points=nt, fixed=fixed,
            dots=tuple(d for d in meta.get("dots", "").split(",") if d),
            channel=meta.get("channel", "qubit"), lockin_frequency=float(meta["lockin_frequency"]),
            bias=float(meta["bias"]))
        values = np.array([[float(x) for x in row.split(",")] for row in body])
        return ScanGrid(plan, values, meta.get("device", ""), int(meta.get("seed", 0)),
                        meta.get("units", ""))
    except (KeyError, ValueError) as exc:
        raise ScanFormatError(f"malformed scan file: {exc}") from exc


def read_scan(path: str | Path) -> ScanGrid:
    return scan_from_text(Path(path).read_text())

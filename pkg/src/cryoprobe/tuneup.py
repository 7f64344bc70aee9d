"""Automated per-device measurement flow.

Stages, in order: channel turn-on, channel isolation with the screening
gate, per-gate pinch-off curves, density equalization, barrier-barrier
corner scans per dot, and charge-sensing scans per qubit dot. Every window
is placed relative to a measured threshold or fitted corner. A failing
stage marks the affected components and later stages skip them.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import optimize
from scipy.special import expit

from .instrument import (Axis, ProbeSession, ScanGrid, ScanPlan, cross_conductance,
                         measure_current, run_scan)
from .transitions import AnalysisConfig, TransitionSummary, analyze_scan

RECORD_FORMAT = "cryoprobe.record"
RECORD_FORMAT_VERSION = 1


class TuneupFault(RuntimeError):
    """A measurement stage could not produce a usable result."""

    kind = "fault"


class NoTurnOnError(TuneupFault):
    kind = "no turn-on"


class AlwaysOnError(TuneupFault):
    kind = "always on"


class IsolationError(TuneupFault):
    kind = "isolation"


class EqualizationError(TuneupFault):
    kind = "equalization"


class CornerFitError(TuneupFault):
    kind = "corner fit"


@dataclass(frozen=True)
class IVCurve:
    gate_id: str
    voltages: np.ndarray
    currents: np.ndarray
    bias: float = 1e-3

    def __post_init__(self):
        v = np.asarray(self.voltages, dtype=float)
        i = np.asarray(self.currents, dtype=float)
        if v.ndim != 1 or v.shape != i.shape or len(v) < 2:
            raise ValueError("IV curve needs equal-length 1D samples, at least 2")
        if np.any(np.diff(v) <= 0):
            raise ValueError("IV voltages must be strictly increasing")
        object.__setattr__(self, "voltages", v)
        object.__setattr__(self, "currents", i)


def extract_vt(curve: IVCurve, threshold: float = 1e-9) -> float:
    """Voltage of the first upward crossing of ``threshold``, by linear
    interpolation between the bracketing samples.

    Raises:
        AlwaysOnError: every sample is at or above threshold.
        NoTurnOnError: the current never crosses threshold.
    """
    v, i = curve.voltages, curve.currents
    if np.all(i >= threshold):
        raise AlwaysOnError(f"{curve.gate_id}: current above {threshold:g} A over the whole sweep")
    up = np.nonzero((i[:-1] < threshold) & (i[1:] >= threshold))[0]
    if len(up) == 0:
        raise NoTurnOnError(f"{curve.gate_id}: current never reaches {threshold:g} A")
    k = int(up[0])
    return float(v[k] + (v[k + 1] - v[k]) * (threshold - i[k]) / (i[k + 1] - i[k]))


@dataclass(frozen=True)
class PipelineConfig:
    """Tune-up settings. Voltages in volts, relative to the quantity named."""

    threshold: float = 1e-9
    bias: float = 1e-3
    turn_on_start: float = 0.0
    turn_on_stop: float = 2.0
    turn_on_step: float = 0.005
    channel_offset: float = 0.10
    gate_sweep_below: float = 1.3
    gate_sweep_above: float = 0.3
    gate_sweep_step: float = 0.005
    screening_start: float = 0.7
    screening_step: float = 0.02
    screening_floor: float = 0.0
    screening_guard: float = 0.02
    noise_floor_k: float = 3.0
    gm_half_step: float = 2e-3
    gm_target: float = 1.58
    gm_band: float = 0.25
    gm_increment: float = 0.010
    max_iterations: int = 100
    low_vt_limit: float = 0.2
    corner_half_window: float = 0.2
    corner_points: int = 31
    corner_plunger_offset: float = 0.10
    corner_max_width: float = 0.08
    corner_max_residual: float = 0.05
    corner_min_span: float = 5e-11
    sensing_plunger_below: float = 0.20
    sensing_plunger_above: float = 0.20
    sensing_barrier_half_window: float = 0.25
    sensing_points: tuple[int, int] = (101, 41)
    sensor_plunger_offset: float = 0.10
    neighbor_sensor_offset: float = -0.30
    lockin_frequency: float = 1e3
    dqd: bool = False
    dqd_points: int = 61
    dqd_half_window: float = 0.15
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sensing_points"] = list(self.sensing_points)
        d["analysis"]["slope_window"] = list(self.analysis.slope_window)
        return d

    @classmethod
    def from_dict(cls, data: Mapping | None) -> "PipelineConfig":
        data = dict(data or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown pipeline keys: {sorted(unknown)}")
        if "analysis" in data:
            a = dict(data["analysis"])
            if "slope_window" in a:
                a["slope_window"] = tuple(a["slope_window"])
            data["analysis"] = AnalysisConfig(**a)
        if "sensing_points" in data:
            data["sensing_points"] = tuple(int(x) for x in data["sensing_points"])
        return cls(**data)


# --------------------------------------------------------------------------
# Record
# --------------------------------------------------------------------------


@dataclass
class ScanRef:
    kind: str
    index: int
    dots: tuple[str, ...]
    file: str

    def to_dict(self):
        return {"kind": self.kind, "index": self.index, "dots": list(self.dots), "file": self.file}


@dataclass
class DeviceRecord:
    """Everything the pipeline learned about one device.

    ``faults`` maps a component key (``gate:P3``, ``ohmic:O_S1``,
    ``channel:sensor2``, ``dot:S1``, ``scan:Q4``, ``screening``) to a reason.
    """

    wafer_id: str
    die: int
    device: int
    die_label: str
    x: float
    y: float
    channel_vt: dict[str, float | None] = field(default_factory=dict)
    gate_vt: dict[str, float | None] = field(default_factory=dict)
    screening_vt: float | None = None
    setpoints: dict[str, float] = field(default_factory=dict)
    corners: dict[str, tuple[float, float] | None] = field(default_factory=dict)
    scans: list[ScanRef] = field(default_factory=list)
    summaries: dict[str, TransitionSummary] = field(default_factory=dict)
    ohmic_ok: dict[str, bool] = field(default_factory=dict)
    faults: dict[str, str] = field(default_factory=dict)
    charge_sensing: bool = False

    @property
    def device_id(self) -> str:
        return f"{self.wafer_id}/{self.die_label}/dev-{self.device}"

    @property
    def dot_ok(self) -> dict[str, bool]:
        return {d: c is not None for d, c in self.corners.items()}

    def to_dict(self) -> dict:
        return {
            "format": RECORD_FORMAT,
            "version": RECORD_FORMAT_VERSION,
            "wafer_id": self.wafer_id, "die": self.die, "device": self.device,
            "die_label": self.die_label, "x": self.x, "y": self.y,
            "channel_vt": self.channel_vt, "gate_vt": self.gate_vt,
            "screening_vt": self.screening_vt, "setpoints": self.setpoints,
            "corners": {k: (list(v) if v is not None else None) for k, v in self.corners.items()},
            "scans": [s.to_dict() for s in self.scans],
            "summaries": {k: s.to_dict() for k, s in self.summaries.items()},
            "ohmic_ok": self.ohmic_ok, "faults": self.faults,
            "charge_sensing": self.charge_sensing,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DeviceRecord":
        if d.get("format") != RECORD_FORMAT or d.get("version") != RECORD_FORMAT_VERSION:
            raise ValueError(f"device record schema {d.get('format')!r} v{d.get('version')!r} "
                             f"is not supported (expected {RECORD_FORMAT} v{RECORD_FORMAT_VERSION})")
        return cls(
            wafer_id=d["wafer_id"], die=d["die"], device=d["device"], die_label=d["die_label"],
            x=d["x"], y=d["y"], channel_vt=dict(d["channel_vt"]), gate_vt=dict(d["gate_vt"]),
            screening_vt=d["screening_vt"], setpoints=dict(d["setpoints"]),
            corners={k: (tuple(v) if v is not None else None) for k, v in d["corners"].items()},
            scans=[ScanRef(s["kind"], s["index"], tuple(s["dots"]), s["file"]) for s in d["scans"]],
            summaries={k: TransitionSummary.from_dict(v) for k, v in d["summaries"].items()},
            ohmic_ok=dict(d["ohmic_ok"]), faults=dict(d["faults"]),
            charge_sensing=bool(d.get("charge_sensing", False)))

    @classmethod
    def loads(cls, text: str) -> "DeviceRecord":
        return cls.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------


def _ramp(start, stop, step):
    n = int(round((stop - start) / step)) + 1
    return start + step * np.arange(n)


def turn_on_channels(session: ProbeSession, config: PipelineConfig | None = None
                     ) -> tuple[dict[str, float | None], dict[str, str]]:
    """Ramp every gate of each channel together (other channels at 0 V)
    and record the channel VT. Returns (channel VTs, channel faults)."""
    cfg = config or PipelineConfig()
    lay = session.layout
    ramp = _ramp(cfg.turn_on_start, cfg.turn_on_stop, cfg.turn_on_step)
    vts: dict[str, float | None] = {}
    faults: dict[str, str] = {}
    for chan, gids in lay.channels.items():
        cur = measure_current(session, {g: ramp for g in gids}, cfg.bias, chan)
        try:
            vts[chan] = extract_vt(IVCurve(chan, ramp, cur, cfg.bias), cfg.threshold)
        except TuneupFault as exc:
            vts[chan] = None
            faults[chan] = exc.kind
    return vts, faults


def channel_setpoints(session: ProbeSession, channel_vt: Mapping[str, float | None],
                      config: PipelineConfig) -> dict[str, float]:
    out = {}
    for chan, gids in session.layout.channels.items():
        vt = channel_vt.get(chan)
        for g in gids:
            out[g] = (vt + config.channel_offset) if vt is not None else 0.0
    return out


def isolate_channels(session: ProbeSession, gate_voltages: Mapping[str, float],
                     channels: tuple[str, ...] | None = None,
                     config: PipelineConfig | None = None) -> float:
    """Lower the screening gate in fixed decrements until the qubit channel
    no longer responds to any sensor channel beyond the noise floor.

    Raises:
        IsolationError: if the sweep floor is reached while still coupled.
    """
    cfg = config or PipelineConfig()
    scr = session.layout.screening_gate
    if scr is None:
        raise IsolationError("layout has no screening gate")
    if channels is None:
        channels = tuple(c for c in session.layout.channels if c != "qubit")
    floor = session.cross_conductance_floor(cfg.gm_half_step, cfg.noise_floor_k)
    v = cfg.screening_start
    k = 0
    while v >= cfg.screening_floor - 1e-12:
        volts = dict(gate_voltages)
        volts[scr] = v
        if all(abs(cross_conductance(session, "qubit", c, volts, cfg.gm_half_step, cfg.bias)) < floor
               for c in channels):
            return float(v)
        k += 1
        v = cfg.screening_start - k * cfg.screening_step
    raise IsolationError(f"channels still coupled at screening floor {cfg.screening_floor} V")


def gate_iv_curves(session: ProbeSession, channel: str, channel_vt: float,
                   base: Mapping[str, float], config: PipelineConfig | None = None
                   ) -> dict[str, IVCurve]:
    """Pinch-off curve of every gate of ``channel``, others held at ``base``."""
    cfg = config or PipelineConfig()
    sweep = _ramp(channel_vt - cfg.gate_sweep_below, channel_vt + cfg.gate_sweep_above,
                  cfg.gate_sweep_step)
    out = {}
    for g in session.layout.channels[channel]:
        volts = dict(base)
        volts[g] = sweep
        out[g] = IVCurve(g, sweep, measure_current(session, volts, cfg.bias, channel), cfg.bias)
    return out


def normalized_transconductance(session: ProbeSession, channel: str, setpoints: Mapping[str, float],
                                config: PipelineConfig) -> dict[str, float]:
    """(dI/dV_g)/I for every gate of ``channel`` at ``setpoints`` (1/V)."""
    gids = session.layout.channels[channel]
    n = len(gids)
    h = config.gm_half_step
    volts = {}
    for k, g in enumerate(gids):
        col = np.full(2 * n + 1, setpoints[g])
        col[2 * k] += h
        col[2 * k + 1] -= h
        volts[g] = col
    for g, v in setpoints.items():
        volts.setdefault(g, v)
    cur = np.asarray(measure_current(session, volts, config.bias, channel))
    i0 = cur[-1]
    out = {}
    for k, g in enumerate(gids):
        gm = (cur[2 * k] - cur[2 * k + 1]) / (2 * h)
        out[g] = float(gm / i0) if i0 > 0 else 0.0
    return out


def equalize_density(session: ProbeSession, channel: str, setpoints: Mapping[str, float],
                     config: PipelineConfig | None = None) -> dict[str, float]:
    """Step each gate of ``channel`` up (down) by one increment while its
    normalized transconductance is above (below) the target band.

    Returns the final setpoints of the channel gates.

    Raises:
        EqualizationError: if not all gates are in band after
            ``max_iterations`` passes. ``exc.setpoints`` keeps the last state.
    """
    cfg = config or PipelineConfig()
    sp = dict(setpoints)
    gids = session.layout.channels[channel]
    lo, hi = cfg.gm_target * (1 - cfg.gm_band), cfg.gm_target * (1 + cfg.gm_band)
    for _ in range(cfg.max_iterations):
        gm = normalized_transconductance(session, channel, sp, cfg)
        moved = False
        for g in gids:
            if gm[g] > hi:
                sp[g] += cfg.gm_increment
                moved = True
            elif gm[g] < lo:
                sp[g] -= cfg.gm_increment
                moved = True
        if not moved:
            return {g: sp[g] for g in gids}
    exc = EqualizationError(f"channel {channel}: not within band after {cfg.max_iterations} passes")
    exc.setpoints = {g: sp[g] for g in gids}
    raise exc


@dataclass(frozen=True)
class CornerFit:
    corner: tuple[float, float]
    widths: tuple[float, float]
    amplitude: float
    offset: float
    residual: float


def _corner_model(p, v1, v2):
    i0, c1, c2, w1, w2, off = p
    return i0 * expit((v1 - c1) / w1) * expit((v2 - c2) / w2) + off


def fit_corner(grid: ScanGrid, config: PipelineConfig | None = None) -> CornerFit:
    """Least-squares fit of a logistic-product corner to a barrier-barrier
    scan. The corner is the pair of logistic midpoints.

    Raises:
        CornerFitError: flat grid, soft corner (width above limit), corner
            outside the window, or relative residual above threshold.
    """
    cfg = config or PipelineConfig()
    z = grid.values
    span = float(z.max() - z.min())
    if span < cfg.corner_min_span:
        raise CornerFitError(f"flat barrier-barrier scan (span {span:.3g} A)")
    v1 = grid.sweep_axis[None, :]
    v2 = grid.step_axis[:, None]
    zn = (z - z.min()) / span

    def half(profile, axis):
        k = np.nonzero(profile >= 0.5 * profile[-1])[0]
        return float(axis[k[0]]) if len(k) else float(axis.mean())

    p0 = [1.0, half(zn[-1], grid.sweep_axis), half(zn[:, -1], grid.step_axis), 0.03, 0.03, 0.0]
    lb = [0.0, -np.inf, -np.inf, 1e-4, 1e-4, -np.inf]
    res = optimize.least_squares(lambda p: (_corner_model(p, v1, v2) - zn).ravel(), p0,
                                 bounds=(lb, np.inf), x_scale=[1, 0.03, 0.03, 0.01, 0.01, 0.1])
    i0, c1, c2, w1, w2, off = res.x
    rel = float(np.sqrt(np.mean(res.fun ** 2)) / max(i0, 1e-12))
    a1, a2 = grid.sweep_axis, grid.step_axis
    inside = a1[0] <= c1 <= a1[-1] and a2[0] <= c2 <= a2[-1]
    if not res.success or rel > cfg.corner_max_residual:
        raise CornerFitError(f"corner fit residual {rel:.3g} above {cfg.corner_max_residual}")
    if max(w1, w2) > cfg.corner_max_width:
        raise CornerFitError(f"soft pinch-off (width {max(w1, w2):.3g} V)")
    if not inside:
        raise CornerFitError(f"corner ({c1:.3f}, {c2:.3f}) outside scan window")
    c1 = float(np.clip(c1, a1[0], a1[-1]))
    c2 = float(np.clip(c2, a2[0], a2[-1]))
    return CornerFit((c1, c2), (float(w1), float(w2)), float(i0 * span), float(off * span + z.min()), rel)


def corner_plan(session: ProbeSession, dot_id: str, gate_vt: Mapping[str, float],
                base: Mapping[str, float], config: PipelineConfig) -> ScanPlan:
    site = session.layout.dot(dot_id)
    b1, b2 = site.barriers
    hw = config.corner_half_window
    fixed = {g: v for g, v in base.items() if g not in (b1, b2)}
    fixed[site.plunger] = gate_vt[site.plunger] + config.corner_plunger_offset
    n = config.corner_points
    return ScanPlan("barrier-barrier", (Axis(b1, gate_vt[b1] - hw, gate_vt[b1] + hw),),
                    (Axis(b2, gate_vt[b2] - hw, gate_vt[b2] + hw),), n, n, fixed,
                    (dot_id,), site.channel, config.lockin_frequency, config.bias)


def sensing_plan(session: ProbeSession, dot_id: str, record: DeviceRecord,
                 base: Mapping[str, float], config: PipelineConfig) -> ScanPlan:
    """Plunger swept relative to its VT, both barriers stepped around their
    corner values, paired sensor tuned, other sensors pinched off."""
    lay = session.layout
    site = lay.dot(dot_id)
    sensor = lay.dot(site.paired_sensor)
    fixed = dict(base)
    for s in lay.sensor_dot_ids:
        sp = lay.dot(s).plunger
        vt = record.gate_vt.get(sp)
        if vt is None:
            continue
        off = config.sensor_plunger_offset if s == sensor.dot_id else config.neighbor_sensor_offset
        fixed[sp] = vt + off
    for g in (site.plunger, *site.barriers):
        fixed.pop(g, None)
    vp = record.gate_vt[site.plunger]
    c1, c2 = record.corners[dot_id]
    hw = config.sensing_barrier_half_window
    ns, nt = config.sensing_points
    return ScanPlan("plunger-vs-barriers",
                    (Axis(site.plunger, vp - config.sensing_plunger_below, vp + config.sensing_plunger_above),),
                    (Axis(site.barriers[0], c1 - hw, c1 + hw), Axis(site.barriers[1], c2 - hw, c2 + hw)),
                    ns, nt, fixed, (dot_id,), "qubit", config.lockin_frequency, config.bias)


def dqd_plan(session: ProbeSession, dots: tuple[str, str], record: DeviceRecord,
             base: Mapping[str, float], config: PipelineConfig) -> ScanPlan:
    """Two adjacent plungers swept against each other; the three barriers
    stay at their corner-derived setpoints."""
    lay = session.layout
    a, b = (lay.dot(d) for d in dots)
    fixed = dict(base)
    sensor = lay.dot(a.paired_sensor)
    for s in lay.sensor_dot_ids:
        sp = lay.dot(s).plunger
        vt = record.gate_vt.get(sp)
        if vt is not None:
            fixed[sp] = vt + (config.sensor_plunger_offset if s == sensor.dot_id
                              else config.neighbor_sensor_offset)
    for d in (a, b):
        c = record.corners[d.dot_id]
        fixed[d.barriers[0]], fixed[d.barriers[1]] = c[0], c[1]
    fixed.pop(a.plunger, None)
    fixed.pop(b.plunger, None)
    va, vb = record.gate_vt[a.plunger], record.gate_vt[b.plunger]
    hw = config.dqd_half_window
    n = config.dqd_points
    return ScanPlan("plunger-plunger", (Axis(a.plunger, va - hw, va + hw),),
                    (Axis(b.plunger, vb - hw, vb + hw),), n, n, fixed, dots, "qubit",
                    config.lockin_frequency, config.bias)


# --------------------------------------------------------------------------
# Full flow
# --------------------------------------------------------------------------


@dataclass
class PipelineResult:
    record: DeviceRecord
    scans: list[tuple[ScanRef, ScanGrid]] = field(default_factory=list)
    iv_curves: dict[str, IVCurve] = field(default_factory=dict)


def _ohmic_status(layout, channel_vt) -> dict[str, bool]:
    # a contact is good when at least one channel through it conducts
    return {o: any(channel_vt.get(c) is not None for c in chans) for o, chans in layout.ohmics.items()}


def run_device_pipeline(session: ProbeSession, config: PipelineConfig | None = None,
                        charge_sensing: bool = True) -> PipelineResult:
    """Run the full tune-up on one device. Never raises for device faults;
    they end up in ``record.faults``."""
    cfg = config or PipelineConfig()
    lay, wafer = session.layout, session.wafer
    truth = session.truth
    die = wafer.dies[session.die]
    rec = DeviceRecord(wafer.wafer_id, session.die, session.device, die.label, truth.x, truth.y,
                       charge_sensing=charge_sensing)
    result = PipelineResult(rec)
    scr = lay.screening_gate

    # 1. channel turn-on
    rec.channel_vt, ch_faults = turn_on_channels(session, cfg)
    for c, why in ch_faults.items():
        rec.faults[f"channel:{c}"] = why
    rec.ohmic_ok = _ohmic_status(lay, rec.channel_vt)
    for o, ok in rec.ohmic_ok.items():
        if not ok:
            rec.faults[f"ohmic:{o}"] = "no conduction"
    on = [c for c, v in rec.channel_vt.items() if v is not None]
    base = channel_setpoints(session, rec.channel_vt, cfg)

    # 2. isolation
    if scr is not None:
        if "qubit" in on:
            try:
                rec.screening_vt = isolate_channels(
                    session, base, tuple(c for c in on if c != "qubit"), cfg)
            except IsolationError as exc:
                rec.faults["screening"] = exc.kind
        else:
            rec.faults["screening"] = "untestable"
        if rec.screening_vt is not None:
            # park the screen a guard step below the isolation point so the
            # sub-floor residual leak does not bias later current readings
            base[scr] = rec.screening_vt - cfg.screening_guard
        rec.gate_vt[scr] = rec.screening_vt

    # 3. per-gate pinch-off
    for chan, gids in lay.channels.items():
        vt = rec.channel_vt.get(chan)
        if vt is None:
            for g in gids:
                rec.gate_vt[g] = None
                rec.faults[f"gate:{g}"] = "channel off"
            continue
        curves = gate_iv_curves(session, chan, vt, base, cfg)
        result.iv_curves.update(curves)
        for g, cv in curves.items():
            try:
                rec.gate_vt[g] = extract_vt(cv, cfg.threshold)
            except TuneupFault as exc:
                rec.gate_vt[g] = None
                rec.faults[f"gate:{g}"] = exc.kind
    rec.gate_vt = {g: rec.gate_vt.get(g) for g in lay.gate_ids}

    # 4. equalization
    for chan in on:
        gids = lay.channels[chan]
        if any(rec.gate_vt[g] is None for g in gids):
            continue
        try:
            base.update(equalize_density(session, chan, base, cfg))
        except EqualizationError as exc:
            base.update(exc.setpoints)
            rec.faults[f"channel:{chan}"] = exc.kind
    rec.setpoints = {g: float(base[g]) for g in lay.gate_ids if g in base}

    # 5. corners
    index = 0
    for site in lay.dots:
        gates = (site.plunger, *site.barriers)
        bad = [g for g in gates if rec.gate_vt.get(g) is None]
        if bad:
            rec.corners[site.dot_id] = None
            rec.faults[f"dot:{site.dot_id}"] = f"gate fault ({','.join(bad)})"
            continue
        low = [g for g in gates if rec.gate_vt[g] < cfg.low_vt_limit]
        plan = corner_plan(session, site.dot_id, rec.gate_vt, base, cfg)
        grid = run_scan(session, plan)
        ref = ScanRef(plan.kind, index, (site.dot_id,), f"{plan.kind}-{index:02d}.csv")
        index += 1
        rec.scans.append(ref)
        result.scans.append((ref, grid))
        if low:
            rec.corners[site.dot_id] = None
            rec.faults[f"dot:{site.dot_id}"] = f"low pinch-off ({','.join(low)})"
            continue
        try:
            rec.corners[site.dot_id] = fit_corner(grid, cfg).corner
        except CornerFitError as exc:
            rec.corners[site.dot_id] = None
            rec.faults[f"dot:{site.dot_id}"] = str(exc)

    if not charge_sensing:
        return result

    # 6. charge sensing, one qubit dot at a time
    for dot_id in lay.qubit_dot_ids:
        site = lay.dot(dot_id)
        reason = None
        if rec.corners.get(dot_id) is None:
            reason = "dot not tuned"
        elif site.paired_sensor is None or rec.corners.get(site.paired_sensor) is None:
            reason = "sensor not available"
        if reason:
            rec.summaries[dot_id] = TransitionSummary(success=False, note=reason)
            rec.faults[f"scan:{dot_id}"] = reason
            continue
        plan = sensing_plan(session, dot_id, rec, base, cfg)
        grid = run_scan(session, plan)
        ref = ScanRef(plan.kind, index, (dot_id,), f"{plan.kind}-{index:02d}.csv")
        index += 1
        rec.scans.append(ref)
        result.scans.append((ref, grid))
        summary, _ = analyze_scan(grid, cfg.analysis)
        rec.summaries[dot_id] = summary

    if cfg.dqd:
        q = lay.qubit_dot_ids
        for a, b in zip(q[:-1], q[1:]):
            if rec.corners.get(a) is None or rec.corners.get(b) is None:
                continue
            plan = dqd_plan(session, (a, b), rec, base, cfg)
            grid = run_scan(session, plan)
            ref = ScanRef(plan.kind, index, (a, b), f"{plan.kind}-{index:02d}.csv")
            index += 1
            rec.scans.append(ref)
            result.scans.append((ref, grid))
    return result

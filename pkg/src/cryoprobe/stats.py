"""Wafer-level statistics: matched pairs, yield, voltage sharing, 1e
metrics, mobility and scan success rate."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import constants

from .transitions import TransitionSummary
from .wafer import DeviceLayout

DEFAULT_DELTA_N = 4e11  # cm^-2


# --------------------------------------------------------------------------
# Matched pairs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MatchedPairResult:
    """Mean-centered pair differences and the random-variation estimate.

    ``sigma`` is the standard deviation of the merged, centered differences
    divided by sqrt(2), since each difference carries two independent draws.
    """

    samples: Mapping[tuple[str, str], np.ndarray]
    pooled_sigma: float
    sigma: float
    counts: Mapping[tuple[str, str], int]
    dropped: tuple[tuple[str, str], ...] = ()

    @property
    def n_samples(self) -> int:
        return int(sum(self.counts.values()))

    def merged(self) -> np.ndarray:
        if not self.samples:
            return np.zeros(0)
        return np.concatenate([self.samples[p] for p in sorted(self.samples)])


def matched_pair_sigma(values: Sequence[Mapping[str, float | None]],
                       pairs: Sequence[tuple[str, str]], min_samples: int = 8) -> MatchedPairResult:
    """Random variation from within-device differences of mirror pairs.

    Args:
        values: one mapping per device, gate (or dot) id to value; ``None``
            or missing entries are skipped.
        pairs: (left, right) id pairs.
        min_samples: pairs with fewer differences are left out.

    Raises:
        ValueError: fewer than 2 differences survive.
    """
    samples, counts, dropped = {}, {}, []
    for a, b in pairs:
        d = [dev[a] - dev[b] for dev in values
             if dev.get(a) is not None and dev.get(b) is not None]
        if len(d) < max(min_samples, 1):
            dropped.append((a, b))
            continue
        arr = np.asarray(d, dtype=float)
        samples[(a, b)] = arr - arr.mean()
        counts[(a, b)] = len(arr)
    n = sum(counts.values())
    if n < 2 or n - len(counts) < 1:
        raise ValueError(f"matched-pair analysis needs at least 2 differences, got {n}")
    merged = np.concatenate([samples[p] for p in sorted(samples)])
    # one mean removed per pair
    pooled = math.sqrt(float(np.sum(merged ** 2)) / (n - len(counts)))
    return MatchedPairResult(samples, pooled, pooled / math.sqrt(2.0), counts, tuple(dropped))


def per_gate_std(values: Sequence[Mapping[str, float | None]], gates: Iterable[str]) -> float:
    """Root-mean-square over gates of the across-device std of each gate."""
    var = []
    for g in gates:
        v = [dev[g] for dev in values if dev.get(g) is not None]
        if len(v) >= 2:
            var.append(float(np.var(v, ddof=1)))
    if not var:
        raise ValueError("need at least 2 devices per gate")
    return math.sqrt(float(np.mean(var)))


def dot_mirror_pairs(layout: DeviceLayout) -> list[tuple[str, str]]:
    """Qubit-dot pairs whose plungers are mirror partners."""
    by_plunger = {d.plunger: d.dot_id for d in layout.dots if d.side == "qubit"}
    return [(by_plunger[a], by_plunger[b]) for a, b in layout.mirror_pairs
            if a in by_plunger and b in by_plunger]


# --------------------------------------------------------------------------
# Yield
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ComponentYield:
    good: int
    total: int

    @property
    def fraction(self) -> float:
        return self.good / self.total if self.total else float("nan")

    @property
    def percent(self) -> float:
        return 100.0 * self.fraction


@dataclass(frozen=True)
class YieldRollup:
    ohmics: ComponentYield
    gates: ComponentYield
    dots: ComponentYield
    devices: ComponentYield
    device_good: Mapping[str, bool] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, int, int, float]]:
        return [(name, c.good, c.total, c.percent) for name, c in
                (("ohmics", self.ohmics), ("gates", self.gates), ("quantum dots", self.dots),
                 ("devices", self.devices))]


def component_status(record) -> dict[str, dict[str, bool]]:
    """Per-component good/bad flags of one device record."""
    return {
        "ohmics": dict(record.ohmic_ok),
        "gates": {g: v is not None for g, v in record.gate_vt.items()},
        "dots": {d: c is not None for d, c in record.corners.items()},
    }


def yield_rollup(records: Sequence) -> YieldRollup:
    """Component and device yield. A device is good iff every ohmic, gate
    and dot on it is good."""
    if not records:
        raise ValueError("yield rollup needs at least one record")
    tot = {"ohmics": [0, 0], "gates": [0, 0], "dots": [0, 0]}
    good_dev = {}
    for r in records:
        st = component_status(r)
        all_ok = True
        for k, flags in st.items():
            tot[k][0] += sum(flags.values())
            tot[k][1] += len(flags)
            all_ok &= all(flags.values())
        good_dev[r.device_id] = all_ok
    return YieldRollup(ComponentYield(*tot["ohmics"]), ComponentYield(*tot["gates"]),
                       ComponentYield(*tot["dots"]),
                       ComponentYield(sum(good_dev.values()), len(good_dev)), good_dev)


# --------------------------------------------------------------------------
# Voltage sharing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DeviceSharing:
    common_voltage: float
    n0: int
    n1: int
    n2: int
    excluded: int = 0

    @property
    def n_dots(self) -> int:
        return self.n0 + self.n1 + self.n2

    @property
    def fractions(self) -> tuple[float, float, float]:
        n = self.n_dots
        return (self.n0 / n, self.n1 / n, self.n2 / n)

    @property
    def success(self) -> float:
        return self.n1 / self.n_dots


@dataclass(frozen=True)
class VoltageSharingResult:
    devices: Mapping[str, DeviceSharing]
    median_success: float
    excluded_devices: tuple[str, ...] = ()
    excluded_dots: int = 0


def classify_occupation(v1e: float, v2e: float, common: float) -> int:
    """0, 1 or 2 (meaning two or more electrons) at ``common``."""
    if v1e > common:
        return 0
    if v2e < common:
        return 2
    return 1


def optimal_common_voltage(dots: Sequence[tuple[float, float]]) -> DeviceSharing:
    """Common plunger voltage maximizing the number of dots at 1e.

    The count is piecewise constant with steps at the v1e/v2e values, so
    evaluating every breakpoint and the midpoints between consecutive ones
    is exhaustive. Ties go to the lowest voltage.
    """
    if not dots:
        raise ValueError("no dots with both v1e and v2e")
    v1 = np.array([d[0] for d in dots], dtype=float)
    v2 = np.array([d[1] for d in dots], dtype=float)
    bp = np.unique(np.concatenate([v1, v2]))
    cands = np.unique(np.concatenate([bp, 0.5 * (bp[1:] + bp[:-1])]))
    ones = np.sum((v1[None, :] <= cands[:, None]) & (cands[:, None] <= v2[None, :]), axis=1)
    best = int(np.argmax(ones))  # first maximum = lowest voltage
    c = float(cands[best])
    n0 = int(np.sum(v1 > c))
    n2 = int(np.sum(v2 < c))
    return DeviceSharing(c, n0, int(ones[best]), n2)


def _pair(s) -> tuple[float | None, float | None]:
    if isinstance(s, TransitionSummary):
        return s.v1e, s.v2e
    return s[0], s[1]


def voltage_sharing(devices: Mapping[str, Sequence]) -> VoltageSharingResult:
    """Per-device optimal common voltage and 0e/1e/>=2e fractions.

    ``devices`` maps a device id to its dots' summaries (or ``(v1e, v2e)``
    tuples). Dots missing either voltage are excluded and counted.
    """
    out, skipped, n_excl = {}, [], 0
    for dev in sorted(devices):
        pairs = [_pair(s) for s in devices[dev]]
        usable = [(a, b) for a, b in pairs if a is not None and b is not None]
        n_excl += len(pairs) - len(usable)
        if not usable:
            skipped.append(dev)
            continue
        res = optimal_common_voltage(usable)
        out[dev] = DeviceSharing(res.common_voltage, res.n0, res.n1, res.n2, len(pairs) - len(usable))
    med = float(np.median([d.success for d in out.values()])) if out else float("nan")
    return VoltageSharingResult(out, med, tuple(skipped), n_excl)


# --------------------------------------------------------------------------
# 1e statistics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Distribution:
    n: int
    mean: float
    std: float
    edges: np.ndarray
    counts: np.ndarray

    def to_dict(self) -> dict:
        return {"n": self.n, "mean": self.mean, "std": self.std,
                "edges": [float(e) for e in self.edges], "counts": [int(c) for c in self.counts]}


def distribution(values: Sequence[float], bins: int | np.ndarray = 20) -> Distribution:
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return Distribution(0, float("nan"), float("nan"), np.zeros(0), np.zeros(0, int))
    counts, edges = np.histogram(v, bins=bins)
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return Distribution(int(v.size), float(np.mean(v)), std, edges, counts)


@dataclass(frozen=True)
class OneElectronReport:
    v1e: Distribution
    addition_voltage: Distribution
    cutoff_pb_difference: Distribution
    v1e_sigma: float | None
    ratio: float | None
    ratio_uncertainty: float | None


def ratio_uncertainty(ratio: float, add_mean: float, add_std: float, n_sigma: int) -> float:
    """First-order propagation: relative spread of the addition voltage plus
    the relative standard error of a sigma estimated from ``n_sigma``
    samples."""
    rel_add = add_std / add_mean
    rel_sig = 1.0 / math.sqrt(2.0 * max(n_sigma - 1, 1))
    return abs(ratio) * math.sqrt(rel_add ** 2 + rel_sig ** 2)


def one_electron_statistics(summaries: Sequence[TransitionSummary],
                            v1e_pairs: MatchedPairResult | None = None,
                            bins: int = 20) -> OneElectronReport:
    """Histograms and moments of v1e, addition voltage and the plunger-barrier
    cutoff difference, plus the ratio of matched-pair 1e sigma to the mean
    addition voltage."""
    if len(summaries) < 2:
        raise ValueError("need at least 2 summaries")
    v1 = distribution([s.v1e for s in summaries], bins)
    add = distribution([s.addition_voltage for s in summaries], bins)
    cut = distribution([s.cutoff_pb_difference for s in summaries], bins)
    sig = ratio = unc = None
    if v1e_pairs is not None and add.n > 0:
        sig = v1e_pairs.sigma
        ratio = sig / add.mean
        unc = ratio_uncertainty(ratio, add.mean, add.std, v1e_pairs.n_samples)
    return OneElectronReport(v1, add, cut, sig, ratio, unc)


# --------------------------------------------------------------------------
# Mobility and success rate
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MobilityEstimate:
    mobility: float  # cm^2/(V s)
    sheet_resistance: float
    delta_n: float
    gate_overdrive: float | None = None


def gate_overdrive(delta_n: float = DEFAULT_DELTA_N, capacitance: float = 1e-7) -> float:
    """Voltage above VT that adds ``delta_n`` (cm^-2) for a gate capacitance
    per area in F/cm^2."""
    if capacitance <= 0:
        raise ValueError("capacitance must be > 0")
    return constants.e * delta_n / capacitance


def mobility_estimate(resistance: float, squares: float = 1.0, delta_n: float = DEFAULT_DELTA_N,
                      capacitance: float | None = None) -> MobilityEstimate:
    """Mobility from the channel resistance at VT plus the overdrive that
    adds ``delta_n`` carriers (cm^-2): mu = 1 / (e * delta_n * R_sheet).

    Raises:
        ValueError: for non-positive resistance, geometry or density.
    """
    if not resistance > 0:
        raise ValueError("resistance must be > 0")
    if squares <= 0 or delta_n <= 0:
        raise ValueError("squares and delta_n must be > 0")
    r_sheet = resistance / squares
    mu = 1.0 / (constants.e * delta_n * r_sheet)
    dv = gate_overdrive(delta_n, capacitance) if capacitance is not None else None
    return MobilityEstimate(mu, r_sheet, delta_n, dv)


def mobility_overestimate_factor(percolation_density: float, delta_n: float = DEFAULT_DELTA_N) -> float:
    """Bias of the estimate when the channel already holds ``percolation_density``
    carriers at VT: true density is n_p + delta_n."""
    if percolation_density < 0 or delta_n <= 0:
        raise ValueError("densities must be non-negative (delta_n > 0)")
    return 1.0 + percolation_density / delta_n


def success_rate(summaries: Sequence[TransitionSummary]) -> float:
    """Fraction of attempted charge-sensing scans with a detected transition."""
    if not summaries:
        raise ValueError("no summaries")
    return sum(bool(s.success) for s in summaries) / len(summaries)


def vt_statistics(gate_vts: Sequence[Mapping[str, float | None]], gates: Sequence[str]) -> dict[str, Distribution]:
    """Across-device distribution of VT for each gate id."""
    return {g: distribution([d.get(g) for d in gate_vts], bins=20) for g in gates}

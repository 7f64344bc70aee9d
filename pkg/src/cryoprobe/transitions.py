"""Transition-line detection in charge-sensing scans and derived metrics.

The detector runs in four stages on a plunger-vs-barrier raster:

1. derivative-of-Gaussian filter along the plunger axis (removes the slowly
   varying sensor background),
2. row-wise maximum filter to find high-signal points,
3. chaining of maxima into curve segments (mutual nearest neighbors on
   nearby rows, bounded slope, minimum vertical length),
4. merging of overlapping segments into transition curves, outlier removal,
   and ordering by mean plunger position.

Row index follows the stepped (barrier) axis, column index the swept
(plunger) axis. Slopes are in plunger pixels per barrier row.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage, optimize
from scipy.integrate import cumulative_simpson

from .instrument import KB_OVER_E, ScanGrid

SUMMARY_FORMAT = "cryoprobe-summary"
SUMMARY_FORMAT_VERSION = 1
SUMMARY_COLUMNS = ("device_id", "dot", "v1e", "v2e", "addition_voltage",
                   "cutoff_pb_difference", "scan_margin", "success")


@dataclass(frozen=True)
class AnalysisConfig:
    """Detector parameters. Pixel units unless noted.

    ``slope_window`` bounds d(column)/d(row); with the default 4 mV plunger
    step and 12.5 mV barrier step, +/-2.5 px/row is +/-0.8 V/V.
    """

    sigma: float = 3.0
    window: int = 5
    floor: float | None = None
    noise_k: float = 5.0
    relative_floor: float = 0.15
    slope_window: tuple[float, float] = (-2.5, 2.5)
    min_length_fraction: float = 0.3
    max_gap: int = 2
    merge_gap: int = 3
    merge_distance: float = 6.0
    outlier_factor: float = 2.0
    refine_search: int = 8

    def min_length(self, n_rows: int) -> int:
        return max(2, int(math.ceil(self.min_length_fraction * n_rows)))


# --------------------------------------------------------------------------
# Filtering and maxima
# --------------------------------------------------------------------------


def highpass_background(grid: ScanGrid, sigma: float = 3.0) -> ScanGrid:
    """First-order Gaussian (derivative) filter along the swept axis."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    v = grid.values - grid.values.mean(axis=1, keepdims=True)
    out = ndimage.gaussian_filter1d(v, sigma, axis=1, order=1, mode="reflect")
    return grid.with_values(out)


@dataclass(frozen=True)
class MaximaSet:
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    shape: tuple[int, int]
    centers: np.ndarray | None = None

    def __post_init__(self):
        if self.centers is None:
            object.__setattr__(self, "centers", self.cols.astype(float))

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def points(self) -> set[tuple[int, int]]:
        return set(zip(self.rows.tolist(), self.cols.tolist()))

    @classmethod
    def from_points(cls, points: Iterable[tuple[int, int]], shape: tuple[int, int]) -> "MaximaSet":
        pts = sorted(set(points))
        r = np.array([p[0] for p in pts], dtype=int)
        c = np.array([p[1] for p in pts], dtype=int)
        return cls(r, c, np.ones(len(pts)), shape)


def auto_floor(values: np.ndarray, noise_k: float = 5.0, relative: float = 0.15) -> float:
    """Detection floor from a robust noise estimate and the strongest feature."""
    med = float(np.median(values))
    mad = 1.4826 * float(np.median(np.abs(values - med)))
    top = float(values.max())
    return max(med + noise_k * mad, relative * top, 0.0)


def estimate_row_noise(values: np.ndarray) -> float:
    """White-noise rms from successive differences along rows (robust to
    sparse narrow features)."""
    d = np.diff(np.asarray(values, dtype=float), axis=1).ravel()
    if d.size == 0:
        return 0.0
    return 1.4826 * float(np.median(np.abs(d - np.median(d)))) / math.sqrt(2.0)


def derivative_kernel_gain(sigma: float) -> float:
    """Noise gain of the first-derivative Gaussian filter (white input)."""
    impulse = np.zeros(int(8 * sigma) * 2 + 1)
    impulse[len(impulse) // 2] = 1.0
    k = ndimage.gaussian_filter1d(impulse, sigma, order=1, mode="constant")
    return float(np.sqrt(np.sum(k ** 2)))


def detect_maxima(grid: ScanGrid | np.ndarray, window: int = 5, floor: float | None = None,
                  noise_k: float = 5.0, relative_floor: float = 0.15) -> MaximaSet:
    """Points equal to the maximum of their ``window``-wide row neighborhood
    and strictly above ``floor`` (estimated from the data when ``None``)."""
    if window < 1:
        raise ValueError("window must be >= 1")
    values = grid.values if isinstance(grid, ScanGrid) else np.asarray(grid, dtype=float)
    if floor is None:
        floor = auto_floor(values, noise_k, relative_floor)
    local = ndimage.maximum_filter(values, size=(1, window), mode="nearest")
    mask = (values == local) & (values > floor)
    rows, cols = np.nonzero(mask)
    return MaximaSet(rows, cols, values[rows, cols], values.shape)


def refine_centers(maxima: MaximaSet, filtered: np.ndarray, search: int = 8,
                   fallback_offset: float = 3.0) -> MaximaSet:
    """Move each maximum of the derivative response to the zero crossing on
    its right, which is the line center of a symmetric peak (sub-pixel).

    Without a crossing within ``search`` pixels (a sloped background can
    keep the response positive) the center falls back to
    ``col + fallback_offset``, the peak-to-center distance of a narrow line.
    """
    centers = maxima.cols.astype(float) + fallback_offset
    centers = np.minimum(centers, filtered.shape[1] - 1.0)
    ncol = filtered.shape[1]
    for k, (r, c) in enumerate(zip(maxima.rows, maxima.cols)):
        row = filtered[r]
        stop = min(c + search, ncol - 1)
        for j in range(c, stop):
            a, b = row[j], row[j + 1]
            if a > 0 >= b:
                centers[k] = j + a / (a - b)
                break
    return replace(maxima, centers=centers)


# --------------------------------------------------------------------------
# Segments
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CurveSegment:
    points: tuple[tuple[int, int], ...]
    centers: tuple[float, ...] = ()

    @property
    def rows(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def cols(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    @property
    def extent(self) -> int:
        return self.points[-1][0] - self.points[0][0] + 1


def _nearest(points: np.ndarray, idx: int, candidates: np.ndarray) -> int:
    if len(candidates) == 0:
        return -1
    d = np.hypot(points[candidates, 0] - points[idx, 0], points[candidates, 1] - points[idx, 1])
    # tie-break: smallest distance, then lowest row gap, then lowest column
    order = np.lexsort((points[candidates, 1], np.abs(points[candidates, 0] - points[idx, 0]), d))
    return int(candidates[order[0]])


def link_maxima(maxima: MaximaSet, slope_window: tuple[float, float], max_gap: int = 2) -> list[tuple[int, int]]:
    """Index pairs (lower, upper) of maxima that link into chains.

    A link joins p and q (q above p within ``max_gap`` rows) when q is the
    closest maximum to p among the rows above, p is the closest to q among
    the rows below, and the slope between them lies in ``slope_window``.
    """
    lo, hi = slope_window
    if lo > hi:
        raise ValueError("slope window min must be <= max")
    pts = np.column_stack([maxima.rows, maxima.cols]).astype(float)
    n = len(pts)
    if n == 0:
        return []
    rows = maxima.rows
    up = np.full(n, -1)
    down = np.full(n, -1)
    for i in range(n):
        r = rows[i]
        cand_up = np.nonzero((rows > r) & (rows <= r + max_gap))[0]
        cand_dn = np.nonzero((rows < r) & (rows >= r - max_gap))[0]
        up[i] = _nearest(pts, i, cand_up)
        down[i] = _nearest(pts, i, cand_dn)
    links = []
    for i in range(n):
        j = up[i]
        if j >= 0 and down[j] == i:
            slope = (pts[j, 1] - pts[i, 1]) / (pts[j, 0] - pts[i, 0])
            if lo <= slope <= hi:
                links.append((i, j))
    return links


def chain_segments(maxima: MaximaSet, slope_window: tuple[float, float] = (-2.5, 2.5),
                   min_length: int | None = None, max_gap: int = 2) -> list[CurveSegment]:
    """Group maxima into curve segments (maximal chains of links) spanning at
    least ``min_length`` rows. Defaults to 30% of the scan rows."""
    if slope_window[0] > slope_window[1]:
        raise ValueError("slope window min must be <= max")
    if len(maxima) == 0:
        return []
    if min_length is None:
        min_length = AnalysisConfig().min_length(maxima.shape[0])
    links = link_maxima(maxima, slope_window, max_gap)
    nxt = {i: j for i, j in links}
    has_prev = {j for _, j in links}
    segs = []
    for start in range(len(maxima)):
        if start in has_prev:
            continue
        chain = [start]
        while chain[-1] in nxt:
            chain.append(nxt[chain[-1]])
        pts = tuple((int(maxima.rows[k]), int(maxima.cols[k])) for k in chain)
        seg = CurveSegment(pts, tuple(float(maxima.centers[k]) for k in chain))
        if seg.extent >= min_length:
            segs.append(seg)
    segs.sort(key=lambda s: (s.points[0][0], s.points[0][1]))
    return segs


# --------------------------------------------------------------------------
# Curves
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TransitionCurve:
    """A transition line with one (sub-pixel) plunger position per row over a
    contiguous row range. Rows missing from the raw chain are interpolated."""

    rows: np.ndarray
    centers: np.ndarray
    interpolated: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    @property
    def first_row(self) -> int:
        return int(self.rows[0])

    @property
    def last_row(self) -> int:
        return int(self.rows[-1])

    @property
    def extent(self) -> int:
        return self.last_row - self.first_row + 1

    @property
    def mean_center(self) -> float:
        return float(np.mean(self.centers))

    def center_at(self, row: float) -> float | None:
        if row < self.first_row or row > self.last_row:
            return None
        return float(np.interp(row, self.rows, self.centers))

    def plunger_at(self, grid: ScanGrid, barrier: float) -> float | None:
        """Plunger voltage of the curve at a first-barrier voltage."""
        step = grid.step_axis
        row = (barrier - step[0]) / (step[1] - step[0])
        c = self.center_at(row)
        if c is None:
            return None
        return _sweep_voltage(grid, c)


def _sweep_voltage(grid: ScanGrid, center: float) -> float:
    ax = grid.plan.sweep[0]
    dv = (ax.stop - ax.start) / (grid.plan.sweep_points - 1)
    return ax.start + center * dv


def _curve_from_segments(segs: Sequence[CurveSegment]) -> TransitionCurve:
    by_row: dict[int, list[float]] = {}
    for s in segs:
        for (r, _), c in zip(s.points, s.centers or [float(p[1]) for p in s.points]):
            by_row.setdefault(r, []).append(c)
    known = np.array(sorted(by_row))
    vals = np.array([np.mean(by_row[r]) for r in known])
    rows = np.arange(known[0], known[-1] + 1)
    centers = np.interp(rows, known, vals)
    interp = ~np.isin(rows, known)
    return TransitionCurve(rows, centers, interp)


def _segments_compatible(a: CurveSegment, b: CurveSegment, merge_gap: int, merge_distance: float) -> bool:
    ra, rb = a.rows, b.rows
    ca = np.array(a.centers) if a.centers else a.cols.astype(float)
    cb = np.array(b.centers) if b.centers else b.cols.astype(float)
    gap = max(ra[0], rb[0]) - min(ra[-1], rb[-1])
    if gap > merge_gap:
        return False
    if gap <= 0:
        lo, hi = max(ra[0], rb[0]), min(ra[-1], rb[-1])
        grid_rows = np.arange(lo, hi + 1)
        d = np.abs(np.interp(grid_rows, ra, ca) - np.interp(grid_rows, rb, cb))
        return float(np.median(d)) <= merge_distance
    lower, upper = (a, b) if ra[-1] < rb[0] else (b, a)
    lc = np.array(lower.centers) if lower.centers else lower.cols.astype(float)
    uc = np.array(upper.centers) if upper.centers else upper.cols.astype(float)
    d = math.hypot(upper.rows[0] - lower.rows[-1], uc[0] - lc[-1])
    return d <= merge_distance


def merge_and_order(segments: Sequence[CurveSegment], merge_gap: int = 3, merge_distance: float = 6.0,
                    outlier_factor: float = 2.0) -> list[TransitionCurve]:
    """Merge overlapping or abutting segments, drop outlying end curves, and
    sort by mean plunger position (first = 1e candidate, second = 2e)."""
    n = len(segments)
    if n == 0:
        return []
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if _segments_compatible(segments[i], segments[j], merge_gap, merge_distance):
                parent[find(i)] = find(j)
    groups: dict[int, list[CurveSegment]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(segments[i])
    curves = [_curve_from_segments(g) for g in groups.values()]
    curves.sort(key=lambda c: c.mean_center)
    return remove_outlier_curves(curves, outlier_factor)


def remove_outlier_curves(curves: list[TransitionCurve], factor: float = 2.0) -> list[TransitionCurve]:
    """Drop end curves separated from their neighbor by more than ``factor``
    times the typical spacing of the remaining curves. Needs >= 3 curves."""
    curves = sorted(curves, key=lambda c: c.mean_center)
    changed = True
    while changed and len(curves) >= 3:
        changed = False
        means = np.array([c.mean_center for c in curves])
        gaps = np.diff(means)
        if gaps[0] > factor * float(np.median(gaps[1:])):
            curves = curves[1:]
            changed = True
            continue
        if gaps[-1] > factor * float(np.median(gaps[:-1])):
            curves = curves[:-1]
            changed = True
    return curves


# --------------------------------------------------------------------------
# Summaries
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TransitionSummary:
    v1e: float | None = None
    v2e: float | None = None
    addition_voltage: float | None = None
    cutoff_pb_difference: float | None = None
    scan_margin: float | None = None
    success: bool = False
    cutoff_plunger: float | None = None
    cutoff_barrier: float | None = None
    note: str = ""

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TransitionSummary":
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__ if k in d})


def summarize_transitions(curves: Sequence[TransitionCurve], grid: ScanGrid,
                          min_length: int | None = None) -> TransitionSummary:
    """1e/2e voltages at the barrier-axis midpoint, the 1e visibility cutoff,
    and the scan margin. ``success`` means at least one curve of the
    required extent was found."""
    nrows = grid.plan.step_points
    if min_length is None:
        min_length = AnalysisConfig().min_length(nrows)
    good = [c for c in curves if c.extent >= min_length]
    if not good:
        return TransitionSummary(success=False, note="no transition curve")
    mid = (nrows - 1) / 2.0
    step = grid.step_axis

    def at_mid(c):
        x = c.center_at(mid)
        return None if x is None else _sweep_voltage(grid, x)

    v1e = at_mid(good[0])
    v2e = at_mid(good[1]) if len(good) > 1 else None
    add = v2e - v1e if (v1e is not None and v2e is not None) else None
    if add is not None and add <= 0:
        add = None
    c0 = good[0]
    cut_p = _sweep_voltage(grid, float(c0.centers[0]))
    cut_b = float(step[c0.first_row])
    margin = v1e - grid.plan.sweep[0].start if v1e is not None else None
    return TransitionSummary(v1e, v2e, add, cut_p - cut_b, margin, True, cut_p, cut_b)


def detection_floor(grid: ScanGrid, filtered: ScanGrid, config: AnalysisConfig) -> float:
    """Maxima floor: ``noise_k`` x the filtered white-noise level, or
    ``relative_floor`` x the strongest response, whichever is larger."""
    if config.floor is not None:
        return config.floor
    noise = estimate_row_noise(grid.values) * derivative_kernel_gain(config.sigma)
    return max(config.noise_k * noise, config.relative_floor * float(filtered.values.max()), 0.0)


def analyze_scan(grid: ScanGrid, config: AnalysisConfig | None = None) -> tuple[TransitionSummary, list[TransitionCurve]]:
    """Run the full detection chain on one charge-sensing scan."""
    cfg = config or AnalysisConfig()
    filtered = highpass_background(grid, cfg.sigma)
    floor = detection_floor(grid, filtered, cfg)
    maxima = detect_maxima(filtered, cfg.window, floor)
    maxima = refine_centers(maxima, filtered.values, cfg.refine_search, cfg.sigma)
    min_len = cfg.min_length(grid.plan.step_points)
    segs = chain_segments(maxima, cfg.slope_window, min_len, cfg.max_gap)
    curves = merge_and_order(segs, cfg.merge_gap, cfg.merge_distance, cfg.outlier_factor)
    return summarize_transitions(curves, grid, min_len), curves


def validate_margin(summaries: Sequence[TransitionSummary], factor: float = 2.0) -> list[bool | None]:
    """Flag v1e points whose scan margin exceeds ``factor`` x the median
    addition voltage of the set (strict). ``None`` where no v1e exists.

    Raises:
        ValueError: if no summary carries an addition voltage.
    """
    adds = [s.addition_voltage for s in summaries if s.addition_voltage is not None]
    if not adds:
        raise ValueError("no addition voltages available for the margin threshold")
    threshold = factor * float(np.median(adds))
    return [None if s.scan_margin is None else bool(s.scan_margin > threshold) for s in summaries]


# --------------------------------------------------------------------------
# Electron temperature
# --------------------------------------------------------------------------


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class TemperatureFit:
    temperature: float
    uncertainty: float
    fit_uncertainty: float
    center: float
    amplitude: float
    offset: float
    background_slope: float
    residual_rms: float
    integrated: np.ndarray
    corrected: np.ndarray


def _tanh_model(p, v, lever_arm):
    amp, v0, temp, off, slope = p
    return amp * np.tanh(lever_arm * (v - v0) / (2.0 * KB_OVER_E * temp)) + off + slope * v


def fit_electron_temperature(voltage: np.ndarray, signal: np.ndarray, lever_arm: float,
                             lever_arm_sigma: float = 0.01) -> TemperatureFit:
    """Electron temperature from a 1D lock-in trace across one transition.

    The trace is integrated cumulatively; the integral is fitted with
    ``A*tanh(alpha*(V - V0) / (2 k_B T)) + B`` plus a linear background
    term, all by least squares. The reported uncertainty propagates the
    lever-arm uncertainty (T scales as 1/alpha).

    Raises:
        FitError: if the solver does not converge to a positive temperature.
    """
    if not 0 < lever_arm <= 1:
        raise ValueError("lever_arm must lie in (0, 1]")
    v = np.asarray(voltage, dtype=float)
    s = np.asarray(signal, dtype=float)
    if v.shape != s.shape or v.size < 8:
        raise ValueError("voltage and signal must be equal-length traces with >= 8 samples")
    order = np.argsort(v)
    v, s = v[order], s[order]
    integ = cumulative_simpson(s, x=v, initial=0.0)

    # seeds from the raw peak: position, half-maximum width, step height
    base = float(np.median(np.r_[s[: max(2, len(s) // 10)], s[-max(2, len(s) // 10):]]))
    peak = s - base
    k = int(np.argmax(peak))
    above = v[peak >= 0.5 * peak[k]]
    fwhm = max(float(above[-1] - above[0]), 2 * float(np.min(np.diff(v))))
    t0 = fwhm * lever_arm / (2.0 * np.arccosh(np.sqrt(2.0)) * 2.0 * KB_OVER_E)
    a0 = 0.5 * float(np.trapezoid(peak, v)) if hasattr(np, "trapezoid") else 0.5 * float(np.trapz(peak, v))
    p0 = [a0, float(v[k]), t0, float(np.mean(integ)), base]
    span = float(v[-1] - v[0])
    scale = [abs(a0) or 1.0, span / 10, t0, abs(a0) or 1.0, (abs(a0) or 1.0) / span]

    def resid(p):
        return _tanh_model(p, v, lever_arm) - integ

    res = optimize.least_squares(resid, p0, x_scale=scale, method="lm", xtol=1e-14, ftol=1e-14,
                                 gtol=1e-14, max_nfev=20000)
    amp, v0, temp, off, slope = res.x
    rms = float(np.sqrt(np.mean(res.fun ** 2)))
    if not res.success or not np.isfinite(temp) or temp <= 0:
        raise FitError(f"electron temperature fit failed ({res.message}); residual rms {rms:.3g}")
    temp = float(temp)
    fit_sigma = float("nan")
    try:
        jac = res.jac
        dof = max(1, len(v) - len(p0))
        cov = np.linalg.pinv(jac.T @ jac) * (2 * res.cost / dof)
        fit_sigma = float(np.sqrt(max(cov[2, 2], 0.0)))
    except np.linalg.LinAlgError:
        pass
    return TemperatureFit(
        temperature=temp, uncertainty=temp * lever_arm_sigma / lever_arm, fit_uncertainty=fit_sigma,
        center=float(v0), amplitude=float(amp), offset=float(off), background_slope=float(slope),
        residual_rms=rms, integrated=integ, corrected=integ - slope * v)


# --------------------------------------------------------------------------
# Summary files
# --------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def summaries_to_csv(rows: Sequence[tuple[str, str, TransitionSummary]]) -> str:
    out = [f"# {SUMMARY_FORMAT} v{SUMMARY_FORMAT_VERSION}", ",".join(SUMMARY_COLUMNS)]
    for device_id, dot, s in rows:
        out.append(",".join([device_id, dot, _fmt(s.v1e), _fmt(s.v2e), _fmt(s.addition_voltage),
                             _fmt(s.cutoff_pb_difference), _fmt(s.scan_margin), _fmt(s.success)]))
    return "\n".join(out) + "\n"


def summaries_from_csv(text: str) -> list[tuple[str, str, TransitionSummary]]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != f"# {SUMMARY_FORMAT} v{SUMMARY_FORMAT_VERSION}":
        raise ValueError(f"expected header '# {SUMMARY_FORMAT} v{SUMMARY_FORMAT_VERSION}'")
    if tuple(lines[1].split(",")) != SUMMARY_COLUMNS:
        raise ValueError("unexpected summary columns")
    out = []
    for ln in lines[2:]:
        f = ln.split(",")
        num = [float(x) if x else None for x in f[2:7]]
        out.append((f[0], f[1], TransitionSummary(*num, success=f[7] == "1")))
    return out


def write_summaries(path: str | Path, rows) -> None:
    Path(path).write_text(summaries_to_csv(rows))

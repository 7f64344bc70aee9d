"""Measurement campaigns: run the pipeline over a wafer, persist every scan
and record, and aggregate wafer statistics.

Artifact tree::

    {out}/{wafer-id}/manifest.json
    {out}/{wafer-id}/ground-truth.json          (optional)
    {out}/{wafer-id}/die-XX-YY/dev-N/record.json
    {out}/{wafer-id}/die-XX-YY/dev-N/{scan-kind}-{index}.csv
    {out}/{wafer-id}/report/...
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from . import __version__
from .instrument import (SCAN_FORMAT_VERSION, InstrumentModel, NoiseModel, ProbeSession,
                         ScanFormatError, read_scan)
from .stats import (distribution, dot_mirror_pairs, matched_pair_sigma, one_electron_statistics,
                    per_gate_std, success_rate, voltage_sharing, yield_rollup)
from .transitions import TransitionSummary, analyze_scan, summaries_to_csv, validate_margin
from .tuneup import RECORD_FORMAT_VERSION, DeviceRecord, PipelineConfig, run_device_pipeline
from .wafer import (FaultRates, InjectedFault, Wafer, WaferSpec, generate_wafer, spec_from_dict,
                    spec_to_dict, twelve_dot_layout)

MANIFEST_FORMAT = "cryoprobe.manifest"
MANIFEST_VERSION = 1
REPORT_FORMAT = "cryoprobe.report"
REPORT_VERSION = 1
STORE_CHOICES = ("all", "charge-sensing", "none")


class CampaignError(RuntimeError):
    pass


class SchemaVersionError(CampaignError):
    pass


class NotACampaignError(CampaignError, FileNotFoundError):
    """Path holds no campaign manifest."""


class PartialCampaignError(CampaignError):
    """Some devices could not be written; the manifest lists them."""

    def __init__(self, message: str, manifest: Path | None):
        super().__init__(message)
        self.manifest = manifest


# --------------------------------------------------------------------------
# Config
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CampaignConfig:
    wafer: WaferSpec = field(default_factory=WaferSpec)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    noise: NoiseModel = field(default_factory=NoiseModel)
    instrument: InstrumentModel = field(default_factory=InstrumentModel)
    parallel: int = 1
    charge_sensing_devices_per_die: int = 1
    store_scans: str = "all"
    write_ground_truth: bool = True
    out: str | None = None

    def __post_init__(self):
        if self.parallel < 1:
            raise ValueError("parallel must be >= 1")
        if self.charge_sensing_devices_per_die < 0:
            raise ValueError("charge_sensing_devices_per_die must be >= 0")
        if self.store_scans not in STORE_CHOICES:
            raise ValueError(f"store_scans must be one of {STORE_CHOICES}")

    def to_dict(self) -> dict:
        """Everything that determines the persisted bytes (no paths, no
        parallelism)."""
        return {
            "wafer": spec_to_dict(self.wafer),
            "pipeline": self.pipeline.to_dict(),
            "noise": dataclasses.asdict(self.noise),
            "instrument": dataclasses.asdict(self.instrument),
            "charge_sensing_devices_per_die": self.charge_sensing_devices_per_die,
            "store_scans": self.store_scans,
            "write_ground_truth": self.write_ground_truth,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: Mapping | None) -> "CampaignConfig":
        data = dict(data or {})
        known = {"wafer", "pipeline", "noise", "instrument", "campaign"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        camp = dict(data.get("campaign") or {})
        allowed = {"parallel", "charge_sensing_devices_per_die", "store_scans",
                   "write_ground_truth", "out"}
        bad = set(camp) - allowed
        if bad:
            raise ValueError(f"unknown campaign keys: {sorted(bad)}")
        noise = NoiseModel(**(data.get("noise") or {}))
        inst = InstrumentModel(**(data.get("instrument") or {}))
        return cls(wafer=spec_from_dict(data.get("wafer") or {}),
                   pipeline=PipelineConfig.from_dict(data.get("pipeline")),
                   noise=noise, instrument=inst, **camp)

    def replace(self, **kw) -> "CampaignConfig":
        return dataclasses.replace(self, **kw)


def load_campaign_config(path: str | Path) -> CampaignConfig:
    """Read a YAML campaign config (sections: wafer, pipeline, noise,
    instrument, campaign)."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {p} does not exist")
    return CampaignConfig.from_dict(yaml.safe_load(p.read_text()) or {})


def dump_campaign_config(config: CampaignConfig) -> str:
    d = config.to_dict()
    d["campaign"] = {"parallel": config.parallel,
                     "charge_sensing_devices_per_die": d.pop("charge_sensing_devices_per_die"),
                     "store_scans": d.pop("store_scans"),
                     "write_ground_truth": d.pop("write_ground_truth")}
    if config.out is not None:
        d["campaign"]["out"] = config.out
    d["wafer"].pop("layout", None)
    return yaml.safe_dump(d, sort_keys=True)


def table1_fixture(spec: WaferSpec, n_faulty: int = 9) -> WaferSpec:
    """Scripted faults: ``n_faulty`` devices each get one marginal gate on
    the charge-sensor side, and random faults are switched off."""
    lay = spec.layout
    sensor_gates = [g for d in lay.dots if d.side == "sensor" for g in (d.barriers[0], d.plunger, d.barriers[1])]
    n_dev = spec.die_count * spec.devices_per_die
    if n_faulty > n_dev:
        raise ValueError("more faulty devices than devices")
    faults = []
    for k in range(n_faulty):
        flat = (k * n_dev) // n_faulty
        die, dev = divmod(flat, spec.devices_per_die)
        faults.append(InjectedFault(die, (dev + k) % spec.devices_per_die, "marginal",
                                    sensor_gates[(5 * k) % len(sensor_gates)]))
    disorder = dataclasses.replace(spec.disorder, fault_rates=FaultRates())
    return dataclasses.replace(spec, disorder=disorder, injected_faults=tuple(faults))


# --------------------------------------------------------------------------
# Running
# --------------------------------------------------------------------------


_worker_state: dict[str, Any] = {}


def _init_worker(config: CampaignConfig) -> None:
    _worker_state["config"] = config
    _worker_state["wafer"] = generate_wafer(config.wafer)


def device_dir(root: Path, wafer: Wafer, die: int, device: int) -> Path:
    return root / wafer.dies[die].label / f"dev-{device}"


def _run_one(job: tuple[int, int, str | None]) -> tuple[int, int, str, str | None]:
    die, device, root = job
    cfg: CampaignConfig = _worker_state["config"]
    wafer: Wafer = _worker_state["wafer"]
    cs = device < cfg.charge_sensing_devices_per_die
    with ProbeSession(wafer, die, device, cfg.noise, cfg.instrument) as session:
        res = run_device_pipeline(session, cfg.pipeline, charge_sensing=cs)
    text = res.record.dumps()
    error = None
    if root is not None:
        try:
            d = device_dir(Path(root), wafer, die, device)
            d.mkdir(parents=True, exist_ok=True)
            for ref, grid in res.scans:
                if cfg.store_scans == "all" or (cfg.store_scans == "charge-sensing"
                                                and ref.kind != "barrier-barrier"):
                    grid.write(d / ref.file)
            (d / "record.json").write_text(text)
        except OSError as exc:
            error = f"{type(exc).__name__}: {exc}"
    return die, device, text, error


@dataclass
class CampaignResult:
    report: "CampaignReport"
    records: list[DeviceRecord]
    root: Path | None = None
    wafer: Wafer | None = None


def run_campaign(config: CampaignConfig, out: str | Path | None = None) -> CampaignResult:
    """Generate the wafer, run every device, persist, aggregate.

    Raises:
        PartialCampaignError: if writing some device output failed; the
            manifest records which devices are missing.
    """
    out = out if out is not None else config.out
    wafer = generate_wafer(config.wafer)
    root = None
    if out is not None:
        root = Path(out) / wafer.wafer_id
        root.mkdir(parents=True, exist_ok=True)
        if config.write_ground_truth:
            (root / "ground-truth.json").write_text(wafer.dumps())
    jobs = [(d.index, k, str(root) if root else None)
            for d in wafer.dies for k in range(config.wafer.devices_per_die)]
    if config.parallel > 1:
        with ProcessPoolExecutor(config.parallel, initializer=_init_worker, initargs=(config,)) as ex:
            results = list(ex.map(_run_one, jobs, chunksize=max(1, len(jobs) // (4 * config.parallel))))
    else:
        _worker_state["config"] = config
        _worker_state["wafer"] = wafer
        results = [_run_one(j) for j in jobs]
    results.sort(key=lambda r: (r[0], r[1]))
    records = [DeviceRecord.loads(text) for _, _, text, _ in results]
    errors = {f"{wafer.dies[d].label}/dev-{k}": e for d, k, _, e in results if e}
    report = build_report(records, config)
    if root is not None:
        status = "partial" if errors else "complete"
        try:
            write_report(report, root / "report", records)
        except OSError as exc:
            errors["report"] = f"{type(exc).__name__}: {exc}"
            status = "partial"
        manifest = write_manifest(root, config, wafer, records, status, errors)
        if errors:
            raise PartialCampaignError(f"{len(errors)} outputs failed to write; see {manifest}", manifest)
    return CampaignResult(report, records, root, wafer)


def write_manifest(root: Path, config: CampaignConfig, wafer: Wafer, records, status, errors) -> Path:
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "record_version": RECORD_FORMAT_VERSION,
        "scan_version": SCAN_FORMAT_VERSION,
        "package_version": __version__,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "status": status,
        "errors": errors,
        "wafer_id": wafer.wafer_id,
        "seed": wafer.spec.seed,
        "config_hash": config.digest(),
        "config": config.to_dict(),
        "devices": [f"{r.die_label}/dev-{r.device}" for r in records],
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return path


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------


def _f(x):
    if x is None:
        return None
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


@dataclass
class CampaignReport:
    """Wafer statistics. ``to_dict`` is the canonical serialization and
    contains no timestamps."""

    provenance: dict
    yield_rows: list
    vt_by_gate: dict
    vt_pairs: dict | None
    v1e_pairs: dict | None
    one_electron: dict | None
    voltage_sharing: dict | None
    success: dict | None
    margin: dict | None
    summaries: list = field(default_factory=list)
    devices: list = field(default_factory=list)
    flagged_scans: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"format": REPORT_FORMAT, "version": REPORT_VERSION,
                **{f.name: getattr(self, f.name) for f in dataclasses.fields(self)}}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: Mapping) -> "CampaignReport":
        if d.get("format") != REPORT_FORMAT or d.get("version") != REPORT_VERSION:
            raise SchemaVersionError(f"report schema {d.get('format')!r} v{d.get('version')!r} "
                                     f"unsupported (expected {REPORT_FORMAT} v{REPORT_VERSION})")
        return cls(**{f.name: d[f.name] for f in dataclasses.fields(cls)})


def _pair_dict(res) -> dict:
    return {"sigma": _f(res.sigma), "pooled_sigma": _f(res.pooled_sigma), "n_samples": res.n_samples,
            "n_pairs": len(res.counts), "dropped_pairs": [list(p) for p in res.dropped],
            "pairs": {f"{a}-{b}": n for (a, b), n in sorted(res.counts.items())}}


def _summary_rows(records):
    rows = []
    for r in records:
        for dot in sorted(r.summaries, key=_dot_key):
            rows.append((r.device_id, dot, r.summaries[dot]))
    return rows


def _dot_key(d: str):
    return (d[0], int(d[1:]) if d[1:].isdigit() else 0)


def build_report(records: Sequence[DeviceRecord], config: CampaignConfig | Mapping,
                 flagged: Sequence[str] = ()) -> CampaignReport:
    """Aggregate records into wafer statistics. Sections without data are
    left empty with a note instead of failing."""
    cfg_dict = config.to_dict() if isinstance(config, CampaignConfig) else dict(config)
    chash = hashlib.sha256(json.dumps(cfg_dict, sort_keys=True).encode()).hexdigest()
    wafer_spec = cfg_dict.get("wafer", {})
    layout = twelve_dot_layout()
    notes = []
    prov = {"config_hash": chash, "seed": wafer_spec.get("seed"), "wafer_id": wafer_spec.get("wafer_id"),
            "sige_barrier_depth": wafer_spec.get("sige_barrier_depth"), "package_version": __version__,
            "record_version": RECORD_FORMAT_VERSION, "scan_version": SCAN_FORMAT_VERSION,
            "n_devices": len(records)}

    yr = yield_rollup(records) if records else None
    yield_rows = [[n, g, t, _f(p)] for n, g, t, p in yr.rows()] if yr else []

    vts = [r.gate_vt for r in records]
    vt_by_gate = {}
    for g in layout.gate_ids:
        dist = distribution([v.get(g) for v in vts], bins=20)
        vt_by_gate[g] = {"n": dist.n, "mean": _f(dist.mean), "std": _f(dist.std),
                         "edges": [float(e) for e in dist.edges], "counts": [int(c) for c in dist.counts]}
    vt_pairs = None
    try:
        res = matched_pair_sigma(vts, layout.mirror_pairs)
        vt_pairs = _pair_dict(res)
        vt_pairs["per_gate_std"] = _f(per_gate_std(vts, layout.array_gates))
    except ValueError as exc:
        notes.append(f"VT matched pairs: {exc}")

    cs_records = [r for r in records if r.charge_sensing]
    rows = _summary_rows(cs_records)
    flagged_set = set(flagged)
    sums = [s for dev, dot, s in rows if f"{dev}/{dot}" not in flagged_set]

    v1e_pairs = None
    v1e_res = None
    try:
        v1e_vals = [{d: s.v1e for d, s in r.summaries.items()
                     if f"{r.device_id}/{d}" not in flagged_set} for r in cs_records]
        v1e_res = matched_pair_sigma(v1e_vals, dot_mirror_pairs(layout))
        v1e_pairs = _pair_dict(v1e_res)
    except ValueError as exc:
        notes.append(f"1e matched pairs: {exc}")

    one_e = None
    if len(sums) >= 2:
        oe = one_electron_statistics(sums, v1e_res)
        one_e = {"v1e": oe.v1e.to_dict(), "addition_voltage": oe.addition_voltage.to_dict(),
                 "cutoff_pb_difference": oe.cutoff_pb_difference.to_dict(),
                 "v1e_sigma": _f(oe.v1e_sigma), "ratio": _f(oe.ratio),
                 "ratio_uncertainty": _f(oe.ratio_uncertainty)}
        one_e = json.loads(json.dumps(one_e, default=_f), parse_constant=lambda c: None)
    else:
        notes.append("1e statistics: fewer than 2 charge-sensing summaries")

    sharing = None
    by_dev = {}
    for dev, dot, s in rows:
        if f"{dev}/{dot}" not in flagged_set:
            by_dev.setdefault(dev, []).append(s)
    if by_dev:
        vs = voltage_sharing(by_dev)
        if vs.devices:
            sharing = {"median_success": _f(vs.median_success), "excluded_devices": list(vs.excluded_devices),
                       "excluded_dots": vs.excluded_dots,
                       "devices": {k: {"common_voltage": _f(d.common_voltage), "n0": d.n0, "n1": d.n1,
                                       "n2": d.n2, "excluded": d.excluded}
                                   for k, d in vs.devices.items()}}
    if sharing is None:
        notes.append("voltage sharing: no device with both v1e and v2e")

    success = None
    if sums:
        success = {"rate": _f(success_rate(sums)), "n_scans": len(sums),
                   "n_success": sum(bool(s.success) for s in sums), "n_flagged": len(flagged_set)}
    else:
        notes.append("success rate: no charge-sensing scans")

    margin = None
    try:
        flags = validate_margin(sums)
        tested = [f for f in flags if f is not None]
        med = float(np.median([s.addition_voltage for s in sums if s.addition_voltage is not None]))
        margin = {"threshold": 2 * med, "n": len(tested), "n_pass": int(sum(tested)),
                  "pass_rate": _f(sum(tested) / len(tested)) if tested else None}
    except ValueError as exc:
        notes.append(f"margin validation: {exc}")

    devices = []
    for r in records:
        n_ok = sum(bool(s.success) for s in r.summaries.values())
        devices.append({"device_id": r.device_id, "die_label": r.die_label, "device": r.device,
                        "x": r.x, "y": r.y, "good": bool(yr.device_good[r.device_id]) if yr else None,
                        "charge_sensing": r.charge_sensing, "n_scans": len(r.summaries),
                        "n_success": n_ok, "n_faults": len(r.faults)})
    summ = [[dev, dot, s.to_dict()] for dev, dot, s in rows]
    summ = json.loads(json.dumps(summ, default=_f))
    return CampaignReport(prov, yield_rows, vt_by_gate, vt_pairs, v1e_pairs, one_e, sharing, success,
                          margin, summ, devices, sorted(flagged_set), notes)


def write_report(report: CampaignReport, out: Path, records: Sequence[DeviceRecord] | None = None) -> None:
    """Machine-readable report plus comma-separated tables."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.dumps())
    lines = ["component,good,total,percent"] + [f"{n},{g},{t},{p!r}" for n, g, t, p in report.yield_rows]
    (out / "yield.csv").write_text("\n".join(lines) + "\n")
    lines = ["gate,n,mean,std"] + [f"{g},{v['n']},{v['mean']!r},{v['std']!r}"
                                    for g, v in report.vt_by_gate.items()]
    (out / "vt_by_gate.csv").write_text("\n".join(lines) + "\n")
    rows = [(dev, dot, TransitionSummary.from_dict(s)) for dev, dot, s in report.summaries]
    (out / "summaries.csv").write_text(summaries_to_csv(rows))
    if report.voltage_sharing:
        lines = ["device,common_voltage,n0,n1,n2,excluded"]
        for k, d in sorted(report.voltage_sharing["devices"].items()):
            lines.append(f"{k},{d['common_voltage']!r},{d['n0']},{d['n1']},{d['n2']},{d['excluded']}")
        (out / "voltage_sharing.csv").write_text("\n".join(lines) + "\n")
    if report.one_electron:
        lines = ["metric,bin_left,bin_right,count"]
        for name in ("v1e", "addition_voltage", "cutoff_pb_difference"):
            d = report.one_electron[name]
            for lo, hi, c in zip(d["edges"][:-1], d["edges"][1:], d["counts"]):
                lines.append(f"{name},{lo!r},{hi!r},{c}")
        (out / "histograms.csv").write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# Analysis from disk
# --------------------------------------------------------------------------


def read_manifest(root: Path) -> dict:
    path = root / "manifest.json"
    if not path.exists():
        raise NotACampaignError(f"no manifest.json in {root}")
    m = json.loads(path.read_text())
    if m.get("format") != MANIFEST_FORMAT or m.get("version") != MANIFEST_VERSION:
        raise SchemaVersionError(f"manifest schema {m.get('format')!r} v{m.get('version')!r} is not "
                                 f"supported (expected {MANIFEST_FORMAT} v{MANIFEST_VERSION})")
    return m


def find_campaign_root(path: str | Path) -> Path:
    """Accept either the wafer directory or its parent output directory."""
    p = Path(path)
    if (p / "manifest.json").exists():
        return p
    subs = sorted(q for q in p.iterdir() if (q / "manifest.json").exists()) if p.is_dir() else []
    if len(subs) == 1:
        return subs[0]
    raise NotACampaignError(f"{p} is not a campaign directory")


def load_records(root: Path) -> list[DeviceRecord]:
    recs = []
    for path in sorted(root.glob("die-*/dev-*/record.json")):
        d = json.loads(path.read_text())
        if d.get("version") != RECORD_FORMAT_VERSION:
            raise SchemaVersionError(f"{path}: record schema v{d.get('version')} is not supported "
                                     f"(expected v{RECORD_FORMAT_VERSION})")
        recs.append(DeviceRecord.from_dict(d))
    recs.sort(key=lambda r: (r.die, r.device))
    return recs


def analyze(path: str | Path) -> CampaignReport:
    """Recompute the campaign report from stored records and scans, without
    the simulator. Charge-sensing scans present on disk are re-analyzed;
    unreadable scans are flagged and left out."""
    root = find_campaign_root(path)
    manifest = read_manifest(root)
    if manifest.get("record_version") != RECORD_FORMAT_VERSION:
        raise SchemaVersionError(f"campaign written with record schema v{manifest.get('record_version')}, "
                                 f"this version reads v{RECORD_FORMAT_VERSION}")
    if manifest.get("scan_version") != SCAN_FORMAT_VERSION:
        raise SchemaVersionError(f"campaign written with scan format v{manifest.get('scan_version')}, "
                                 f"this version reads v{SCAN_FORMAT_VERSION}")
    config = manifest["config"]
    pipeline = PipelineConfig.from_dict(config.get("pipeline"))
    records = load_records(root)
    flagged = []
    for r in records:
        ddir = root / r.die_label / f"dev-{r.device}"
        for ref in r.scans:
            if ref.kind != "plunger-vs-barriers":
                continue
            f = ddir / ref.file
            if not f.exists():
                if config.get("store_scans", "all") != "none":
                    flagged.append(f"{r.device_id}/{ref.dots[0]}")
                continue
            try:
                grid = read_scan(f)
                summary, _ = analyze_scan(grid, pipeline.analysis)
            except (ScanFormatError, ValueError):
                flagged.append(f"{r.device_id}/{ref.dots[0]}")
                continue
            r.summaries[ref.dots[0]] = summary
    return build_report(records, config, flagged)

"""Static figures and tables for a campaign report."""
from __future__ import annotations

import re
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .campaign import CampaignReport, find_campaign_root, load_records, write_report  # noqa: E402
from .instrument import ScanFormatError, read_scan  # noqa: E402
from .wafer import twelve_dot_layout  # noqa: E402

SUPPORTED_FORMATS = ("svg", "pdf")
_LABEL = re.compile(r"die-(\d+)-(\d+)")


def _save(fig, path: Path, fmt: str) -> Path:
    # fixed metadata keeps vector output reproducible
    meta = {"Date": None} if fmt == "svg" else {"CreationDate": None}
    out = path.with_suffix("." + fmt)
    with matplotlib.rc_context({"svg.hashsalt": "cryoprobe"}):
        fig.savefig(out, format=fmt, metadata=meta)
    plt.close(fig)
    return out


def plot_vt_histograms(report: CampaignReport, gates: Sequence[str]):
    """One panel with a histogram per gate, in array order."""
    n = len(gates)
    cols = 7
    rows = int(np.ceil(n / cols))
    fig, axs = plt.subplots(rows, cols, figsize=(2.0 * cols, 1.6 * rows), sharex=True)
    axs = np.atleast_1d(axs).ravel()
    for ax, g in zip(axs, gates):
        h = report.vt_by_gate.get(g, {})
        edges, counts = np.asarray(h.get("edges", [])), np.asarray(h.get("counts", []))
        if len(counts):
            ax.stairs(counts, edges, fill=True, alpha=0.7)
        ax.set_title(g, fontsize=8)
        ax.tick_params(labelsize=6)
    for ax in axs[n:]:
        ax.set_visible(False)
    fig.supxlabel("VT (V)")
    fig.tight_layout()
    return fig


def plot_one_electron(report: CampaignReport):
    oe = report.one_electron
    names = [("v1e", "1e voltage (V)"), ("addition_voltage", "addition voltage (V)"),
             ("cutoff_pb_difference", "plunger - barrier at cutoff (V)")]
    fig, axs = plt.subplots(1, 3, figsize=(11, 3))
    for ax, (key, label) in zip(axs, names):
        d = oe[key]
        if d["n"]:
            ax.stairs(d["counts"], d["edges"], fill=True, alpha=0.7)
            ax.set_title(f"mean {d['mean']:.3f} V, std {d['std']:.3f} V", fontsize=8)
        ax.set_xlabel(label)
    axs[0].set_ylabel("count")
    fig.tight_layout()
    return fig


def plot_wafer_map(report: CampaignReport, key: str, title: str):
    devs = report.devices
    fig, ax = plt.subplots(figsize=(5, 5))
    x = [d["x"] for d in devs]
    y = [d["y"] for d in devs]
    v = [float(d[key]) if d[key] is not None else np.nan for d in devs]
    sc = ax.scatter(x, y, c=v, s=30, cmap="viridis", marker="s")
    ax.add_patch(plt.Circle((0, 0), 1.0, fill=False, lw=0.8))
    ax.set_aspect("equal")
    ax.set_xlim(-1.05, 1.05)
    ax.set_ylim(-1.05, 1.05)
    ax.set_title(title)
    fig.colorbar(sc, ax=ax, shrink=0.8)
    return fig


def _mosaic(grids, shape=(3, 4)) -> np.ndarray:
    tiles = []
    for g in grids:
        v = g.values
        lo, hi = np.percentile(v, [1, 99])
        tiles.append(np.clip((v - lo) / (hi - lo + 1e-30), 0, 1))
    h, w = tiles[0].shape
    out = np.full((shape[0] * (h + 1), shape[1] * (w + 1)), np.nan)
    for k, t in enumerate(tiles[: shape[0] * shape[1]]):
        r, c = divmod(k, shape[1])
        if t.shape == (h, w):
            out[r * (h + 1): r * (h + 1) + h, c * (w + 1): c * (w + 1) + w] = t
    return out


def plot_gallery(root: Path, records) -> tuple[object | None, list[str]]:
    """Charge-sensing scans grouped by device and placed at die position."""
    notes = []
    cells = {}
    for r in records:
        if not r.charge_sensing:
            continue
        m = _LABEL.fullmatch(r.die_label)
        if not m:
            continue
        grids = []
        for ref in r.scans:
            if ref.kind != "plunger-vs-barriers":
                continue
            try:
                grids.append(read_scan(root / r.die_label / f"dev-{r.device}" / ref.file))
            except (OSError, ScanFormatError):
                notes.append(f"gallery: scan {r.device_id}/{ref.file} unreadable")
        if grids:
            cells[(int(m.group(1)), int(m.group(2)))] = _mosaic(grids)
    if not cells:
        return None, notes
    cmax = max(c for c, _ in cells) + 1
    rmax = max(r for _, r in cells) + 1
    fig, axs = plt.subplots(rmax, cmax, figsize=(1.6 * cmax, 1.3 * rmax), squeeze=False)
    for ax in axs.ravel():
        ax.set_axis_off()
    for (c, r), img in cells.items():
        ax = axs[rmax - 1 - r, c]
        ax.imshow(img, origin="lower", cmap="viridis", interpolation="nearest")
        ax.set_axis_on()
        ax.set_xticks([])
        ax.set_yticks([])
    fig.subplots_adjust(wspace=0.05, hspace=0.05)
    return fig, notes


def render_report(report: CampaignReport, out_dir: str | Path, fmt: str = "svg",
                  campaign_dir: str | Path | None = None) -> list[Path]:
    """Write figures (vector graphics) and tables for ``report``.

    Sections without data are skipped and listed in ``notes.txt``. The scan
    gallery needs ``campaign_dir`` to read stored scans.

    Raises:
        ValueError: unsupported format.
    """
    if fmt not in SUPPORTED_FORMATS:
        raise ValueError(f"unknown format {fmt!r}; supported formats: {', '.join(SUPPORTED_FORMATS)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    notes = list(report.notes)

    records = None
    root = None
    if campaign_dir is not None:
        root = find_campaign_root(campaign_dir)
        records = load_records(root)
    write_report(report, out, records)
    files += sorted(out.glob("*.csv")) + [out / "report.json"]

    line = twelve_dot_layout().line_gates
    if any(report.vt_by_gate.get(g, {}).get("n") for g in line):
        files.append(_save(plot_vt_histograms(report, line), out / "vt_histograms", fmt))
    else:
        notes.append("VT histograms omitted: no gate VTs")

    if report.one_electron:
        files.append(_save(plot_one_electron(report), out / "one_electron", fmt))
    else:
        notes.append("1e histograms omitted: no charge-sensing summaries")

    if report.devices:
        files.append(_save(plot_wafer_map(report, "n_faults", "fault flags per device"),
                           out / "wafer_map_faults", fmt))
        if any(d["charge_sensing"] for d in report.devices):
            files.append(_save(plot_wafer_map(report, "n_success", "successful charge-sensing scans"),
                               out / "wafer_map_success", fmt))
    else:
        notes.append("wafer maps omitted: no devices")

    if records is not None:
        fig, gnotes = plot_gallery(root, records)
        notes += gnotes
        if fig is not None:
            files.append(_save(fig, out / "scan_gallery", fmt))
        else:
            notes.append("scan gallery omitted: no stored charge-sensing scans")
    else:
        notes.append("scan gallery omitted: campaign directory not given")

    (out / "notes.txt").write_text("\n".join(notes) + ("\n" if notes else ""))
    files.append(out / "notes.txt")
    return files

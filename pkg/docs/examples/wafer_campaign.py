"""Run a reduced wafer campaign, then the analysis and figures from disk.

Run with ``python3 docs/examples/wafer_campaign.py /tmp/cryo``. The full
232-device default config takes under a minute; this uses 8 dies.
"""
import dataclasses
import sys
from pathlib import Path

from cryoprobe.campaign import CampaignConfig, analyze, run_campaign
from cryoprobe.report import render_report

out = Path(sys.argv[1] if len(sys.argv) > 1 else "cryoprobe-demo")
base = CampaignConfig()
cfg = base.replace(wafer=dataclasses.replace(base.wafer, die_count=8), parallel=2)

res = run_campaign(cfg, out)
rep = res.report
print(f"{len(res.records)} devices written under {res.root}")
for name, good, total, pct in rep.yield_rows:
    print(f"  {name:8s} {good}/{total} ({pct}%)")
if rep.success:
    print(f"1e extraction success: {rep.success['rate']:.1%} of {rep.success['n_scans']} scans")
if rep.voltage_sharing:
    print(f"median voltage-sharing success: {rep.voltage_sharing['median_success']:.1%}")

# analysis is a pure function of the files on disk
assert analyze(res.root).digest() == rep.digest()
for f in render_report(rep, out / "figures", "svg", res.root):
    print("wrote", f)

"""Tune up one simulated device and look at its charge-sensing scans.

Run with ``python3 docs/examples/single_device.py``.
"""
from cryoprobe.instrument import ProbeSession
from cryoprobe.transitions import analyze_scan
from cryoprobe.tuneup import PipelineConfig, run_device_pipeline
from cryoprobe.wafer import WaferSpec, generate_wafer

# a two-die wafer is enough to get a device
wafer = generate_wafer(WaferSpec(die_count=2, devices_per_die=1, seed=11))
session = ProbeSession(wafer, die=0, device=0)

result = run_device_pipeline(session, PipelineConfig(), charge_sensing=True)
rec = result.record
print(f"device {rec.device_id}: {sum(v is not None for v in rec.gate_vt.values())} gate VTs, "
      f"{sum(c is not None for c in rec.corners.values())} dot corners")
for key, why in sorted(rec.faults.items()):
    print(f"  fault {key}: {why}")

# re-run the transition analysis on the stored grids to get the curves too
for ref, grid in result.scans:
    if ref.kind != "plunger-vs-barriers":
        continue
    summary, curves = analyze_scan(grid)
    dot = ref.dots[0]
    if summary.success:
        print(f"{dot}: v1e={summary.v1e:.3f} V  addition={summary.addition_voltage * 1e3:.0f} mV  "
              f"{len(curves)} curves")
    else:
        print(f"{dot}: no 1e/2e pair ({summary.note})")


"""Command-line front end.

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 partial
failure (a manifest was written).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import yaml

from .campaign import (CampaignConfig, CampaignReport, PartialCampaignError, SchemaVersionError,
                       analyze, dump_campaign_config, find_campaign_root, load_campaign_config,
                       run_campaign, table1_fixture, write_report)
from .wafer import InjectedFault, generate_wafer

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3


def _config(args) -> CampaignConfig:
    cfg = load_campaign_config(args.config) if args.config else CampaignConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(wafer=dataclasses.replace(cfg.wafer, seed=args.seed))
    if getattr(args, "parallel", None) is not None:
        cfg = cfg.replace(parallel=args.parallel)
    return cfg


def cmd_wafer_gen(args) -> int:
    cfg = _config(args)
    wafer = generate_wafer(cfg.wafer)
    out = Path(args.out) / wafer.wafer_id
    out.mkdir(parents=True, exist_ok=True)
    (out / "ground-truth.json").write_text(wafer.dumps())
    print(f"{out / 'ground-truth.json'}  sha256={wafer.digest()}")
    return EXIT_OK


def _print_report(report: CampaignReport) -> None:
    for name, good, total, pct in report.yield_rows:
        print(f"{name:>13}: {good}/{total} ({pct:.1f}%)")
    if report.success:
        print(f"charge-sensing success: {report.success['rate']:.3f} of {report.success['n_scans']} scans")
    if report.voltage_sharing:
        print(f"voltage sharing median success: {report.voltage_sharing['median_success']:.3f}")
    for note in report.notes:
        print(f"note: {note}")


def cmd_campaign_run(args) -> int:
    cfg = _config(args)
    out = args.out or cfg.out or "campaign-out"
    try:
        res = run_campaign(cfg, out)
    except PartialCampaignError as exc:
        print(f"partial failure: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    _print_report(res.report)
    print(f"report sha256={res.report.digest()}")
    print(f"artifacts in {res.root}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    report = analyze(args.path)
    root = find_campaign_root(args.path)
    out = Path(args.out) if args.out else root / "report"
    write_report(report, out)
    _print_report(report)
    if report.flagged_scans:
        print(f"flagged scans: {len(report.flagged_scans)}")
    print(f"report sha256={report.digest()}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import render_report

    p = Path(args.path)
    if p.is_file():
        report = CampaignReport.from_dict(json.loads(p.read_text()))
        campaign_dir = None
    else:
        report = analyze(p)
        campaign_dir = p
    out = Path(args.out) if args.out else (find_campaign_root(p) / "report" if campaign_dir else p.parent)
    files = render_report(report, out, args.format, campaign_dir)
    for f in files:
        print(f)
    return EXIT_OK


def _parse_fault(text: str) -> InjectedFault:
    parts = text.split(":")
    if len(parts) != 4:
        raise ValueError(f"fault {text!r} must look like die:device:kind:target")
    return InjectedFault(int(parts[0]), int(parts[1]), parts[2], parts[3])


def cmd_fault_inject(args) -> int:
    cfg = _config(args)
    spec = cfg.wafer
    if args.fixture == "table1":
        spec = table1_fixture(spec)
    extra = tuple(_parse_fault(f) for f in args.fault or ())
    for f in extra:
        if f.kind not in ("marginal", "open", "dead"):
            raise ValueError(f"unknown fault kind {f.kind!r}")
    spec = dataclasses.replace(spec, injected_faults=spec.injected_faults + extra)
    text = dump_campaign_config(cfg.replace(wafer=spec))
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out} with {len(spec.injected_faults)} injected faults")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cryoprobe", description="Simulated cryogenic wafer probing.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="YAML campaign config")
        sp.add_argument("--seed", type=int, help="override the wafer seed")
        sp.add_argument("--out", help=out_help)

    sp = sub.add_parser("wafer-gen", help="generate a wafer and write its ground truth")
    common(sp, "output directory")
    sp.set_defaults(func=cmd_wafer_gen, out="wafer-out")

    sp = sub.add_parser("campaign-run", help="run the full measurement campaign")
    common(sp, "output directory")
    sp.add_argument("--parallel", type=int, help="worker processes")
    sp.set_defaults(func=cmd_campaign_run)

    sp = sub.add_parser("analyze", help="recompute statistics from a campaign directory")
    sp.add_argument("path")
    sp.add_argument("--out", help="report directory (default: <campaign>/report)")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("report", help="render figures and tables")
    sp.add_argument("path", help="campaign directory or report.json")
    sp.add_argument("--format", default="svg", help="svg or pdf")
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("fault-inject", help="write a config with scripted faults (test utility)")
    common(sp, "output config path (default: stdout)")
    sp.add_argument("--fixture", choices=["table1"], help="named fault fixture")
    sp.add_argument("--fault", action="append", help="die:device:kind:target, repeatable")
    sp.set_defaults(func=cmd_fault_inject)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    if getattr(args, "parallel", None) is not None and args.parallel < 1:
        print("error: --parallel must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, SchemaVersionError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except PartialCampaignError as exc:
        print(f"partial failure: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

import dataclasses
import hashlib
import json
import shutil
import time
from pathlib import Path

import pytest

from cryoprobe.campaign import (CampaignConfig, CampaignReport, NotACampaignError, PartialCampaignError,
                                SchemaVersionError, analyze, build_report, dump_campaign_config,
                                load_campaign_config, run_campaign, table1_fixture)
from cryoprobe.instrument import NoiseModel
from cryoprobe.stats import yield_rollup

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN_DIGEST = "933deacfb28d72a14864200d1514e21ffc68491edfa1f83153d441075024d64a"
REPO = Path(__file__).resolve().parents[1]


def small_config(die_count=2, devices_per_die=2, seed=3, **kw):
    base = CampaignConfig()
    return base.replace(wafer=dataclasses.replace(base.wafer, die_count=die_count,
                                                  devices_per_die=devices_per_die, seed=seed), **kw)


def tree_digest(root: Path, pattern="die-*/dev-*/*") -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.glob(pattern))}


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("camp")
    return run_campaign(small_config(), out)


def test_smoke_campaign_artifact_tree(tmp_path):
    t0 = time.perf_counter()
    res = run_campaign(small_config(1, 1), tmp_path)
    assert time.perf_counter() - t0 < 5.0
    root = res.root
    assert (root / "manifest.json").exists()
    assert (root / "ground-truth.json").exists()
    dev = root / "die-00-00" / "dev-0"
    assert (dev / "record.json").exists()
    assert len(list(dev.glob("plunger-vs-barriers-*.csv"))) == 12
    assert len(list(dev.glob("barrier-barrier-*.csv"))) == 16
    for f in ("report.json", "yield.csv", "summaries.csv", "vt_by_gate.csv"):
        assert (root / "report" / f).exists()


def test_records_and_charge_sensing_split(small_run):
    recs = small_run.records
    assert len(recs) == 4
    assert [r.charge_sensing for r in recs] == [True, False, True, False]
    assert sum(len(r.summaries) for r in recs) == 24
    m = json.loads((small_run.root / "manifest.json").read_text())
    assert m["status"] == "complete" and len(m["devices"]) == 4


def test_same_config_twice_is_identical(small_run, tmp_path):
    again = run_campaign(small_config(), tmp_path)
    assert again.report.digest() == small_run.report.digest()
    assert tree_digest(again.root) == tree_digest(small_run.root)
    assert (again.root / "report" / "report.json").read_bytes() == \
        (small_run.root / "report" / "report.json").read_bytes()


def test_parallel_matches_serial(small_run, tmp_path):
    par = run_campaign(small_config(parallel=2), tmp_path)
    assert par.report.digest() == small_run.report.digest()
    assert tree_digest(par.root) == tree_digest(small_run.root)


def test_analyze_equals_in_run_report(small_run):
    assert analyze(small_run.root).digest() == small_run.report.digest()
    assert analyze(small_run.root.parent).digest() == small_run.report.digest()


def test_analyze_without_ground_truth(small_run, tmp_path):
    copy = tmp_path / "copy"
    shutil.copytree(small_run.root, copy)
    (copy / "ground-truth.json").unlink()
    assert analyze(copy).digest() == small_run.report.digest()


def test_corrupted_scan_is_flagged(small_run, tmp_path):
    copy = tmp_path / "copy"
    shutil.copytree(small_run.root, copy)
    rec = small_run.records[0]
    ref = next(r for r in rec.scans if r.kind == "plunger-vs-barriers")
    target = copy / rec.die_label / f"dev-{rec.device}" / ref.file
    target.write_text("garbage\n1,2,3\n")
    rep = analyze(copy)
    assert rep.flagged_scans == [f"{rec.device_id}/{ref.dots[0]}"]
    assert rep.success["n_scans"] == small_run.report.success["n_scans"] - 1


def test_schema_version_errors(small_run, tmp_path):
    copy = tmp_path / "copy"
    shutil.copytree(small_run.root, copy)
    m = json.loads((copy / "manifest.json").read_text())
    m["record_version"] = 7
    (copy / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(SchemaVersionError, match="v7"):
        analyze(copy)
    m["version"] = 2
    (copy / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(SchemaVersionError, match="v2"):
        analyze(copy)
    bad = small_run.report.to_dict()
    bad["version"] = 5
    with pytest.raises(SchemaVersionError):
        CampaignReport.from_dict(bad)
    with pytest.raises(NotACampaignError):
        analyze(tmp_path / "nowhere")


def test_golden_fixture_report():
    rep = analyze(FIXTURES / "golden")
    assert rep.dumps() == (FIXTURES / "golden-report.json").read_text()
    assert rep.digest() == GOLDEN_DIGEST


def test_partial_failure_writes_manifest(tmp_path):
    cfg = small_config(2, 1)
    root = tmp_path / "W0"
    root.mkdir()
    (root / "die-00-00").write_text("in the way")
    with pytest.raises(PartialCampaignError) as err:
        run_campaign(cfg, tmp_path)
    m = json.loads(err.value.manifest.read_text())
    assert m["status"] == "partial"
    assert list(m["errors"]) == ["die-00-00/dev-0"]


def test_config_yaml_round_trip(tmp_path):
    cfg = small_config(noise=NoiseModel.zero(), parallel=3)
    p = tmp_path / "c.yaml"
    p.write_text(dump_campaign_config(cfg))
    back = load_campaign_config(p)
    assert back.digest() == cfg.digest() and back.parallel == 3
    with pytest.raises(ValueError):
        CampaignConfig.from_dict({"wafers": {}})
    with pytest.raises(ValueError):
        CampaignConfig.from_dict({"campaign": {"parallel": 0}})
    with pytest.raises(FileNotFoundError):
        load_campaign_config(tmp_path / "missing.yaml")


def test_shipped_configs_load():
    assert load_campaign_config(REPO / "configs" / "default.yaml").digest() == CampaignConfig().digest()
    nf = load_campaign_config(REPO / "configs" / "noise-free.yaml")
    assert nf.noise == NoiseModel.zero()
    smoke = load_campaign_config(REPO / "configs" / "smoke.yaml")
    assert smoke.wafer.die_count * smoke.wafer.devices_per_die == 1


def test_table1_fixture_small_wafer():
    cfg = small_config(3, 2)
    spec = table1_fixture(cfg.wafer, n_faulty=3)
    res = run_campaign(CampaignConfig(wafer=spec, charge_sensing_devices_per_die=0))
    y = yield_rollup(res.records)
    assert (y.dots.good, y.dots.total) == (96 - 3, 96)
    assert (y.devices.good, y.devices.total) == (3, 6)
    assert y.gates.good == y.gates.total
    with pytest.raises(ValueError):
        table1_fixture(cfg.wafer, n_faulty=7)


def test_empty_sections_carry_notes():
    rep = build_report([], CampaignConfig())
    assert rep.one_electron is None and rep.voltage_sharing is None and rep.success is None
    assert len(rep.notes) >= 4

import dataclasses
import json
import re
import shutil
from pathlib import Path

import pytest
import yaml

from cryoprobe import cli
from cryoprobe.campaign import CampaignConfig, CampaignReport, build_report, dump_campaign_config
from cryoprobe.report import SUPPORTED_FORMATS, render_report

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def smoke_yaml(tmp_path_factory):
    base = CampaignConfig()
    cfg = base.replace(wafer=dataclasses.replace(base.wafer, die_count=2, devices_per_die=1, seed=4))
    p = tmp_path_factory.mktemp("cfg") / "smoke.yaml"
    p.write_text(dump_campaign_config(cfg))
    return p


@pytest.fixture(scope="module")
def campaign_dir(smoke_yaml, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["campaign-run", "--config", str(smoke_yaml), "--out", str(out)]) == 0
    return out / "W0"


def _digest_line(text):
    return re.search(r"report sha256=([0-9a-f]{64})", text).group(1)


def test_campaign_then_analyze_same_digest(smoke_yaml, tmp_path, capsys):
    assert cli.main(["campaign-run", "--config", str(smoke_yaml), "--out", str(tmp_path)]) == 0
    run_digest = _digest_line(capsys.readouterr().out)
    assert cli.main(["analyze", str(tmp_path)]) == 0
    assert _digest_line(capsys.readouterr().out) == run_digest


def test_seed_override_changes_wafer(tmp_path, capsys):
    assert cli.main(["wafer-gen", "--seed", "1", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["wafer-gen", "--seed", "2", "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "W0" / "ground-truth.json").read_text()
    b = (tmp_path / "b" / "W0" / "ground-truth.json").read_text()
    assert json.loads(a)["spec"]["seed"] == 1 and a != b


@pytest.mark.parametrize("argv", [
    ["campaign-run", "--parallel", "0"],
    ["campaign-run", "--config", "/no/such/file.yaml"],
    ["analyze", "/no/such/dir"],
    ["report", "/no/such/dir"],
    ["frobnicate"],
    ["fault-inject", "--fault", "1:2:melted:P1"],
    ["fault-inject", "--fault", "bad"],
])
def test_validation_errors_exit_1(argv, capsys):
    assert cli.main(argv) == 1


def test_bad_yaml_exit_1(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("wafer: [unclosed\n")
    assert cli.main(["campaign-run", "--config", str(p), "--out", str(tmp_path)]) == 1
    p.write_text("wafer:\n  die_cnt: 3\n")
    assert cli.main(["campaign-run", "--config", str(p), "--out", str(tmp_path)]) == 1


def test_partial_failure_exit_3(smoke_yaml, tmp_path):
    (tmp_path / "W0").mkdir()
    (tmp_path / "W0" / "die-00-00").write_text("blocks the device directory")
    assert cli.main(["campaign-run", "--config", str(smoke_yaml), "--out", str(tmp_path)]) == 3
    assert json.loads((tmp_path / "W0" / "manifest.json").read_text())["status"] == "partial"


def test_runtime_error_exit_2(monkeypatch, smoke_yaml, tmp_path):
    def boom(*a, **k):
        raise RuntimeError("instrument offline")
    monkeypatch.setattr(cli, "run_campaign", boom)
    assert cli.main(["campaign-run", "--config", str(smoke_yaml), "--out", str(tmp_path)]) == 2


def test_schema_mismatch_exit_1(campaign_dir, tmp_path):
    copy = tmp_path / "c"
    shutil.copytree(campaign_dir, copy)
    m = json.loads((copy / "manifest.json").read_text())
    m["scan_version"] = 9
    (copy / "manifest.json").write_text(json.dumps(m))
    assert cli.main(["analyze", str(copy)]) == 1


def test_fault_inject_table1(tmp_path):
    out = tmp_path / "faults.yaml"
    assert cli.main(["fault-inject", "--fixture", "table1", "--fault", "0:1:dead:O_S2",
                     "--out", str(out)]) == 0
    data = yaml.safe_load(out.read_text())
    faults = data["wafer"]["injected_faults"]
    assert len(faults) == 10
    assert data["wafer"]["disorder"]["fault_rates"]["dot"] == 0.0


# ---------------------------------------------------------------- report


def test_report_svg_files(campaign_dir, tmp_path):
    assert cli.main(["report", str(campaign_dir), "--out", str(tmp_path), "--format", "svg"]) == 0
    names = {p.name for p in tmp_path.iterdir()}
    for n in ("vt_histograms.svg", "one_electron.svg", "wafer_map_faults.svg", "scan_gallery.svg",
              "report.json", "yield.csv", "notes.txt"):
        assert n in names


def test_report_unknown_format(campaign_dir, tmp_path, capsys):
    assert cli.main(["report", str(campaign_dir), "--out", str(tmp_path), "--format", "png"]) == 1
    assert "svg" in capsys.readouterr().err
    rep = CampaignReport.from_dict(json.loads((FIXTURES / "golden-report.json").read_text()))
    with pytest.raises(ValueError, match="pdf"):
        render_report(rep, tmp_path, "gif")


def test_vt_panel_has_27_line_gates(tmp_path):
    rep = CampaignReport.from_dict(json.loads((FIXTURES / "golden-report.json").read_text()))
    files = render_report(rep, tmp_path, "svg")
    svg = (tmp_path / "vt_histograms.svg").read_text()
    assert svg.count('id="axes_') == 27
    assert all(f.exists() for f in files)


@pytest.mark.parametrize("fmt", SUPPORTED_FORMATS)
def test_report_from_json_is_reproducible(fmt, tmp_path):
    src = FIXTURES / "golden-report.json"
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["report", str(src), "--out", str(a), "--format", fmt]) == 0
    assert cli.main(["report", str(src), "--out", str(b), "--format", fmt]) == 0
    for f in a.iterdir():
        assert f.read_bytes() == (b / f.name).read_bytes(), f.name


def test_gallery_from_golden_campaign(tmp_path):
    rep = CampaignReport.from_dict(json.loads((FIXTURES / "golden-report.json").read_text()))
    files = render_report(rep, tmp_path, "svg", FIXTURES / "golden")
    assert tmp_path / "scan_gallery.svg" in files


def test_empty_report_sections_omitted_with_notes(tmp_path):
    rep = build_report([], CampaignConfig())
    files = render_report(rep, tmp_path, "svg")
    notes = (tmp_path / "notes.txt").read_text()
    assert "VT histograms omitted" in notes
    assert "1e histograms omitted" in notes
    assert "scan gallery omitted" in notes
    assert not any(f.suffix == ".svg" for f in files)

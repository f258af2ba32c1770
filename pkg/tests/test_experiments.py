import csv
import json

import pytest

from seal_sim.cli import main
from seal_sim.experiments import ExperimentSpec, SpecError, read_csv, run_matrix
from seal_sim.report import ReportError, band_notes, build_table, write_report

ALL = ["vgg16-like", "resnet18-like", "resnet34-like"]


@pytest.fixture(scope="module")
def small_matrix(tmp_path_factory):
    out = tmp_path_factory.mktemp("matrix")
    spec = ExperimentSpec(presets=ALL, scales=[16], seed=3, output_dir=out)
    return spec, run_matrix(spec)


def test_two_scheme_cell_count(tmp_path):
    spec = ExperimentSpec(presets=["vgg16-like"], scales=[4], schemes=["baseline", "seal"],
                          output_dir=tmp_path)
    rows = read_csv(run_matrix(spec))
    assert [r["scheme"] for r in rows] == ["baseline", "seal"]


def test_baseline_always_included(tmp_path):
    spec = ExperimentSpec(presets=["resnet18-like"], scales=[16], schemes=["direct"],
                          output_dir=tmp_path)
    rows = read_csv(run_matrix(spec))
    assert [r["scheme"] for r in rows] == ["baseline", "direct"]


def test_full_matrix_rows(small_matrix):
    _, paths = small_matrix
    rows = read_csv(paths)
    assert len(rows) == 18
    assert {r["preset"] for r in rows} == set(ALL)


def test_rerun_is_byte_identical(tmp_path):
    def once(sub):
        spec = ExperimentSpec(presets=["resnet18-like"], scales=[16], schemes=["counter+se"],
                              seed=9, output_dir=tmp_path / sub)
        return [p.read_bytes() for p in run_matrix(spec)]
    assert once("a") == once("b")


@pytest.mark.parametrize("bad", [dict(presets=[]), dict(ratios=[1.5]), dict(presets=["lenet"]),
                                 dict(schemes=["rot13"]), dict(policy="all")])
def test_invalid_spec(bad, tmp_path):
    with pytest.raises(SpecError):
        ExperimentSpec(output_dir=tmp_path, **bad).validate()


def test_table_normalisation(small_matrix):
    table = build_table(small_matrix[1])
    for preset in ALL:
        b = table.get(preset, "baseline")
        assert (b.normalized_perf, b.normalized_latency, b.accesses, b.data_accesses) == (1.0,) * 4
        assert table.get(preset, "seal").counter_accesses == 0.0
        assert table.get(preset, "direct").normalized_perf < 1.0
        assert table.get(preset, "counter").counter_accesses > 0.0
        for r in table.rows:
            assert r.normalized_perf > 0 and r.accesses > 0


def test_missing_baseline(tmp_path, small_matrix):
    rows = [r for r in read_csv(small_matrix[1]) if r["scheme"] != "baseline"]
    p = tmp_path / "m.csv"
    with open(p, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    with pytest.raises(ReportError, match="missing baseline"):
        build_table([p])


def test_report_outputs(small_matrix, tmp_path):
    table = build_table(small_matrix[1])
    written = {p.name for p in write_report(table, tmp_path)}
    assert {"comparison.csv", "comparison.txt", "perf.dat", "accesses.dat", "perf.png",
            "accesses.png"} <= written
    dat = (tmp_path / "perf.dat").read_text().splitlines()
    assert dat[0].startswith("# preset baseline") and len(dat) == 4
    assert (tmp_path / "perf.png").read_bytes()[:4] == b"\x89PNG"
    text = (tmp_path / "comparison.txt").read_text()
    assert "seal" in text and len(band_notes(table)) == 3


# -- command line ------------------------------------------------------------

def test_cli_plan(tmp_path, capsys):
    assert main(["plan", "--preset", "vgg16-like", "--ratio", "0.5", "--out", str(tmp_path)]) == 0
    closure = json.loads(next(tmp_path.glob("*_closure.json")).read_text())
    assert closure["ok"] is True
    assert "closure ok=True" in capsys.readouterr().out


def test_cli_simulate_seal(tmp_path, capsys):
    assert main(["simulate", "--scheme", "coloe", "--se", "--scale", "8", "--out", str(tmp_path)]) == 0
    (row,) = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert row["scheme"] == "seal" and row["counter_reads"] == "0" and row["counter_writes"] == "0"


def test_cli_analyze_drop_channel(capsys):
    assert main(["analyze", "--drop-channel", "L3:0"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["recoverable"] is True and doc["closure_ok"] is False
    assert "L3:row0" in doc["recovered_rows"]


def test_cli_analyze_valid_plan(capsys):
    assert main(["analyze"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["recoverable"] is False and doc["closure_ok"] is True


def test_cli_matrix_and_report_use_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SEAL_SIM_OUT", str(tmp_path))
    assert main(["matrix", "--presets", "resnet18-like", "--scales", "16",
                 "--schemes", "seal,direct"]) == 0
    assert (tmp_path / "metrics_resnet18-like_s16.csv").exists()
    assert main(["report", "--no-figures"]) == 0
    assert (tmp_path / "comparison.csv").exists() and not (tmp_path / "perf.png").exists()


@pytest.mark.parametrize("argv,code", [
    (["frobnicate"], 1),
    (["plan", "--ratio", "abc"], 1),
    (["plan", "--ratio", "2.0"], 1),
    (["analyze", "--drop-channel", "3-0"], 1),
    (["simulate", "--config", "/nonexistent/cfg.json"], 3),
])
def test_cli_exit_codes(argv, code, tmp_path):
    assert main(argv + ["--out", str(tmp_path)] if argv[0] != "frobnicate" else argv) == code


def test_cli_report_without_csvs(tmp_path):
    assert main(["report", "--out", str(tmp_path / "empty")]) == 3


def test_cli_bad_config_is_usage_error(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"channels": 0}))
    assert main(["simulate", "--config", str(p), "--out", str(tmp_path)]) == 1

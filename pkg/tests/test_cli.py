from __future__ import annotations

import csv
import json

import pytest

from tpqi.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main, read_csv_rows, validate, validate_csv
from tpqi.coincidence import RateEstimates
from tpqi.sequence import EmitterDetectorModel
from tpqi.temporal import DetectionWindow

BRIGHT = RateEstimates(2e-3, 2e-3, 1.5e-3, 1.5e-3, 2e-4, 2e-4)


def bright_config(blocks=20_000, **extra):
    model = EmitterDetectorModel.from_window_rates(BRIGHT, DetectionWindow(2.5, 22.5))
    doc = {"model": model.to_dict(), "sequence": {"calibration_interval": 10}, "blocks": blocks, "eta": 0.9}
    doc.update(extra)
    return doc


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = write_config(d / "cfg.json", bright_config())
    assert main(["simulate", "--config", cfg, "--seed", "3", "--out", str(d / "s.tags")]) == EXIT_OK
    assert main(["analyze", "--in", str(d / "s.tags"), "--report", str(d / "r.json"),
                 "--window-ns", "2.5,22.5", "--window-ns", "2.5,32.5", "--records", str(d / "rec.bin")]) == EXIT_OK
    assert main(["infer", "--report", str(d / "r.json"), "--draws", "200", "--realizations", "200",
                 "--grid", "51", "--t-m", "2", "--seed", "1", "--out", str(d / "post.csv")]) == EXIT_OK
    return d


class TestRoundTrip:
    def test_sidecar(self, run_dir):
        side = json.loads((run_dir / "s.tags.json").read_text())
        validate(side, "sidecar.schema.json")
        assert side["seed"] == 3 and side["blocks"] == 20_000
        assert (run_dir / "s.tags").stat().st_size == 16 * side["n_tags"]

    def test_report(self, run_dir):
        doc = json.loads((run_dir / "r.json").read_text())
        validate(doc, "report.schema.json")
        assert len(doc["windows"]) == 2
        assert all(w["c_e"] > 0 for w in doc["windows"])
        assert (run_dir / "rec.bin").stat().st_size % 40 == 0

    def test_csv_outputs_follow_schemas(self, run_dir):
        for i in range(2):
            assert validate_csv(run_dir / f"r.w{i}.histogram.csv", "histogram_csv.schema.json") == 19
            assert validate_csv(run_dir / f"r.w{i}.shape.csv", "shape_csv.schema.json") > 10
            assert validate_csv(run_dir / f"post.w{i}.csv", "posterior_csv.schema.json") == 51

    def test_csv_carries_provenance(self, run_dir):
        head = (run_dir / "r.w0.histogram.csv").read_text().splitlines()
        assert any(line.startswith("# config_hash=") for line in head)
        assert any(line.startswith("# seed=3") for line in head)

    def test_posterior(self, run_dir):
        summary = json.loads((run_dir / "post.json").read_text())
        validate(summary, "posterior_summary.schema.json")
        for w in summary["windows"]:
            assert w["lo"] <= w["map"] <= w["hi"]
            rows = read_csv_rows(run_dir / w["posterior_csv"])
            assert sum(r["density"] for r in rows) == pytest.approx(1.0, abs=1e-9)

    def test_reruns_are_byte_identical(self, run_dir, tmp_path):
        cfg = str(run_dir / "cfg.json")
        assert main(["simulate", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "s.tags"),
                     "--threads", "2"]) == EXIT_OK
        assert main(["analyze", "--in", str(tmp_path / "s.tags"), "--report", str(tmp_path / "r.json"),
                     "--window-ns", "2.5,22.5", "--window-ns", "2.5,32.5", "--threads", "2"]) == EXIT_OK
        assert main(["infer", "--report", str(tmp_path / "r.json"), "--draws", "200", "--realizations", "200",
                     "--grid", "51", "--t-m", "2", "--seed", "1", "--out", str(tmp_path / "post.csv"),
                     "--threads", "2"]) == EXIT_OK
        for name in ["s.tags", "s.tags.json", "r.json", "r.w0.histogram.csv", "r.w1.shape.csv",
                     "post.w0.csv", "post.w1.csv", "post.json"]:
            assert (tmp_path / name).read_bytes() == (run_dir / name).read_bytes(), name

    def test_csv_stream(self, run_dir, tmp_path):
        cfg = write_config(tmp_path / "c.json", bright_config(blocks=500))
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "s.csv")]) == EXIT_OK
        with open(tmp_path / "s.csv") as fh:
            assert next(csv.reader(fh)) == ["timestamp_ticks", "channel"]
        assert main(["analyze", "--in", str(tmp_path / "s.csv"), "--report", str(tmp_path / "r.json")]) == EXIT_OK


class TestErrors:
    def test_bad_budget_names_it(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {"sequence": {"blocks_per_heartbeat": 80}})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "s.tags")]) == EXIT_CONFIG
        assert "heartbeat budget" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"modle": {}})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "s.tags")]) == EXIT_CONFIG

    def test_missing_stream(self, tmp_path):
        assert main(["analyze", "--in", str(tmp_path / "nope.tags"), "--report", str(tmp_path / "r.json")]) == EXIT_IO

    def test_missing_report_field(self, run_dir, tmp_path, capsys):
        doc = json.loads((run_dir / "r.json").read_text())
        del doc["windows"][0]["c_m"]
        (tmp_path / "r.json").write_text(json.dumps(doc))
        code = main(["infer", "--report", str(tmp_path / "r.json"), "--out", str(tmp_path / "p.csv")])
        assert code == EXIT_CONFIG
        assert "c_m" in capsys.readouterr().err

    def test_report_not_json(self, tmp_path):
        (tmp_path / "r.json").write_text("{")
        assert main(["infer", "--report", str(tmp_path / "r.json"), "--out", str(tmp_path / "p.csv")]) == EXIT_CONFIG

    def test_bad_window_text(self, run_dir, tmp_path):
        code = main(["analyze", "--in", str(run_dir / "s.tags"), "--report", str(tmp_path / "r.json"),
                     "--window-ns", "2.5"])
        assert code == EXIT_CONFIG

    def test_threads_positive(self, tmp_path):
        assert main(["report", "--threads", "0"]) == EXIT_CONFIG


def test_minimal_config_ten_blocks(tmp_path):
    cfg = write_config(tmp_path / "c.json", {"blocks": 10})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "s.tags")]) == EXIT_OK
    assert main(["analyze", "--in", str(tmp_path / "s.tags"), "--report", str(tmp_path / "r.json")]) == EXIT_OK
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["windows"][0]["n_blocks"] == 10


def test_empty_stream(tmp_path):
    (tmp_path / "e.tags").write_bytes(b"")
    assert main(["analyze", "--in", str(tmp_path / "e.tags"), "--report", str(tmp_path / "r.json")]) == EXIT_OK
    doc = json.loads((tmp_path / "r.json").read_text())
    validate(doc, "report.schema.json")
    w = doc["windows"][0]
    assert w["c_m"] == 0 and w["n_blocks"] == 0
    assert validate_csv(tmp_path / "r.w0.histogram.csv", "histogram_csv.schema.json") == 19


def test_filter_model(tmp_path):
    out = tmp_path / "f"
    assert main(["filter-model", "--overlap", "--drift", "1", "--out", str(out)]) == EXIT_OK
    summary = json.loads((out / "filter_model.json").read_text())
    validate(summary, "filter_summary.schema.json")
    rows = read_csv_rows(out / "transmission.csv")
    validate_csv(out / "transmission.csv", "transmission_csv.schema.json")
    validate_csv(out / "drift.csv", "drift_csv.schema.json")
    peak = max(rows, key=lambda r: r["transmission"])
    assert peak["f_mhz"] == pytest.approx(summary["filter"]["f0_mhz"], abs=1e-6)
    assert summary["overlap"]["abs_diff"] < 1e-6
    assert summary["drift"]["max_abs_relative_change"] < 0.02


def test_report_command(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path / "ref.json")]) == EXIT_OK
    doc = json.loads((tmp_path / "ref.json").read_text())
    validate(doc, "reference_report.schema.json")
    rows = doc["interpretations"]["per_detector"]
    assert len(rows) == 13
    v30 = next(r for r in rows if r["window_ns"] == 30)
    assert v30["visibility"] == pytest.approx(0.7976, abs=5e-5)
    assert "N_eff/N" in capsys.readouterr().out

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from bsslasso.cli import main
from bsslasso.fibermodel import Event, FiberLink, link_to_dict


def tree_digest(root: Path) -> dict:
    return {
        p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def small_bench(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "bench"
    rc = main([
        "gen-bench", "--faults", "1", "--links", "3", "--seed", "7",
        "--length-min", "2000", "--length-max", "6000", "--out", str(out),
    ])
    assert rc == 0
    return out


class TestGenBench:
    def test_same_seed_identical_dirs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        args = ["gen-bench", "--faults", "1", "--links", "2", "--seed", "3",
                "--length-min", "2000", "--length-max", "4000"]
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        assert tree_digest(a) == tree_digest(b)

    def test_zero_faults_is_usage_error(self, capsys):
        rc = main(["gen-bench", "--faults", "0", "--links", "1"])
        assert rc == 1

    def test_manifest_structure(self, small_bench):
        manifest = json.loads((small_bench / "bench.json").read_text())
        assert manifest["schema"] == "bsslasso-bench/1"
        assert len(manifest["links"]) == 3
        entry = manifest["links"][0]
        assert {"length_m", "events", "seed", "index", "profile_csv"} <= set(entry)


class TestDetect:
    def test_batch_detect_and_reports(self, small_bench, tmp_path):
        out = tmp_path / "reports"
        rc = main(["detect", str(small_bench), "--out", str(out)])
        assert rc == 0
        manifest = json.loads((small_bench / "bench.json").read_text())
        for entry in manifest["links"]:
            doc = json.loads((out / f"report_{entry['index']}.json").read_text())
            assert doc["runtime_ms"] is None
            assert doc["config"]["mode"] == "bss-lasso"
            est = doc["estimates"]
            assert len(est) >= 1
            best = min(abs(e["position_m"] - entry["length_m"]) for e in est)
            assert best <= 50.0
            assert (out / doc["fitted_profile_ref"]).is_file()
        summary = json.loads((out / "detect_summary.json").read_text())
        assert all(l["status"] == "ok" for l in summary["links"])

    def test_detect_deterministic(self, small_bench, tmp_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert main(["detect", str(small_bench), "--out", str(out1)]) == 0
        assert main(["detect", str(small_bench), "--out", str(out2)]) == 0
        assert tree_digest(out1) == tree_digest(out2)

    def test_single_profile_requires_length(self, small_bench, tmp_path, capsys):
        csv_path = small_bench / "link_0.csv"
        assert main(["detect", str(csv_path), "--out", str(tmp_path / "x")]) == 1

    def test_single_profile_with_length(self, small_bench, tmp_path):
        manifest = json.loads((small_bench / "bench.json").read_text())
        entry = manifest["links"][0]
        out = tmp_path / "single"
        rc = main([
            "detect", str(small_bench / entry["profile_csv"]),
            "--length-m", str(entry["length_m"]), "--out", str(out),
        ])
        assert rc == 0
        assert (out / "report_0.json").is_file()

    def test_missing_manifest_is_data_error(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["detect", str(empty), "--out", str(tmp_path / "o")]) == 2

    def test_config_file_with_flag_precedence(self, small_bench, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"mode": "sinclasso", "gamma": 0.25}))
        out = tmp_path / "rf"
        rc = main(["detect", str(small_bench), "--out", str(out),
                   "--config", str(cfg_path), "--mode", "bss-1"])
        assert rc == 0
        doc = json.loads((out / "report_0.json").read_text())
        assert doc["config"]["mode"] == "bss-1"       # flag beats file
        assert doc["config"]["gamma"] == 0.25          # file beats default


class TestReconstructEvaluate:
    def test_reconstruct_fills_magnitudes(self, small_bench, tmp_path):
        out = tmp_path / "rep"
        assert main(["detect", str(small_bench), "--out", str(out)]) == 0
        assert main(["reconstruct", str(out)]) == 0
        manifest = json.loads((small_bench / "bench.json").read_text())
        doc = json.loads((out / "report_0.json").read_text())
        truth = manifest["links"][0]["events"][0]
        est = min(doc["estimates"], key=lambda e: abs(e["position_m"] - truth["position_m"]))
        assert est["loss_db"] == pytest.approx(truth["loss_db"], abs=0.3)
        assert "naive_magnitudes" in doc

    def test_evaluate_perfect_reports(self, small_bench, tmp_path):
        out = tmp_path / "rep"
        main(["detect", str(small_bench), "--out", str(out)])
        ev = tmp_path / "ev"
        rc = main(["evaluate", str(small_bench), "--reports", f"bss-lasso={out}", "--out", str(ev)])
        assert rc == 0
        payload = json.loads((ev / "evaluation.json").read_text())
        assert payload["bands"]["bss-lasso"]["percent"][0] == 100.0
        table = (ev / "tables.txt").read_text()
        assert "[0, 50]" in table and "Sensitivity" in table
        csv_text = (ev / "per_event_errors.csv").read_text()
        assert csv_text.splitlines()[0] == "mode,link,truth_m,estimate_m,error_m"

    def test_evaluate_refuses_mismatched_reports(self, small_bench, tmp_path):
        out = tmp_path / "rep"
        main(["detect", str(small_bench), "--out", str(out)])
        (out / "report_2.json").unlink()
        assert main(["evaluate", str(small_bench), "--reports", str(out)]) == 2


class TestValidateModel:
    def test_clean_link_passes(self, tmp_path):
        link = FiberLink(4000.0, (Event(2000.0, 2.0), Event(4000.0, 3.0)))
        path = tmp_path / "link.json"
        path.write_text(json.dumps(link_to_dict(link)))
        assert main(["validate-model", str(path)]) == 0

    def test_reflective_link_uses_wider_tolerance(self, tmp_path, capsys):
        link = FiberLink(3555.5, (Event(2345.6, 2.0, reflectance_db=15.0), Event(3555.5, 3.0)))
        path = tmp_path / "link.json"
        path.write_text(json.dumps(link_to_dict(link)))
        assert main(["validate-model", str(path)]) == 0
        assert "with reflections" in capsys.readouterr().out

    def test_bad_file_is_data_error(self, tmp_path):
        path = tmp_path / "nope.json"
        path.write_text("{]")
        assert main(["validate-model", str(path)]) == 2

import io
import json
import os

import pytest

from funnelwatch.cli import main
from funnelwatch.ingest import write_claims, write_population
from funnelwatch.simulate import ScenarioSpec, generate


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    ds, _ = generate(ScenarioSpec(providers=15, diagnoses=3, seed=21))
    for name, fn, items in (("claims.csv", write_claims, ds.claims),
                            ("population.csv", write_population, ds.population)):
        buf = io.StringIO()
        fn(items, buf)
        (d / name).write_text(buf.getvalue())
    return d


def _tree(root):
    out = {}
    for base, _, files in os.walk(root):
        for f in files:
            p = os.path.join(base, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


def _analyze(data_dir, out, *extra):
    return main(["analyze", "--claims", str(data_dir / "claims.csv"), "--population",
                 str(data_dir / "population.csv"), "--out", str(out), *extra])


class TestAnalyze:
    def test_success(self, data_dir, tmp_path):
        assert _analyze(data_dir, tmp_path / "o", "--workers", "1") == 0
        report = json.loads((tmp_path / "o" / "report.json").read_text())
        analysed = [d["diagnosis_id"] for d in report["diagnoses"] if d["skipped"] is None]
        svgs = sorted(os.listdir(tmp_path / "o" / "charts"))
        assert svgs == sorted(f"{d}.svg" for d in analysed)
        assert (tmp_path / "o" / "summary.csv").exists()

    def test_identical_bytes_any_worker_count(self, data_dir, tmp_path):
        assert _analyze(data_dir, tmp_path / "a", "--workers", "1") == 0
        assert _analyze(data_dir, tmp_path / "b", "--workers", "3") == 0
        assert _tree(tmp_path / "a") == _tree(tmp_path / "b")

    def test_missing_population(self, data_dir, tmp_path, capsys):
        out = tmp_path / "o"
        rc = main(["analyze", "--claims", str(data_dir / "claims.csv"), "--population",
                   str(tmp_path / "nope.csv"), "--out", str(out)])
        assert rc == 1
        assert not out.exists()
        assert "population" in capsys.readouterr().err

    def test_single_provider_skipped(self, tmp_path):
        (tmp_path / "c.csv").write_text(
            "provider,diagnosis,specialty,sex,age_group,ses,count\nP1,D1,S1,female,40-44,low,5\n")
        (tmp_path / "p.csv").write_text("sex,age_group,ses,persons\nfemale,40-44,low,1000\n")
        rc = main(["analyze", "--claims", str(tmp_path / "c.csv"), "--population", str(tmp_path / "p.csv"),
                   "--out", str(tmp_path / "o")])
        assert rc == 0
        report = json.loads((tmp_path / "o" / "report.json").read_text())
        assert report["diagnoses"][0]["skipped"] == "insufficient_providers"

    def test_parse_error_names_file_and_row(self, tmp_path, capsys):
        (tmp_path / "c.csv").write_text(
            "provider,diagnosis,specialty,sex,age_group,ses,count\nP1,D1,S1,female,40-44,low,-2\n")
        (tmp_path / "p.csv").write_text("sex,age_group,ses,persons\nfemale,40-44,low,1000\n")
        rc = main(["analyze", "--claims", str(tmp_path / "c.csv"), "--population", str(tmp_path / "p.csv"),
                   "--out", str(tmp_path / "o")])
        err = capsys.readouterr().err
        assert rc == 1 and "c.csv" in err and "row 2" in err
        assert not (tmp_path / "o").exists()

    def test_validation_errors_exit_two(self, tmp_path):
        (tmp_path / "c.csv").write_text(
            "provider,diagnosis,specialty,sex,age_group,ses,count\n"
            "P1,D1,S1,female,40-44,low,5\nP2,D1,S1,male,40-44,low,5\n")
        (tmp_path / "p.csv").write_text("sex,age_group,ses,persons\nfemale,40-44,low,1000\n")
        rc = main(["analyze", "--claims", str(tmp_path / "c.csv"), "--population", str(tmp_path / "p.csv"),
                   "--out", str(tmp_path / "o")])
        assert rc == 2
        assert (tmp_path / "o" / "summary.txt").exists()

    def test_validate_subcommand(self, data_dir, capsys):
        rc = main(["validate", "--claims", str(data_dir / "claims.csv"), "--population",
                   str(data_dir / "population.csv")])
        assert rc == 0

    def test_render_from_points(self, data_dir, tmp_path):
        assert _analyze(data_dir, tmp_path / "o", "--workers", "1") == 0
        pts = sorted((tmp_path / "o" / "points").iterdir())[0]
        svg = tmp_path / "r.svg"
        assert main(["render", "--points", str(pts), "--out", str(svg)]) == 0
        assert svg.read_bytes() == (tmp_path / "o" / "charts" / (pts.stem + ".svg")).read_bytes()


class TestSimulate:
    def test_twice_identical(self, tmp_path):
        sc = tmp_path / "s.yaml"
        sc.write_text("providers: 12\ndiagnoses: 2\nseed: 8\nreplications: 3\n"
                      "effects:\n  - {provider: 0, odds_multiplier: 2.0, volume: 10000}\n")
        assert main(["simulate", "--scenario", str(sc), "--out", str(tmp_path / "a"), "--workers", "1"]) == 0
        assert main(["simulate", "--scenario", str(sc), "--out", str(tmp_path / "b"), "--workers", "2"]) == 0
        assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
        ev = json.loads((tmp_path / "a" / "evaluation.json").read_text())["evaluation"]
        assert "false_flag_rate" in ev and len(ev["false_flag_ci"]) == 2

    def test_malformed_scenario(self, tmp_path, capsys):
        sc = tmp_path / "bad.yaml"
        sc.write_text("providers: 12\neffects: [\n")
        assert main(["simulate", "--scenario", str(sc), "--out", str(tmp_path / "o")]) == 1
        err = capsys.readouterr().err
        assert "bad.yaml" in err and "row" in err

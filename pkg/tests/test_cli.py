import csv
import json
import logging

import numpy as np
import pytest

from scorenorm.cli import main
from scorenorm.core import TableKind
from scorenorm.metrics import evaluate
from scorenorm.normalizers import MethodId, fit_model, normalize_table
from scorenorm.protocols import parse_score_table, read_pairs

SMALL = {
    "demographics": {
        "Caucasian": {"genuine_mu": 0.70, "genuine_sigma": 0.12, "impostor_mu": 0.0,
                      "impostor_sigma": 0.12, "n_genuine": 300, "n_impostor": 3000,
                      "n_cohort_subjects": 20, "n_gallery_subjects": 20},
        "African": {"genuine_mu": 0.55, "genuine_sigma": 0.12, "impostor_mu": 0.15,
                    "impostor_sigma": 0.12, "n_genuine": 300, "n_impostor": 3000,
                    "n_cohort_subjects": 20, "n_gallery_subjects": 20},
    },
    "seed": 4,
}


def synth(tmp_path, spec=SMALL, name="data"):
    spec_path = tmp_path / f"{name}_spec.json"
    spec_path.write_text(json.dumps(spec))
    out = tmp_path / name
    assert main(["synth", "--spec", str(spec_path), "--out", str(out)]) == 0
    return out


@pytest.fixture
def data(tmp_path):
    return synth(tmp_path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestNormalize:
    def test_missing_cohort_names_kind(self, data, tmp_path, capsys):
        code = main(["normalize", "--test", str(data / "test.csv"),
                     "--gallery-cohort", str(data / "gallery_cohort.csv"),
                     "--methods", "M3", "--out", str(tmp_path / "o")])
        assert code == 1
        assert "cohort_cohort" in capsys.readouterr().err

    def test_m1_and_m3_match_library(self, data, tmp_path):
        out = tmp_path / "o"
        assert main(["normalize", "--test", str(data / "test.csv"),
                     "--gallery-cohort", str(data / "gallery_cohort.csv"),
                     "--cohort", str(data / "cohort.csv"),
                     "--methods", "m1,m3", "--out", str(out)]) == 0
        produced = sorted(p.name for p in out.glob("normalized_*.csv"))
        assert produced == ["normalized_M1.csv", "normalized_M3.csv"]
        test = parse_score_table(data / "test.csv", TableKind.TEST)
        gc = parse_score_table(data / "gallery_cohort.csv", TableKind.GALLERY_COHORT, test.manifest)
        cc = parse_score_table(data / "cohort.csv", TableKind.COHORT_COHORT, test.manifest)
        for m in (MethodId.M1, MethodId.M3):
            expected = normalize_table(fit_model(m, gallery_cohort=gc, cohort=cc), test)
            got = parse_score_table(out / f"normalized_{m.value}.csv", TableKind.TEST, test.manifest)
            assert got.equals(expected)
        run = json.loads((out / "normalize_run.json").read_text())
        assert run["methods"]["M1"]["records_out"] == len(test)

    def test_empty_methods(self, data, tmp_path, caplog):
        out = tmp_path / "o"
        with caplog.at_level(logging.WARNING):
            assert main(["normalize", "--test", str(data / "test.csv"), "--out", str(out)]) == 0
        assert "no methods" in caplog.text
        assert not out.exists()

    def test_unknown_method(self, data, tmp_path):
        assert main(["normalize", "--test", str(data / "test.csv"), "--methods", "M7",
                     "--out", str(tmp_path / "o")]) == 1

    def test_insufficient_cohort_exit_code(self, data, tmp_path):
        assert main(["normalize", "--test", str(data / "test.csv"),
                     "--gallery-cohort", str(data / "gallery_cohort.csv"), "--methods", "M1.1",
                     "--min-cohort-count", "1000", "--out", str(tmp_path / "o")]) == 2

    def test_platt_non_convergence(self, data, tmp_path):
        args = ["normalize", "--test", str(data / "test.csv"), "--cohort", str(data / "cohort.csv"),
                "--methods", "M4", "--max-iterations", "1"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 3
        assert main(args + ["--lenient", "--out", str(tmp_path / "b")]) == 0

    def test_missing_file(self, tmp_path):
        assert main(["normalize", "--test", str(tmp_path / "nope.csv"), "--methods", "M3",
                     "--cohort", str(tmp_path / "nope2.csv"), "--out", str(tmp_path / "o")]) == 1


class TestEvaluate:
    def test_baseline_only(self, data, tmp_path):
        out = tmp_path / "e"
        assert main(["evaluate", str(data / "test.csv"), "--out", str(out)]) == 0
        rows = read_csv(out / "comparison.csv")
        assert [r["method"] for r in rows] == ["baseline"]
        doc = json.loads((out / "report_baseline.json").read_text())
        lib = evaluate(parse_score_table(data / "test.csv", TableKind.TEST))
        assert doc["werm"] == lib.werm
        assert rows[0]["WERM"] == f"{lib.werm:.4f}"

    def test_shift_bias_m3_beats_baseline(self, tmp_path):
        # genuine and impostor shifted together: a pure offset that per-group standardization removes
        spec = json.loads(json.dumps(SMALL))
        spec["demographics"]["African"].update(genuine_mu=0.85, impostor_mu=0.15)
        d = synth(tmp_path, spec, "shift")
        norm = tmp_path / "n"
        assert main(["normalize", "--test", str(d / "test.csv"), "--cohort", str(d / "cohort.csv"),
                     "--methods", "M3", "--out", str(norm)]) == 0
        out = tmp_path / "e"
        assert main(["evaluate", str(d / "test.csv"), str(norm / "normalized_M3.csv"),
                     "--format", "csv", "--out", str(out)]) == 0
        rows = {r["method"]: r for r in read_csv(out / "comparison.csv")}
        assert float(rows["M3"]["WERM"]) < float(rows["baseline"]["WERM"])
        assert (out / "report_M3.csv").exists()

    def test_repeat_is_identical(self, data, tmp_path):
        for name in ("a", "b"):
            assert main(["evaluate", str(data / "test.csv"), "--out", str(tmp_path / name)]) == 0
        for f in ("comparison.csv", "breakdown.csv", "contributions.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        a = json.loads((tmp_path / "a" / "report_baseline.json").read_text())
        b = json.loads((tmp_path / "b" / "report_baseline.json").read_text())
        assert a == b

    def test_tags_and_split_summary(self, data, tmp_path):
        out = tmp_path / "e"
        t = str(data / "test.csv")
        assert main(["evaluate", f"x={t}", f"x={t}", "--out", str(out)]) == 0
        [summary] = json.loads((out / "splits_summary.json").read_text())
        assert summary["method"] == "x" and summary["n_splits"] == 2
        assert summary["std"]["werm"] == 0.0

    def test_lenient_records_failures(self, data, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("kind,pair_type,gallery_subject,probe_subject,gallery_demo,probe_demo,score\n"
                       "test,genuine,a,b,X,,0.1\n")
        out = tmp_path / "e"
        assert main(["evaluate", str(data / "test.csv"), str(bad), "--out", str(out)]) == 2
        assert main(["evaluate", str(data / "test.csv"), str(bad), "--lenient", "--out", str(out)]) == 2
        assert len(json.loads((out / "failures.json").read_text())) == 1
        assert len(read_csv(out / "comparison.csv")) == 1


class TestProtocol:
    def test_splits(self, data, tmp_path):
        out = tmp_path / "s"
        assert main(["protocol", "splits", "--manifest", str(data / "manifest.json"), "--k", "5",
                     "--genuine", "10", "--impostor", "20", "--seed", "3", "--out", str(out)]) == 0
        assert sorted(p.name for p in out.iterdir()) == [f"pairs_split{i}.csv" for i in range(5)]

    def test_subsample_too_many(self, data, tmp_path):
        assert main(["protocol", "subsample", "--test", str(data / "test.csv"), "--count", "999999",
                     "--out", str(tmp_path / "s")]) == 2

    def test_subsample(self, data, tmp_path):
        out = tmp_path / "s"
        assert main(["protocol", "subsample", "--test", str(data / "test.csv"), "--count", "500",
                     "--bins", "10", "--out", str(out)]) == 0
        t = parse_score_table(out / "subsampled.csv", TableKind.TEST)
        for lab in t.manifest.labels:
            assert np.count_nonzero(~t.genuine & (t.gallery_demo == lab)) == 500

    def test_random_pairs_roundtrip(self, data, tmp_path):
        out = tmp_path / "p"
        assert main(["protocol", "random-pairs", "--manifest", str(data / "manifest.json"),
                     "--genuine", "15", "--impostor", "40", "--out", str(out)]) == 0
        pairs = read_pairs(out / "pairs.csv")
        assert len(pairs) == 2 * 55
        manifest = json.loads((data / "manifest.json").read_text())["subjects"]
        for p in pairs:
            assert manifest[p.subject_a]["demo"] == manifest[p.subject_b]["demo"] == p.demo

    def test_random_pairs_insufficient(self, data, tmp_path):
        assert main(["protocol", "random-pairs", "--manifest", str(data / "manifest.json"),
                     "--genuine", "100000", "--impostor", "1", "--out", str(tmp_path / "p")]) == 2

    def test_splits_zero(self, data, tmp_path):
        assert main(["protocol", "splits", "--manifest", str(data / "manifest.json"), "--k", "0",
                     "--genuine", "1", "--impostor", "1", "--out", str(tmp_path / "p")]) == 1


class TestSynth:
    def test_default_spec_files_parse(self, tmp_path):
        out = tmp_path / "d"
        assert main(["synth", "--seed", "2", "--out", str(out)]) == 0
        kinds = {"test": TableKind.TEST, "gallery_cohort": TableKind.GALLERY_COHORT,
                 "probe_cohort": TableKind.PROBE_COHORT, "cohort": TableKind.COHORT_COHORT}
        for name, kind in kinds.items():
            assert len(parse_score_table(out / f"{name}.csv", kind)) > 0

    def test_byte_identical(self, tmp_path):
        a, b = synth(tmp_path, name="a"), synth(tmp_path, name="b")
        for f in sorted(p.name for p in a.iterdir()):
            assert (a / f).read_bytes() == (b / f).read_bytes(), f

    def test_bad_sigma(self, tmp_path, capsys):
        spec = json.loads(json.dumps(SMALL))
        spec["demographics"]["African"]["genuine_sigma"] = 0
        p = tmp_path / "s.json"
        p.write_text(json.dumps(spec))
        assert main(["synth", "--spec", str(p), "--out", str(tmp_path / "d")]) == 1
        assert "standard deviation" in capsys.readouterr().err

    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["synth"])
        assert info.value.code == 1

"""Config parsing, CSV loading, and the serialized result document."""

import csv
import json

import numpy as np
import pytest

from htefusion import (
    AnalysisConfig,
    ResultDocument,
    SimConfig,
    ValidationError,
    generate_replicate,
    load_csv,
    parse_terms,
    run_fit,
    run_simulate,
)
from conftest import make_config

NAMES = ("age", "bmi", "x3", "x4", "x5")


def write_csv(path, data, names=NAMES):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["s", "a", "y", *names])
        for rec in data.records():
            writer.writerow([rec.s, rec.a, rec.y, *rec.x])


def base_config(data_path, **kw):
    base = dict(
        data=str(data_path),
        covariates=NAMES,
        tau_terms=("1", "age", "age^2", "bmi", "bmi^2"),
        lambda_terms=NAMES,
        estimators=("integrative", "rct", "meta"),
        knots=0,
        trial_known=0.5,
    )
    base.update(kw)
    return AnalysisConfig(**base)


@pytest.fixture(scope="module")
def csv_fixture(tmp_path_factory):
    data = generate_replicate(make_config(beta=1.0, seed=21), 0)
    path = tmp_path_factory.mktemp("data") / "study.csv"
    write_csv(path, data)
    return path, data


class TestParseTerms:
    def test_all_forms(self):
        spec = parse_terms(("1", "bmi", "age^2", "age*bmi", " x3 "), NAMES)
        assert spec.labels(list(NAMES)) == ["1", "bmi", "age^2", "age*bmi", "x3"]
        row = spec.row(np.array([2.0, 3.0, 5.0, 7.0, 11.0]))
        assert np.allclose(row, [1.0, 3.0, 4.0, 6.0, 5.0])

    @pytest.mark.parametrize("expr", ["", "height", "height^2", "age*height",
                                      "age^3", "age+bmi"])
    def test_rejects_unknown_forms(self, expr):
        with pytest.raises(ValidationError):
            parse_terms((expr,), NAMES)


class TestAnalysisConfig:
    def test_required_keys(self):
        with pytest.raises(ValidationError, match="missing required"):
            AnalysisConfig.from_dict({"data": "x.csv", "covariates": ["age"]})

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValidationError, match="unknown config keys"):
            AnalysisConfig.from_dict({
                "data": "x.csv", "covariates": ["age"], "tau_terms": ["1"],
                "lambda_terms": ["age"], "bandwidth": 2.0,
            })

    def test_field_validation(self, tmp_path):
        with pytest.raises(ValidationError):
            base_config(tmp_path / "d.csv", tau_terms=())
        with pytest.raises(ValidationError):
            base_config(tmp_path / "d.csv", lambda_terms=())
        with pytest.raises(ValidationError):
            base_config(tmp_path / "d.csv", estimators=("bayes",))
        with pytest.raises(ValidationError, match="probe"):
            base_config(tmp_path / "d.csv", probes=((1.0, 2.0),))

    def test_from_file_and_roundtrip(self, tmp_path):
        cfg = base_config(tmp_path / "d.csv", probes=((0.0,) * 5,))
        blob = tmp_path / "cfg.json"
        blob.write_text(json.dumps(cfg.to_dict()))
        again = AnalysisConfig.from_file(str(blob))
        assert again.to_dict() == cfg.to_dict()

    def test_from_file_errors(self, tmp_path):
        with pytest.raises(ValidationError, match="not found"):
            AnalysisConfig.from_file(str(tmp_path / "absent.json"))
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ValidationError, match="not valid JSON"):
            AnalysisConfig.from_file(str(bad))
        arr = tmp_path / "arr.json"
        arr.write_text("[1, 2]")
        with pytest.raises(ValidationError, match="JSON object"):
            AnalysisConfig.from_file(str(arr))


class TestLoadCsv:
    def test_roundtrip(self, csv_fixture, tmp_path):
        path, data = csv_fixture
        cfg = base_config(path)
        loaded = load_csv(str(path), cfg)
        assert loaded.n == data.n
        assert np.array_equal(loaded.s, data.s)
        assert np.array_equal(loaded.a, data.a)
        assert np.allclose(loaded.y, data.y)
        assert np.allclose(loaded.x, data.x)

    def test_missing_file(self, tmp_path):
        cfg = base_config(tmp_path / "absent.csv")
        with pytest.raises(ValidationError, match="not found"):
            load_csv(cfg.data, cfg)

    def test_missing_column(self, tmp_path):
        path = tmp_path / "short.csv"
        path.write_text("s,a,y,age\n1,0,1.0,0.5\n")
        cfg = base_config(path)
        with pytest.raises(ValidationError, match="missing columns"):
            load_csv(str(path), cfg)

    def test_cell_errors_carry_line_numbers(self, tmp_path):
        head = "s,a,y," + ",".join(NAMES) + "\n"
        ok = "1,0,1.0,0.1,0.2,0.3,0.4,0.5\n"
        cases = [
            ("2,0,1.0,0.1,0.2,0.3,0.4,0.5", "column 's'"),
            ("1,x,1.0,0.1,0.2,0.3,0.4,0.5", "column 'a'"),
            ("1,0,inf,0.1,0.2,0.3,0.4,0.5", "column 'y'"),
            ("1,0,1.0,0.1,oops,0.3,0.4,0.5", "column 'bmi'"),
        ]
        for body, needle in cases:
            path = tmp_path / "bad.csv"
            path.write_text(head + ok + body + "\n")
            cfg = base_config(path)
            with pytest.raises(ValidationError, match=f"line 3, {needle}"):
                load_csv(str(path), cfg)

    def test_empty_inputs(self, tmp_path):
        empty = tmp_path / "empty.csv"
        empty.write_text("")
        cfg = base_config(empty)
        with pytest.raises(ValidationError, match="empty"):
            load_csv(str(empty), cfg)
        headers = tmp_path / "headers.csv"
        headers.write_text("s,a,y," + ",".join(NAMES) + "\n")
        cfg = base_config(headers)
        with pytest.raises(ValidationError, match="no data rows"):
            load_csv(str(headers), cfg)


@pytest.fixture(scope="module")
def fitted(csv_fixture, tmp_path_factory):
    path, data = csv_fixture
    out_dir = tmp_path_factory.mktemp("out")
    cfg = base_config(
        path,
        probes=((0.0,) * 5, (1.5, 0.0, 0.0, 0.0, 0.0)),
        gof_tau_terms=("age*bmi",),
        gof_lambda_terms=("age^2",),
        output=str(out_dir / "fit.json"),
        curve_output=str(out_dir / "curve.csv"),
    )
    return cfg, run_fit(cfg)


class TestRunFit:
    def test_document_layout(self, fitted):
        cfg, doc = fitted
        assert set(doc.to_dict()) == {"version", "config", "results", "diagnostics"}
        assert set(doc.results) == {"integrative", "rct", "meta"}
        blk = doc.results["integrative"]
        assert [row["term"] for row in blk["tau"]] == \
            ["1", "age", "age^2", "bmi", "bmi^2"]
        assert [row["term"] for row in blk["lambda"]] == list(NAMES)
        for row in blk["tau"] + blk["lambda"]:
            assert row["lower"] < row["estimate"] < row["upper"]
            assert row["se"] > 0.0
        assert blk["ate"]["lower"] < blk["ate"]["estimate"] < blk["ate"]["upper"]
        assert 0.0 < blk["ate"]["pi0"] < 1.0
        assert len(blk["curve"]) == 2
        assert blk["gof"]["df"] == 2
        assert 0.0 <= blk["gof"]["p_value"] <= 1.0

    def test_rct_and_meta_blocks(self, fitted):
        cfg, doc = fitted
        assert "lambda" not in doc.results["rct"]
        assert len(doc.results["rct"]["tau"]) == 5
        assert set(doc.results["meta"]["tau_coefficients"]) == \
            {"1", "age", "age^2", "bmi", "bmi^2"}
        assert "estimate" in doc.results["meta"]["ate"]

    def test_diagnostics(self, fitted):
        cfg, doc = fitted
        d = doc.diagnostics
        assert d["n_trial"] == 300 and d["n_obs"] == 5000
        assert d["integrative"]["converged"] is True
        assert d["integrative"]["final_score_norm"] < 1e-8
        assert isinstance(d["warnings"], list)

    def test_output_files(self, fitted):
        cfg, doc = fitted
        on_disk = ResultDocument.from_json(open(cfg.output).read())
        assert on_disk.to_dict() == doc.to_dict()
        with open(cfg.curve_output, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == [*NAMES, "estimate", "se", "lower", "upper"]
        assert len(rows) == 3
        assert float(rows[1][5]) == pytest.approx(
            doc.results["integrative"]["curve"][0]["estimate"])

    def test_json_is_deterministic(self, fitted):
        cfg, doc = fitted
        again = run_fit(cfg)
        assert again.to_json() == doc.to_json()

    def test_document_is_plain_json(self, fitted):
        cfg, doc = fitted
        parsed = json.loads(doc.to_json())
        assert parsed["results"]["integrative"]["ate"]["estimate"] == \
            doc.results["integrative"]["ate"]["estimate"]

    def test_covariate_count_mismatch(self, csv_fixture):
        path, data = csv_fixture
        cfg = base_config(path, covariates=("age", "bmi"),
                          tau_terms=("1", "age"), lambda_terms=("bmi",))
        with pytest.raises(ValidationError, match="covariates"):
            run_fit(cfg, data=data)

    def test_estimator_subset(self, csv_fixture):
        path, data = csv_fixture
        cfg = base_config(path, estimators=("meta",))
        doc = run_fit(cfg, data=data)
        assert set(doc.results) == {"meta"}


class TestResultDocument:
    def test_from_dict_checks_keys(self):
        with pytest.raises(ValidationError, match="missing keys"):
            ResultDocument.from_dict({"version": "0", "results": {}})

    def test_json_roundtrip(self):
        doc = ResultDocument("0.1.0", {"a": 1}, {"b": [1.5]}, {"c": None})
        assert ResultDocument.from_json(doc.to_json()) == doc


class TestRunSimulate:
    def test_writes_summary_json(self, tmp_path):
        cfg = make_config(beta=0.0, n=150, m=450, seed=23, reps=2,
                          estimators=("integrative",))
        out = tmp_path / "mc.json"
        mc = run_simulate(cfg, out=str(out))
        blob = json.loads(out.read_text())
        assert blob == json.loads(json.dumps(mc.to_dict(), sort_keys=True))
        assert blob["reps"] == 2

    def test_no_file_without_path(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = make_config(beta=0.0, n=150, m=450, seed=23, reps=1,
                          estimators=("meta",))
        run_simulate(cfg)
        assert list(tmp_path.iterdir()) == []

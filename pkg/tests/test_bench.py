import csv
import io
import json
import warnings
from fractions import Fraction

import numpy as np
import pytest

from mtlat.bench import (BenchOptions, LowCleanAccuracyWarning, ReportRow, RobustnessReport, emit_report,
                         identity_probe, load_report, robustness_score, run_benchmark)
from mtlat.corruptions import KINDS
from mtlat.errors import ContractViolation

FAST = dict(cw_subset=8, cw_iterations=3, cw_search_steps=2, iterations=2)


def test_score_examples():
    assert round(robustness_score(73.3, 12.46), 2) == 0.17
    assert robustness_score(73.3, 73.3) == 1.0
    assert robustness_score(76.4, 0.0) == 0.0
    with pytest.raises(ValueError):
        robustness_score(0.0, 10.0)


def test_score_low_clean_warning():
    with pytest.warns(LowCleanAccuracyWarning):
        robustness_score(40.0, 20.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        robustness_score(Fraction(3, 4), Fraction(1, 2))


@pytest.fixture(scope="module")
def report(tiny_model, tiny_mlp, tiny_data):
    return run_benchmark(tiny_model, tiny_mlp, tiny_data, seed=3, options=BenchOptions(**FAST))


def test_report_composition(report):
    names = [r.name for r in report.rows]
    assert len(names) == 25
    assert names[0] == "clean" and tuple(names[1:20]) == KINDS
    assert names[20:] == ["pgd", "pgd_ll", "cw_l2", "mi_fgsm_0.04", "mi_fgsm_0.08"]
    assert "fgsm" not in names
    assert report.options["identity_probe_score"] == 1.0


def test_score_accuracy_consistency(report):
    for r in report.rows:
        assert r.score >= 0
        assert r.score == r.accuracy / report.clean
        assert abs(r.r_phi * report.a_clean - r.a_phi) < 1e-9


def test_severity_mean(report):
    for r in report.rows[1:20]:
        per = [d["R_phi"] for d in r.detail]
        assert len(per) == 5
        exact = sum(Fraction(d["correct"], d["total"]) for d in r.detail) / 5 / report.clean
        assert r.score == exact
        assert abs(r.r_phi - np.mean(per)) < 1e-12


def test_determinism(report, tiny_model, tiny_mlp, tiny_data):
    again = run_benchmark(tiny_model, tiny_mlp, tiny_data, seed=3, options=BenchOptions(**FAST))
    assert emit_report(report, "json") == emit_report(again, "json")
    threaded = run_benchmark(tiny_model, tiny_mlp, tiny_data, seed=3, options=BenchOptions(**FAST, jobs=3))
    assert emit_report(report, "json") == emit_report(threaded, "json")


def test_same_architecture_rejected(tiny_model, tiny_data):
    with pytest.raises(ContractViolation):
        run_benchmark(tiny_model, tiny_model, tiny_data)


def test_identity_probe(tiny_model, tiny_data):
    assert identity_probe(tiny_model, tiny_data) == 1


def test_corruption_cache_same_result(tiny_model, tiny_mlp, tiny_data, report):
    cache = {}
    opts = BenchOptions(**FAST)
    a = run_benchmark(tiny_model, tiny_mlp, tiny_data, seed=3, options=opts, corruption_cache=cache)
    assert len(cache) == 95
    b = run_benchmark(tiny_model, tiny_mlp, tiny_data, seed=3, options=opts, corruption_cache=cache)
    assert emit_report(a, "json") == emit_report(b, "json") == emit_report(report, "json")


def test_json_csv_roundtrip(report):
    js = json.loads(emit_report(report, "json"))
    rows = list(csv.DictReader(io.StringIO(emit_report(report, "csv").decode())))
    assert list(rows[0].keys()) == ["name", "params", "A_phi", "R_phi"]
    assert [r["name"] for r in rows] == [r["name"] for r in js["rows"]]
    for c, j in zip(rows, js["rows"]):
        assert round(float(c["A_phi"]), 6) == round(j["A_phi"], 6)
        assert round(float(c["R_phi"]), 6) == round(j["R_phi"], 6)
    assert load_report(emit_report(report, "json")).to_dict() == report.to_dict()


def _toy(clean, scores, model_id="m"):
    rows = [ReportRow("clean", "", clean, Fraction(1))]
    rows += [ReportRow(k, "", clean * s, s) for k, s in scores.items()]
    return RobustnessReport(model_id, clean, rows, seed=0)


def test_markdown_annotations():
    base = _toy(Fraction(70, 100), {"fog": Fraction(1, 2), "pgd": Fraction(1, 10), "snow": Fraction(1, 3)})
    new = _toy(Fraction(71, 100), {"fog": Fraction(3, 5), "pgd": Fraction(1, 20), "snow": Fraction(1, 3)}, "n")
    md = emit_report(new, "markdown", baseline=base).decode()
    assert "0.60+" in md and "0.05-" in md
    assert "0.33 |" in md and "0.33+" not in md and "0.33-" not in md


def test_markdown_suppressed_when_clean_differs():
    base = _toy(Fraction(60, 100), {"fog": Fraction(1, 2)})
    new = _toy(Fraction(71, 100), {"fog": Fraction(3, 5)}, "n")
    md = emit_report(new, "markdown", baseline=base).decode()
    assert "0.60+" not in md and "suppressed" in md


def test_empty_report_header_only():
    empty = RobustnessReport("m", Fraction(1, 2), [], seed=0)
    assert emit_report(empty, "csv").decode() == "name,params,A_phi,R_phi\n"
    md = emit_report(empty, "markdown").decode()
    assert "| Model |" in md
    assert json.loads(emit_report(empty, "json"))["rows"] == []


def test_unknown_format(report):
    with pytest.raises(ValueError):
        emit_report(report, "xml")

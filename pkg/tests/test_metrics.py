import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimicshift.metrics import (ACCEPTANCE, CURVE_RATIOS, REJECTION, SCHEMA_VERSION, Confusion,
                                MetricsRow, compute_metrics, confusion, emit_report,
                                histogram_overlap, load_report, rate_curve, reference_rows,
                                render_comparison_table)

from oracles import curve_by_recount, metrics_by_formula, tally


def test_all_correct_has_no_errors():
    c = confusion(["reject", "accept", "reject", "accept"], ["attack", "normal", "attack", "normal"])
    assert (c.fp, c.fn) == (0, 0)
    assert c.total == 4


def test_inverted_verdicts_swap_cells():
    labels = ["attack", "normal", "attack", "attack", "normal"]
    right = ["reject", "accept", "reject", "accept", "reject"]
    wrong = ["accept" if v == "reject" else "reject" for v in right]
    a, b = confusion(right, labels), confusion(wrong, labels)
    assert (a.tp, a.tn, a.fp, a.fn) == (b.fn, b.fp, b.tn, b.tp)


def test_random_case_matches_tally():
    rng = np.random.default_rng(0)
    rej, att = rng.random(50) < 0.5, rng.random(50) < 0.6
    c = confusion(rej, att)
    assert (c.tp, c.tn, c.fp, c.fn) == tally(rej, att)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=40), st.randoms())
def test_confusion_permutation_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = confusion(*zip(*pairs))
    b = confusion(*zip(*shuffled))
    assert a == b


def test_confusion_errors():
    with pytest.raises(ValueError, match="labels"):
        confusion(["reject"], ["attack", "normal"])
    with pytest.raises(ValueError, match="label"):
        confusion(["reject"], ["bot"])
    with pytest.raises(ValueError, match="verdict"):
        confusion(["drop"], ["attack"])
    with pytest.raises(ValueError):
        Confusion(-1, 0, 0, 0)


def test_worked_example():
    m = compute_metrics(Confusion(tp=8, tn=9, fp=1, fn=2))
    assert m.fnr == pytest.approx(0.2)
    assert m.fpr == pytest.approx(0.1)
    assert m.acc == pytest.approx(0.85)
    assert m.exact["precision"] == Fraction(8, 9)
    assert m.recall == pytest.approx(0.8)
    p, r = Fraction(8, 9), Fraction(4, 5)
    assert m.exact["f1"] == 2 * (p * r) / (p + r)


def test_no_attacks_gives_null_fnr():
    m = compute_metrics(Confusion(tp=0, tn=5, fp=1, fn=0))
    assert m.fnr is None and m.recall is None and m.f1 is None
    assert "fnr" in m.undefined
    assert m.fpr == pytest.approx(1 / 6)


def test_perfect_classifier():
    m = compute_metrics(Confusion(tp=7, tn=3, fp=0, fn=0))
    assert (m.acc, m.precision, m.recall, m.f1) == (1, 1, 1, 1)
    assert (m.fnr, m.fpr) == (0, 0)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_metrics_match_formula_oracle(tp, tn, fp, fn):
    m = compute_metrics(Confusion(tp, tn, fp, fn))
    assert m.exact == metrics_by_formula(tp, tn, fp, fn)


# ------------------------------------------------------------------ curves


def test_acceptance_zero_lets_nothing_through():
    c = rate_curve([0.2, 0.9, 0.5], ["attack", "normal", "attack"], ACCEPTANCE)
    assert c.points[0] == (0, 0)


def test_rejection_one_rejects_all_normals():
    c = rate_curve([0.2, 0.9, 0.5], ["attack", "normal", "attack"], REJECTION)
    assert c.points[-1] == (1, 1)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("axis", [ACCEPTANCE, REJECTION])
def test_curve_matches_recount(seed, axis):
    rng = np.random.default_rng(seed)
    scores = rng.random(20)
    att = rng.random(20) < 0.5
    c = rate_curve(scores, att, axis)
    for r, v in c.points:
        assert v == curve_by_recount(scores.tolist(), att.tolist(), r, axis)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=50))
def test_acceptance_curve_monotone(pairs):
    scores, att = zip(*pairs)
    if not any(att):
        att = (True,) + att[1:]
    rates = [v for _, v in rate_curve(scores, att, ACCEPTANCE).points]
    assert all(a <= b for a, b in zip(rates, rates[1:]))


def test_curve_axis_checked():
    with pytest.raises(ValueError, match="axis"):
        rate_curve([0.1], [True], "roc")
    assert len(CURVE_RATIOS) == 21


def test_histogram_overlap_bounds():
    rng = np.random.default_rng(0)
    a = rng.random(500)
    assert histogram_overlap(a, a) == pytest.approx(1.0)
    assert histogram_overlap(np.full(10, 0.1), np.full(10, 0.9)) == 0.0
    assert 0 < histogram_overlap(a, rng.random(500) ** 3) < 1
    with pytest.raises(ValueError):
        histogram_overlap([], a)


# ----------------------------------------------------------------- reports


def _rows():
    return [compute_metrics(Confusion(8, 9, 1, 2), dataset="toy", model="N-over-D", interval=3),
            compute_metrics(Confusion(0, 4, 0, 0), dataset="toy", model="N-only")]


def test_json_round_trip(tmp_path):
    curves = {"x/fnr": rate_curve([0.1, 0.7, 0.4], [1, 0, 1], ACCEPTANCE)}
    path = str(tmp_path / "m.json")
    emit_report(_rows(), curves, path, "json")
    doc = load_report(path)
    assert doc["schema_version"] == SCHEMA_VERSION
    assert doc["rows"][0]["acc"] == 0.85
    assert doc["rows"][1]["fnr"] is None
    assert "fnr" in doc["rows"][1]["undefined"]
    assert doc["curves"]["x/fnr"] == curves["x/fnr"].as_dict()


def test_csv_round_trip(tmp_path):
    curves = {"x/fpr": rate_curve([0.1, 0.7, 0.4], [1, 0, 1], REJECTION)}
    path = str(tmp_path / "m.csv")
    files = emit_report(_rows(), curves, path, "csv")
    assert files == [path, str(tmp_path / "m_curves.csv")]
    rows = load_report(path)["rows"]
    assert rows[0]["fnr"] == 0.2 and rows[0]["interval"] == "3"
    assert rows[1]["precision"] is None
    lines = (tmp_path / "m_curves.csv").read_text().splitlines()
    assert len(lines) == 2 + len(CURVE_RATIOS)


def test_empty_rows_header_only(tmp_path):
    path = str(tmp_path / "e.csv")
    emit_report([], {}, path, "csv")
    assert len((tmp_path / "e.csv").read_text().splitlines()) == 2
    emit_report([], {}, str(tmp_path / "e.json"))
    assert json.loads((tmp_path / "e.json").read_text())["rows"] == []


def test_report_errors(tmp_path):
    with pytest.raises(ValueError, match="format"):
        emit_report([], {}, str(tmp_path / "x"), "xml")
    with pytest.raises(OSError, match="cannot write"):
        emit_report([], {}, str(tmp_path / "no" / "x.json"))
    (tmp_path / "old.json").write_text('{"schema_version": 0}')
    with pytest.raises(ValueError, match="schema"):
        load_report(str(tmp_path / "old.json"))


def test_reference_row_renders_in_table():
    ref = {(r["dataset"], r["model"]): r for r in reference_rows()["rows"]}
    hulk = ref[("HULK", "N-over-D (l=1)")]
    assert (hulk["fnr"], hulk["fpr"]) == (0.8997, 0.6295)
    row = MetricsRow(fnr=0.8997, fpr=0.6295, acc=None, precision=None, recall=None, f1=None,
                     dataset="HULK", model="N-over-D (l=1)")
    line = render_comparison_table([row]).splitlines()[2]
    assert line.split()[-4:] == ["0.8997", "0.6295", "0.8997", "0.6295"]


def test_table_maps_filter_names_to_reference():
    row = {"dataset": "desk", "model": "N-over-D", "fnr": 0.1, "fpr": 0.2}
    line = render_comparison_table([row], reference_dataset="HULK").splitlines()[2]
    assert line.split()[-2:] == ["0.8997", "0.6295"]
    line = render_comparison_table([row]).splitlines()[2]
    assert line.split()[-2:] == ["n/a", "n/a"]

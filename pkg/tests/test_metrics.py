import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pancseg.errors import DataError, DimensionMismatchError, EmptyGroundTruthError
from pancseg.metrics import (
    METRICS,
    OverlapReport,
    format_table_row,
    load_reports,
    overlap_report,
    summarize,
    write_summary_csv,
)


def report(**kw):
    base = dict(dice=0.0, jaccard=0.0, precision=0.0, recall=0.0, n_pred=0, n_gt=1, n_intersection=0)
    base.update(kw)
    return OverlapReport(**base)


def test_identical_masks():
    m = np.zeros((4, 4, 2), bool)
    m[1:3, 1:3] = True
    r = overlap_report(m, m)
    assert (r.dice, r.jaccard, r.precision, r.recall) == (1.0, 1.0, 1.0, 1.0)


def test_disjoint_and_empty_prediction():
    a = np.zeros((10, 10, 1), bool)
    b = np.zeros((10, 10, 1), bool)
    a[:5] = True
    b[5:] = True
    r = overlap_report(a, b)
    assert (r.dice, r.jaccard, r.precision, r.recall) == (0.0, 0.0, 0.0, 0.0)
    r = overlap_report(np.zeros_like(b), b)
    assert (r.dice, r.jaccard, r.precision, r.recall) == (0.0, 0.0, 0.0, 0.0)


def test_half_overlap_example():
    a = np.zeros(150, bool)
    b = np.zeros(150, bool)
    a[:100] = True
    b[50:150] = True
    r = overlap_report(a.reshape(10, 15, 1), b.reshape(10, 15, 1))
    assert r.dice == 0.5 and r.precision == 0.5 and r.recall == 0.5
    assert r.jaccard == pytest.approx(1 / 3, abs=1e-15)
    assert (r.n_pred, r.n_gt, r.n_intersection) == (100, 100, 50)


def test_errors():
    with pytest.raises(DimensionMismatchError):
        overlap_report(np.zeros((2, 2, 2), bool), np.ones((2, 2, 3), bool))
    with pytest.raises(EmptyGroundTruthError):
        overlap_report(np.ones((2, 2, 2), bool), np.zeros((2, 2, 2), bool))
    with pytest.raises(DataError):
        summarize([])


masks = arrays(np.bool_, (6, 5, 4))


@settings(max_examples=100, deadline=None)
@given(masks, masks)
def test_identities_and_symmetry(a, b):
    if not a.any() or not b.any():
        return
    ab, ba = overlap_report(a, b), overlap_report(b, a)
    assert ab.dice == ba.dice and ab.jaccard == ba.jaccard
    assert ab.precision == ba.recall
    if ab.dice > 0:
        assert ab.jaccard == pytest.approx(ab.dice / (2 - ab.dice), abs=1e-12)
    assert ab.dice >= ab.jaccard
    for name in METRICS:
        assert 0 <= getattr(ab, name) <= 1


@settings(max_examples=60, deadline=None)
@given(masks, masks, st.data())
def test_adding_true_positive_never_lowers_dice(a, b, data):
    missed = np.argwhere(b & ~a)
    if not b.any() or missed.size == 0:
        return
    i = data.draw(st.integers(0, len(missed) - 1))
    a2 = a.copy()
    a2[tuple(missed[i])] = True
    assert overlap_report(a2, b).dice >= overlap_report(a, b).dice


def test_summarize_examples():
    s = summarize([report(dice=0.7)])
    assert s["dice"] == {"mean": 0.7, "std": 0.0, "min": 0.7, "max": 0.7}
    s = summarize([report(dice=0.4), report(dice=0.8)])
    assert s["dice"]["mean"] == pytest.approx(0.6, abs=1e-15)
    assert s["dice"]["std"] == pytest.approx(0.2, abs=1e-15)
    assert (s["dice"]["min"], s["dice"]["max"]) == (0.4, 0.8)


def test_summarize_matches_direct_sums():
    rng = np.random.default_rng(0)
    reps = [report(**{m: float(v) for m, v in zip(METRICS, rng.random(4))}) for _ in range(50)]
    s = summarize(reps)
    for m in METRICS:
        vals = [getattr(r, m) for r in reps]
        mean = 0.0
        for v in vals:
            mean += v
        mean /= len(vals)
        var = 0.0
        for v in vals:
            var += (v - mean) ** 2
        std = (var / len(vals)) ** 0.5
        assert s[m]["mean"] == pytest.approx(mean, abs=1e-12)
        assert s[m]["std"] == pytest.approx(std, abs=1e-12)
        assert s[m]["min"] == min(vals) and s[m]["max"] == max(vals)


def test_json_and_csv_outputs(tmp_path):
    a = np.zeros((5, 5, 2), bool)
    a[:3] = True
    b = np.zeros((5, 5, 2), bool)
    b[1:4] = True
    r = overlap_report(a, b)
    (tmp_path / "c1.json").write_text(r.to_json())
    (tmp_path / "c2.json").write_text(overlap_report(b, b).to_json())
    assert json.loads((tmp_path / "c1.json").read_text())["dice"] == r.dice
    reps = load_reports(tmp_path)
    assert reps[0] == r
    write_summary_csv(tmp_path / "s.csv", summarize(reps))
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["metric", "mean", "std", "min", "max"]
    assert [r[0] for r in rows[1:]] == list(METRICS)
    assert "%" in format_table_row(summarize(reps))

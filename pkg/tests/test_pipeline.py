import csv
import json

import numpy as np
import pytest

from conftest import SENTINEL, small_config
from pancseg.errors import DataError, MissingArtifactError
from pancseg.phantom import PhantomSpec, generate_phantom, generate_phantoms, piecewise_constant_slice
from pancseg.pipeline import (
    Case,
    Models,
    RunConfig,
    crossval,
    load_case,
    lut_counts,
    segment_case,
    segment_volume,
    train_models,
)
from pancseg.volumes import DatasetManifest, load_mask, load_volume, segment_body

# --- phantoms ------------------------------------------------------------------


def test_phantoms_are_byte_identical_per_seed(tmp_path):
    spec = PhantomSpec(dims=(48, 48, 8), seed=5)
    generate_phantoms(spec, 2, tmp_path / "a")
    generate_phantoms(spec, 2, tmp_path / "b")
    for name in ("case000_vol.mvol", "case000_mask.mvol", "case001_vol.mvol", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    generate_phantoms(PhantomSpec(dims=(48, 48, 8), seed=6), 1, tmp_path / "c")
    assert (tmp_path / "a" / "case000_vol.mvol").read_bytes() != (tmp_path / "c" / "case000_vol.mvol").read_bytes()


def test_phantom_invariants():
    spec = PhantomSpec()
    lo, hi = spec.pancreas_fraction
    for i in range(4):
        vol, mask = generate_phantom(spec, i)
        body = segment_body(vol)
        assert mask.data.any()
        assert not np.any(mask.data & ~body.data)
        assert lo <= mask.data.sum() / body.data.sum() <= hi
        assert vol.data.max() <= 4095
        hu = vol.data[mask.data].astype(float) - 1024
        assert abs(np.median(hu) - 56) <= 60


def test_twelve_phantoms_round_robin_folds(tmp_path):
    m = generate_phantoms(PhantomSpec(dims=(40, 40, 6)), 12, tmp_path)
    counts = np.bincount([e.fold for e in m.entries])
    assert counts.tolist() == [2] * 6


def test_piecewise_slice_contrast():
    for seed in range(5):
        img, target = piecewise_constant_slice(seed)
        assert target.any()
        levels = np.unique(img)
        assert np.all(np.diff(levels[levels > 0]) >= 40)


# --- configuration ---------------------------------------------------------------


def test_run_config_roundtrip(tmp_path):
    cfg = small_config(seed=9, bandwidth=12.5)
    cfg.save(tmp_path / "cfg.json")
    back = RunConfig.load(tmp_path / "cfg.json")
    assert back.to_dict() == cfg.to_dict()
    doc = json.loads((tmp_path / "cfg.json").read_text())
    assert doc["version"] == 1
    assert doc["slic"]["region_size"] == 10 and doc["grid"]["stride"] == 3 and doc["c1"]["n_trees"] == 8


@pytest.mark.parametrize("patch", [{"bogus": 1}, {"version": 2}, {"slic": {"nope": 3}}])
def test_run_config_rejects_bad_documents(patch):
    doc = RunConfig().to_dict()
    doc.update(patch)
    with pytest.raises(DataError):
        RunConfig.from_dict(doc)


def test_missing_artifacts(tmp_path):
    with pytest.raises(MissingArtifactError):
        Models.load(tmp_path)


def test_lut_counts_oracle(small_manifest):
    cases = [load_case(small_manifest, e, small_config()) for e in small_manifest.entries[:2]]
    pos, neg = lut_counts(cases)
    for c in cases:
        assert c.gt.data.sum() > 0
    exp_pos = sum(np.bincount(c.vol.data[c.gt.data], minlength=4096) for c in cases)
    exp_neg = sum(np.bincount(c.vol.data[c.body.data & ~c.gt.data], minlength=4096) for c in cases)
    assert np.array_equal(pos, exp_pos) and np.array_equal(neg, exp_neg)


# --- cross-validation -----------------------------------------------------------


def test_crossval_partition(small_manifest, small_crossval):
    work, result = small_crossval
    tested = [c for cases in result.folds.values() for c in cases]
    assert sorted(tested) == sorted(e.case for e in small_manifest.entries)
    assert len(tested) == len(set(tested))
    for e in small_manifest.entries:
        assert (work / f"fold{e.fold}" / f"{e.case}_pred.mvol").exists()
        assert (work / f"fold{e.fold}" / f"{e.case}_eval.json").exists()
    rows = list(csv.reader(open(work / "summary.csv")))
    assert rows[0] == ["metric", "mean", "std", "min", "max"]


def _case_column(path):
    with open(path, newline="") as fh:
        return {row["case"] for row in csv.DictReader(fh)}


def test_sentinel_never_in_own_fold_training(small_manifest, small_crossval):
    work, _ = small_crossval
    own = next(e.fold for e in small_manifest.entries if e.case == SENTINEL)
    for f in small_manifest.folds():
        d = work / f"fold{f}"
        seen = _case_column(d / "c1_train.csv") | _case_column(d / "sp_train.csv")
        seen |= set((d / "lut_cases.txt").read_text().split())
        if f == own:
            assert SENTINEL not in seen
            assert SENTINEL not in (d / "c1_train.csv").read_text()
            assert SENTINEL not in (d / "sp_train.csv").read_text()
        else:
            # the check has teeth: the sentinel is present wherever it is allowed
            assert SENTINEL in seen
        assert not seen & set(small_crossval[1].folds[f])


def test_crossval_is_deterministic(small_manifest, small_crossval, tmp_path):
    work, result = small_crossval
    again = crossval(small_manifest, small_config(threads=3), tmp_path, tmp_path / "summary.csv")
    assert (tmp_path / "summary.csv").read_bytes() == (work / "summary.csv").read_bytes()
    assert (tmp_path / "fold0" / "cascade.json").read_bytes() == (work / "fold0" / "cascade.json").read_bytes()
    assert again.summary == result.summary


def test_crossval_needs_six_folds(small_manifest, tmp_path):
    few = DatasetManifest(small_manifest.entries[:5], True, small_manifest.root)
    with pytest.raises(DataError):
        crossval(few, small_config(), tmp_path)


# --- segmentation --------------------------------------------------------------


def test_segment_volume_properties(small_manifest, small_crossval):
    work, _ = small_crossval
    e = small_manifest.entries[0]
    vol = load_volume(small_manifest.resolve(e.volume))
    model_dir = work / f"fold{e.fold}"
    a = segment_volume(vol, model_dir)
    b = segment_volume(vol, model_dir)
    assert np.array_equal(a.data, b.data)
    assert np.array_equal(a.data, load_mask(model_dir / f"{e.case}_pred.mvol").data)
    body = segment_body(vol)
    assert not np.any(a.data & ~body.data)


def test_masks_are_unions_of_superpixels(small_manifest, small_crossval):
    work, _ = small_crossval
    e = small_manifest.entries[1]
    cfg = small_config()
    case = load_case(small_manifest, e, cfg)
    pred = segment_case(case, Models.load(work / f"fold{e.fold}"), cfg)
    for z in range(pred.data.shape[0]):
        lab = case.sp.data[z]
        inside = np.bincount(lab.ravel(), weights=pred.data[z].ravel(), minlength=lab.max() + 1)
        size = np.bincount(lab.ravel())
        assert np.all((inside == 0) | (inside == size))


def test_train_requires_ground_truth(small_manifest):
    e = small_manifest.entries[0]
    c = load_case(small_manifest, e, small_config())
    with pytest.raises(DataError):
        train_models([Case(c.name, c.vol, c.body, c.sp, None)], small_config(), 0)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from pancseg.errors import DegenerateCascadeError, MissingFeaturesError, ModelFormatError, SingleClassError
from pancseg.forest import ForestModel, TrainConfig, Tree, dumps_model
from pancseg.superpixel_stage import (
    N_SP_FEATURES,
    SP_FEATURE_NAMES,
    CascadeModel,
    OverlapLabel,
    build_response_map,
    classify_and_stack,
    distribution_stats,
    roc_curve,
    sensitivity_threshold,
    slice_overlap_ratios,
    slice_superpixel_features,
    superpixel_features,
    superpixel_overlap_ratio,
    train_cascade,
)
from pancseg.volumes import CtVolume, LabelVolume

FAST = TrainConfig(n_trees=10, seed=0)


def leaf_forest(p, d=N_SP_FEATURES):
    return ForestModel([Tree(np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]), np.array([p]))], d, {})


def feature_forest(col, d=N_SP_FEATURES):
    """Forest whose probability is 1 when X[:, col] > 0.5, else 0."""
    t = Tree(np.array([col, -1, -1]), np.array([0.5, 0, 0]), np.array([1, -1, -1]), np.array([2, -1, -1]), np.array([0, 0.0, 1.0]))
    return ForestModel([t], d, {})


def stats_oracle(values):
    """Independent twelve-statistic oracle built on scipy.stats and numpy percentiles."""
    v = np.asarray(values, dtype=np.float64)
    pct = [np.percentile(v, p, method="linear") for p in (20, 30, 40, 60, 70, 80, 90)]
    if np.all(v == v[0]):
        head = [v[0], 0.0, 0.0, 0.0]
    else:
        head = [v.mean(), v.std(), stats.skew(v, bias=True), stats.kurtosis(v, fisher=True, bias=True)]
    return np.array(head + pct + [np.median(v)])


# --- response maps ---------------------------------------------------------


def test_single_center_fills_body():
    body = np.zeros((10, 12), bool)
    body[2:8, 3:10] = True
    r = build_response_map((10, 12), [5], [6], [0.8], body)
    assert np.all(r[body] == 0.8) and np.all(r[~body] == 0)


def test_two_centers_tie_rule():
    r = build_response_map((1, 31), [0, 0], [30, 0], [1.0, 0.0])
    assert np.all(r[0, :16] == 0.0)
    assert np.all(r[0, 16:] == 1.0)


def _nearest_oracle(shape, ys, xs, probs):
    out = np.zeros(shape)
    for y in range(shape[0]):
        for x in range(shape[1]):
            best = None
            for cy, cx, p in sorted(zip(ys, xs, probs)):
                d = (cy - y) ** 2 + (cx - x) ** 2
                if best is None or d < best[0]:
                    best = (d, p)
            out[y, x] = best[1]
    return out


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(6, 30), st.integers(6, 30))
def test_stride3_grid_matches_oracle(seed, ny, nx):
    rng = np.random.default_rng(seed)
    gy, gx = np.meshgrid(np.arange(1, ny, 3), np.arange(1, nx, 3), indexing="ij")
    keep = rng.random(gy.size) < 0.8
    ys, xs = gy.ravel()[keep], gx.ravel()[keep]
    if ys.size == 0:
        return
    probs = rng.random(ys.size)
    got = build_response_map((ny, nx), ys, xs, probs)
    assert np.array_equal(got, _nearest_oracle((ny, nx), ys.tolist(), xs.tolist(), probs.tolist()))


# --- overlap labels ----------------------------------------------------------


def test_overlap_examples():
    gt = np.zeros((5, 5), bool)
    gt[1:4, 1:4] = True
    inside = np.zeros((5, 5), bool)
    inside[2, 2] = True
    assert superpixel_overlap_ratio(inside, gt) == 1.0
    assert OverlapLabel.from_ratio(1.0) is OverlapLabel.POSITIVE
    far = np.zeros((5, 5), bool)
    far[0, 0] = True
    assert superpixel_overlap_ratio(far, gt) == 0.0
    assert OverlapLabel.from_ratio(0.0) is OverlapLabel.NEGATIVE
    ten = np.zeros((5, 5), bool)
    ten.ravel()[:10] = True
    partial = np.zeros((5, 5), bool)
    partial.ravel()[[0, 3, 7]] = True
    assert superpixel_overlap_ratio(ten, partial) == pytest.approx(0.3)
    assert OverlapLabel.from_ratio(0.3) is OverlapLabel.AMBIGUOUS
    assert OverlapLabel.from_ratio(0.5) is OverlapLabel.POSITIVE
    assert OverlapLabel.from_ratio(0.2) is OverlapLabel.NEGATIVE


def test_slice_overlap_ratios_match_single():
    rng = np.random.default_rng(0)
    lab = rng.integers(0, 5, (12, 12))
    gt = rng.random((12, 12)) < 0.4
    r = slice_overlap_ratios(lab, gt)
    for k in range(5):
        assert r[k] == pytest.approx(superpixel_overlap_ratio(lab == k, gt), abs=1e-15)


# --- distribution features ---------------------------------------------------


def test_constant_superpixel():
    mask = np.ones((3, 4), bool)
    f = superpixel_features(mask, np.full((3, 4), 1080.0), np.full((3, 4), 0.3))
    assert np.array_equal(f[:12], [1080.0, 0, 0, 0] + [1080.0] * 8)
    assert np.array_equal(f[12:], [0.3, 0, 0, 0] + [0.3] * 8)
    assert len(SP_FEATURE_NAMES) == N_SP_FEATURES == f.size


def test_symmetric_values_have_zero_skew():
    assert distribution_stats([1, 2, 3, 4, 5])[2] == pytest.approx(0.0, abs=1e-15)


def test_one_to_hundred_percentiles():
    s = distribution_stats(np.arange(1, 101))
    assert s[4] == pytest.approx(20.8, abs=1e-12)
    assert s[10] == pytest.approx(90.1, abs=1e-12)
    np.testing.assert_allclose(s, stats_oracle(np.arange(1, 101)), rtol=1e-9, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.integers(0, 4095), min_size=1, max_size=120),
    st.integers(0, 2**32 - 1),
)
def test_stats_match_oracle_and_ignore_order(values, seed):
    v = np.array(values, dtype=float)
    s = distribution_stats(v)
    np.testing.assert_allclose(s, stats_oracle(v), rtol=1e-9, atol=1e-9)
    perm = np.random.default_rng(seed).permutation(v.size)
    assert np.array_equal(s, distribution_stats(v[perm]))
    assert s[1] >= 0
    assert np.all(np.diff(s[4:11]) >= 0)
    assert s[6] <= s[11] <= s[7]


def test_slice_features_match_per_superpixel():
    rng = np.random.default_rng(1)
    lab = rng.integers(0, 6, (10, 10))
    lab.ravel()[:6] = np.arange(6)
    img = rng.integers(800, 1300, (10, 10)).astype(float)
    resp = rng.random((10, 10))
    table = slice_superpixel_features(lab, img, resp)
    for k in range(6):
        assert np.array_equal(table[k], superpixel_features(lab == k, img, resp))


# --- cascade ---------------------------------------------------------------------


def separable(n_pos=60, n_neg=300, seed=0):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(2.0, 0.3, (n_pos, N_SP_FEATURES)), rng.normal(-2.0, 0.3, (n_neg, N_SP_FEATURES))])
    labels = [OverlapLabel.POSITIVE] * n_pos + [OverlapLabel.NEGATIVE] * n_neg
    return X, labels


def test_separable_cascade_sensitivity():
    X, labels = separable()
    model = train_cascade(X, labels, FAST)
    pos = np.array([l is OverlapLabel.POSITIVE for l in labels])
    s2, _ = model.scores(X)
    assert np.all(s2[pos] >= model.t2)
    assert s2[pos].min() > s2[~pos].max()
    assert model.decide(X)[pos].mean() >= 0.99


def test_degenerate_cascade_strict():
    X, labels = separable()
    with pytest.raises(DegenerateCascadeError):
        train_cascade(X, labels, FAST, strict=True)


def test_all_positive_is_error():
    X, _ = separable()
    with pytest.raises(SingleClassError):
        train_cascade(X, [OverlapLabel.POSITIVE] * len(X), FAST)


def test_ambiguous_rows_never_used():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(200, N_SP_FEATURES))
    labels = np.where(X[:, 0] + 0.5 * rng.normal(size=200) > 0.8, "positive", "negative").tolist()
    amb = rng.normal(5.0, 3.0, (40, N_SP_FEATURES))
    a = train_cascade(X, labels, FAST)
    b = train_cascade(np.vstack([X, amb]), labels + ["ambiguous"] * 40, FAST)
    assert dumps_model(a.c2) == dumps_model(b.c2)
    assert dumps_model(a.c3) == dumps_model(b.c3)
    assert a.t2 == b.t2


def test_sensitivity_threshold_bruteforce():
    rng = np.random.default_rng(4)
    for _ in range(50):
        s = rng.choice(np.linspace(0, 1, 11), size=rng.integers(1, 60))
        target = rng.choice([0.9, 0.95, 0.99, 1.0])
        ok = [t for t in np.unique(s) if np.mean(s >= t) >= target]
        assert sensitivity_threshold(s, target) == max(ok)


def test_cascade_file_roundtrip(tmp_path):
    X, labels = separable(seed=1)
    m = train_cascade(X, labels, FAST)
    m.save(tmp_path / "c.json")
    back = CascadeModel.load(tmp_path / "c.json")
    assert (back.t2, back.t3) == (m.t2, m.t3)
    assert np.array_equal(back.decide(X), m.decide(X))
    bad = CascadeModel(leaf_forest(1.0, 5), leaf_forest(1.0), 0.5, 0.5)
    bad.save(tmp_path / "bad.json")
    with pytest.raises(ModelFormatError):
        CascadeModel.load(tmp_path / "bad.json")


# --- stacking -----------------------------------------------------------------------


def _blocks(nz=2, n=20, b=5):
    lab = (np.arange(n)[:, None] // b) * (n // b) + np.arange(n)[None, :] // b
    return LabelVolume(np.repeat(lab[None], nz, axis=0).astype(np.uint32))


def test_reject_all_gives_empty_mask():
    sp = _blocks()
    vol = CtVolume(np.zeros(sp.data.shape, np.uint16))
    feats = {(z, k): np.zeros(N_SP_FEATURES) for z in range(2) for k in range(16)}
    out = classify_and_stack(vol, sp, feats, CascadeModel(leaf_forest(0.0), leaf_forest(1.0), 0.5))
    assert not out.data.any()


def test_single_positive_superpixel_of_fifty_pixels():
    lab = np.zeros((1, 10, 10), np.uint32)
    lab[0, :, 5:] = 1  # two superpixels of 50 pixels
    sp = LabelVolume(lab)
    vol = CtVolume(np.zeros(lab.shape, np.uint16))
    feats = {(0, 0): np.zeros(N_SP_FEATURES), (0, 1): np.ones(N_SP_FEATURES)}
    out = classify_and_stack(vol, sp, feats, CascadeModel(feature_forest(0), leaf_forest(1.0), 0.5))
    assert out.data.sum() == 50
    assert out.data[0, :, 5:].all()


def test_missing_features():
    sp = _blocks(1)
    with pytest.raises(MissingFeaturesError):
        classify_and_stack(CtVolume(np.zeros(sp.data.shape, np.uint16)), sp, {}, CascadeModel(leaf_forest(1), leaf_forest(1), 0.5))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_stacking_union_and_monotone(seed, t2a, t2b, t3a, t3b):
    rng = np.random.default_rng(seed)
    X, labels = separable(20, 60, seed % 1000)
    model = train_cascade(X + rng.normal(0, 2.0, X.shape), labels, TrainConfig(n_trees=5, seed=seed))
    sp = _blocks(3)
    vol = CtVolume(np.zeros(sp.data.shape, np.uint16))
    feats = {(z, k): rng.normal(0, 2, N_SP_FEATURES) for z in range(3) for k in range(16)}
    lo2, hi2 = sorted((t2a, t2b))
    lo3, hi3 = sorted((t3a, t3b))
    loose = classify_and_stack(vol, sp, feats, model, t2=lo2, t3=lo3).data
    tight = classify_and_stack(vol, sp, feats, model, t2=hi2, t3=hi3).data
    assert not np.any(tight & ~loose)
    for z in range(3):
        one = {(0, k): feats[(z, k)] for k in range(16)}
        single = classify_and_stack(CtVolume(vol.data[z : z + 1]), LabelVolume(sp.data[z : z + 1]), one, model, t2=lo2, t3=lo3)
        assert np.array_equal(single.data[0], loose[z])
        # whole superpixels only
        for k in range(16):
            px = loose[z][sp.data[z] == k]
            assert px.all() or not px.any()


# --- ROC ----------------------------------------------------------------------------


def test_roc_counts_and_size_weighting():
    rng = np.random.default_rng(7)
    scores = rng.choice(np.linspace(0, 1, 9), 40)
    positive = rng.random(40) < 0.4
    sizes = rng.integers(1, 30, 40)
    fpr, tpr, thr = roc_curve(scores, positive)
    for f, t, th in zip(fpr[1:], tpr[1:], thr[1:]):
        acc = scores >= th
        assert t == pytest.approx((acc & positive).sum() / positive.sum())
        assert f == pytest.approx((acc & ~positive).sum() / (~positive).sum())
    # pixel-level: every pixel carries its superpixel's score and label
    px_scores = np.repeat(scores, sizes)
    px_pos = np.repeat(positive, sizes)
    wf, wt, wthr = roc_curve(scores, positive, sizes)
    pf, pt, pthr = roc_curve(px_scores, px_pos)
    np.testing.assert_allclose(wt, pt, atol=1e-12)
    np.testing.assert_allclose(wf, pf, atol=1e-12)
    assert np.array_equal(wthr, pthr)
    assert np.all(np.diff(tpr) >= 0) and np.all(np.diff(fpr) >= 0)

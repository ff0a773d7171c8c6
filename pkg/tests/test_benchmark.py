import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvrefer import benchmark as B
from mvrefer import scenes


def test_uniform_sampling():
    assert B.sample_views_uniform(24, 8) == [0, 3, 6, 9, 12, 15, 18, 21]
    assert B.sample_views_uniform(8, 8) == list(range(8))
    with pytest.raises(B.ProtocolError):
        B.sample_views_uniform(4, 8)


@settings(max_examples=200, deadline=None)
@given(vis=st.lists(st.booleans(), min_size=8, max_size=40), seed=st.integers(0, 2**31))
def test_visibility_validation_property(vis, seed):
    if not any(vis):
        with pytest.raises(B.ProtocolError):
            B.visibility_validation([0], vis, seed)
        return
    sel = B.sample_views_uniform(len(vis), 8)
    out = B.visibility_validation(sel, vis, seed)
    assert any(vis[i] for i in out)
    if any(vis[i] for i in sel):
        assert out == sel
    else:
        assert sum(a != b for a, b in zip(out, sel)) == 1


def _pixel_count_oracle(sample) -> str:
    best = 0.0
    for v in sample.views:
        n = 0
        for row in v.instance_ids:
            for x in row:
                n += int(x == sample.target_id)
        best = max(best, n / v.instance_ids.size)
    return "hard" if best < 0.05 else "easy"


def test_difficulty_matches_pixel_oracle(standard_samples):
    for s in standard_samples:
        assert B.classify_difficulty(s) == _pixel_count_oracle(s)


def test_uniqueness_split(sample):
    shape = sample.target.shape
    expected = "unique" if [o.shape for o in sample.objects].count(shape) == 1 else "multiple"
    assert B.classify_uniqueness(sample) == expected


def test_iou_conventions():
    assert B.iou(np.zeros(4), np.zeros(4)) == 1.0
    assert B.iou(np.array([1, 0, 0]), np.zeros(3)) == 0.0
    assert B.iou(np.array([1, 1, 0]), np.array([0, 1, 1])) == pytest.approx(1 / 3)
    with pytest.raises(B.ProtocolError):
        B.iou(np.zeros(2), np.zeros(3))


def test_acc_threshold_uses_inclusive_comparison():
    assert B.acc_at_threshold([0.25, 0.5, 0.1, 0.9], 0.25) == 75.0
    assert B.acc_at_threshold([0.25, 0.5, 0.1, 0.9], 0.5) == 50.0
    with pytest.raises(B.ProtocolError):
        B.acc_at_threshold([], 0.5)


def test_ground_truth_and_empty_predictors(standard_samples):
    gt = {s.sample_id: s.gt_mask3d.values.astype(float) for s in standard_samples}
    rep = B.evaluate_suite(gt, standard_samples)
    for split in B.SPLITS:
        r = rep.splits[split]
        if r.count == 0:
            continue
        for m in B.METRICS:
            value = getattr(r, m)
            assert value is None or value == 100.0
        assert r.acc_at[0.25] == r.acc_at[0.5] == 100.0
    empty = {s.sample_id: np.zeros(len(s.cloud)) for s in standard_samples}
    rep = B.evaluate_suite(empty, standard_samples)
    assert rep.miou_neg == 100.0 and rep.miou_pos == 0.0 and rep.miou_global == 0.0


def test_view_metric_is_uniform_mean(sample):
    gen = np.random.default_rng(0)
    pred = gen.random(len(sample.cloud))
    m = B.evaluate_sample(pred, sample)
    assert m.miou_view == pytest.approx(np.mean(m.view_ious))
    pos = sample.partition.positives
    assert m.miou_pos == pytest.approx(np.mean([m.view_ious[i] for i in pos]))


def test_report_layout_and_monotone_accuracy(standard_samples):
    gen = np.random.default_rng(1)
    preds = {s.sample_id: np.clip(s.gt_mask3d.values + gen.normal(0, 0.6, len(s.cloud)), 0, 1)
             for s in standard_samples}
    rep = B.evaluate_suite(preds, standard_samples)
    rows = rep.rows()
    assert [r["split"] for r in rows] == list(B.SPLITS)
    for r in rows:
        assert set(r) == {"split", "count", *B.METRICS, "acc@25", "acc@50"}
        if r["count"]:
            assert r["acc@25"] >= r["acc@50"]
    csv_lines = rep.to_csv().strip().splitlines()
    assert len(csv_lines) == 1 + 5
    assert rep.splits["hard"].count + rep.splits["easy"].count == len(standard_samples)
    assert rep.splits["unique"].count + rep.splits["multiple"].count == len(standard_samples)


def test_missing_prediction_is_an_error(standard_samples):
    with pytest.raises(B.ProtocolError):
        B.evaluate_suite({}, standard_samples)
    with pytest.raises(B.ProtocolError):
        B.evaluate_sample(np.zeros(3), standard_samples[0])


def test_no_negative_views_are_excluded_from_neg_mean(sample):
    full = [scenes.build_sample(sample.objects, sample.room_extent, sample.target_id,
                                [sample.views[i] for i in sample.partition.positives] * 2,
                                list(range(2 * len(sample.partition.positives))), sample_id="allpos")]
    rep = B.evaluate_suite({"allpos": full[0].gt_mask3d.values}, full)
    assert rep.miou_neg is None
    assert "nan" in rep.to_csv()

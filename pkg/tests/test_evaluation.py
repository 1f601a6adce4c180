import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from postmortem_pad.dataset import Label
from postmortem_pad.errors import ParameterError, ValidationError
from postmortem_pad.evaluation import (
    ScoredSample,
    aggregate_splits,
    apcer_bpcer,
    evaluate_split,
    read_scores,
    roc_auc,
    split_accuracy,
    time_horizon_analysis,
    write_scores,
    zero_apcer_operating_point,
)


def scored_from(live, pm, hours=None):
    out = [ScoredSample(float(p), Label.LIVE) for p in live]
    hours = hours if hours is not None else [10.0] * len(pm)
    out += [ScoredSample(float(p), Label.POST_MORTEM, hours_post_mortem=h) for p, h in zip(pm, hours)]
    return out


def pairwise_auc(live, pm):
    """P(live > pm) + 0.5 P(live == pm) over all pairs."""
    total = 0.0
    for a in live:
        for b in pm:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(live) * len(pm))


unit = st.floats(0, 1, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(live=st.lists(unit, min_size=1, max_size=40), pm=st.lists(unit, min_size=1, max_size=40))
def test_auc_equals_pairwise_oracle(live, pm):
    _, auc = roc_auc(scored_from(live, pm))
    assert abs(auc - pairwise_auc(live, pm)) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(
    live=st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), min_size=1, max_size=30),
    pm=st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), min_size=1, max_size=30),
)
def test_auc_with_heavy_ties(live, pm):
    points, auc = roc_auc(scored_from(live, pm))
    assert abs(auc - pairwise_auc(live, pm)) <= 1e-9
    assert (points[0].false_live_rate, points[0].true_live_rate) == (0.0, 0.0)
    assert (points[-1].false_live_rate, points[-1].true_live_rate) == (1.0, 1.0)
    xs = [p.false_live_rate for p in points]
    ys = [p.true_live_rate for p in points]
    assert xs == sorted(xs) and ys == sorted(ys)


def test_auc_extremes():
    assert roc_auc(scored_from([0.9, 0.8], [0.1, 0.2]))[1] == 1.0
    assert roc_auc(scored_from([0.1], [0.9]))[1] == 0.0
    assert roc_auc(scored_from([0.5], [0.5]))[1] == 0.5
    with pytest.raises(ParameterError):
        roc_auc(scored_from([0.5], []))


@settings(max_examples=50, deadline=None)
@given(live=st.lists(unit, min_size=1, max_size=30), pm=st.lists(unit, min_size=1, max_size=30),
       thresholds=st.lists(unit, min_size=2, max_size=10))
def test_apcer_bpcer_monotone(live, pm, thresholds):
    s = scored_from(live, pm)
    prev = None
    for t in sorted(thresholds):
        a, b = apcer_bpcer(s, t)
        assert 0 <= a <= 1 and 0 <= b <= 1
        if prev is not None:
            assert a <= prev[0] and b >= prev[1]
        prev = (a, b)


def test_apcer_bpcer_definitions():
    s = scored_from([0.9, 0.4, 0.6, 0.7], [0.1, 0.55, 0.3])
    assert apcer_bpcer(s, 0.5) == (1 / 3, 1 / 4)


@settings(max_examples=50, deadline=None)
@given(live=st.lists(unit, min_size=1, max_size=30), pm=st.lists(unit, min_size=1, max_size=30))
def test_zero_apcer_operating_point(live, pm):
    s = scored_from(live, pm)
    op = zero_apcer_operating_point(s)
    assert op.apcer == 0.0
    # Lowest such threshold: any lower distinct score would accept a post-mortem sample.
    assert op.threshold == math.nextafter(max(pm), math.inf)
    assert op.bpcer == sum(p < op.threshold for p in live) / len(live)


def test_zero_apcer_min_hours_filter():
    s = scored_from([0.9, 0.8, 0.6], [0.7, 0.2, 0.1], hours=[5, 20, 40])
    assert zero_apcer_operating_point(s, 0).bpcer == pytest.approx(1 / 3)
    op = zero_apcer_operating_point(s, 16)
    assert op.apcer == 0.0 and op.bpcer == 0.0 and op.auc == 1.0
    with pytest.raises(ParameterError):
        zero_apcer_operating_point(s, 100)


def test_split_accuracy_threshold():
    s = scored_from([0.5, 0.49], [0.5, 0.1])
    assert split_accuracy(s) == 0.5


def test_time_bins_zero_bin_is_exactly_live():
    s = scored_from([0.9, 0.8, 0.95], [0.4, 0.3, 0.1, 0.05], hours=[5, 5, 30, 200])
    bins = time_horizon_analysis(s)
    assert bins[0].label == "0h" and bins[0].n == 3
    assert [b.n for b in bins[1:]] == [2, 1, 1]
    edged = time_horizon_analysis(s, [24, 96])
    assert [b.n for b in edged] == [3, 2, 1, 1]
    assert edged[0].mean == pytest.approx(np.mean([0.9, 0.8, 0.95]))
    with pytest.raises(ParameterError):
        time_horizon_analysis(s, [24, 10])


def test_aggregate_pools_and_averages():
    a = evaluate_split(scored_from([0.9, 0.8], [0.1, 0.95]))
    b = evaluate_split(scored_from([0.9, 0.7], [0.1, 0.2]))
    agg = aggregate_splits([a, b])
    assert agg.per_split_accuracy == [0.75, 1.0]
    assert agg.mean_accuracy == 0.875
    assert len(agg.scored) == 8
    d = agg.to_dict()
    assert d["n_samples"] == 8 and "scored" not in d


def test_scored_sample_validation():
    with pytest.raises(ValidationError):
        ScoredSample(1.5, Label.LIVE)


def test_score_file_round_trip(tmp_path):
    s = [ScoredSample(0.1 + 1e-13, Label.POST_MORTEM, 12.25, "pm_1", 3, "pm_1_L_00", "/x/pm_1_L_00.png"),
         ScoredSample(0.9, Label.LIVE, 0.0, "live_1", 3, "live_1_L_00", "/x/live_1_L_00.png")]
    assert read_scores(write_scores(s, tmp_path / "s.csv")) == s

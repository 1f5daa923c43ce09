import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sleepcl.metrics import (
    MetricsRecord,
    avg_accuracy,
    bootstrap_ci,
    derived_metrics,
    forgetting_curve,
    max_accuracy_per_task,
    prev_and_current,
    read_hist_csv,
    read_metrics_csv,
    task_balance_kl,
    weight_histogram,
    write_hist_csv,
    write_metrics_csv,
)


def rec(task, it, *accs):
    return MetricsRecord(task, it, tuple(accs))


def test_avg_accuracy_example():
    assert avg_accuracy(rec(2, 0, 0.8, 0.6)) == pytest.approx(0.7)


def test_prev_and_current_example():
    assert prev_and_current(rec(3, 0, 0.9, 0.7, 0.5)) == (pytest.approx(0.8), 0.5)


def test_prev_undefined_for_first_task():
    assert prev_and_current(rec(1, 0, 0.9)) == (None, 0.9)
    assert "mu_prev" not in derived_metrics(rec(1, 0, 0.9))


def test_kl_balanced_is_zero():
    assert task_balance_kl(rec(2, 0, 0.5, 0.5)) == 0.0


def test_kl_worked_example():
    # normalised (0.8, 0.2) against uniform halves
    ref = 0.8 * math.log(1.6) + 0.2 * math.log(0.4)
    assert task_balance_kl(rec(2, 0, 0.8, 0.2)) == pytest.approx(ref)
    assert ref == pytest.approx(0.1927, abs=1e-4)


def test_kl_one_task_dominant_is_log_n():
    assert task_balance_kl(rec(4, 0, 0.6, 0.0, 0.0, 0.0)) == pytest.approx(math.log(4))


def test_kl_all_zero_is_nan_and_omitted():
    r = rec(2, 0, 0.0, 0.0)
    assert math.isnan(task_balance_kl(r))
    assert "kl" not in derived_metrics(r)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=8))
def test_kl_non_negative_and_bounded(accs):
    r = MetricsRecord(len(accs), 0, tuple(accs))
    kl = task_balance_kl(r)
    if sum(accs) == 0:
        assert math.isnan(kl)
    else:
        assert 0.0 <= kl <= math.log(len(accs)) + 1e-9


def test_record_validation():
    with pytest.raises(ValueError):
        MetricsRecord(2, 0, (0.5,))
    with pytest.raises(ValueError):
        MetricsRecord(1, 0, (1.5,))
    with pytest.raises(ValueError):
        MetricsRecord(0, 0, ())


def test_forgetting_curve_reindexes_and_marks_gaps():
    records = [rec(1, 10, 0.9), rec(2, 10, 0.5, 0.9), rec(2, 20, 0.6, 0.9), rec(4, 10, 0.3, 0.3, 0.3, 0.9)]
    curve = forgetting_curve(records, 1)
    assert curve[0] == [(10, 0.9)]
    assert curve[1] == [(10, 0.5), (20, 0.6)]
    assert curve[2] is None
    assert curve[3] == [(10, 0.3)]
    assert forgetting_curve(records, 2)[0] == [(10, 0.9), (20, 0.9)]


def test_max_accuracy_first_iteration_of_tie():
    records = [rec(1, 10, 0.5), rec(1, 20, 0.9), rec(1, 30, 0.9), rec(2, 5, 0.4, 0.6)]
    best = max_accuracy_per_task(records)
    assert best[1] == (0.9, 20)
    assert best[2] == (pytest.approx(0.5), 5)


def test_histogram_counts_only_positive_weights():
    w = np.array([-1.0, 0.0, 0.25, 0.5, 1.0])
    h = weight_histogram(w, "l", bins=4)
    assert h.counts.sum() == 3
    np.testing.assert_allclose(h.edges, [0, 0.25, 0.5, 0.75, 1.0])
    assert h.counts.tolist() == [0, 1, 1, 1]


def test_histogram_all_nonpositive():
    h = weight_histogram(np.array([-1.0, 0.0]), "l")
    assert h.counts.sum() == 0 and h.mass_below(1.0) == 0


def test_mass_below_threshold():
    h = weight_histogram(np.array([0.1, 0.2, 0.9, 1.0]), "l", bins=10)
    assert h.mass_below(0.35) == 2
    assert h.mass_below(0.05) == 0


def test_bootstrap_identical_samples():
    assert bootstrap_ci([0.4] * 5) == (0.4, 0.4)


def test_bootstrap_needs_two_samples():
    with pytest.raises(ValueError):
        bootstrap_ci([1.0])


def test_bootstrap_brackets_mean_and_deterministic():
    x = [0.1, 0.5, 0.3, 0.9, 0.4]
    lo, hi = bootstrap_ci(x, seed=3)
    assert lo <= np.mean(x) <= hi
    assert (lo, hi) == bootstrap_ci(x, seed=3)


def test_bootstrap_coverage_monte_carlo():
    # percentile intervals for a normal mean with n=30 should cover close to 95%
    rng = np.random.default_rng(0)
    hits = 0
    for rep in range(200):
        lo, hi = bootstrap_ci(rng.normal(1.0, 2.0, size=30), 0.95, resamples=1000, seed=rep)
        hits += lo <= 1.0 <= hi
    assert 0.88 <= hits / 200 <= 0.99


def test_metrics_csv_roundtrip(tmp_path):
    records = [MetricsRecord(1, 1, (0.5,), seed=3), MetricsRecord(2, 1, (0.25, 1.0), seed=3)]
    write_metrics_csv(tmp_path / "m.csv", records, 0.75, True)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "seed,p,rem_enabled,task,iteration,class_set,accuracy"
    assert lines[1] == "3,0.75,1,1,1,1,0.5"
    assert read_metrics_csv(tmp_path / "m.csv") == records


def test_hist_csv_roundtrip(tmp_path):
    h = weight_histogram(np.array([0.1, 0.3, 0.7]), "enc", bins=4, task=2, iteration=50)
    write_hist_csv(tmp_path / "h.csv", [h])
    (back,) = read_hist_csv(tmp_path / "h.csv")
    assert (back.layer, back.task, back.iteration) == ("enc", 2, 50)
    np.testing.assert_array_equal(back.counts, h.counts)
    np.testing.assert_array_equal(back.edges, h.edges)

import csv

import pytest

from ddpinn import metrics
from ddpinn.errors import RejectedInput


@pytest.mark.parametrize("t1,tn,want", [(10, 10, 1.0), (10, 12.5, 0.8), (10, 5, 2.0)])
def test_weak_efficiency(t1, tn, want):
    assert metrics.weak_efficiency(t1, tn) == want


def test_speedup_and_strong_efficiency():
    s = metrics.speedup(100, 25)
    assert s == 4 and metrics.strong_efficiency(s, 4) == 1.0
    s = metrics.speedup(100, 6)
    assert s == pytest.approx(16.67, abs=5e-3)
    assert metrics.strong_efficiency(s, 24) == pytest.approx(0.694, abs=1e-3)
    assert metrics.strong_efficiency(metrics.speedup(3, 3), 1) == 1.0


@pytest.mark.parametrize("args", [(0, 1), (1, -2)])
def test_nonpositive_rejected(args):
    with pytest.raises(RejectedInput):
        metrics.weak_efficiency(*args)
    with pytest.raises(RejectedInput):
        metrics.speedup(*args)


def test_record_validation():
    with pytest.raises(RejectedInput):
        metrics.ScalingRecord(0, [1.0], 10)
    with pytest.raises(RejectedInput):
        metrics.ScalingRecord(1, [], 10)
    with pytest.raises(RejectedInput):
        metrics.ScalingRecord(1, [1.0, 0.0], 10)
    r = metrics.ScalingRecord(2, [3.0, 1.0, 2.0], 100)
    assert r.median == 2.0 and r.stdev == 1.0


def test_single_worker_table():
    rows = metrics.scaling_table([metrics.ScalingRecord(1, [2.0], 50)], "weak")
    assert rows[0]["efficiency"] == 1.0
    rows = metrics.scaling_table([metrics.ScalingRecord(1, [2.0], 50)], "strong")
    assert rows[0]["speedup"] == 1.0 and rows[0]["efficiency"] == 1.0


def test_weak_and_strong_tables(tmp_path):
    recs = [metrics.ScalingRecord(4, [12.5], 400), metrics.ScalingRecord(1, [10.0], 100),
            metrics.ScalingRecord(2, [10.0, 10.0], 200)]
    weak = metrics.scaling_table(recs, "weak")
    assert [r["workers"] for r in weak] == [1, 2, 4]
    assert [r["efficiency"] for r in weak] == [1.0, 1.0, 0.8]
    assert weak[2]["throughput_pts_per_s"] == 32.0
    strong = metrics.scaling_table([metrics.ScalingRecord(1, [100.0], 1), metrics.ScalingRecord(4, [25.0], 1)],
                                   "strong")
    assert strong[1]["speedup"] == 4.0 and strong[1]["efficiency"] == 1.0
    # base above one worker: speedup is measured in units of the base count
    based = metrics.scaling_table([metrics.ScalingRecord(2, [50.0], 1), metrics.ScalingRecord(4, [25.0], 1)],
                                  "strong")
    assert based[1]["speedup"] == 4.0 and based[1]["efficiency"] == 1.0
    path = metrics.write_report(weak, tmp_path / "r.csv")
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == list(metrics.REPORT_COLUMNS)
    assert float(rows[2]["efficiency"]) == 0.8 and rows[0]["speedup"] == ""
    with pytest.raises(RejectedInput):
        metrics.scaling_table(recs, "diagonal")


def test_throughput():
    assert metrics.throughput(1000, 4.0) == 250.0
    with pytest.raises(RejectedInput):
        metrics.throughput(-1, 1.0)

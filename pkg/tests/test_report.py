import json

import numpy as np
import pytest
from conftest import DATA

from sramlab.bits import PowerUpPattern
from sramlab.campaign import SamplingPolicy
from sramlab.datastore import load_epoch_windows
from sramlab.metrics import SampleSet
from sramlab.report import InsufficientDataError, ReportBuilder, build_report


def fixture_report():
    data = load_epoch_windows(DATA / "fixture_records.jsonl", SamplingPolicy(window=5))
    return build_report(data)


def windows(bits_by_dev_epoch):
    return [SampleSet.from_bits(np.array(b), d, e) for (d, e), b in bits_by_dev_epoch.items()]


def test_golden_text_report():
    assert fixture_report().to_text() == (DATA / "golden_report.txt").read_text()


def test_fixture_values():
    r = fixture_report()
    assert r.series["wchd"][1] == {"S0": pytest.approx(0.12), "S16": pytest.approx(0.10)}
    assert r.series["stable_ratio"][0] == {"S0": 0.8, "S16": 0.9}
    assert r.row("fhw", "WC").subject == "S16"
    assert r.row("noise_entropy", "WC").subject == "S0"
    assert r.bchd_pairs == {0: {"S0|S16": 0.5}, 1: {"S0|S16": 0.4}}
    assert r.cross["puf_entropy"] == {0: 0.5, 1: 0.4}


def test_identical_epochs_have_no_change():
    rng = np.random.default_rng(1)
    data = {}
    for d in ("S0", "S1", "S2"):
        b = rng.integers(0, 2, (6, 40))
        data[(d, 0)] = b
        data[(d, 1)] = b
    r = build_report(windows(data))
    for row in r.rows:
        assert row.relative == 0 and row.monthly == 0
    assert r.series["wchd"][0] == r.series["wchd"][1]
    assert "negligible" in r.to_text()


def test_missing_epoch_is_marked_incomplete():
    rng = np.random.default_rng(2)
    data = {(d, e): rng.integers(0, 2, (4, 16)) for d in ("S0", "S1") for e in range(3)}
    del data[("S1", 1)]
    r = build_report(windows(data))
    assert r.incomplete == [1]
    assert r.end_epoch == 2 and r.months == 2
    assert 1 not in r.cross["bchd_avg"]
    assert "S0" in r.series["wchd"][1] and "S1" not in r.series["wchd"][1]
    assert "Incomplete epochs" in r.to_text()


def test_single_epoch_initial_quality():
    rng = np.random.default_rng(3)
    r = build_report(windows({(d, 0): rng.integers(0, 2, (5, 64)) for d in ("S0", "S1")}))
    assert r.months == 0
    assert all(row.relative is None for row in r.rows)
    assert sum(r.histograms["wchd"]) == 2 * 5 and sum(r.histograms["bchd"]) == 1
    assert sum(r.histograms["fhw"]) == 10


def test_errors():
    one = windows({("S0", 0): np.zeros((3, 8), dtype=int)})
    with pytest.raises(InsufficientDataError, match="at least 2 devices"):
        build_report(one)
    b = ReportBuilder()
    b.add(SampleSet.from_bits(np.zeros((3, 8), dtype=int), "S0", 1))
    b.add(SampleSet.from_bits(np.zeros((3, 8), dtype=int), "S1", 0))
    with pytest.raises(InsufficientDataError, match="S0"):
        b.build()
    with pytest.raises(ValueError, match="duplicate"):
        b.add(SampleSet.from_bits(np.zeros((3, 8), dtype=int), "S1", 0))


def test_later_window_before_reference_is_accepted():
    rng = np.random.default_rng(4)
    data = {(d, e): rng.integers(0, 2, (4, 16)) for d in ("S0", "S1") for e in range(2)}
    ws = windows(data)
    a = build_report(ws)
    b = build_report(list(reversed(ws)))
    assert a.to_text() == b.to_text()


def test_csv_and_json_exports():
    r = fixture_report()
    lines = r.to_csv().splitlines()
    assert lines[0] == "epoch,device,metric,value"
    assert "0,S0,wchd,0.04" in lines
    assert "1,S0|S16,bchd,0.4" in lines
    assert "1,ALL,puf_entropy,0.4" in lines
    doc = json.loads(r.to_json())
    assert doc["puf_entropy_devices"] == 2 and doc["months"] == 1
    assert r.histograms_csv().splitlines()[1] == "wchd,0.000,0.005,6"

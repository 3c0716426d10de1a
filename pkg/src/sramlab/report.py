"""Longitudinal quality report: per-epoch series plus a start/end summary table.

Worst-case device per row (ties go to the first device in sorted order):

========================  ==========================================
WCHD                      highest value at the end epoch
HW                        end value farthest from 50%
stable-cell ratio         highest value at the start epoch
noise entropy             lowest value at the start epoch
BCHD                      lowest device pair at the end epoch
========================  ==========================================

The monthly change is the compound rate ``(end/start)**(1/months) - 1``; the
text table also prints ``relative/months`` so the convention can be audited.
Magnitudes under 0.01% print as ``negligible``.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Mapping

import numpy as np

from .bits import PowerUpPattern
from .metrics import (
    SampleSet,
    UndefinedRateError,
    monthly_change,
    noise_min_entropy,
    one_probability,
    puf_min_entropy,
    relative_change,
)

DEVICE_METRICS = ("wchd", "fhw", "stable_ratio", "noise_entropy")
CROSS_METRICS = ("bchd_avg", "bchd_min", "bchd_max", "puf_entropy")
LABELS = {
    "wchd": "WCHD",
    "fhw": "HW",
    "stable_ratio": "Stable cells",
    "noise_entropy": "Noise entropy",
    "bchd": "BCHD",
    "puf_entropy": "PUF entropy",
}
NEGLIGIBLE = 1e-4
HIST_BINS = 200


class InsufficientDataError(ValueError):
    pass


@dataclass
class WindowSummary:
    device: str
    epoch: int
    count: int
    n: int
    first: PowerUpPattern
    wchd_counts: np.ndarray      # per-record distance to the device reference, in bits
    hw_counts: np.ndarray
    stable_ratio: float
    noise_entropy: float

    def wchd(self) -> float:
        # in epoch 0 the reference is the first record and contributes a 0
        return float(self.wchd_counts.mean()) / self.n

    def fhw(self) -> float:
        return float(self.hw_counts.mean()) / self.n


def summarize_window(samples: SampleSet, reference: PowerUpPattern) -> WindowSummary:
    if reference.n != samples.n:
        raise InsufficientDataError(f"{samples.device}: reference n={reference.n} but window n={samples.n}")
    xor = np.bitwise_xor(samples.packed, reference.packed)
    wchd_counts = np.bitwise_count(xor).sum(axis=1, dtype=np.int64)
    hw_counts = np.bitwise_count(samples.packed).sum(axis=1, dtype=np.int64)
    p = one_probability(samples)
    stable = np.count_nonzero((p.ones == 0) | (p.ones == p.support)) / p.n
    return WindowSummary(samples.device, samples.epoch, samples.count, samples.n, samples.pattern(0),
                         wchd_counts, hw_counts, stable, noise_min_entropy(p))


@dataclass
class SummaryRow:
    metric: str
    kind: str          # "AVG", "WC" or "" for cross-device single values
    subject: str       # worst-case device / pair, "" for averages
    start: float
    end: float
    relative: float | None
    monthly: float | None
    arithmetic_monthly: float | None


def _rates(start: float, end: float, months: int):
    if months < 1:
        return None, None, None
    try:
        rel = relative_change(start, end)
        mon = monthly_change(start, end, months)
    except UndefinedRateError:
        return None, None, None
    return rel, mon, rel / months


def _row(metric, kind, subject, start, end, months) -> SummaryRow:
    return SummaryRow(metric, kind, subject, start, end, *_rates(start, end, months))


@dataclass
class MetricReport:
    devices: list[str]
    epochs: list[int]
    incomplete: list[int]
    start_epoch: int
    end_epoch: int
    n: int
    window_sizes: list[int]
    series: dict[str, dict[int, dict[str, float]]]
    bchd_pairs: dict[int, dict[str, float]]
    cross: dict[str, dict[int, float]]
    rows: list[SummaryRow]
    histograms: dict[str, list[int]] = field(default_factory=dict)

    @property
    def months(self) -> int:
        return self.end_epoch - self.start_epoch

    def row(self, metric: str, kind: str = "AVG") -> SummaryRow:
        for r in self.rows:
            if r.metric == metric and r.kind == kind:
                return r
        raise KeyError((metric, kind))

    def aggregate(self, metric: str, epoch: int) -> float:
        """Mean over devices of a per-device metric (or the cross-device value)."""
        if metric in self.cross:
            return self.cross[metric][epoch]
        vals = self.series[metric][epoch]
        return float(np.mean([vals[d] for d in self.devices]))

    def aggregate_series(self, metric: str) -> list[float]:
        complete = [e for e in self.epochs if e not in self.incomplete]
        return [self.aggregate(metric, e) for e in complete]

    # --- output ------------------------------------------------------------------

    def to_text(self) -> str:
        return format_table(self)

    def to_dict(self) -> dict:
        return {
            "devices": self.devices,
            "n": self.n,
            "epochs": self.epochs,
            "incomplete_epochs": self.incomplete,
            "start_epoch": self.start_epoch,
            "end_epoch": self.end_epoch,
            "months": self.months,
            "window_sizes": self.window_sizes,
            "puf_entropy_devices": len(self.devices),
            "summary": [r.__dict__ for r in self.rows],
            "series": {m: {str(e): v for e, v in s.items()} for m, s in self.series.items()},
            "bchd_pairs": {str(e): v for e, v in self.bchd_pairs.items()},
            "cross": {m: {str(e): v for e, v in s.items()} for m, s in self.cross.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "device", "metric", "value"])
        for e in self.epochs:
            for m in DEVICE_METRICS:
                for d in self.devices:
                    if d in self.series[m].get(e, {}):
                        w.writerow([e, d, m, repr(self.series[m][e][d])])
            for pair, v in self.bchd_pairs.get(e, {}).items():
                w.writerow([e, pair, "bchd", repr(v)])
            for m in CROSS_METRICS:
                if e in self.cross[m]:
                    w.writerow([e, "ALL", m, repr(self.cross[m][e])])
        return buf.getvalue()

    def histograms_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "bin_lo", "bin_hi", "count"])
        for m, counts in self.histograms.items():
            for b, c in enumerate(counts):
                w.writerow([m, f"{b / HIST_BINS:.3f}", f"{(b + 1) / HIST_BINS:.3f}", c])
        return buf.getvalue()


def _pct(v: float) -> str:
    return f"{100 * v:.2f}%"


def _change(v: float | None) -> str:
    if v is None:
        return "n/a"
    if abs(v) < NEGLIGIBLE:
        return "negligible"
    return f"{100 * v:+.2f}%"


def format_table(report: MetricReport) -> str:
    head = ("Evaluation", "", "Start", "End", "Relative", "Monthly", "Rel/months", "Worst case")
    lines = [head]
    last = None
    for r in report.rows:
        label = LABELS[r.metric] if r.metric != last else ""
        last = r.metric
        lines.append((label, r.kind, _pct(r.start), _pct(r.end), _change(r.relative), _change(r.monthly),
                      _change(r.arithmetic_monthly), r.subject))
    widths = [max(len(row[i]) for row in lines) for i in range(len(head))]
    out = [f"SRAM PUF quality, epochs {report.start_epoch}..{report.end_epoch} "
           f"({report.months} months), {len(report.devices)} devices, n={report.n}"]
    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
    out.append(rule)
    for i, row in enumerate(lines):
        cells = [row[0].ljust(widths[0]), row[1].ljust(widths[1])]
        cells += [c.rjust(w) for c, w in zip(row[2:7], widths[2:7])]
        cells.append(row[7].ljust(widths[7]))
        out.append("  ".join(cells).rstrip())
        if i == 0:
            out.append(rule)
    out.append(rule)
    out.append("Monthly = (end/start)^(1/months) - 1; Rel/months = relative change / months.")
    out.append(f"'negligible' = magnitude below {100 * NEGLIGIBLE:.2f}%.")
    if report.incomplete:
        out.append("Incomplete epochs (missing device windows): " + ", ".join(map(str, report.incomplete)))
    return "\n".join(out) + "\n"


class ReportBuilder:
    """Streaming reduction of sample windows into a :class:`MetricReport`.

    Windows may arrive in any order as long as each device's epoch-0 window
    arrives before its later ones. Only small per-window summaries are kept.
    """

    def __init__(self):
        self._refs: dict[str, PowerUpPattern] = {}
        self._pending: dict[str, list[SampleSet]] = {}
        self._windows: dict[tuple[str, int], WindowSummary] = {}

    def add(self, samples: SampleSet) -> None:
        key = (samples.device, samples.epoch)
        if key in self._windows:
            raise ValueError(f"duplicate window for device {samples.device} epoch {samples.epoch}")
        if samples.epoch == 0:
            ref = samples.pattern(0)
            self._refs[samples.device] = ref
            self._windows[key] = summarize_window(samples, ref)
            for s in self._pending.pop(samples.device, []):
                self._windows[(s.device, s.epoch)] = summarize_window(s, ref)
        elif samples.device in self._refs:
            self._windows[key] = summarize_window(samples, self._refs[samples.device])
        else:
            self._pending.setdefault(samples.device, []).append(samples)

    def extend(self, windows: Iterable[SampleSet]) -> "ReportBuilder":
        for s in windows:
            self.add(s)
        return self

    def build(self, epochs: Iterable[int] | None = None, min_devices: int = 2) -> MetricReport:
        if self._pending:
            missing = sorted(self._pending)
            raise InsufficientDataError(f"no epoch-0 reference window for device(s) {missing}")
        devices = sorted({d for d, _ in self._windows}, key=_device_key)
        if len(devices) < min_devices:
            raise InsufficientDataError(f"need at least {min_devices} devices with data, got {len(devices)}: {devices}")
        seen = sorted({e for _, e in self._windows})
        epochs = sorted(set(epochs) | set(seen)) if epochs is not None else list(range(0, max(seen) + 1))
        incomplete = [e for e in epochs if any((d, e) not in self._windows for d in devices)]
        complete = [e for e in epochs if e not in incomplete]
        if 0 not in complete:
            raise InsufficientDataError("epoch 0 must be complete for every device")
        ns = {w.n for w in self._windows.values()}
        if len(ns) != 1:
            raise InsufficientDataError(f"pattern lengths differ across windows: {sorted(ns)}")
        n = ns.pop()

        series = {m: {} for m in DEVICE_METRICS}
        for (d, e), w in self._windows.items():
            series["wchd"].setdefault(e, {})[d] = w.wchd()
            series["fhw"].setdefault(e, {})[d] = w.fhw()
            series["stable_ratio"].setdefault(e, {})[d] = w.stable_ratio
            series["noise_entropy"].setdefault(e, {})[d] = w.noise_entropy
        for m in series:
            series[m] = {e: {d: series[m][e][d] for d in devices if d in series[m][e]}
                         for e in sorted(series[m])}

        pairs = list(combinations(devices, 2))
        bchd_pairs: dict[int, dict[str, float]] = {}
        cross = {m: {} for m in CROSS_METRICS}
        for e in complete:
            firsts = [self._windows[(d, e)].first for d in devices]
            dist = {f"{a}|{b}": _fhd(self._windows[(a, e)].first, self._windows[(b, e)].first) for a, b in pairs}
            bchd_pairs[e] = dist
            vals = list(dist.values())
            cross["bchd_avg"][e] = float(np.mean(vals))
            cross["bchd_min"][e] = min(vals)
            cross["bchd_max"][e] = max(vals)
            cross["puf_entropy"][e] = puf_min_entropy(firsts)

        s, t = complete[0], complete[-1]
        months = t - s
        rows = []

        def avg(m, e):
            return float(np.mean([series[m][e][d] for d in devices]))

        def pick(values: Mapping[str, float], better) -> str:
            # first key (device or pair order) attaining the extreme
            best = None
            for d in values:
                if best is None or better(values[d], values[best]):
                    best = d
            return best

        wc_rules = {
            "wchd": (t, lambda a, b: a > b),
            "fhw": (t, lambda a, b: abs(a - 0.5) > abs(b - 0.5)),
            "stable_ratio": (s, lambda a, b: a > b),
            "noise_entropy": (s, lambda a, b: a < b),
        }
        for m in DEVICE_METRICS:
            rows.append(_row(m, "AVG", "", avg(m, s), avg(m, t), months))
            at, better = wc_rules[m]
            d = pick(series[m][at], better)
            rows.append(_row(m, "WC", d, series[m][s][d], series[m][t][d], months))
        rows.append(_row("bchd", "AVG", "", cross["bchd_avg"][s], cross["bchd_avg"][t], months))
        p = pick(bchd_pairs[t], lambda a, b: a < b)
        rows.append(_row("bchd", "WC", p, bchd_pairs[s][p], bchd_pairs[t][p], months))
        rows.append(_row("puf_entropy", "", "", cross["puf_entropy"][s], cross["puf_entropy"][t], months))

        hist = {}
        bins = lambda counts: np.bincount(np.minimum(counts * HIST_BINS // n, HIST_BINS - 1),
                                          minlength=HIST_BINS).tolist()
        w0 = [self._windows[(d, s)] for d in devices]
        hist["wchd"] = bins(np.concatenate([w.wchd_counts for w in w0]).astype(np.int64))
        hist["fhw"] = bins(np.concatenate([w.hw_counts for w in w0]).astype(np.int64))
        hist["bchd"] = bins(np.array([_hd(self._windows[(a, s)].first, self._windows[(b, s)].first)
                                      for a, b in pairs], dtype=np.int64))
        sizes = sorted({w.count for w in self._windows.values()})
        return MetricReport(devices, epochs, incomplete, s, t, n, sizes, series, bchd_pairs, cross, rows, hist)


def _hd(a: PowerUpPattern, b: PowerUpPattern) -> int:
    return int(np.bitwise_count(np.bitwise_xor(a.packed, b.packed)).sum())


def _fhd(a: PowerUpPattern, b: PowerUpPattern) -> float:
    return _hd(a, b) / a.n


def _device_key(d: str):
    # S2 before S10; other ids sort lexically after numbered ones
    if d[:1].isalpha() and d[1:].isdigit():
        return (0, d[:1], int(d[1:]), "")
    return (1, "", 0, d)


def build_report(data, epochs: Iterable[int] | None = None, min_devices: int = 2) -> MetricReport:
    """``data`` is either ``{device: {epoch: SampleSet}}`` or an iterable of SampleSets."""
    b = ReportBuilder()
    if isinstance(data, Mapping):
        for dev in data.values():
            for e in sorted(dev):
                b.add(dev[e])
    else:
        b.extend(data)
    return b.build(epochs, min_devices)

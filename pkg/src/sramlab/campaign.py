"""Measurement-campaign orchestration.

Two masters (M0, M1) each drive one layer of slave boards. Their handshake is
executed by a small deterministic discrete-event scheduler:

layer 0, round k
    1. wait END(1, k-1)      2. power on S0..S7      3. signal GO(0, k)
    4-5. read out, forward   6. arm power-off timer  7. wait GO(1, k)
    8. signal END(0, k)
layer 1, round k
    1. wait GO(0, k)         2. power on             3. signal GO(1, k)
    4-5. read out, forward   6. arm power-off timer  7. wait END(0, k)
    8. signal END(1, k)

Power-on instants follow the waveform (layer 1 lags by half a period) unless a
handshake gate is later. Because on-time exceeds half the period, the on
intervals of the two layers overlap; what never overlaps is the power-up
transient plus read-out window ``[on, on + readout_time]`` of each layer.

Calendar: epoch ``e`` is month ``e`` after the start date. Each epoch's block of
``cycles_per_epoch`` power cycles starts at local midnight on the 8th of that
month; time between blocks is compressed away.
"""
from __future__ import annotations

import heapq
import itertools
import json
import logging
import math
import os
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Callable, Iterator
from zoneinfo import ZoneInfo

import numpy as np

from .bits import DEFAULT_N, PowerUpPattern
from .metrics import DEFAULT_WINDOW, SampleSet
from .model import DevicePopulation, ModelParams, apply_aging, power_up, run_cycles

log = logging.getLogger(__name__)

DEFAULT_START = date(2017, 2, 8)
SAMPLING_DAY = 8


class ConfigError(ValueError):
    pass


class HandshakeStallError(RuntimeError):
    pass


class CampaignAbort(RuntimeError):
    """A sink failed mid-campaign; ``checkpoint`` names the resume file."""

    def __init__(self, message: str, checkpoint: Path | None, last_round: int):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.last_round = last_round


@dataclass(frozen=True)
class CycleTiming:
    period: float = 5.4
    on_time: float = 3.8
    off_time: float = 1.6
    readout_time: float = 1.0

    def __post_init__(self):
        if not math.isclose(self.on_time + self.off_time, self.period, rel_tol=0, abs_tol=1e-9):
            raise ConfigError("on_time + off_time must equal period")
        if min(self.period, self.on_time, self.off_time, self.readout_time) <= 0:
            raise ConfigError("timing values must be positive")
        if self.readout_time > min(self.on_time, self.layer_offset):
            raise ConfigError("read-out must finish while powered and before the other layer powers on")

    @property
    def layer_offset(self) -> float:
        return self.period / 2


@dataclass(frozen=True)
class BoardTopology:
    layers: tuple[tuple[str, ...], tuple[str, ...]]
    masters: tuple[str, str] = ("M0", "M1")

    def __post_init__(self):
        if len(self.layers) != 2:
            raise ConfigError("the setup has exactly two layers")
        if len(self.layers[0]) != len(self.layers[1]) or not self.layers[0]:
            raise ConfigError("both layers need the same, non-zero number of slaves")
        flat = self.slaves
        if len(set(flat)) != len(flat):
            raise ConfigError("slave ids must be unique")

    @classmethod
    def standard(cls) -> "BoardTopology":
        return cls.for_devices(16)

    @classmethod
    def for_devices(cls, count: int) -> "BoardTopology":
        """Split ``count`` slaves over two layers; layer 1 ids start at S16."""
        if count < 2 or count % 2:
            raise ConfigError(f"device count must be even and >= 2, got {count}")
        half = count // 2
        base = 16 if half <= 16 else half
        return cls((tuple(f"S{i}" for i in range(half)), tuple(f"S{base + i}" for i in range(half))))

    @property
    def slaves(self) -> tuple[str, ...]:
        return self.layers[0] + self.layers[1]

    def layer_of(self, slave: str) -> int:
        return 0 if slave in self.layers[0] else 1

    def stack_pairs(self) -> list[tuple[str, str]]:
        return list(zip(*self.layers))


@dataclass(frozen=True)
class MeasurementRecord:
    device_id: str
    seq: int
    timestamp: datetime | None
    pattern: PowerUpPattern


# --- discrete-event scheduler -------------------------------------------------

class Scheduler:
    """Deterministic event loop for generator processes.

    A process yields ``("at", t)`` to sleep until simulated time ``t`` or
    ``("wait", name)`` to block until ``signal(name)`` has happened. Ties are
    broken by scheduling order.
    """

    def __init__(self, start: float = 0.0):
        self.now = start
        self._queue: list = []
        self._order = itertools.count()
        self._fired: dict = {}
        self._waiting: dict = defaultdict(list)
        self._blocked = 0

    def spawn(self, proc: Iterator) -> None:
        self._push(self.now, proc)

    def signal(self, name) -> None:
        self._fired[name] = self.now
        for proc in self._waiting.pop(name, ()):
            self._blocked -= 1
            self._push(self.now, proc)

    def fired(self, name) -> bool:
        return name in self._fired

    def _push(self, t: float, proc) -> None:
        heapq.heappush(self._queue, (t, next(self._order), proc))

    def run(self) -> None:
        while self._queue:
            t, _, proc = heapq.heappop(self._queue)
            self.now = t
            try:
                kind, arg = next(proc)
            except StopIteration:
                continue
            if kind == "at":
                if arg < self.now:
                    raise ValueError("cannot schedule into the past")
                self._push(arg, proc)
            elif kind == "wait":
                if arg in self._fired:
                    self._push(self.now, proc)
                else:
                    self._waiting[arg].append(proc)
                    self._blocked += 1
            else:
                raise ValueError(f"unknown command {kind!r}")
        if self._blocked:
            pending = sorted(map(str, self._waiting))
            raise HandshakeStallError(f"handshake stalled waiting for {pending}")


def _default_readout(device: DevicePopulation) -> PowerUpPattern:
    pattern = power_up(device)
    apply_aging(device, pattern)
    return pattern


def _master(sched: Scheduler, layer: int, k: int, slaves, timing: CycleTiming, slot: float,
            readout: Callable[[str], PowerUpPattern], emit, trace):
    other = 1 - layer
    yield ("wait", ("END", 1, k - 1) if layer == 0 else ("GO", 0, k))
    on = max(slot, sched.now)
    yield ("at", on)
    if trace is not None:
        trace.append((on, layer, k, "power_on"))
    sched.signal(("GO", layer, k))
    for slave in slaves:
        emit(slave, k, on, readout(slave, k))
    done = on + timing.readout_time
    yield ("at", done)
    if trace is not None:
        trace.append((done, layer, k, "readout_done"))
        trace.append((on + timing.on_time, layer, k, "power_off"))
    yield ("wait", ("GO", other, k) if layer == 0 else ("END", 0, k))
    sched.signal(("END", layer, k))


def _run_rounds(topology: BoardTopology, timing: CycleTiming, first_round: int, rounds: int,
                origin: float, readout, emit, trace=None) -> None:
    """Execute ``rounds`` handshake rounds; round ``r`` has nominal slot
    ``origin + (r - first_round) * period``."""
    sched = Scheduler(origin)
    sched.signal(("END", 1, first_round - 1))

    def layer_proc(layer):
        for k in range(first_round, first_round + rounds):
            slot = origin + (k - first_round) * timing.period + layer * timing.layer_offset
            yield from _master(sched, layer, k, topology.layers[layer], timing, slot, readout, emit, trace)

    sched.spawn(layer_proc(0))
    sched.spawn(layer_proc(1))
    sched.run()


def run_handshake_round(topology: BoardTopology, devices: dict[str, DevicePopulation], timing: CycleTiming,
                        round_index: int = 0, start: datetime | None = None,
                        trace: list | None = None) -> list[MeasurementRecord]:
    """One complete round: every slave powers up once, is read out and aged.

    Records come back in emission order (layer 0 slaves, then layer 1).
    """
    missing = [s for s in topology.slaves if s not in devices]
    if missing:
        raise ConfigError(f"no device for slave(s) {missing}")
    start = start or datetime(2017, 2, 8, tzinfo=timezone.utc)
    records: list[MeasurementRecord] = []

    def emit(slave, k, t, pattern):
        records.append(MeasurementRecord(slave, k, start + timedelta(seconds=t), pattern))

    _run_rounds(topology, timing, round_index, 1, 0.0, lambda s, k: _default_readout(devices[s]), emit, trace)
    counts = {s: 0 for s in topology.slaves}
    for r in records:
        counts[r.device_id] += 1
    assert len(set(counts.values())) == 1, "slaves produced unequal record counts"
    return records


# --- calendar and sampling policy ------------------------------------------------

def add_months(d: date, months: int) -> date:
    y, m = divmod(d.month - 1 + months, 12)
    return date(d.year + y, m + 1, d.day)


@dataclass(frozen=True)
class SamplingPolicy:
    """First ``window`` consecutive records at/after local midnight on the
    sampling day of each month, counted from ``start``."""

    start: date = DEFAULT_START
    tz: str = "UTC"
    window: int = DEFAULT_WINDOW
    day: int = SAMPLING_DAY

    def boundary(self, epoch: int) -> datetime:
        month = add_months(self.start.replace(day=1), epoch)
        local = datetime(month.year, month.month, self.day, tzinfo=ZoneInfo(self.tz))
        return local.astimezone(timezone.utc)


class WindowFinder:
    """Streaming per-device epoch-window detector.

    Feed records in file order with :meth:`feed`; it returns ``(epoch, seq_start)``
    once a window completes. Memory is O(devices).
    """

    def __init__(self, policy: SamplingPolicy, epochs: int | None = None, cycles_per_epoch: int | None = None):
        self.policy = policy
        self.epochs = epochs
        self.cycles_per_epoch = cycles_per_epoch
        self._state: dict[str, list] = {}
        self._boundaries: list[datetime] = []

    def _boundary(self, e: int) -> datetime:
        while len(self._boundaries) <= e:
            self._boundaries.append(self.policy.boundary(len(self._boundaries)))
        return self._boundaries[e]

    def _in_epoch(self, e: int, seq: int, ts: datetime | None) -> bool:
        if ts is not None:
            return ts >= self._boundary(e)
        if self.cycles_per_epoch is None:
            raise ConfigError("records without timestamps need cycles_per_epoch for seq-only windows")
        return seq >= e * self.cycles_per_epoch

    def feed(self, device: str, seq: int, ts: datetime | None) -> tuple[str, int, int, int] | None:
        """Returns ``(state, epoch, seq_start, position)`` where state is
        'start', 'inside' or 'done'; ``None`` if the record is outside any window."""
        st = self._state.setdefault(device, [0, None, None, 0])   # epoch, start seq, last seq, filled
        e, start, last, filled = st
        if self.epochs is not None and e >= self.epochs:
            return None
        if start is not None and seq != last + 1:
            start = None   # gap breaks consecutiveness; restart the window
        if start is None:
            if not self._in_epoch(e, seq, ts):
                st[:] = [e, None, None, 0]
                return None
            start, filled = seq, 0
        filled += 1
        pos = filled - 1
        if filled == self.policy.window:
            st[:] = [e + 1, None, None, 0]
            return ("done", e, start, pos)
        st[:] = [e, start, seq, filled]
        return ("start" if pos == 0 else "inside", e, start, pos)


# --- campaign ------------------------------------------------------------------

@dataclass
class CampaignConfig:
    epochs: int = 25
    cycles_per_epoch: int = 5000
    devices: int = 16
    n: int = DEFAULT_N
    seed: int = 2017
    window: int = DEFAULT_WINDOW
    start: str = DEFAULT_START.isoformat()
    timezone: str = "UTC"
    persist: str = "all"
    flush_every: int = 1000
    model: ModelParams = field(default_factory=ModelParams)
    timing: CycleTiming = field(default_factory=CycleTiming)
    output: str | None = None

    def validate(self) -> "CampaignConfig":
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.window < 1 or self.cycles_per_epoch < self.window:
            raise ConfigError("need 1 <= window <= cycles_per_epoch")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.persist not in ("all", "windows"):
            raise ConfigError("persist must be 'all' or 'windows'")
        if self.flush_every < 1:
            raise ConfigError("flush_every must be >= 1")
        BoardTopology.for_devices(self.devices)
        try:
            ZoneInfo(self.timezone)
            date.fromisoformat(self.start)
        except Exception as exc:
            raise ConfigError(f"bad calendar setting: {exc}") from None
        return self

    @property
    def policy(self) -> SamplingPolicy:
        return SamplingPolicy(date.fromisoformat(self.start), self.timezone, self.window)

    @property
    def total_cycles(self) -> int:
        return self.epochs * self.cycles_per_epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["timing"] = asdict(self.timing)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        try:
            if "model" in d and isinstance(d["model"], dict):
                d["model"] = ModelParams.from_dict(d["model"])
            if "timing" in d and isinstance(d["timing"], dict):
                d["timing"] = CycleTiming(**d["timing"])
            return cls(**d).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class CampaignResult:
    config: CampaignConfig
    epoch_index: dict[int, dict[str, tuple[int, int]]]
    records_written: int
    rounds_completed: int
    elapsed: float


def make_devices(config: CampaignConfig) -> dict[str, DevicePopulation]:
    topo = BoardTopology.for_devices(config.devices)
    return {sid: DevicePopulation(config.model, config.n, config.seed, index=i, device_id=sid)
            for i, sid in enumerate(topo.slaves)}


def epoch_block_origins(config: CampaignConfig) -> list[datetime]:
    """UTC instant of the first layer-0 power-on of each epoch block."""
    origins = []
    prev_end = None
    span = timedelta(seconds=config.cycles_per_epoch * config.timing.period)
    for e in range(config.epochs):
        b = config.policy.boundary(e)
        if prev_end is not None and prev_end > b:
            b = prev_end
        origins.append(b)
        prev_end = b + span
    return origins


def record_timestamp(config: CampaignConfig, seq: int, layer: int,
                     origins: list[datetime] | None = None) -> datetime:
    origins = origins or epoch_block_origins(config)
    e, r = divmod(seq, config.cycles_per_epoch)
    return origins[e] + timedelta(seconds=r * config.timing.period + layer * config.timing.layer_offset)


def iter_windows(config: CampaignConfig, devices: dict[str, DevicePopulation] | None = None
                 ) -> Iterator[tuple[int, dict[str, SampleSet]]]:
    """Fast path: evaluation windows only, no records or handshake.

    Device streams are identical to :func:`run_campaign` with the same config.
    """
    config.validate()
    devices = devices or make_devices(config)
    C, W = config.cycles_per_epoch, config.window
    for e in range(config.epochs):
        windows = {}
        for sid, dev in devices.items():
            packed = run_cycles(dev, W, record=True)
            windows[sid] = SampleSet(sid, e, dev.n, packed, first_seq=e * C)
        yield e, windows
        for dev in devices.values():
            run_cycles(dev, C - W, record=False)


def _checkpoint_path(output: Path) -> Path:
    return output.with_name(output.name + ".checkpoint.json")


def run_campaign(config: CampaignConfig, sink=None, *, progress: Callable[[int, int, float], None] | None = None,
                 checkpoint: Path | None = None, resume: bool = False, trace: list | None = None) -> CampaignResult:
    """Run every epoch block through the handshake scheduler.

    ``sink`` needs ``append(record)`` and ``flush()``; pass ``None`` to only
    build the epoch index. With ``persist == 'windows'`` only evaluation-window
    rounds go through the scheduler and the rest of each block is simulated
    without emitting records.

    With ``resume=True`` the rounds named in the checkpoint are replayed
    silently (the simulation is deterministic) and emission continues after them.
    """
    config.validate()
    t0 = time.perf_counter()
    topo = BoardTopology.for_devices(config.devices)
    devices = make_devices(config)
    origins = epoch_block_origins(config)
    C, W = config.cycles_per_epoch, config.window
    skip_until, resumed_records = -1, 0
    if resume:
        if checkpoint is None or not checkpoint.exists():
            raise ConfigError("resume requested but no checkpoint file")
        cp = read_checkpoint(checkpoint)
        skip_until, resumed_records = cp["last_completed_round"], cp["records"]

    finder = WindowFinder(config.policy, config.epochs)
    index: dict[int, dict[str, tuple[int, int]]] = defaultdict(dict)
    written = resumed_records
    last_complete = -1
    durable = (skip_until, resumed_records)   # (round, records) known to be on disk
    buffers: dict[str, np.ndarray] = {}
    block_first = 0

    def abort(exc: OSError) -> CampaignAbort:
        cp = _write_checkpoint(checkpoint, durable[0], durable[1], config)
        return CampaignAbort(f"record sink failed after round {durable[0]}: {exc}", cp, durable[0])

    def flush() -> None:
        nonlocal durable
        try:
            sink.flush()
        except OSError as exc:
            raise abort(exc) from exc
        durable = (last_complete, written)
        _write_checkpoint(checkpoint, last_complete, written, config)

    def readout(slave: str, k: int) -> PowerUpPattern:
        return PowerUpPattern._from_packed(buffers[slave][k - block_first], config.n)

    def emit(slave, k, t_rel, pattern):
        nonlocal written
        ts = origins[k // C] + timedelta(seconds=t_rel)
        hit = finder.feed(slave, k, ts)
        if hit is not None and hit[0] == "done":
            index[hit[1]][slave] = (hit[2], hit[2] + W)
        if sink is not None and k > skip_until and (config.persist == "all" or hit is not None):
            try:
                sink.append(MeasurementRecord(slave, k, ts, pattern))
            except OSError as exc:
                raise abort(exc) from exc
            written += 1

    def run_block(first: int, count: int) -> None:
        nonlocal last_complete, block_first
        block_first = first
        for sid, dev in devices.items():
            buffers[sid] = run_cycles(dev, count, record=True)
        base = (first // C) * C
        for k in range(first, first + count):
            _run_rounds(topo, config.timing, k, 1, (k - base) * config.timing.period, readout, emit, trace)
            last_complete = k
            if sink is not None and k > skip_until and (k + 1) % config.flush_every == 0:
                flush()

    block = min(C, 1000)
    for e in range(config.epochs):
        base = e * C
        if config.persist == "all":
            for first in range(base, base + C, block):
                run_block(first, min(block, base + C - first))
        else:
            run_block(base, W)
            for dev in devices.values():
                run_cycles(dev, C - W, record=False)
            last_complete = base + C - 1
        if progress is not None:
            progress(e, written, time.perf_counter() - t0)
        log.info("epoch %d/%d done, %d records", e + 1, config.epochs, written)
    if sink is not None:
        flush()
    return CampaignResult(config, dict(index), written, last_complete + 1, time.perf_counter() - t0)


def _write_checkpoint(path: Path | None, last_round: int, records: int, config: CampaignConfig) -> Path | None:
    """Atomically record the last round whose records are all durable.

    ``records`` is the total number of records in the sink at that point."""
    if path is None:
        return None
    tmp = path.with_name(path.name + ".tmp")
    doc = {"last_completed_round": last_round, "records": records, "config": config.to_dict()}
    tmp.write_text(json.dumps(doc, indent=1))
    os.replace(tmp, path)
    return path


def read_checkpoint(path: Path) -> dict:
    return json.loads(Path(path).read_text())

"""JSON-lines record files.

One record per line, UTF-8, keys in this order::

    {"device_id":"S0","seq":0,"timestamp":"2017-02-08T00:00:00.000000Z","n":8192,"data":"<base64>"}

``data`` is the packed pattern (little-endian bit order, zero pad bits).
``timestamp`` is UTC or ``null`` when unknown. Files conventionally end in
``.jsonl`` and may start with one ``#`` comment line naming the format; readers
skip any ``#`` line and blank lines. One writer per file; readers never lock.
"""
from __future__ import annotations

import base64
import binascii
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping

import numpy as np

from .bits import PatternDecodeError, PowerUpPattern
from .campaign import MeasurementRecord, SamplingPolicy, WindowFinder
from .metrics import SampleSet

HEADER = "# sramlab-records v1 (JSON lines: device_id, seq, timestamp, n, data=base64)"
FIELDS = ("device_id", "seq", "timestamp", "n", "data")


class RecordFormatError(ValueError):
    """A line that is not a valid record document."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class SchemaError(ValueError):
    pass


class DatastoreWriteError(OSError):
    def __init__(self, message: str, durable_count: int):
        super().__init__(f"{message} ({durable_count} records durably written)")
        self.durable_count = durable_count


def format_timestamp(ts: datetime | None) -> str | None:
    if ts is None:
        return None
    if ts.tzinfo is None:
        raise ValueError("timestamps must be timezone-aware")
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def parse_timestamp(text) -> datetime | None:
    if text is None:
        return None
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        return datetime.fromtimestamp(text, tz=timezone.utc)
    if not isinstance(text, str):
        raise ValueError(f"timestamp must be a string, number or null, got {type(text).__name__}")
    t = text.strip()
    if t.endswith(("Z", "z")):
        t = t[:-1] + "+00:00"
    ts = datetime.fromisoformat(t)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def encode_record(record: MeasurementRecord) -> str:
    return (f'{{"device_id":{json.dumps(record.device_id)},"seq":{int(record.seq)},'
            f'"timestamp":{json.dumps(format_timestamp(record.timestamp))},'
            f'"n":{record.pattern.n},"data":"{record.pattern.to_base64()}"}}')


def decode_record(line: str, line_no: int = 0) -> MeasurementRecord:
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as exc:
        raise RecordFormatError(line_no, f"malformed JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise RecordFormatError(line_no, "record must be a JSON object")
    missing = [f for f in FIELDS if f not in doc]
    if missing:
        raise RecordFormatError(line_no, f"missing field(s) {missing}")
    dev, seq, n, data = doc["device_id"], doc["seq"], doc["n"], doc["data"]
    if not isinstance(dev, str) or not dev:
        raise RecordFormatError(line_no, "device_id must be a non-empty string")
    if not isinstance(seq, int) or isinstance(seq, bool) or seq < 0:
        raise RecordFormatError(line_no, "seq must be a non-negative integer")
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise RecordFormatError(line_no, "n must be a positive integer")
    if not isinstance(data, str):
        raise RecordFormatError(line_no, "data must be a base64 string")
    try:
        pattern = PowerUpPattern.from_base64(data, n)
        ts = parse_timestamp(doc["timestamp"])
    except (PatternDecodeError, ValueError) as exc:
        raise RecordFormatError(line_no, str(exc)) from None
    return MeasurementRecord(dev, seq, ts, pattern)


class RecordWriter:
    """Append-only JSON-lines sink.

    Data is flushed and fsynced every ``flush_every`` records; ``durable_count``
    is the number of records known to be on disk.
    """

    def __init__(self, target: str | Path | IO[str], flush_every: int = 1000, header: bool = True,
                 append: bool = False):
        if flush_every < 1:
            raise ValueError("flush_every must be >= 1")
        self.flush_every = flush_every
        if isinstance(target, (str, Path)):
            self.path = Path(target)
            existed = append and self.path.exists() and self.path.stat().st_size > 0
            self._fh = open(self.path, "a" if append else "w", encoding="utf-8", newline="\n")
            self._owns = True
            header = header and not existed
        else:
            self.path = None
            self._fh = target
            self._owns = False
        self.count = 0
        self.durable_count = 0
        self._last_seq: dict[str, int] = {}
        if header:
            self._write(HEADER + "\n")

    def _write(self, text: str) -> None:
        try:
            self._fh.write(text)
        except OSError as exc:
            raise DatastoreWriteError(str(exc), self.durable_count) from exc

    def append(self, record: MeasurementRecord) -> int:
        last = self._last_seq.get(record.device_id)
        if last is not None and record.seq <= last:
            raise ValueError(f"seq must increase per device: {record.device_id} {record.seq} after {last}")
        self._write(encode_record(record) + "\n")
        self._last_seq[record.device_id] = record.seq
        self.count += 1
        if self.count % self.flush_every == 0:
            self.flush()
        return self.count

    def flush(self) -> None:
        try:
            self._fh.flush()
            if self._owns:
                os.fsync(self._fh.fileno())
        except OSError as exc:
            raise DatastoreWriteError(str(exc), self.durable_count) from exc
        self.durable_count = self.count

    def close(self) -> None:
        if self._fh is None:
            return
        try:
            self.flush()
        finally:
            if self._owns:
                self._fh.close()
            self._fh = None

    def __enter__(self) -> "RecordWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def truncate_records(path: str | Path, keep: int) -> None:
    """Cut a record file after its first ``keep`` records (comment lines kept)."""
    kept = 0
    offset = 0
    with open(path, "rb") as fh:
        for line in fh:
            s = line.strip()
            if s and not s.startswith(b"#"):
                if kept == keep:
                    break
                kept += 1
            offset += len(line)
    if kept < keep:
        raise ValueError(f"{path} holds only {kept} records, cannot keep {keep}")
    with open(path, "r+b") as fh:
        fh.truncate(offset)


def write_records(target, records: Iterable[MeasurementRecord], **kw) -> int:
    with RecordWriter(target, **kw) as w:
        for r in records:
            w.append(r)
        return w.count


@dataclass
class ScanStats:
    records: int = 0
    matched: int = 0
    errors: int = 0
    error_lines: list[int] = field(default_factory=list)
    first_error: str | None = None
    max_logged: int = 100

    def note(self, exc: RecordFormatError) -> None:
        self.errors += 1
        if self.first_error is None:
            self.first_error = str(exc)
        if len(self.error_lines) < self.max_logged:
            self.error_lines.append(exc.line_no)


@contextmanager
def _open_text(source):
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            yield fh
    else:
        yield source


def _lines(fh) -> Iterator[tuple[int, str]]:
    for i, line in enumerate(fh, 1):
        s = line.strip()
        if s and not s.startswith("#"):
            yield i, s


def scan(source, *, devices: Iterable[str] | None = None, seq_range: tuple[int, int] | None = None,
         epochs: Iterable[int] | None = None, policy: SamplingPolicy | None = None,
         cycles_per_epoch: int | None = None, strict: bool = True,
         stats: ScanStats | None = None) -> Iterator[MeasurementRecord]:
    """Stream records in file order, keeping only those that pass every filter.

    ``epochs`` keeps records inside the listed epoch windows of ``policy``
    (records without timestamps fall back to seq windows and need
    ``cycles_per_epoch``). In strict mode the first bad line raises
    :class:`RecordFormatError`; otherwise it is skipped and counted in ``stats``.
    Memory use does not depend on file size.
    """
    stats = stats if stats is not None else ScanStats()
    devs = set(devices) if devices is not None else None
    want_epochs = set(epochs) if epochs is not None else None
    finder = None
    if want_epochs is not None:
        finder = WindowFinder(policy or SamplingPolicy(), max(want_epochs) + 1 if want_epochs else 0,
                              cycles_per_epoch)
    last_seq: dict[str, int] = {}
    with _open_text(source) as fh:
        for line_no, line in _lines(fh):
            try:
                rec = decode_record(line, line_no)
                prev = last_seq.get(rec.device_id)
                if prev is not None and rec.seq <= prev:
                    raise RecordFormatError(line_no, f"seq {rec.seq} of {rec.device_id} does not increase (previous {prev})")
            except RecordFormatError as exc:
                if strict:
                    raise
                stats.note(exc)
                continue
            last_seq[rec.device_id] = rec.seq
            stats.records += 1
            if devs is not None and rec.device_id not in devs:
                continue
            if seq_range is not None and not seq_range[0] <= rec.seq < seq_range[1]:
                continue
            if finder is not None:
                hit = finder.feed(rec.device_id, rec.seq, rec.timestamp)
                if hit is None or hit[1] not in want_epochs:
                    continue
            stats.matched += 1
            yield rec


def iter_epoch_windows(source, policy: SamplingPolicy, epochs: int | None = None, *,
                       cycles_per_epoch: int | None = None, devices: Iterable[str] | None = None,
                       strict: bool = True, stats: ScanStats | None = None) -> Iterator[SampleSet]:
    """Yield one :class:`SampleSet` per completed (device, epoch) window, in
    completion order. Only the windows being filled are held in memory."""
    finder = WindowFinder(policy, epochs, cycles_per_epoch)
    devs = set(devices) if devices is not None else None
    buffers: dict[str, tuple[int, int, int, np.ndarray]] = {}
    for rec in scan(source, devices=devs, strict=strict, stats=stats):
        hit = finder.feed(rec.device_id, rec.seq, rec.timestamp)
        if hit is None:
            buffers.pop(rec.device_id, None)
            continue
        state, epoch, start, pos = hit
        n = rec.pattern.n
        buf = buffers.get(rec.device_id)
        if pos == 0 or buf is None or buf[1] != start or buf[2] != n:
            if pos != 0:   # window restarted mid-way cannot happen; guard anyway
                continue
            buf = (epoch, start, n, np.empty((policy.window, (n + 7) // 8), dtype=np.uint8))
            buffers[rec.device_id] = buf
        buf[3][pos] = rec.pattern.packed
        if state == "done":
            del buffers[rec.device_id]
            yield SampleSet(rec.device_id, epoch, n, buf[3], first_seq=start)


def load_epoch_windows(source, policy: SamplingPolicy, epochs: int | None = None, **kw
                       ) -> dict[str, dict[int, SampleSet]]:
    out: dict[str, dict[int, SampleSet]] = {}
    for s in iter_epoch_windows(source, policy, epochs, **kw):
        out.setdefault(s.device, {})[s.epoch] = s
    return out


def find_record(source, device: str, seq: int, strict: bool = False) -> MeasurementRecord | None:
    for rec in scan(source, devices=[device], seq_range=(seq, seq + 1), strict=strict):
        return rec
    return None


# --- external dumps ------------------------------------------------------------

def _decode_payload(value, encoding: str, n: int | None) -> PowerUpPattern:
    if not isinstance(value, str):
        raise PatternDecodeError("payload must be a string")
    text = value.strip()
    if encoding == "auto":
        body = text[2:] if text[:2].lower() == "0x" else text
        is_hex = len(body) % 2 == 0 and all(c in "0123456789abcdefABCDEF" for c in body)
        encoding = "hex" if is_hex else "base64"
    if encoding == "hex":
        body = text[2:] if text[:2].lower() == "0x" else text
        try:
            raw = bytes.fromhex(body)
        except ValueError as exc:
            raise PatternDecodeError(f"invalid hex payload: {exc}") from None
    elif encoding == "base64":
        try:
            raw = base64.b64decode(text, validate=True)
        except (binascii.Error, ValueError) as exc:
            raise PatternDecodeError(f"invalid base64 payload: {exc}") from None
    else:
        raise SchemaError(f"unknown payload encoding {encoding!r}")
    return PowerUpPattern.from_bytes(raw, n if n is not None else 8 * len(raw))


def import_external(source, fields: Mapping[str, str] | None = None, *, encoding: str = "auto",
                    n: int | None = None, device_names: Mapping[str, str] | None = None,
                    strict: bool = True, stats: ScanStats | None = None) -> Iterator[MeasurementRecord]:
    """Normalize a foreign JSON-lines dump into records.

    ``fields`` maps native names (device_id, seq, timestamp, n, data) to the
    dump's names; unmapped names are looked up as-is. ``device_id`` and
    ``data`` are required; a missing ``seq`` is synthesized per device from
    file order and a missing ``timestamp`` becomes ``None`` (seq-only epoch
    filtering). ``device_names`` optionally renames devices; ids are otherwise
    the dump's values as strings.
    """
    fields = dict(fields or {})
    bad = set(fields) - set(FIELDS)
    if bad:
        raise SchemaError(f"cannot map unknown native field(s) {sorted(bad)}; valid: {list(FIELDS)}")
    name = {f: fields.get(f, f) for f in FIELDS}
    stats = stats if stats is not None else ScanStats()
    next_seq: dict[str, int] = {}
    checked = False
    with _open_text(source) as fh:
        for line_no, line in _lines(fh):
            try:
                try:
                    doc = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise RecordFormatError(line_no, f"malformed JSON: {exc.msg}") from None
                if not isinstance(doc, dict):
                    raise RecordFormatError(line_no, "record must be a JSON object")
                if not checked:
                    missing = [f"{f} (as {name[f]!r})" for f in ("device_id", "data") if name[f] not in doc]
                    if missing:
                        raise SchemaError(f"dump has no field for {', '.join(missing)}; "
                                          f"available keys: {sorted(doc)}")
                    checked = True
                if name["device_id"] not in doc or name["data"] not in doc:
                    raise RecordFormatError(line_no, "missing device or payload field")
                raw_dev = str(doc[name["device_id"]])
                dev = device_names.get(raw_dev, raw_dev) if device_names else raw_dev
                width = doc.get(name["n"], n)
                if width is not None and (not isinstance(width, int) or width < 1):
                    raise RecordFormatError(line_no, "n must be a positive integer")
                try:
                    pattern = _decode_payload(doc[name["data"]], encoding, width)
                    ts = parse_timestamp(doc.get(name["timestamp"]))
                except (PatternDecodeError, ValueError) as exc:
                    raise RecordFormatError(line_no, str(exc)) from None
                if name["seq"] in doc:
                    seq = doc[name["seq"]]
                    if not isinstance(seq, int) or isinstance(seq, bool) or seq < 0:
                        raise RecordFormatError(line_no, "seq must be a non-negative integer")
                    if seq < next_seq.get(dev, 0):
                        raise RecordFormatError(line_no, f"seq {seq} of {dev} does not increase")
                else:
                    seq = next_seq.get(dev, 0)
            except RecordFormatError as exc:
                if strict:
                    raise
                stats.note(exc)
                continue
            next_seq[dev] = seq + 1
            stats.records += 1
            stats.matched += 1
            yield MeasurementRecord(dev, seq, ts, pattern)

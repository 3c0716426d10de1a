"""Command-line driver: ``sramlab {calibrate,simulate,analyze,report,render}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration/usage error.
Relative output paths resolve against ``$SRAMLAB_OUTPUT_DIR`` when set.
Every run writes a manifest (``*.manifest.json``) holding the effective
configuration; ``--manifest FILE`` re-runs a previous invocation exactly.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from datetime import date
from pathlib import Path

import numpy as np

from . import __version__
from .bits import PatternDecodeError
from .calibrate import CalibrationError, StartTargets, calibrate
from .campaign import CampaignAbort, CampaignConfig, ConfigError, SamplingPolicy, read_checkpoint, run_campaign
from .datastore import (
    DatastoreWriteError,
    RecordFormatError,
    RecordWriter,
    ScanStats,
    find_record,
    iter_epoch_windows,
    truncate_records,
)
from .metrics import DEFAULT_WINDOW
from .report import InsufficientDataError, ReportBuilder

OUTPUT_ENV = "SRAMLAB_OUTPUT_DIR"
BITMAP_WIDTH = 64
log = logging.getLogger("sramlab")


class UsageError(Exception):
    pass


def _out_path(p: str | os.PathLike) -> Path:
    path = Path(p)
    base = os.environ.get(OUTPUT_ENV)
    if base and not path.is_absolute():
        path = Path(base) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path} must hold a JSON object")
    return doc


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path: Path, args, config: dict, inputs: list[Path], outputs: list[Path]) -> None:
    doc = {
        "tool": "sramlab",
        "version": __version__,
        "command": args.command,
        "argv": args.argv,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _manifest_for(path: Path) -> Path:
    return path.with_name(path.name + ".manifest.json")


# --- calibrate -----------------------------------------------------------------

def cmd_calibrate(args) -> int:
    t = StartTargets(args.fhw, args.wchd, args.stable, args.noise_entropy, args.window)
    cfg = CampaignConfig.from_dict(_load_json(args.config)) if args.config else CampaignConfig()
    try:
        res = calibrate(t, cfg.model, check=not args.no_check, devices=args.devices, n=args.n, seed=args.seed)
    except CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return 1
    cfg.model = res.params
    out = _out_path(args.output)
    doc = cfg.to_dict()
    doc.pop("output")
    out.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    settings = {"targets": asdict(t), "devices": args.devices, "n": args.n, "seed": args.seed,
                "check": not args.no_check, "result": res.to_dict()}
    _write_manifest(_manifest_for(out), args, settings, [], [out])
    print(json.dumps(res.to_dict(), indent=1))
    return 0


# --- simulate ------------------------------------------------------------------

def simulate_config(args) -> CampaignConfig:
    base = _load_json(args.config) if args.config else {}
    overrides = {"seed": args.seed, "epochs": args.epochs, "n": args.n, "devices": args.devices,
                 "cycles_per_epoch": args.cycles_per_epoch, "persist": args.persist, "output": args.output}
    base.update({k: v for k, v in overrides.items() if v is not None})
    base.setdefault("output", "records.jsonl")
    return CampaignConfig.from_dict(base)


def cmd_simulate(args) -> int:
    cfg = simulate_config(args)
    out = _out_path(cfg.output)
    manifest = _manifest_for(out)
    index_path = out.with_name(out.name + ".epochs.json")
    checkpoint = out.with_name(out.name + ".checkpoint.json")

    def progress(epoch, written, elapsed):
        rate = written / elapsed if elapsed > 0 else 0.0
        print(f"epoch {epoch + 1}/{cfg.epochs}  records {written}  {rate:,.0f} records/s", file=sys.stderr)

    if args.resume:
        if not checkpoint.exists():
            raise UsageError(f"no checkpoint {checkpoint} to resume from")
        truncate_records(out, read_checkpoint(checkpoint)["records"])
    try:
        with RecordWriter(out, flush_every=cfg.flush_every, append=args.resume) as sink:
            res = run_campaign(cfg, sink, progress=None if args.quiet else progress,
                               checkpoint=checkpoint, resume=args.resume)
    except (CampaignAbort, DatastoreWriteError) as exc:
        cp = getattr(exc, "checkpoint", checkpoint)
        print(f"simulation failed: {exc}\ncheckpoint: {cp}", file=sys.stderr)
        return 1
    index = {str(e): {d: list(r) for d, r in v.items()} for e, v in sorted(res.epoch_index.items())}
    index_path.write_text(json.dumps(index, indent=1) + "\n", encoding="utf-8")
    checkpoint.unlink(missing_ok=True)
    _write_manifest(manifest, args, cfg.to_dict(), [], [out, index_path])
    if not args.quiet:
        print(f"wrote {res.records_written} records to {out} in {res.elapsed:.1f} s", file=sys.stderr)
    return 0


# --- analyze / report ----------------------------------------------------------

def _analysis_settings(args) -> dict:
    s = {"start": "2017-02-08", "timezone": "UTC", "window": DEFAULT_WINDOW, "epochs": None, "cycles_per_epoch": None}
    if args.config:
        cfg = CampaignConfig.from_dict(_load_json(args.config))
        s.update(start=cfg.start, timezone=cfg.timezone, window=cfg.window, epochs=cfg.epochs,
                 cycles_per_epoch=cfg.cycles_per_epoch)
    for k in s:
        v = getattr(args, k, None)
        if v is not None:
            s[k] = v
    return s


def _build(args):
    s = _analysis_settings(args)
    try:
        policy = SamplingPolicy(date.fromisoformat(s["start"]), s["timezone"], s["window"])
        policy.boundary(0)
    except Exception as exc:
        raise UsageError(f"bad sampling settings: {exc}") from None
    if not Path(args.records).exists():
        raise UsageError(f"record file {args.records} not found")
    stats = ScanStats()
    builder = ReportBuilder()
    builder.extend(iter_epoch_windows(args.records, policy, s["epochs"], cycles_per_epoch=s["cycles_per_epoch"],
                                      strict=not args.tolerant, stats=stats))
    report = builder.build(range(s["epochs"]) if s["epochs"] else None)
    return report, s, stats


def cmd_analyze(args) -> int:
    report, settings, stats = _build(args)
    out_dir = _out_path(Path(args.out_dir) / "x").parent
    stem = out_dir / args.prefix
    manifest = Path(f"{stem}.manifest.json")
    outputs = {
        "report.txt": report.to_text() + f"manifest: {manifest.name}\n",
        "report.json": json.dumps({"manifest": manifest.name, **report.to_dict()}, indent=1) + "\n",
        "series.csv": report.to_csv(),
        "histograms.csv": report.histograms_csv(),
    }
    paths = []
    for suffix, text in outputs.items():
        p = Path(f"{stem}.{suffix}")
        p.write_text(text, encoding="utf-8")
        paths.append(p)
    _write_manifest(manifest, args, {**settings, "records": str(args.records), "tolerant": args.tolerant,
                                          "skipped_lines": stats.errors}, [Path(args.records)], paths)
    sys.stdout.write(outputs["report.txt"])
    if stats.errors:
        print(f"skipped {stats.errors} malformed line(s), first: {stats.first_error}", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    report, _, stats = _build(args)
    text = {"text": report.to_text, "json": report.to_json, "csv": report.to_csv}[args.format]()
    sys.stdout.write(text)
    if stats.errors:
        print(f"skipped {stats.errors} malformed line(s)", file=sys.stderr)
    return 0


# --- render --------------------------------------------------------------------

def pattern_bitmap(bits: np.ndarray, width: int = BITMAP_WIDTH, comment: str | None = None) -> bytes:
    """Binary PBM (P4): pixel (r, c) is bit ``r * width + c``, 1 = black."""
    n = bits.size
    rows = -(-n // width)
    grid = np.zeros(rows * width, dtype=np.uint8)
    grid[:n] = bits
    body = np.packbits(grid.reshape(rows, width), axis=1, bitorder="big").tobytes()
    head = "P4\n" + (f"# {comment}\n" if comment else "") + f"{width} {rows}\n"
    return head.encode("ascii") + body


def cmd_render(args) -> int:
    if not Path(args.records).exists():
        raise UsageError(f"record file {args.records} not found")
    rec = find_record(args.records, args.device, args.seq, strict=not args.tolerant)
    if rec is None:
        print(f"no record for device {args.device} seq {args.seq} in {args.records}", file=sys.stderr)
        return 1
    out = _out_path(args.output or f"{args.device}_{args.seq}.pbm")
    manifest = _manifest_for(out)
    out.write_bytes(pattern_bitmap(rec.pattern.bits, args.width, f"{args.device} seq {args.seq} manifest {manifest.name}"))
    _write_manifest(manifest, args, {"device": args.device, "seq": args.seq, "width": args.width,
                                         "records": str(args.records)}, [Path(args.records)], [out])
    return 0


# --- parser --------------------------------------------------------------------

def _add_analysis_args(p):
    p.add_argument("records", help="JSON-lines record file")
    p.add_argument("--config", help="campaign config (supplies calendar and window settings)")
    p.add_argument("--start", help="campaign start date, YYYY-MM-DD")
    p.add_argument("--timezone", help="zone of the monthly sampling boundary")
    p.add_argument("--window", type=int, help="records per epoch window")
    p.add_argument("--epochs", type=int, help="number of epochs to evaluate")
    p.add_argument("--cycles-per-epoch", type=int, help="seq-based windows for records without timestamps")
    p.add_argument("--tolerant", action="store_true", help="skip malformed lines instead of aborting")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sramlab", description="SRAM PUF aging simulation and analysis")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--manifest", help="re-run the command recorded in a manifest")
    sub = ap.add_subparsers(dest="command")

    p = sub.add_parser("calibrate", help="fit the start-state model to quality targets")
    p.add_argument("--config", help="base campaign config; its aging parameters are kept")
    p.add_argument("--fhw", type=float, default=StartTargets.fhw)
    p.add_argument("--wchd", type=float, default=StartTargets.wchd)
    p.add_argument("--stable", type=float, default=StartTargets.stable_ratio)
    p.add_argument("--noise-entropy", type=float, default=StartTargets.noise_entropy)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--devices", type=int, default=16)
    p.add_argument("--n", type=int, default=8192)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-check", action="store_true", help="skip the simulation check")
    p.add_argument("-o", "--output", default="calibration.json")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("simulate", help="run a measurement campaign")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--devices", type=int)
    p.add_argument("--cycles-per-epoch", type=int)
    p.add_argument("--persist", choices=("all", "windows"))
    p.add_argument("-o", "--output")
    p.add_argument("--resume", action="store_true", help="continue after the last checkpointed round")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="evaluate records and write report, CSV and histograms")
    _add_analysis_args(p)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--prefix", default="analysis")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="print the quality report")
    _add_analysis_args(p)
    p.add_argument("--format", choices=("text", "json", "csv"), default="text")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("render", help="write one pattern as a PBM bitmap")
    p.add_argument("records")
    p.add_argument("--device", required=True)
    p.add_argument("--seq", type=int, required=True)
    p.add_argument("--width", type=int, default=BITMAP_WIDTH)
    p.add_argument("--tolerant", action="store_true")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_render)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.manifest:
        doc = _load_json(args.manifest) if Path(args.manifest).exists() else None
        if doc is None or "argv" not in doc:
            print(f"manifest {args.manifest} is missing or has no recorded argv", file=sys.stderr)
            return 2
        argv = doc["argv"]
        args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    args.argv = argv
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RecordFormatError, PatternDecodeError, InsufficientDataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Binary and CSV tag-stream files, and the filtered coincidence record format.

Tag file: little-endian 16-byte records ``(u64 timestamp_ticks, u8 channel,
u8 multiplicity, 6 reserved bytes)`` plus a JSON sidecar ``<path>.json``.

Coincidence records: little-endian 40-byte records, see ``RECORD_DTYPE``.  A
detector with no detection in the bin has ``counts == 0`` and relative
timestamp ``NO_DETECTION`` (-1).
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path
from typing import Iterator

import numpy as np

from .sequence import Channel, TagStream

TAG_DTYPE = np.dtype([
    ("timestamp", "<u8"),
    ("channel", "u1"),
    ("multiplicity", "u1"),
    ("reserved", "V6"),
])

RECORD_DTYPE = np.dtype([
    ("trigger_index", "<u8"),
    ("node1_trigger_timestamp", "<u8"),
    ("node2_trigger_timestamp", "<u8"),
    ("detection_bin_index", "<u4"),
    ("detA_counts", "<u2"),
    ("detB_counts", "<u2"),
    ("detA_relative_timestamp", "<i4"),
    ("detB_relative_timestamp", "<i4"),
])

NO_DETECTION = -1
CSV_COLUMNS = ("timestamp_ticks", "channel")


class TagFileError(OSError):
    pass


class RecordError(ValueError):
    pass


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def stream_to_array(stream: TagStream) -> np.ndarray:
    arr = np.zeros(len(stream), dtype=TAG_DTYPE)
    arr["timestamp"] = stream.timestamps
    arr["channel"] = stream.channels
    arr["multiplicity"] = stream.multiplicity
    return arr


def array_to_stream(arr: np.ndarray, meta: dict | None = None) -> TagStream:
    return TagStream(arr["timestamp"].astype(np.uint64), arr["channel"].astype(np.uint8),
                     arr["multiplicity"].astype(np.uint8), meta=dict(meta or {}))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_stream(path, stream: TagStream, sidecar: dict | None = None) -> str:
    """Write tags and sidecar; returns the sha256 of the tag bytes."""
    data = stream_to_array(stream).tobytes()
    Path(path).write_bytes(data)
    meta = dict(sidecar or {})
    if "bursts" in stream.meta:
        meta["bursts"] = stream.meta["bursts"]
    meta["n_tags"] = len(stream)
    digest = hashlib.sha256(data).hexdigest()
    meta["tags_sha256"] = digest
    sidecar_path(path).write_text(canonical_json(meta))
    return digest


def append_stream(fh, stream: TagStream) -> None:
    fh.write(stream_to_array(stream).tobytes())


def read_sidecar(path) -> dict:
    p = sidecar_path(path)
    if not p.exists():
        return {}
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise TagFileError(f"unreadable sidecar {p}: {exc}") from exc


def _is_csv(path) -> bool:
    return str(path).lower().endswith(".csv")


def read_stream(path) -> TagStream:
    path = Path(path)
    if not path.exists():
        raise TagFileError(f"no such tag file: {path}")
    if _is_csv(path):
        return read_csv_stream(path)
    size = path.stat().st_size
    if size % TAG_DTYPE.itemsize:
        raise TagFileError(f"{path}: size {size} is not a multiple of {TAG_DTYPE.itemsize}-byte records")
    arr = np.fromfile(path, dtype=TAG_DTYPE)
    return array_to_stream(arr, read_sidecar(path))


def iter_stream(path, chunk_tags: int = 1 << 20) -> Iterator[TagStream]:
    """Read a tag file in pieces, each ending just before a heartbeat tag.

    Cutting at heartbeats keeps every block (and its markers) whole.
    """
    path = Path(path)
    if _is_csv(path):
        yield read_csv_stream(path)
        return
    if not path.exists():
        raise TagFileError(f"no such tag file: {path}")
    size = path.stat().st_size
    if size % TAG_DTYPE.itemsize:
        raise TagFileError(f"{path}: size {size} is not a multiple of {TAG_DTYPE.itemsize}-byte records")
    n_total = size // TAG_DTYPE.itemsize
    meta = read_sidecar(path)
    mm = np.memmap(path, dtype=TAG_DTYPE, mode="r") if n_total else np.zeros(0, TAG_DTYPE)
    start = 0
    while start < n_total:
        stop = min(start + chunk_tags, n_total)
        if stop < n_total:
            ch = np.asarray(mm["channel"][start + 1:stop])
            hb = np.flatnonzero(ch == Channel.HEARTBEAT)
            if hb.size:
                stop = start + 1 + int(hb[-1])
            else:
                # no heartbeat in this window; extend to the next one
                rest = np.flatnonzero(np.asarray(mm["channel"][stop:]) == Channel.HEARTBEAT)
                stop = n_total if rest.size == 0 else stop + int(rest[0])
        yield array_to_stream(np.array(mm[start:stop]), meta)
        start = stop


def read_csv_stream(path) -> TagStream:
    ts, ch = [], []
    try:
        with open(path, newline="") as fh:
            rows = (line for line in fh if not line.startswith("#"))
            reader = csv.DictReader(rows)
            if reader.fieldnames is None or any(c not in reader.fieldnames for c in CSV_COLUMNS):
                raise TagFileError(f"{path}: CSV needs columns {', '.join(CSV_COLUMNS)}")
            for row in reader:
                ts.append(int(row["timestamp_ticks"]))
                ch.append(int(row["channel"]))
    except ValueError as exc:
        raise TagFileError(f"{path}: bad CSV value: {exc}") from exc
    return TagStream(np.array(ts, dtype=np.uint64), np.array(ch, dtype=np.uint8),
                     meta=read_sidecar(path))


def write_csv_stream(path, stream: TagStream) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for t, c in zip(stream.timestamps.tolist(), stream.channels.tolist()):
            w.writerow([t, c])


def make_records(n: int) -> np.ndarray:
    return np.zeros(n, dtype=RECORD_DTYPE)


_RECORD_LIMITS = {
    "trigger_index": (0, 2**64 - 1),
    "node1_trigger_timestamp": (0, 2**64 - 1),
    "node2_trigger_timestamp": (0, 2**64 - 1),
    "detection_bin_index": (0, 2**32 - 1),
    "detA_counts": (0, 2**16 - 1),
    "detB_counts": (0, 2**16 - 1),
    "detA_relative_timestamp": (-(2**31), 2**31 - 1),
    "detB_relative_timestamp": (-(2**31), 2**31 - 1),
}


def records_from_columns(**columns) -> np.ndarray:
    """Pack integer columns into records, refusing values that do not fit."""
    n = None
    for name, (lo, hi) in _RECORD_LIMITS.items():
        col = np.asarray(columns[name])
        if n is None:
            n = col.size
        elif col.size != n:
            raise RecordError(f"column {name} has {col.size} values, expected {n}")
        if col.size:
            if col.dtype.kind == "O":
                bad = np.array([not lo <= int(v) <= hi for v in col.reshape(-1)])
            elif col.dtype.kind == "u":
                bad = col > np.uint64(hi)
            else:
                c64 = col.astype(np.int64)
                bad = (c64 < lo) | (c64 > hi)
            if bad.any():
                raise RecordError(f"{name} value {col[np.argmax(bad)]} does not fit its field")
    out = make_records(n or 0)
    for name in _RECORD_LIMITS:
        out[name] = columns[name]
    return out


def write_records(path, records: np.ndarray) -> None:
    if records.dtype != RECORD_DTYPE:
        raise RecordError("records have the wrong dtype")
    with open(path, "wb") as fh:
        fh.write(records.tobytes())


def read_records(path) -> np.ndarray:
    size = os.path.getsize(path)
    if size % RECORD_DTYPE.itemsize:
        raise TagFileError(f"{path}: size {size} is not a multiple of {RECORD_DTYPE.itemsize}")
    return np.fromfile(path, dtype=RECORD_DTYPE)

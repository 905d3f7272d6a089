from __future__ import annotations

import json

import numpy as np
import pytest

from tpqi.sequence import Channel, EmitterDetectorModel, SequenceConfig, TagStream, simulate_run
from tpqi.tagio import (
    RECORD_DTYPE,
    TAG_DTYPE,
    RecordError,
    TagFileError,
    iter_stream,
    read_csv_stream,
    read_records,
    read_sidecar,
    read_stream,
    records_from_columns,
    write_csv_stream,
    write_records,
    write_stream,
)

FIELDS = [
    ("trigger_index", "<u8", 0),
    ("node1_trigger_timestamp", "<u8", 8),
    ("node2_trigger_timestamp", "<u8", 16),
    ("detection_bin_index", "<u4", 24),
    ("detA_counts", "<u2", 28),
    ("detB_counts", "<u2", 30),
    ("detA_relative_timestamp", "<i4", 32),
    ("detB_relative_timestamp", "<i4", 36),
]


def random_columns(n, seed=0):
    rng = np.random.default_rng(seed)
    return {
        "trigger_index": rng.integers(0, 2**64 - 1, n, dtype=np.uint64, endpoint=True),
        "node1_trigger_timestamp": rng.integers(0, 2**64 - 1, n, dtype=np.uint64, endpoint=True),
        "node2_trigger_timestamp": rng.integers(0, 2**64 - 1, n, dtype=np.uint64, endpoint=True),
        "detection_bin_index": rng.integers(0, 2**32 - 1, n, dtype=np.uint32, endpoint=True),
        "detA_counts": rng.integers(0, 2**16 - 1, n, dtype=np.uint16, endpoint=True),
        "detB_counts": rng.integers(0, 2**16 - 1, n, dtype=np.uint16, endpoint=True),
        "detA_relative_timestamp": rng.integers(-(2**31), 2**31 - 1, n, dtype=np.int32, endpoint=True),
        "detB_relative_timestamp": rng.integers(-(2**31), 2**31 - 1, n, dtype=np.int32, endpoint=True),
    }


class TestRecords:
    def test_layout(self):
        assert RECORD_DTYPE.itemsize == 40
        for name, fmt, offset in FIELDS:
            dt, off = RECORD_DTYPE.fields[name]
            assert dt == np.dtype(fmt)
            assert off == offset

    def test_round_trip_million(self, tmp_path):
        rec = records_from_columns(**random_columns(10**6))
        p = tmp_path / "r.bin"
        write_records(p, rec)
        raw = p.read_bytes()
        assert len(raw) == 40 * 10**6
        back = read_records(p)
        assert back.tobytes() == rec.tobytes()
        write_records(tmp_path / "r2.bin", back)
        assert (tmp_path / "r2.bin").read_bytes() == raw

    def test_extremes_survive(self, tmp_path):
        cols = random_columns(2)
        cols["trigger_index"] = np.array([0, 2**64 - 1], dtype=np.uint64)
        cols["detA_relative_timestamp"] = np.array([-(2**31), 2**31 - 1])
        rec = records_from_columns(**cols)
        write_records(tmp_path / "x", rec)
        back = read_records(tmp_path / "x")
        assert int(back["trigger_index"][1]) == 2**64 - 1
        assert int(back["detA_relative_timestamp"][0]) == -(2**31)

    @pytest.mark.parametrize("name,value", [
        ("detA_counts", 2**16), ("detection_bin_index", 2**32), ("detB_relative_timestamp", 2**31),
        ("detA_relative_timestamp", -(2**31) - 1), ("trigger_index", -1), ("node1_trigger_timestamp", 2**64),
    ])
    def test_overflow_rejected(self, name, value):
        cols = {k: [int(v[0])] for k, v in random_columns(1).items()}
        cols[name] = [value]
        with pytest.raises(RecordError, match=name):
            records_from_columns(**cols)

    def test_length_mismatch(self):
        cols = random_columns(3)
        cols["detB_counts"] = cols["detB_counts"][:2]
        with pytest.raises(RecordError):
            records_from_columns(**cols)

    def test_truncated_file(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"\0" * 41)
        with pytest.raises(TagFileError):
            read_records(tmp_path / "bad")


@pytest.fixture(scope="module")
def stream():
    return simulate_run(SequenceConfig(), EmitterDetectorModel(), 0.9, seed=21, n_blocks=3000)


class TestTagFiles:
    def test_layout(self):
        assert TAG_DTYPE.itemsize == 16
        assert TAG_DTYPE.fields["channel"][1] == 8

    def test_binary_round_trip(self, tmp_path, stream):
        p = tmp_path / "s.tags"
        digest = write_stream(p, stream, {"seed": 21})
        back = read_stream(p)
        assert np.array_equal(back.timestamps, stream.timestamps)
        assert np.array_equal(back.channels, stream.channels)
        side = read_sidecar(p)
        assert side["seed"] == 21 and side["n_tags"] == len(stream) and side["tags_sha256"] == digest
        assert p.stat().st_size == 16 * len(stream)

    def test_csv_round_trip(self, tmp_path, stream):
        p = tmp_path / "s.csv"
        write_csv_stream(p, stream)
        back = read_stream(p)
        assert np.array_equal(back.timestamps, stream.timestamps)
        assert np.array_equal(back.channels, stream.channels)

    def test_csv_errors(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("time,chan\n1,2\n")
        with pytest.raises(TagFileError):
            read_csv_stream(p)
        p.write_text("timestamp_ticks,channel\nabc,1\n")
        with pytest.raises(TagFileError):
            read_csv_stream(p)

    def test_missing_and_truncated(self, tmp_path):
        with pytest.raises(TagFileError):
            read_stream(tmp_path / "nope.tags")
        (tmp_path / "t.tags").write_bytes(b"\0" * 17)
        with pytest.raises(TagFileError):
            read_stream(tmp_path / "t.tags")
        with pytest.raises(TagFileError):
            list(iter_stream(tmp_path / "t.tags"))

    def test_bad_sidecar(self, tmp_path, stream):
        p = tmp_path / "s.tags"
        write_stream(p, stream)
        (tmp_path / "s.tags.json").write_text("{not json")
        with pytest.raises(TagFileError):
            read_stream(p)

    def test_empty(self, tmp_path):
        p = tmp_path / "e.tags"
        write_stream(p, TagStream.empty())
        assert len(read_stream(p)) == 0
        assert list(iter_stream(p)) == []

    @pytest.mark.parametrize("chunk", [1, 500, 7_777, 10**7])
    def test_iter_cuts_at_heartbeats(self, tmp_path, stream, chunk):
        p = tmp_path / "s.tags"
        write_stream(p, stream)
        pieces = list(iter_stream(p, chunk_tags=chunk))
        joined = np.concatenate([x.timestamps for x in pieces])
        assert np.array_equal(joined, stream.timestamps)
        for piece in pieces[1:]:
            assert piece.channels[0] == Channel.HEARTBEAT
        if chunk == 10**7:
            assert len(pieces) == 1


def test_sidecar_is_canonical(tmp_path, stream):
    p = tmp_path / "s.tags"
    write_stream(p, stream, {"b": 1, "a": 2})
    text = (tmp_path / "s.tags.json").read_text()
    assert text == json.dumps(json.loads(text), sort_keys=True, indent=2) + "\n"

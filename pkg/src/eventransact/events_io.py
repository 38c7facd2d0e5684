"""Raw event streams: canonical EVT interchange format, AEDAT 3.1 import,
gesture label files, slicing and deterministic synthetic generators.

Canonical EVT layout (all integers little-endian)::

    b"EVT1 <width> <height> <count>\\n"          ASCII header line
    count x 16-byte records:
        u16 x | u16 y | u8 polarity (0=neg, 1=pos) | 3 zero pad bytes | u64 t_usec

AEDAT support follows the iniVation "AEDAT 3.1" file format documentation:
an ASCII header (``#!AER-DAT3.1`` ... ``#!END-HEADER``) followed by packets
with a 28-byte common header. Only polarity packets (type 1) are decoded.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

__all__ = [
    "EventParseError",
    "EventRecord",
    "EventStream",
    "GestureSegment",
    "AedatContents",
    "SynthParams",
    "PATTERNS",
    "parse_canonical",
    "write_canonical",
    "read_canonical_file",
    "write_canonical_file",
    "parse_aedat",
    "read_aedat",
    "parse_gesture_labels",
    "slice_stream",
    "synth_stream",
]

MAX_TIMESTAMP = 2**63 - 1

_RECORD_DTYPE = np.dtype(
    {
        "names": ["x", "y", "p", "pad", "t"],
        "formats": ["<u2", "<u2", "u1", ("u1", (3,)), "<u8"],
        "offsets": [0, 2, 4, 5, 8],
        "itemsize": 16,
    }
)
RECORD_SIZE = _RECORD_DTYPE.itemsize


class EventParseError(ValueError):
    """Malformed event data. ``offset`` is a byte offset, ``packet`` an AEDAT
    packet index and ``line`` a 1-based text line, whichever applies."""

    def __init__(self, message, *, offset=None, packet=None, line=None):
        where = []
        if offset is not None:
            where.append(f"byte offset {offset}")
        if packet is not None:
            where.append(f"packet {packet}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.packet = packet
        self.line = line


class EventRecord(NamedTuple):
    x: int
    y: int
    polarity: int  # 1 = positive, 0 = negative
    t: int  # microseconds


@dataclass(frozen=True, eq=False)
class EventStream:
    """Events of one sensor, stored column-wise and sorted by timestamp.

    Equality is exact: same resolution and identical event columns.
    """

    width: int
    height: int
    x: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint16))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint16))
    p: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint8))
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"resolution must be positive, got {self.width}x{self.height}")
        cols = {}
        for name, dtype in (("x", np.uint16), ("y", np.uint16), ("p", np.uint8), ("t", np.int64)):
            raw = np.asarray(getattr(self, name))
            if raw.ndim != 1:
                raise ValueError(f"event column {name!r} must be 1-D")
            if raw.size and raw.dtype.kind == "f":
                raise ValueError(f"event column {name!r} must be integer")
            if raw.size and (raw.min() < 0 or (name != "t" and raw.max() > np.iinfo(dtype).max)):
                raise ValueError(f"event column {name!r} out of range")
            if name == "t" and raw.size and raw.dtype == np.uint64 and raw.max() > MAX_TIMESTAMP:
                raise ValueError("timestamp exceeds 63 bits")
            arr = np.ascontiguousarray(raw, dtype=dtype)
            arr.flags.writeable = False
            cols[name] = arr
        n = cols["t"].size
        if any(c.size != n for c in cols.values()):
            raise ValueError("event columns differ in length")
        if n:
            if cols["x"].max() >= self.width or cols["y"].max() >= self.height:
                raise ValueError("event coordinate outside sensor bounds")
            if cols["p"].max() > 1:
                raise ValueError("polarity must be 0 or 1")
            if np.any(np.diff(cols["t"]) < 0):
                raise ValueError("events are not sorted by timestamp")
        for name, arr in cols.items():
            object.__setattr__(self, name, arr)

    def __len__(self):
        return int(self.t.size)

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in "xypt")
        )

    __hash__ = None

    @property
    def events(self) -> list[EventRecord]:
        return list(self.records())

    def records(self) -> Iterator[EventRecord]:
        for x, y, p, t in zip(self.x.tolist(), self.y.tolist(), self.p.tolist(), self.t.tolist()):
            yield EventRecord(x, y, p, t)

    @property
    def duration(self) -> int:
        """Last timestamp + 1, or 0 for an empty stream."""
        return int(self.t[-1]) + 1 if len(self) else 0

    @classmethod
    def from_records(cls, width, height, records: Sequence[EventRecord | tuple]) -> "EventStream":
        if not records:
            return cls(width, height)
        arr = np.asarray([tuple(r) for r in records], dtype=np.int64)
        return cls(width, height, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])

    def select(self, mask_or_index) -> "EventStream":
        """Sub-stream of the selected events, order preserved."""
        return EventStream(
            self.width,
            self.height,
            self.x[mask_or_index],
            self.y[mask_or_index],
            self.p[mask_or_index],
            self.t[mask_or_index],
        )


@dataclass(frozen=True)
class GestureSegment:
    class_id: int
    start_usec: int
    end_usec: int

    def __post_init__(self):
        if self.start_usec >= self.end_usec:
            raise ValueError(f"segment start {self.start_usec} >= end {self.end_usec}")


# -- canonical format --------------------------------------------------------


def parse_canonical(data: bytes) -> EventStream:
    """Decode canonical EVT bytes. Every record is validated."""
    data = bytes(data)
    nl = data.find(b"\n", 0, 128)
    if nl < 0:
        raise EventParseError("missing EVT1 header line", offset=0)
    try:
        magic, w, h, count = data[:nl].decode("ascii").split(" ")
        width, height, count = int(w), int(h), int(count)
    except (UnicodeDecodeError, ValueError):
        raise EventParseError("malformed EVT1 header", offset=0) from None
    if magic != "EVT1" or width <= 0 or height <= 0 or count < 0:
        raise EventParseError("malformed EVT1 header", offset=0)
    start = nl + 1
    payload = len(data) - start
    if payload != count * RECORD_SIZE:
        bad = start + min(payload // RECORD_SIZE, count) * RECORD_SIZE
        raise EventParseError(
            f"payload holds {payload} bytes, header declares {count} records", offset=bad
        )
    rec = np.frombuffer(data, dtype=_RECORD_DTYPE, count=count, offset=start)

    def fail(message, index, field_offset=0):
        raise EventParseError(message, offset=start + int(index) * RECORD_SIZE + field_offset)

    for name, limit in (("x", width), ("y", height)):
        bad = np.flatnonzero(rec[name] >= limit)
        if bad.size:
            fail(f"{name} coordinate {int(rec[name][bad[0]])} outside {width}x{height}", bad[0])
    bad = np.flatnonzero(rec["p"] > 1)
    if bad.size:
        fail("polarity byte must be 0 or 1", bad[0], 4)
    bad = np.flatnonzero(rec["pad"].any(axis=1))
    if bad.size:
        fail("nonzero pad bytes", bad[0], 5)
    t = rec["t"]
    bad = np.flatnonzero(t > MAX_TIMESTAMP)
    if bad.size:
        fail("timestamp exceeds 63 bits", bad[0], 8)
    t = t.astype(np.int64)
    bad = np.flatnonzero(np.diff(t) < 0)
    if bad.size:
        fail("timestamp regression", bad[0] + 1, 8)
    return EventStream(width, height, rec["x"], rec["y"], rec["p"], t)


def write_canonical(stream: EventStream) -> bytes:
    if not isinstance(stream, EventStream):
        raise TypeError("write_canonical expects an EventStream")
    # EventStream enforces sortedness on construction; re-check to refuse
    # anything that bypassed it.
    if np.any(np.diff(stream.t) < 0):
        raise ValueError("refusing to write unsorted events")
    rec = np.zeros(len(stream), dtype=_RECORD_DTYPE)
    rec["x"], rec["y"], rec["p"], rec["t"] = stream.x, stream.y, stream.p, stream.t
    header = f"EVT1 {stream.width} {stream.height} {len(stream)}\n".encode("ascii")
    return header + rec.tobytes()


def read_canonical_file(path) -> EventStream:
    with open(path, "rb") as fh:
        return parse_canonical(fh.read())


def write_canonical_file(stream: EventStream, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_canonical(stream))


# -- AEDAT 3.1 ---------------------------------------------------------------

AEDAT_VERSION_LINE = b"#!AER-DAT3.1"
_AEDAT_PACKET_HEADER = struct.Struct("<hhiiiiii")
POLARITY_EVENT = 1


class AedatContents(NamedTuple):
    stream: EventStream
    skipped_packets: int
    header_lines: list[str]


def read_aedat(data: bytes, width: int = 128, height: int = 128) -> AedatContents:
    """Decode an AEDAT 3.1 file; non-polarity packets are counted and skipped.

    The DVS128 default resolution applies unless given. Invalid events
    (validity bit clear) are dropped. Timestamps combine the packet's
    ``eventTSOverflow`` with the 31-bit event timestamp.
    """
    data = bytes(data)
    first_nl = data.find(b"\n")
    if first_nl < 0 or data[:first_nl].rstrip(b"\r") != AEDAT_VERSION_LINE:
        raise EventParseError("missing or unknown AEDAT version header", offset=0)
    pos = first_nl + 1
    header_lines = []
    while True:
        if pos >= len(data) or data[pos : pos + 1] != b"#":
            raise EventParseError("AEDAT header lacks #!END-HEADER", offset=pos)
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise EventParseError("unterminated AEDAT header line", offset=pos)
        line = data[pos:nl].rstrip(b"\r")
        pos = nl + 1
        if line == b"#!END-HEADER":
            break
        header_lines.append(line.decode("latin-1"))

    xs, ys, ps, ts = [], [], [], []
    skipped = 0
    index = 0
    while pos < len(data):
        if len(data) - pos < _AEDAT_PACKET_HEADER.size:
            raise EventParseError("truncated packet header", packet=index, offset=pos)
        (ev_type, _source, ev_size, _ts_offset, ts_overflow, capacity, number, _valid) = (
            _AEDAT_PACKET_HEADER.unpack_from(data, pos)
        )
        pos += _AEDAT_PACKET_HEADER.size
        if ev_size <= 0 or capacity < 0 or number < 0 or number > capacity:
            raise EventParseError("inconsistent packet header", packet=index, offset=pos)
        nbytes = capacity * ev_size
        if len(data) - pos < nbytes:
            raise EventParseError("truncated packet payload", packet=index, offset=pos)
        if ev_type != POLARITY_EVENT:
            skipped += 1
        else:
            if ev_size != 8:
                raise EventParseError("polarity events must be 8 bytes", packet=index, offset=pos)
            ev = np.frombuffer(data, dtype=[("data", "<u4"), ("ts", "<i4")], count=number, offset=pos)
            word = ev["data"].astype(np.int64)
            valid = (word & 1) == 1
            x = (word >> 17) & 0x7FFF
            y = (word >> 2) & 0x7FFF
            if np.any(valid & ((x >= width) | (y >= height))):
                raise EventParseError(f"event outside {width}x{height}", packet=index, offset=pos)
            if np.any(ev["ts"][valid] < 0):
                raise EventParseError("negative event timestamp", packet=index, offset=pos)
            xs.append(x[valid])
            ys.append(y[valid])
            ps.append((word[valid] >> 1) & 1)
            ts.append((np.int64(ts_overflow) << 31) | ev["ts"][valid].astype(np.int64))
        pos += nbytes
        index += 1

    if not ts:
        return AedatContents(EventStream(width, height), skipped, header_lines)
    t = np.concatenate(ts)
    order = np.argsort(t, kind="stable")
    stream = EventStream(
        width,
        height,
        np.concatenate(xs)[order],
        np.concatenate(ys)[order],
        np.concatenate(ps)[order],
        t[order],
    )
    return AedatContents(stream, skipped, header_lines)


def parse_aedat(data: bytes, width: int = 128, height: int = 128) -> EventStream:
    return read_aedat(data, width, height).stream


# -- gesture labels ----------------------------------------------------------

LABEL_HEADER = ["class", "startTime_usec", "endTime_usec"]


def parse_gesture_labels(text: str, num_classes: int = 11) -> list[GestureSegment]:
    """Parse a DVS Gesture ``*_labels.csv`` file. Errors carry the line number."""
    rows = csv.reader(io.StringIO(text))
    segments = []
    for lineno, row in enumerate(rows, start=1):
        if lineno == 1:
            if [c.strip() for c in row] != LABEL_HEADER:
                raise EventParseError("expected header class,startTime_usec,endTime_usec", line=1)
            continue
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise EventParseError("expected 3 fields", line=lineno)
        try:
            cls, start, end = (int(c) for c in row)
        except ValueError:
            raise EventParseError("non-integer field", line=lineno) from None
        if start >= end:
            raise EventParseError(f"start {start} >= end {end}", line=lineno)
        if not 1 <= cls <= num_classes:
            raise EventParseError(f"class {cls} outside 1..{num_classes}", line=lineno)
        segments.append(GestureSegment(cls, start, end))
    return segments


# -- slicing -----------------------------------------------------------------


def slice_stream(stream: EventStream, t0: int, t1: int) -> EventStream:
    """Events with ``t0 <= t < t1``, timestamps re-based to ``t - t0``."""
    if t0 >= t1:
        raise ValueError(f"empty slice interval [{t0}, {t1})")
    lo, hi = np.searchsorted(stream.t, [t0, t1], side="left")
    return EventStream(
        stream.width,
        stream.height,
        stream.x[lo:hi],
        stream.y[lo:hi],
        stream.p[lo:hi],
        stream.t[lo:hi] - np.int64(t0),
    )


# -- synthetic streams -------------------------------------------------------

PATTERNS = ("translating_bar", "rotating_dot", "expanding_ring", "flicker")


@dataclass(frozen=True)
class SynthParams:
    width: int = 128
    height: int = 128
    duration_usec: int = 500_000
    rate: float = 0.02  # mean events per microsecond


def synth_stream(pattern: str, params: SynthParams = SynthParams(), seed: int = 0):
    """Deterministic synthetic stream; returns ``(stream, class_id)`` where the
    class id is the pattern's index in ``PATTERNS``.

    Event count is Poisson(rate * duration); timestamps are uniform. Each
    pattern draws its own geometry (direction, phase, speed) from the seed.
    """
    if pattern not in PATTERNS:
        raise ValueError(f"unknown pattern {pattern!r}; expected one of {PATTERNS}")
    if params.duration_usec <= 0:
        raise ValueError("duration must be positive")
    if params.rate < 0:
        raise ValueError("rate must be non-negative")
    rng = np.random.default_rng(seed)
    W, H, D = params.width, params.height, params.duration_usec
    n = int(rng.poisson(params.rate * D))
    t = np.sort(rng.integers(0, D, size=n, dtype=np.int64))
    u = t / D
    scale = min(W, H) / 128.0
    cx, cy = (W - 1) / 2, (H - 1) / 2

    if pattern == "translating_bar":
        direction = rng.choice([-1.0, 1.0])
        bar = 0.06 * W
        centre = W * (0.15 + 0.7 * (u if direction > 0 else 1 - u))
        offset = rng.normal(0.0, bar / 2, size=n)
        x = centre + offset
        y = rng.uniform(0.1 * H, 0.9 * H, size=n)
        pol = (offset * direction > 0).astype(np.uint8)
    elif pattern == "rotating_dot":
        radius = 0.3 * min(W, H)
        turns = rng.uniform(1.0, 2.0) * rng.choice([-1.0, 1.0])
        angle = rng.uniform(0, 2 * np.pi) + 2 * np.pi * turns * u
        x = cx + radius * np.cos(angle) + rng.normal(0, 3 * scale, size=n)
        y = cy + radius * np.sin(angle) + rng.normal(0, 3 * scale, size=n)
        pol = rng.integers(0, 2, size=n).astype(np.uint8)
    elif pattern == "expanding_ring":
        r0 = rng.uniform(0.05, 0.1) * min(W, H)
        r1 = rng.uniform(0.4, 0.45) * min(W, H)
        jitter = rng.normal(0, 1.5 * scale, size=n)
        r = r0 + (r1 - r0) * u + jitter
        angle = rng.uniform(0, 2 * np.pi, size=n)
        x = cx + r * np.cos(angle)
        y = cy + r * np.sin(angle)
        pol = (jitter > 0).astype(np.uint8)
    else:  # flicker
        side = 0.3 * min(W, H)
        x0 = rng.uniform(0.1 * W, 0.9 * W - side)
        y0 = rng.uniform(0.1 * H, 0.9 * H - side)
        cycles = rng.integers(4, 9)
        x = rng.uniform(x0, x0 + side, size=n)
        y = rng.uniform(y0, y0 + side, size=n)
        pol = (np.floor(u * cycles * 2) % 2 == 0).astype(np.uint8)

    x = np.clip(np.rint(x), 0, W - 1).astype(np.uint16)
    y = np.clip(np.rint(y), 0, H - 1).astype(np.uint16)
    return EventStream(W, H, x, y, pol, t), PATTERNS.index(pattern)

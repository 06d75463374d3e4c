"""Event data model, event/ground-truth file I/O, windowing and a synthetic
moving-square event generator.

Streams are held as numpy structured arrays with fields ``x, y, t, p``
(see :data:`EVENT_DTYPE`); :class:`Event` is the per-record view used by
the iterator-style parser.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

EVENT_DTYPE = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<u8"), ("p", "i1")])
PACKED_MAGIC = b"SDTEVT01"
_PACKED_RECORD = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<u8"), ("p", "i1")], align=False)


class EventFormatError(ValueError):
    """Malformed or inconsistent event data; carries the byte offset or record index."""

    def __init__(self, message: str, offset: int | None = None, index: int | None = None):
        super().__init__(message)
        self.offset = offset
        self.index = index


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass(frozen=True)
class GroundTruthBox:
    """Axis-aligned target box in sensor pixels (center form)."""

    frame: int
    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def clamped(self, width: int, height: int) -> "GroundTruthBox":
        x0, y0, x1, y1 = self.corners()
        x0, x1 = np.clip([x0, x1], 0, width)
        y0, y1 = np.clip([y0, y1], 0, height)
        return GroundTruthBox(self.frame, (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


@dataclass(frozen=True)
class EventWindow:
    """Events with ``t_start <= t < t_end``, sorted by time (stable)."""

    events: np.ndarray
    t_start: int
    t_end: int
    width: int
    height: int

    def __post_init__(self):
        ev = np.array(self.events, dtype=EVENT_DTYPE, copy=True)
        if len(ev):
            if ev["t"].min() < self.t_start or ev["t"].max() >= self.t_end:
                raise ValueError("event outside window bounds")
            if ev["x"].max() >= self.width or ev["y"].max() >= self.height:
                raise ValueError("event outside sensor bounds")
        ev.flags.writeable = False
        object.__setattr__(self, "events", ev)

    def __len__(self) -> int:
        return len(self.events)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @classmethod
    def from_events(cls, events, width: int, height: int, t_start: int = 0, t_end: int | None = None):
        ev = as_event_array(events)
        if t_end is None:
            t_end = int(ev["t"].max()) + 1 if len(ev) else t_start + 1
        return cls(ev, t_start, t_end, width, height)


def as_event_array(events) -> np.ndarray:
    """Coerce an Event sequence or structured array to :data:`EVENT_DTYPE`."""
    if isinstance(events, np.ndarray) and events.dtype.names is not None:
        return events.astype(EVENT_DTYPE, copy=False)
    events = list(events)
    if not events:
        return np.zeros(0, dtype=EVENT_DTYPE)
    return np.array([tuple(e) for e in events], dtype=EVENT_DTYPE)


def validate_events(events: np.ndarray, width: int | None = None, height: int | None = None) -> None:
    if len(events) == 0:
        return
    p = events["p"]
    bad = np.flatnonzero((p != 1) & (p != -1))
    if len(bad):
        raise EventFormatError(f"invalid polarity {int(p[bad[0]])} at index {bad[0]}", index=int(bad[0]))
    dt = np.diff(events["t"].astype(np.int64))
    back = np.flatnonzero(dt < 0)
    if len(back):
        i = int(back[0]) + 1
        raise EventFormatError(f"non-monotone timestamp at index {i}", index=i)
    if width is not None and events["x"].max() >= width:
        raise EventFormatError("x outside sensor width")
    if height is not None and events["y"].max() >= height:
        raise EventFormatError("y outside sensor height")


# -- file I/O ---------------------------------------------------------------

def _infer_format(path) -> str:
    with open(path, "rb") as fh:
        head = fh.read(len(PACKED_MAGIC))
    return "packed" if head == PACKED_MAGIC else "csv"


def _parse_csv(path) -> Iterator[Event]:
    offset = 0
    last_t = None
    index = 0
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh):
            line_offset = offset
            offset += len(raw)
            line = raw.strip()
            if not line or line.startswith(b"#"):
                continue
            parts = line.split(b",")
            if lineno == 0 and not parts[0].strip().lstrip(b"-").isdigit():
                continue  # header
            if len(parts) != 4:
                raise EventFormatError(f"expected 4 fields at byte offset {line_offset}", offset=line_offset)
            try:
                x, y, t, p = (int(v) for v in parts)
            except ValueError:
                raise EventFormatError(f"non-integer field at byte offset {line_offset}", offset=line_offset) from None
            if p not in (1, -1):
                raise EventFormatError(f"invalid polarity {p} at byte offset {line_offset}", offset=line_offset)
            if x < 0 or y < 0 or t < 0:
                raise EventFormatError(f"negative coordinate at byte offset {line_offset}", offset=line_offset)
            if last_t is not None and t < last_t:
                raise EventFormatError(f"non-monotone timestamp at index {index}", offset=line_offset, index=index)
            last_t = t
            yield Event(x, y, t, p)
            index += 1


def _read_packed(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(PACKED_MAGIC)] != PACKED_MAGIC:
        raise EventFormatError("bad magic header", offset=0)
    body = blob[len(PACKED_MAGIC):]
    n, rem = divmod(len(body), _PACKED_RECORD.itemsize)
    if rem:
        off = len(PACKED_MAGIC) + n * _PACKED_RECORD.itemsize
        raise EventFormatError(f"truncated record at byte offset {off}", offset=off)
    return np.frombuffer(body, dtype=_PACKED_RECORD, count=n).astype(EVENT_DTYPE)


def parse_event_file(path, format: str | None = None) -> Iterator[Event]:
    """Yield events in file order. ``format`` is ``"csv"`` or ``"packed"``
    (auto-detected from the magic header when omitted)."""
    fmt = format or _infer_format(path)
    if fmt == "csv":
        yield from _parse_csv(path)
    elif fmt in ("packed", "packed-binary", "bin"):
        arr = _read_packed(path)
        try:
            validate_events(arr)
        except EventFormatError as err:
            if err.index is not None:
                err.offset = len(PACKED_MAGIC) + err.index * _PACKED_RECORD.itemsize
            raise
        for rec in arr:
            yield Event(int(rec["x"]), int(rec["y"]), int(rec["t"]), int(rec["p"]))
    else:
        raise ValueError(f"unknown event format {fmt!r}")


def read_events(path, format: str | None = None) -> np.ndarray:
    """Load a whole event file into a structured array."""
    fmt = format or _infer_format(path)
    if fmt in ("packed", "packed-binary", "bin"):
        arr = _read_packed(path)
        validate_events(arr)
        return arr
    return as_event_array(parse_event_file(path, fmt))


def write_event_file(path, events, format: str = "csv") -> None:
    ev = as_event_array(events)
    validate_events(ev)
    if format == "csv":
        buf = io.StringIO()
        buf.write("x,y,t,p\n")
        for x, y, t, p in zip(ev["x"].tolist(), ev["y"].tolist(), ev["t"].tolist(), ev["p"].tolist()):
            buf.write(f"{x},{y},{t},{p}\n")
        with open(path, "w", newline="") as fh:
            fh.write(buf.getvalue())
    elif format in ("packed", "packed-binary", "bin"):
        with open(path, "wb") as fh:
            fh.write(PACKED_MAGIC)
            fh.write(ev.astype(_PACKED_RECORD).tobytes())
    else:
        raise ValueError(f"unknown event format {format!r}")


def write_ground_truth(path, boxes: Sequence[GroundTruthBox]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "cx", "cy", "w", "h"])
        for b in boxes:
            w.writerow([b.frame, repr(float(b.cx)), repr(float(b.cy)), repr(float(b.w)), repr(float(b.h))])


def read_ground_truth(path) -> list[GroundTruthBox]:
    boxes = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            boxes.append(GroundTruthBox(int(row["frame"]), float(row["cx"]), float(row["cy"]),
                                        float(row["w"]), float(row["h"])))
    return boxes


# -- windowing --------------------------------------------------------------

def subwindow_bounds(t0: int, window_len_us: int, T: int) -> list[tuple[int, int]]:
    """Split ``[t0, t0 + window_len_us)`` into T contiguous pieces; the
    remainder of the integer division goes to the last piece."""
    step = window_len_us // T
    bounds = [(t0 + k * step, t0 + (k + 1) * step) for k in range(T)]
    bounds[-1] = (bounds[-1][0], t0 + window_len_us)
    return bounds


def window_stream(events, window_len_us: int, T: int = 1, *, width: int, height: int,
                  t_origin: int = 0, n_frames: int | None = None) -> list[EventWindow]:
    """Slice a stream into per-frame intervals of ``window_len_us``, each split
    into T sub-windows. Returned frame-major: ``windows[frame * T + k]``."""
    if window_len_us <= 0:
        raise ValueError("window_len_us must be > 0")
    if T < 1:
        raise ValueError("T must be >= 1")
    if window_len_us < T:
        raise ValueError("window_len_us must be >= T")
    ev = as_event_array(events)
    if n_frames is None:
        if len(ev) == 0:
            return []
        n_frames = int((int(ev["t"][-1]) - t_origin) // window_len_us) + 1
    ts = ev["t"].astype(np.int64)
    out = []
    for f in range(n_frames):
        for a, b in subwindow_bounds(t_origin + f * window_len_us, window_len_us, T):
            lo, hi = np.searchsorted(ts, [a, b], side="left")
            out.append(EventWindow(ev[lo:hi], a, b, width, height))
    return out


# -- synthetic generator ----------------------------------------------------

@dataclass
class SyntheticConfig:
    width: int = 128
    height: int = 128
    object_size: float = 12.0
    start: tuple[float, float] = (64.0, 64.0)
    # piecewise-constant velocity in px/frame; each segment is (n_frames, vx, vy)
    velocity_path: list[tuple[int, float, float]] = field(default_factory=lambda: [(20, 0.0, 0.0)])
    frame_us: int = 10_000
    ticks_per_frame: int = 10
    events_per_edge_pixel: int = 1
    noise_rate: float = 0.0  # background events per frame
    seed: int = 0

    @property
    def n_frames(self) -> int:
        return sum(int(n) for n, _, _ in self.velocity_path)


@dataclass
class SyntheticSequence:
    events: np.ndarray
    boxes: list[GroundTruthBox]
    config: SyntheticConfig
    warnings: list[str] = field(default_factory=list)

    def windows(self, T: int = 1) -> list[EventWindow]:
        c = self.config
        return window_stream(self.events, c.frame_us, T, width=c.width, height=c.height,
                             n_frames=c.n_frames)


def _square_span(cx: float, cy: float, size: float, width: int, height: int) -> tuple[int, int, int, int]:
    """Covered pixel ranges (x0, x1, y0, y1), half-open; a pixel is covered
    when its center lies inside the square."""
    half = size / 2

    def span(c, n):
        centers = np.arange(n) + 0.5
        idx = np.flatnonzero((centers >= c - half) & (centers < c + half))
        return (int(idx[0]), int(idx[-1]) + 1) if len(idx) else (0, 0)

    return span(cx, width) + span(cy, height)


def _square_mask(cx: float, cy: float, size: float, width: int, height: int) -> np.ndarray:
    x0, x1, y0, y1 = _square_span(cx, cy, size, width, height)
    mask = np.zeros((height, width), dtype=bool)
    mask[y0:y1, x0:x1] = True
    return mask


def square_trajectory(cfg: SyntheticConfig) -> tuple[np.ndarray, list[str]]:
    """Object center at every tick (``n_frames * ticks + 1`` rows), clamped to the sensor."""
    ticks = cfg.ticks_per_frame
    rows = [np.array(cfg.start, dtype=np.float64)[None, :]]
    origin = rows[0][0]
    for n, vx, vy in cfg.velocity_path:
        k = np.arange(1, int(n) * ticks + 1, dtype=np.float64)[:, None]
        # analytic within a segment: frame-boundary positions are exact
        seg = origin + np.array([vx, vy], dtype=np.float64) * k / ticks
        rows.append(seg)
        origin = seg[-1] if len(seg) else origin
    path = np.concatenate(rows)
    half = cfg.object_size / 2
    lo = np.array([half, half])
    hi = np.array([cfg.width - half, cfg.height - half])
    clipped = np.clip(path, lo, hi)
    warnings = []
    if not np.array_equal(clipped, path):
        first = int(np.flatnonzero(np.any(clipped != path, axis=1))[0])
        warnings.append(f"object left sensor bounds at tick {first}; path clamped")
        logger.warning(warnings[-1])
    return clipped, warnings


def _edge_events(prev, cur, t: int, repeat: int) -> list[np.ndarray]:
    """Events for the change from span ``prev`` to span ``cur`` (None: empty)."""
    if prev == cur:
        return []
    spans = [s for s in (prev, cur) if s is not None]
    x0, y0 = min(s[0] for s in spans), min(s[2] for s in spans)
    x1, y1 = max(s[1] for s in spans), max(s[3] for s in spans)

    def local(s):
        m = np.zeros((y1 - y0, x1 - x0), dtype=bool)
        if s is not None:
            m[s[2] - y0:s[3] - y0, s[0] - x0:s[1] - x0] = True
        return m

    a, b = local(prev), local(cur)
    parts = []
    for coords, pol in ((np.argwhere(b & ~a), 1), (np.argwhere(a & ~b), -1)):
        if len(coords):
            rec = np.zeros(len(coords), dtype=EVENT_DTYPE)
            rec["y"], rec["x"] = coords[:, 0] + y0, coords[:, 1] + x0
            rec["t"], rec["p"] = t, pol
            parts.append(np.repeat(rec, repeat))
    return parts


def generate_synthetic_sequence(cfg: SyntheticConfig) -> SyntheticSequence:
    """A bright square moving on a dark background.

    At t=0 the square appears on the empty sensor (+1 over its area). Each
    tick k then moves it from path[k] to path[k+1]: pixels entering the
    square emit +1, pixels leaving it emit -1, stamped at the tick start.
    Background noise adds Poisson(noise_rate) uniform events per frame. The
    ground-truth box of frame i is the square at the end of that frame.
    """
    rng = np.random.default_rng(cfg.seed)
    path, warnings = square_trajectory(cfg)
    ticks = cfg.ticks_per_frame
    n_frames = cfg.n_frames
    tick_us = cfg.frame_us / ticks
    cur = _square_span(path[0, 0], path[0, 1], cfg.object_size, cfg.width, cfg.height)
    chunks = _edge_events(None, cur, 0, cfg.events_per_edge_pixel)
    for k in range(n_frames * ticks):
        t = int(k * tick_us)
        prev = cur
        cur = _square_span(path[k + 1, 0], path[k + 1, 1], cfg.object_size, cfg.width, cfg.height)
        parts = _edge_events(prev, cur, t, cfg.events_per_edge_pixel)
        if cfg.noise_rate > 0:
            n = rng.poisson(cfg.noise_rate / ticks)
            if n:
                rec = np.zeros(n, dtype=EVENT_DTYPE)
                rec["x"] = rng.integers(0, cfg.width, n)
                rec["y"] = rng.integers(0, cfg.height, n)
                rec["t"] = t + np.sort(rng.integers(0, max(int(tick_us), 1), n))
                rec["p"] = rng.choice(np.array([-1, 1], dtype=np.int8), n)
                parts.append(rec)
        if parts:
            block = np.concatenate(parts)
            chunks.append(block[np.argsort(block["t"], kind="stable")])
    events = np.concatenate(chunks) if chunks else np.zeros(0, dtype=EVENT_DTYPE)
    boxes = []
    for i in range(n_frames):
        cx, cy = path[(i + 1) * ticks]
        boxes.append(GroundTruthBox(i, float(cx), float(cy), float(cfg.object_size), float(cfg.object_size)))
    return SyntheticSequence(events, boxes, cfg, warnings)


def random_sequence_config(rng: np.random.Generator, *, width: int = 128, height: int = 128,
                           n_frames: int = 30, max_speed: float = 3.0, moving_fraction: float = 0.75,
                           size_range: tuple[float, float] = (10.0, 16.0), noise_rate: float = 20.0,
                           frame_us: int = 10_000) -> SyntheticConfig:
    """Stationary or constant-velocity square with a random start, size and speed."""
    size = float(rng.uniform(*size_range))
    if rng.random() < moving_fraction:
        speed = rng.uniform(0.5, max_speed)
        ang = rng.uniform(0, 2 * np.pi)
        vx, vy = speed * np.cos(ang), speed * np.sin(ang)
    else:
        vx = vy = 0.0
    margin = size / 2 + 1
    # keep the whole path on the sensor
    lo_x = margin + max(0.0, -vx * n_frames)
    hi_x = width - margin - max(0.0, vx * n_frames)
    lo_y = margin + max(0.0, -vy * n_frames)
    hi_y = height - margin - max(0.0, vy * n_frames)
    sx = rng.uniform(lo_x, hi_x) if hi_x > lo_x else width / 2
    sy = rng.uniform(lo_y, hi_y) if hi_y > lo_y else height / 2
    return SyntheticConfig(width=width, height=height, object_size=size, start=(float(sx), float(sy)),
                           velocity_path=[(n_frames, float(vx), float(vy))], frame_us=frame_us,
                           noise_rate=noise_rate, seed=int(rng.integers(0, 2**31 - 1)))

"""Event aggregation into three-channel event images.

GTP (global trajectory prompt): channels 1 and 2 hold alpha-scaled per-pixel
counts of positive and negative events; channel 3 carries a beta-decayed
trace of pixels whose polarity channel switched on (zero -> nonzero) with
respect to the previous image. The Event Frame and Event Count aggregators
are kept as baselines.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .events import EventWindow

DEFAULT_ALPHA = 30.0
DEFAULT_BETA = 0.8
RAW_MAGIC = b"SDTIMG01"


@dataclass(frozen=True)
class EventImage:
    channels: np.ndarray  # (3, H, W)
    frame: int
    method: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels.shape[1:]

    def to_uint8(self) -> np.ndarray:
        """Clamp to [0, 255] and quantize; (H, W, 3) for image dumps."""
        return np.clip(np.rint(self.channels), 0, 255).astype(np.uint8).transpose(1, 2, 0)

    def normalized(self, dtype=np.float32) -> np.ndarray:
        """Network input scaling (planes / 255, no clamping)."""
        return (self.channels / 255.0).astype(dtype)


@dataclass(frozen=True)
class GtpState:
    prev_h1: np.ndarray
    prev_h2: np.ndarray
    prev_h3: np.ndarray
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    frame: int = 0

    @classmethod
    def initial(cls, height: int, width: int, alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA):
        check_params(alpha, beta)
        z = np.zeros((height, width), dtype=np.float64)
        return cls(z, z.copy(), z.copy(), float(alpha), float(beta), 0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.prev_h3.shape


def check_params(alpha: float, beta: float) -> None:
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")


def _polarity_counts(window: EventWindow) -> tuple[np.ndarray, np.ndarray]:
    H, W = window.shape
    ev = window.events
    idx = ev["y"].astype(np.int64) * W + ev["x"].astype(np.int64)
    pos = ev["p"] > 0
    c1 = np.bincount(idx[pos], minlength=H * W).reshape(H, W)
    c2 = np.bincount(idx[~pos], minlength=H * W).reshape(H, W)
    return c1, c2


def aggregate_polarity_channels(window: EventWindow, alpha: float = DEFAULT_ALPHA):
    """(h1, h2): alpha times the count of +1 / -1 events at each pixel."""
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    c1, c2 = _polarity_counts(window)
    return alpha * c1.astype(np.float64), alpha * c2.astype(np.float64)


def onset_count(prev_h1, prev_h2, h1, h2) -> np.ndarray:
    """Number of polarity channels (0..2) that went from zero to nonzero."""
    return (((prev_h1 == 0) & (h1 != 0)).astype(np.int64)
            + ((prev_h2 == 0) & (h2 != 0)).astype(np.int64))


def aggregate_trajectory_channel(state: GtpState, h1, h2, alpha: float | None = None,
                                 beta: float | None = None) -> np.ndarray:
    alpha = state.alpha if alpha is None else alpha
    beta = state.beta if beta is None else beta
    if h1.shape != state.shape or h2.shape != state.shape:
        raise ValueError(f"plane shape {h1.shape} does not match state {state.shape}")
    return beta * state.prev_h3 + alpha * onset_count(state.prev_h1, state.prev_h2, h1, h2)


def aggregate_next(state: GtpState, window: EventWindow) -> tuple[EventImage, GtpState]:
    """Aggregate one window and advance the GTP state."""
    if window.shape != state.shape:
        raise ValueError(f"window dims {window.shape} do not match state {state.shape}")
    h1, h2 = aggregate_polarity_channels(window, state.alpha)
    h3 = aggregate_trajectory_channel(state, h1, h2)
    image = EventImage(np.stack([h1, h2, h3]), state.frame, "gtp")
    return image, GtpState(h1, h2, h3, state.alpha, state.beta, state.frame + 1)


def aggregate_stream(windows: Iterable[EventWindow], alpha: float = DEFAULT_ALPHA,
                     beta: float = DEFAULT_BETA, state: GtpState | None = None) -> list[EventImage]:
    """Streaming GTP: fold :func:`aggregate_next` over the windows."""
    images = []
    for w in windows:
        if state is None:
            state = GtpState.initial(*w.shape, alpha=alpha, beta=beta)
        img, state = aggregate_next(state, w)
        images.append(img)
    return images


def aggregate_batch(windows: Sequence[EventWindow], alpha: float = DEFAULT_ALPHA,
                    beta: float = DEFAULT_BETA) -> np.ndarray:
    """Whole-sequence GTP computed array-at-a-time; returns (F, 3, H, W).

    Counts for every frame come from a single bincount over (frame, pixel),
    onsets from a shifted comparison of the count volume. Used to cross-check
    the streaming fold.
    """
    check_params(alpha, beta)
    F = len(windows)
    if F == 0:
        return np.zeros((0, 3, 0, 0))
    H, W = windows[0].shape
    frame_ids = np.concatenate([np.full(len(w), i, dtype=np.int64) for i, w in enumerate(windows)])
    ev = np.concatenate([w.events for w in windows])
    lin = frame_ids * (H * W) + ev["y"].astype(np.int64) * W + ev["x"].astype(np.int64)
    pos = ev["p"] > 0
    counts = np.stack([
        np.bincount(lin[pos], minlength=F * H * W),
        np.bincount(lin[~pos], minlength=F * H * W),
    ]).reshape(2, F, H, W)
    planes = alpha * counts.astype(np.float64)
    nonzero = counts != 0
    was_zero = np.ones_like(nonzero)
    was_zero[:, 1:] = ~nonzero[:, :-1]
    onsets = (was_zero & nonzero).sum(axis=0)
    out = np.empty((F, 3, H, W), dtype=np.float64)
    out[:, 0], out[:, 1] = planes[0], planes[1]
    h3 = np.zeros((H, W), dtype=np.float64)
    for i in range(F):
        h3 = beta * h3 + alpha * onsets[i]
        out[i, 2] = h3
    return out


# -- baselines ---------------------------------------------------------------

def aggregate_baseline(window: EventWindow, method: str, frame: int = 0) -> EventImage:
    """``event_frame``: latest polarity per pixel (channel 1 for +1, channel 2
    for -1). ``event_count``: raw per-polarity counts. Channel 3 is zero."""
    H, W = window.shape
    out = np.zeros((3, H, W), dtype=np.float64)
    ev = window.events
    if method == "event_frame":
        if len(ev):
            idx = ev["y"].astype(np.int64) * W + ev["x"].astype(np.int64)
            # last occurrence of each pixel: unique over the reversed stream
            _, first_rev = np.unique(idx[::-1], return_index=True)
            last = len(idx) - 1 - first_rev
            pix, pol = idx[last], ev["p"][last]
            out[0].flat[pix[pol > 0]] = 1.0
            out[1].flat[pix[pol < 0]] = 1.0
    elif method == "event_count":
        c1, c2 = _polarity_counts(window)
        out[0], out[1] = c1, c2
    else:
        raise ValueError(f"unknown aggregation method {method!r}")
    return EventImage(out, frame, method)


class Aggregator:
    """Uniform streaming interface over GTP and the baselines."""

    def __init__(self, method: str = "gtp", alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA,
                 baseline_scale: float = 1.0):
        if method not in ("gtp", "event_frame", "event_count"):
            raise ValueError(f"unknown aggregation method {method!r}")
        check_params(alpha, beta)
        self.method, self.alpha, self.beta = method, alpha, beta
        self.baseline_scale = baseline_scale
        self.state: GtpState | None = None
        self.frame = 0

    def __call__(self, window: EventWindow) -> EventImage:
        if self.method == "gtp":
            if self.state is None:
                self.state = GtpState.initial(*window.shape, alpha=self.alpha, beta=self.beta)
            img, self.state = aggregate_next(self.state, window)
        else:
            img = aggregate_baseline(window, self.method, self.frame)
            if self.baseline_scale != 1.0:
                img = EventImage(img.channels * self.baseline_scale, img.frame, img.method)
        self.frame += 1
        return img

    def run(self, windows: Iterable[EventWindow]) -> list[EventImage]:
        return [self(w) for w in windows]


# -- export ----------------------------------------------------------------

def write_raw(path, image: EventImage) -> None:
    """Planar little-endian float32 dump: magic, u32 H, u32 W, u32 3, data."""
    H, W = image.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<III", H, W, 3))
        fh.write(image.channels.astype("<f4").tobytes())


def read_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != RAW_MAGIC or len(blob) < 20:
        raise ValueError(f"{path}: not a raw event image")
    H, W, C = struct.unpack("<III", blob[8:20])
    data = np.frombuffer(blob[20:], dtype="<f4")
    if data.size != C * H * W:
        raise ValueError(f"{path}: truncated image data")
    return data.reshape(C, H, W).astype(np.float64)


def write_preview(path, image: EventImage) -> None:
    from PIL import Image

    Image.fromarray(image.to_uint8(), mode="RGB").save(path)


def aggregate_sequence(windows: Sequence[EventWindow], T: int = 1, method: str = "gtp",
                       alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA,
                       baseline_scale: float = 1.0) -> np.ndarray:
    """Frame-major windows (``windows[f * T + k]``) -> (F, T, 3, H, W) raw
    channels. GTP state carries across sub-windows and frames."""
    if len(windows) % T:
        raise ValueError(f"{len(windows)} windows is not a multiple of T={T}")
    agg = Aggregator(method, alpha, beta, baseline_scale)
    planes = np.stack([img.channels for img in agg.run(windows)]) if windows else np.zeros((0, 3, 0, 0))
    return planes.reshape((len(windows) // T, T) + planes.shape[1:])

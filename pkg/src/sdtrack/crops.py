"""Square context crops around a box and the pixel <-> crop coordinate maps."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

TEMPLATE_CONTEXT = 2.0
SEARCH_CONTEXT = 4.0


@dataclass(frozen=True)
class CropWindow:
    """Square region of ``side`` pixels centred on (cx, cy), resampled to
    ``out_size`` pixels."""

    cx: float
    cy: float
    side: float
    out_size: int

    @classmethod
    def around(cls, box, context: float, out_size: int) -> "CropWindow":
        """box is (cx, cy, w, h) in pixels; side = context * sqrt(w h)."""
        cx, cy, w, h = box
        if w <= 0 or h <= 0:
            raise ValueError(f"box extent must be positive, got {w}x{h}")
        return cls(float(cx), float(cy), float(context * math.sqrt(w * h)), int(out_size))

    @property
    def origin(self) -> tuple[float, float]:
        return self.cx - self.side / 2, self.cy - self.side / 2

    def to_crop(self, box) -> tuple[float, float, float, float]:
        """Pixel (cx, cy, w, h) -> coordinates normalized to the crop."""
        x0, y0 = self.origin
        cx, cy, w, h = box
        s = self.side
        return ((cx - x0) / s, (cy - y0) / s, w / s, h / s)

    def to_pixels(self, box) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        cx, cy, w, h = box
        s = self.side
        return (cx * s + x0, cy * s + y0, w * s, h * s)


def crop(image: np.ndarray, window: CropWindow, order: int = 1) -> np.ndarray:
    """Resample (C, H, W) planes on the crop grid; outside the sensor is 0.

    Output pixel (i, j) samples the source at the centre of its footprint.
    """
    n = window.out_size
    x0, y0 = window.origin
    step = window.side / n
    coords = (np.arange(n) + 0.5) * step - 0.5
    ys, xs = np.meshgrid(y0 + coords, x0 + coords, indexing="ij")
    out = np.empty((image.shape[0], n, n), dtype=image.dtype)
    for c in range(image.shape[0]):
        ndimage.map_coordinates(image[c], [ys, xs], output=out[c], order=order, mode="constant", cval=0.0)
    return out

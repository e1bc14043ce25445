"""Native-resolution image quantization onto the patch grid.

A visual token covers one ``patch x patch`` pixel cell (28 px by default:
a 14 px ViT patch after 2x2 merging), so pixel budgets are written as
``N * 28 * 28``.

Rounding policy of :func:`smart_resize`:

1. round each edge to the nearest multiple of ``patch`` (half up, at least one cell);
2. if the area exceeds ``max_pixels``, scale by ``sqrt(max_pixels / (w*h))`` and
   floor each edge to the grid;
3. otherwise, if the area is below ``min_pixels``, scale by
   ``sqrt(min_pixels / (w*h))`` and ceil each edge to the grid.

Steps 2 and 3 are computed with integer square roots, so results never depend
on float rounding at grid boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import isqrt

from .errors import ResizeInfeasible

PATCH_SIZE = 28


@dataclass(frozen=True, slots=True)
class ResizedImage:
    width: int
    height: int
    visual_tokens: int

    @property
    def pixels(self) -> int:
        return self.width * self.height


def visual_tokens(w: int, h: int, patch: int = PATCH_SIZE) -> int:
    if w <= 0 or h <= 0 or w % patch or h % patch:
        raise ValueError(f"{w}x{h} is not on the {patch}-pixel grid")
    return (w // patch) * (h // patch)


def _nearest_cells(x: int, patch: int) -> int:
    return max(1, (2 * x + patch) // (2 * patch))


def _floor_sqrt_ratio(num: int, den: int) -> int:
    # floor(sqrt(num / den)) for positive integers
    return isqrt(num // den)


def _ceil_sqrt_ratio(num: int, den: int) -> int:
    # ceil(sqrt(num / den)) for positive integers
    c = -(-num // den)
    return isqrt(c - 1) + 1 if c > 0 else 0


def within_drift_bound(w: int, h: int, out_w: int, out_h: int, patch: int = PATCH_SIZE) -> bool:
    """``|out_w/out_h - w/h| <= patch * (out_w + out_h) / out_h**2``, evaluated exactly."""
    return abs(out_w * h - w * out_h) * out_h <= patch * (out_w + out_h) * h


def _check_bounds(min_pixels: int, max_pixels: int, patch: int) -> None:
    if patch <= 0:
        raise ValueError(f"patch size must be positive, got {patch}")
    if min_pixels < 0 or min_pixels > max_pixels:
        raise ValueError(f"invalid pixel window [{min_pixels}, {max_pixels}]")
    if max_pixels < patch * patch:
        raise ValueError(f"max_pixels {max_pixels} is below one {patch}x{patch} cell")


def smart_resize(img, min_pixels: int, max_pixels: int, patch: int = PATCH_SIZE) -> ResizedImage:
    """Quantize ``img`` (anything with ``width``/``height``) onto the patch grid.

    Raises :class:`ResizeInfeasible` when the rounded result falls outside
    ``[min_pixels, max_pixels]`` or distorts the aspect ratio past the drift
    bound in either orientation. That only happens for very thin images or
    very narrow pixel windows.
    """
    _check_bounds(min_pixels, max_pixels, patch)
    w, h = int(img.width), int(img.height)
    if w < 1 or h < 1:
        raise ValueError(f"image dimensions must be positive, got {w}x{h}")
    cell = patch * patch

    wc, hc = _nearest_cells(w, patch), _nearest_cells(h, patch)
    if wc * hc * cell > max_pixels:
        wc = _floor_sqrt_ratio(w * max_pixels, h * cell)
        hc = _floor_sqrt_ratio(h * max_pixels, w * cell)
        if wc == 0 or hc == 0:
            # one edge collapsed below a cell; keep one cell, fit the other to max
            budget = max_pixels // cell
            wc, hc = max(1, min(wc, budget)), max(1, min(hc, budget))
    elif wc * hc * cell < min_pixels:
        wc = _ceil_sqrt_ratio(w * min_pixels, h * cell)
        hc = _ceil_sqrt_ratio(h * min_pixels, w * cell)

    out_w, out_h = wc * patch, hc * patch
    area = out_w * out_h
    if not min_pixels <= area <= max_pixels:
        raise ResizeInfeasible(
            f"{w}x{h} quantizes to {out_w}x{out_h} ({area} px), outside [{min_pixels}, {max_pixels}]",
            candidate=(out_w, out_h),
            nearest_window=(min(min_pixels, area), max(max_pixels, area)),
        )
    if not (within_drift_bound(w, h, out_w, out_h, patch) and within_drift_bound(h, w, out_h, out_w, patch)):
        raise ResizeInfeasible(
            f"{w}x{h} would be distorted to {out_w}x{out_h}; aspect ratio too extreme for the grid",
            candidate=(out_w, out_h),
            nearest_window=None,
        )
    return ResizedImage(out_w, out_h, wc * hc)

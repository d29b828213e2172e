"""Image resampling, padding, PPM I/O and box overlays.

Images are HxWx3 float or uint8 arrays.  Continuous image coordinates put
pixel ``j`` on ``[j, j + 1]``; resampling uses half-pixel-centre bilinear
interpolation, so scaling by ``s`` maps continuous coordinate ``x`` to ``s * x``.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Iterable

import numpy as np


def _axis_taps(n_out: int, n_src: int, scale: float, origin: float, flip: bool):
    """Source taps for one axis.

    Output pixel ``u`` reads continuous source coordinate
    ``origin + (u + 0.5) / scale`` (or ``origin + (n_out - u - 0.5) / scale``
    when flipped).  Returns (i0, i1, frac, inside).
    """
    u = np.arange(n_out) + 0.5
    if flip:
        u = n_out - u
    f = origin + u / scale - 0.5
    inside = (f >= -0.5) & (f <= n_src - 0.5)
    f = np.clip(f, 0.0, n_src - 1)
    i0 = np.floor(f).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, f - i0, inside


def resample(
    image: np.ndarray,
    out_h: int,
    out_w: int,
    scale: float,
    origin: tuple[float, float] = (0.0, 0.0),
    flip: bool = False,
    fill=None,
) -> np.ndarray:
    """Axis-aligned affine resampling.

    ``origin`` is the (x, y) source coordinate of the output's top-left
    corner; ``flip`` mirrors the output horizontally.  Samples falling
    outside the source take ``fill`` (an HxWx3 array, a scalar, or a
    zero-argument callable returning either, called only when some sample
    falls outside); without ``fill`` borders are clamped.
    """
    src = np.asarray(image, dtype=np.float64)
    if src.ndim == 2:
        src = src[:, :, None]
    h, w = src.shape[:2]
    yi0, yi1, fy, yin = _axis_taps(out_h, h, scale, origin[1], False)
    xi0, xi1, fx, xin = _axis_taps(out_w, w, scale, origin[0], flip)
    rows = src[yi0] * (1.0 - fy)[:, None, None] + src[yi1] * fy[:, None, None]
    out = rows[:, xi0] * (1.0 - fx)[None, :, None] + rows[:, xi1] * fx[None, :, None]
    if fill is not None:
        outside = ~(yin[:, None] & xin[None, :])
        if outside.any():
            if callable(fill):
                fill = fill()
            out[outside] = np.asarray(fill, dtype=np.float64)[outside] if np.ndim(fill) else fill
    return out


def resize(image: np.ndarray, scale: float) -> np.ndarray:
    """Bilinear resize by ``scale``; output size is ``max(1, round(scale * size))``."""
    h, w = np.asarray(image).shape[:2]
    out_h = max(1, int(round(h * scale)))
    out_w = max(1, int(round(w * scale)))
    return resample(image, out_h, out_w, scale)


def pad_to_multiple(image: np.ndarray, multiple: int = 8) -> np.ndarray:
    """Replicate the bottom/right border until both dims divide ``multiple``."""
    h, w = image.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if not ph and not pw:
        return image
    return np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    img = to_uint8(image)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[:, :, :3]).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1
    return np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()


def draw_boxes(image: np.ndarray, boxes: Iterable[Iterable[float]], color=(255, 0, 0)) -> np.ndarray:
    """Copy of ``image`` with one-pixel box outlines burned in."""
    out = to_uint8(image).copy()
    h, w = out.shape[:2]
    for box in boxes:
        x0, y0, x1, y1 = box
        c0 = min(max(int(math.floor(x0)), 0), w - 1)
        c1 = min(max(int(math.ceil(x1)) - 1, 0), w - 1)
        r0 = min(max(int(math.floor(y0)), 0), h - 1)
        r1 = min(max(int(math.ceil(y1)) - 1, 0), h - 1)
        out[r0, c0:c1 + 1] = color
        out[r1, c0:c1 + 1] = color
        out[r0:r1 + 1, c0] = color
        out[r0:r1 + 1, c1] = color
    return out

"""8-bit binary PGM (P5) and PPM (P6) image files, PSNR, and luminance.

Images travel as float64 CHW tensors in [0,1]; files store one byte per
sample. Saving quantizes by rounding, so a load/save/load cycle is exact
and a float round trip moves each value by at most half a quantization
step (1/510).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, FormatError

MAXVAL = 255
PSNR_CAP = 200.0  # reported ceiling; reached only by (near-)identical pairs

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def save_image(x: np.ndarray, path) -> None:
    """Write a (1,H,W), (3,H,W), or (H,W) tensor as PGM/PPM."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[0] not in (1, 3):
        raise ConfigError(
            f"image must have 1 or 3 channels, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ConfigError("image contains non-finite values")
    magic = b"P5" if x.shape[0] == 1 else b"P6"
    quant = np.rint(np.clip(x, 0.0, 1.0) * MAXVAL).astype(np.uint8)
    payload = quant[0] if x.shape[0] == 1 else np.moveaxis(quant, 0, 2)
    header = b"%s\n%d %d\n%d\n" % (magic, x.shape[2], x.shape[1], MAXVAL)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes())


def _next_token(f) -> bytes:
    """Whitespace-separated header token, skipping # comment lines."""
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            raise FormatError("image header ended early")
        if c == b"#":
            while c and c != b"\n":
                c = f.read(1)
            continue
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def load_image(path) -> np.ndarray:
    """Read a binary PGM/PPM into a float64 CHW tensor scaled to [0,1]."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic not in (b"P5", b"P6"):
            raise FormatError(
                f"{path}: not a binary PGM/PPM file (magic {magic!r})")
        channels = 1 if magic == b"P5" else 3
        try:
            width = int(_next_token(f))
            height = int(_next_token(f))
            maxval = int(_next_token(f))
        except ValueError as err:
            raise FormatError(f"{path}: non-numeric header field") from err
        if width < 1 or height < 1:
            raise FormatError(f"{path}: bad extents {width}x{height}")
        if maxval != MAXVAL:
            raise FormatError(
                f"{path}: only 8-bit images supported, maxval {maxval}")
        payload = f.read(width * height * channels)
        if len(payload) != width * height * channels:
            raise FormatError(
                f"{path}: truncated payload, expected "
                f"{width * height * channels} bytes, got {len(payload)}")
    flat = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
    flat /= MAXVAL
    if channels == 1:
        return flat.reshape(1, height, width)
    return np.moveaxis(flat.reshape(height, width, 3), 2, 0)


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) in dB, capped at PSNR_CAP for (near-)equal
    inputs; a reported value of PSNR_CAP flags the cap."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ConfigError(f"shape mismatch {x.shape} vs {y.shape}")
    if peak <= 0:
        raise ConfigError(f"peak must be positive, got {peak}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP)


def luma(x: np.ndarray) -> np.ndarray:
    """Luminance plane of a (3,H,W) image; gray images pass through."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] not in (1, 3):
        raise ConfigError(f"expected CHW with 1 or 3 channels, {x.shape}")
    if x.shape[0] == 1:
        return x[0]
    r, g, b = LUMA_WEIGHTS
    return r * x[0] + g * x[1] + b * x[2]

"""Raster images, file I/O, resizing and environmental corruptions.

Images are plain ``numpy`` arrays of shape ``(height, width, channels)`` with
``float32`` values in ``[0, 1]`` and ``channels`` in ``{1, 3}``.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from advwt.noise import fbm, pixel_grid

CORRUPTION_KINDS = ("brightness", "blur", "fog", "snow")

BRIGHTNESS_OFFSETS = (0.1, 0.2, 0.3, 0.4, 0.5)
BLUR_SIGMAS = (0.5, 1.0, 2.0, 3.0, 4.0)
FOG_ALPHAS = (0.1, 0.2, 0.3, 0.45, 0.6)
SNOW_COUNTS = (10, 25, 50, 100, 200)


class ImageDecodeError(ValueError):
    """Raised when an image file cannot be decoded."""


def check_image(img):
    """Validate ``img`` against the image invariants and return it as float32."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"image must have shape (H, W, 1|3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"image has zero dimension: {arr.shape}")
    arr = arr.astype(np.float32, copy=False)
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must be finite and within [0, 1]")
    return arr


def to_gray(img):
    """Single luminance plane (Rec. 601 weights) of shape (H, W), float64."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.shape[2] == 1:
        return arr[:, :, 0]
    return arr @ np.array([0.299, 0.587, 0.114])


def quantize(img):
    """8-bit codes, round-half-up of ``v * 255``."""
    return np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5).clip(0, 255).astype(np.uint8)


def _read_ppm(path):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    # header: magic, width, height, maxval, with '#' comments
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageDecodeError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ImageDecodeError(f"{path}: unsupported PPM variant {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageDecodeError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise ImageDecodeError(f"{path}: only 8-bit PPM supported (maxval={maxval})")
    if width <= 0 or height <= 0:
        raise ImageDecodeError(f"{path}: zero image dimensions")
    pos += 1
    need = width * height * 3
    body = data[pos:pos + need]
    if len(body) != need:
        raise ImageDecodeError(f"{path}: truncated PPM data ({len(body)} of {need} bytes)")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)


def load_image(path):
    """Read a PNG or binary PPM (P6) file as an RGB float32 image."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            magic = fh.read(8)
    except OSError as exc:
        raise ImageDecodeError(f"{path}: {exc}") from exc
    if magic.startswith(b"P6"):
        codes = _read_ppm(path)
    elif magic.startswith(b"\x89PNG"):
        try:
            with PILImage.open(path) as im:
                im.load()
                codes = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except Exception as exc:
            raise ImageDecodeError(f"{path}: cannot decode PNG ({exc})") from exc
    else:
        raise ImageDecodeError(f"{path}: unsupported format (expected PNG or P6 PPM)")
    if codes.shape[0] == 0 or codes.shape[1] == 0:
        raise ImageDecodeError(f"{path}: zero image dimensions")
    return (codes.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def save_image(img, path):
    """Write ``img`` as PNG (or P6 PPM when the suffix is ``.ppm``)."""
    path = Path(path)
    codes = quantize(check_image(img))
    if codes.shape[2] == 1:
        codes = np.repeat(codes, 3, axis=2)
    try:
        if path.suffix.lower() == ".ppm":
            h, w = codes.shape[:2]
            with open(path, "wb") as fh:
                fh.write(b"P6\n%d %d\n255\n" % (w, h))
                fh.write(codes.tobytes())
        else:
            PILImage.fromarray(codes, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write image to {path}: {exc}") from exc


def _bilinear_axis(n_in, n_out):
    # half-pixel centers, clamped at the borders
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize(img, new_w, new_h):
    """Bilinear resize with edge clamping.

    Works on a single ``(H, W, C)`` image or a stack ``(n, H, W, C)``.
    """
    if new_w < 1 or new_h < 1:
        raise ValueError(f"target size must be positive, got {new_w}x{new_h}")
    arr = np.asarray(img, dtype=np.float32)
    h, w = arr.shape[-3:-1]
    if (h, w) == (new_h, new_w):
        return arr.copy()
    y0, y1, wy = _bilinear_axis(h, new_h)
    x0, x1, wx = _bilinear_axis(w, new_w)
    a = arr.astype(np.float64)
    wx = wx[:, None]
    wy = wy[:, None, None]
    rows0 = np.take(a, y0, axis=-3)
    rows1 = np.take(a, y1, axis=-3)
    top = np.take(rows0, x0, axis=-2) * (1 - wx) + np.take(rows0, x1, axis=-2) * wx
    bot = np.take(rows1, x0, axis=-2) * (1 - wx) + np.take(rows1, x1, axis=-2) * wx
    out = top * (1 - wy) + bot * wy
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 0 <= int(self.severity) <= 5:
            raise ValueError(f"severity must be in [0, 5], got {self.severity}")


def gaussian_blur(img, sigma):
    """Per-channel Gaussian blur with reflect padding."""
    arr = np.asarray(img, dtype=np.float64)
    out = np.empty_like(arr)
    for c in range(arr.shape[2]):
        out[:, :, c] = ndimage.gaussian_filter(arr[:, :, c], sigma=sigma, mode="reflect", truncate=4.0)
    return out


def fog_field(height, width, seed):
    """Low-frequency field in [0, 1] used as the fog density."""
    xs, ys = pixel_grid(height, width)
    cell = max(height, width) / 2.0
    field = fbm(xs / cell, ys / cell, seed, octaves=2)
    return 0.5 + 0.5 * field


def _snow(arr, count, rng):
    h, w = arr.shape[:2]
    out = arr.copy()
    ang = np.deg2rad(70.0)
    for _ in range(count):
        x0 = rng.uniform(0, w)
        y0 = rng.uniform(0, h)
        length = rng.uniform(2.0, 5.0) * max(1.0, min(h, w) / 64.0)
        level = rng.uniform(0.85, 1.0)
        for t in np.linspace(0.0, length, int(np.ceil(length)) + 1):
            px = int(x0 + t * np.cos(ang))
            py = int(y0 + t * np.sin(ang))
            if 0 <= px < w and 0 <= py < h:
                out[py, px, :] = np.maximum(out[py, px, :], level)
    return out


def apply_corruption(img, spec, seed=0):
    """Apply a brightness/blur/fog/snow corruption at ``spec.severity``.

    Severity 0 returns the input unchanged. Output is deterministic in
    ``(img, spec, seed)``.
    """
    arr = check_image(img)
    if spec.severity == 0:
        return arr.copy()
    level = spec.severity - 1
    a = arr.astype(np.float64)
    if spec.kind == "brightness":
        out = a + BRIGHTNESS_OFFSETS[level]
    elif spec.kind == "blur":
        out = gaussian_blur(a, BLUR_SIGMAS[level])
    elif spec.kind == "fog":
        field = fog_field(a.shape[0], a.shape[1], seed)[:, :, None]
        alpha = FOG_ALPHAS[level] * field
        out = (1.0 - alpha) * a + alpha
    else:
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 0x5E0]))
        out = _snow(a, SNOW_COUNTS[level], rng)
    return np.clip(out, 0.0, 1.0).astype(np.float32)

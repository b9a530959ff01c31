"""Seeded lattice value noise evaluated at arbitrary sample coordinates.

Lattice values come from an integer hash of (ix, iy, seed) instead of a stored
grid, so the noise can be sampled on rotated or rescaled coordinates without
bounds bookkeeping and is identical across processes.
"""

import numpy as np

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_PX = np.uint64(0x9E3779B97F4A7C15)
_PY = np.uint64(0xC2B2AE3D27D4EB4F)


def _mix(h):
    h = h ^ (h >> np.uint64(30))
    h = h * _M1
    h = h ^ (h >> np.uint64(27))
    h = h * _M2
    return h ^ (h >> np.uint64(31))


def lattice_values(ix, iy, seed):
    """Uniform [0, 1) values attached to integer lattice points."""
    ix = np.asarray(ix, dtype=np.int64).astype(np.uint64)
    iy = np.asarray(iy, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):  # wrap-around is part of the hash
        s = _mix(np.full(ix.shape, np.uint64(seed & 0xFFFFFFFFFFFFFFFF), dtype=np.uint64))
        h = _mix(s ^ (ix * _PX) ^ _mix(iy * _PY + s))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def value_noise(x, y, seed):
    """Smoothly interpolated value noise in [0, 1] at float coordinates."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = _fade(x - x0)
    fy = _fade(y - y0)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    v00 = lattice_values(x0, y0, seed)
    v10 = lattice_values(x0 + 1, y0, seed)
    v01 = lattice_values(x0, y0 + 1, seed)
    v11 = lattice_values(x0 + 1, y0 + 1, seed)
    top = v00 + fx * (v10 - v00)
    bottom = v01 + fx * (v11 - v01)
    return top + fy * (bottom - top)


def fbm(x, y, seed, octaves, gain=0.5, lacunarity=2.0):
    """Fractal sum of ``octaves`` value-noise layers, normalized to [0, 1].

    Coordinates are in units of the coarsest lattice cell; each octave
    multiplies the frequency by ``lacunarity`` and uses its own sub-seed.
    """
    total = np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape)
    amp = 1.0
    freq = 1.0
    norm = 0.0
    for k in range(octaves):
        total += amp * value_noise(np.asarray(x) * freq, np.asarray(y) * freq, seed + 7919 * (k + 1))
        norm += amp
        amp *= gain
        freq *= lacunarity
    return total / norm


def pixel_grid(height, width):
    """Pixel-center coordinates (x, y), each of shape (height, width)."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs + 0.5, ys + 0.5

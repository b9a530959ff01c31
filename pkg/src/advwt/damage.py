"""Procedural wear-and-tear generator controlled by a latent style code.

``DamageModel.render(x, s)`` plays the role of the image generator and
``StyleMapper`` the noise-to-style mapping. A style code of dimension ``N`` is
split into eight contiguous groups; each group mean drives one damage channel.
The zero code is an exact identity.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from advwt.imaging import check_image, to_gray
from advwt.noise import fbm, pixel_grid

STYLE_DIM = 64
NOISE_DIM = 16
N_GROUPS = 8
STYLE_BOUND = 0.8

CHANNEL_NAMES = ("fade", "crack_density", "crack_orientation", "dirt_intensity",
                 "dirt_scale", "rust_intensity", "rust_hue_shift", "peel_intensity")


@dataclass(frozen=True)
class DamageChannels:
    fade: float
    crack_density: float
    crack_orientation: float
    dirt_intensity: float
    dirt_scale: float
    rust_intensity: float
    rust_hue_shift: float
    peel_intensity: float

    @property
    def intensities(self):
        return (self.fade, self.crack_density, self.dirt_intensity, self.rust_intensity, self.peel_intensity)


@dataclass
class StyleMapper:
    """Affine map ``0.8 * tanh(W z + b)`` from noise vectors to style codes."""

    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def from_seed(cls, seed, style_dim=STYLE_DIM, noise_dim=NOISE_DIM):
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 0x3A9]))
        std = np.sqrt(1.0 / noise_dim)
        weight = rng.normal(0.0, std, size=(style_dim, noise_dim))
        bias = rng.normal(0.0, std, size=style_dim)
        return cls(weight, bias)

    @property
    def style_dim(self):
        return self.weight.shape[0]

    @property
    def noise_dim(self):
        return self.weight.shape[1]

    def __call__(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.noise_dim,):
            raise ValueError(f"noise vector must have shape ({self.noise_dim},), got {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ValueError("noise vector must be finite")
        return STYLE_BOUND * np.tanh(self.weight @ z + self.bias)


@lru_cache(maxsize=16)
def _mapper(seed, style_dim, noise_dim):
    return StyleMapper.from_seed(seed, style_dim, noise_dim)


def map_noise_to_style(z, mapper_seed, style_dim=STYLE_DIM):
    z = np.asarray(z, dtype=np.float64)
    return _mapper(int(mapper_seed), style_dim, z.shape[0])(z)


def style_to_channels(s):
    """Interpret a style code as damage channel values."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.shape[0] < 16:
        raise ValueError(f"style code must be a vector of dimension >= 16, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("style code must be finite")
    means = [g.mean() for g in np.array_split(s, N_GROUPS)]
    vals = {}
    for name, u in zip(CHANNEL_NAMES, means):
        if name == "crack_orientation":
            vals[name] = float(u * np.pi)
        elif name == "rust_hue_shift":
            vals[name] = float(np.tanh(u))
        else:
            vals[name] = float(abs(np.tanh(u)))
    return DamageChannels(**vals)


def _smoothstep(lo, hi, v):
    t = np.clip((v - lo) / (hi - lo), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _unit_grid(h, w):
    xs, ys = pixel_grid(h, w)
    return xs / w - 0.5, ys / h - 0.5


CRACK_ORIENTATIONS = 8
CRACK_KAPPA = 4.0


@lru_cache(maxsize=64)
def _static_fields(seed, h, w):
    """Seed-only texture fields, read-only.

    Returns crack fields at fixed orientations ``k * pi / 8`` (stacked on the
    first axis), fine and coarse dirt fields, rust patches and peel speckles.
    Orientation and dirt scale blend between the fixed fields instead of
    resampling noise, which keeps the output continuous in the style code.
    """
    ux, uy = _unit_grid(h, w)
    cracks = []
    for k in range(CRACK_ORIENTATIONS):
        theta = k * np.pi / CRACK_ORIENTATIONS
        c, s = np.cos(theta), np.sin(theta)
        along = c * ux + s * uy
        across = -s * ux + c * uy
        cracks.append(fbm(along * 2.5, across * 9.0, seed + 1 + 101 * k, octaves=4))
    fields = (
        np.stack(cracks),
        fbm(ux * 8.0, uy * 8.0, seed + 2, octaves=2),
        fbm(ux * 2.0, uy * 2.0, seed + 4, octaves=2),
        fbm(ux * 4.0, uy * 4.0, seed + 3, octaves=3),
        fbm(ux * 10.0, uy * 10.0, seed + 5, octaves=2),
    )
    for f in fields:
        f.setflags(write=False)
    return fields


def orientation_weights(orientation):
    """Smooth weights over the fixed crack orientations (period pi)."""
    theta = np.arange(CRACK_ORIENTATIONS) * np.pi / CRACK_ORIENTATIONS
    logits = CRACK_KAPPA * np.cos(2.0 * (orientation - theta))
    w = np.exp(logits - logits.max())
    return w / w.sum()


def crack_mask(h, w, density, orientation, seed):
    """Soft mask in [0, 1] of thin strokes running mostly along ``orientation``."""
    fields = _static_fields(int(seed), h, w)[0]
    width = 0.008 + 0.05 * density
    strokes = np.clip(1.0 - np.abs(fields - 0.5) / width, 0.0, 1.0)
    return np.tensordot(orientation_weights(orientation), strokes, axes=1)


def dirt_mask(h, w, intensity, scale, seed):
    """Blotches whose size grows with ``scale``; coverage grows with ``intensity``."""
    _, fine, coarse, _, _ = _static_fields(int(seed), h, w)
    n = (1.0 - scale) * fine + scale * coarse
    lo = 0.62 - 0.3 * intensity
    return _smoothstep(lo, lo + 0.1, n)


def rust_color(hue_shift):
    hue = (0.065 + 0.06 * hue_shift) % 1.0
    sat, val = 0.8, 0.6
    i = int(hue * 6.0) % 6
    f = hue * 6.0 - np.floor(hue * 6.0)
    p, q, t = val * (1 - sat), val * (1 - f * sat), val * (1 - (1 - f) * sat)
    return np.array([(val, t, p), (q, val, p), (p, val, t), (p, q, val), (t, p, val), (val, p, q)][i])


DIRT_TINT = np.array([0.42, 0.36, 0.27])


def apply_damage(x, channels, texture_seed):
    """Composite fade, cracks, dirt, rust and peel onto ``x`` in that order.

    Texture strengths grow with the square of their intensity so that small
    codes leave the sign content nearly untouched.
    """
    a = np.asarray(x, dtype=np.float64).copy()
    h, w = a.shape[:2]
    ch = channels
    if ch.fade > 0:
        lum = to_gray(a)
        target = lum * (1.0 - 0.4 * ch.fade) + 0.4 * ch.fade * lum.mean()
        wgt = 0.85 * ch.fade
        a = (1.0 - wgt) * a + wgt * target[..., None]
    if ch.crack_density > 0:
        m = crack_mask(h, w, ch.crack_density, ch.crack_orientation, texture_seed)
        a = a * (1.0 - 0.95 * ch.crack_density**2 * m)[..., None]
    if ch.dirt_intensity > 0:
        m = dirt_mask(h, w, ch.dirt_intensity, ch.dirt_scale, texture_seed)
        tint = DIRT_TINT if a.shape[2] == 3 else DIRT_TINT.mean(keepdims=True)
        a = a * (1.0 - 0.9 * ch.dirt_intensity**2 * m[..., None] * (1.0 - tint))
    _, _, _, rust_field, peel_field = _static_fields(int(texture_seed), h, w)
    if ch.rust_intensity > 0:
        lo = 0.66 - 0.36 * ch.rust_intensity
        m = (0.95 * ch.rust_intensity**2 * _smoothstep(lo, lo + 0.08, rust_field))[..., None]
        shade = 0.55 + 0.45 * to_gray(a)[..., None]
        color = rust_color(ch.rust_hue_shift) * shade if a.shape[2] == 3 else shade * 0.45
        a = a * (1.0 - m) + color * m
    if ch.peel_intensity > 0:
        lo = 0.72 - 0.32 * ch.peel_intensity
        m = (0.95 * ch.peel_intensity**2 * _smoothstep(lo, lo + 0.06, peel_field))[..., None]
        a = a + m * (1.0 - a)
    return np.clip(a, 0.0, 1.0).astype(np.float32)


def generate_damaged(x, s, texture_seed=0):
    """Render the damaged version of ``x`` for style code ``s``."""
    x = check_image(x)
    channels = style_to_channels(s)
    if not any(channels.intensities):
        return x.copy()
    return apply_damage(x, channels, int(texture_seed))


@dataclass
class DamageModel:
    """Generator plus mapper, shared read-only by the attack engine."""

    style_dim: int = STYLE_DIM
    noise_dim: int = NOISE_DIM
    mapper_seed: int = 0
    mapper: StyleMapper = field(default=None, repr=False)

    def __post_init__(self):
        if self.style_dim < 16:
            raise ValueError(f"style_dim must be >= 16, got {self.style_dim}")
        if self.mapper is None:
            self.mapper = StyleMapper.from_seed(self.mapper_seed, self.style_dim, self.noise_dim)

    def sample_noise(self, rng):
        return rng.standard_normal(self.noise_dim)

    def map(self, z):
        return self.mapper(z)

    def render(self, x, s, texture_seed):
        return generate_damaged(x, s, texture_seed)

    def to_dict(self):
        return {"style_dim": self.style_dim, "noise_dim": self.noise_dim, "mapper_seed": self.mapper_seed}

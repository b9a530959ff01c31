"""Perturbation structure metrics and SSIM.

All metrics take a perturbation ``delta = x_adv - x_clean`` of shape
``(H, W, C)``. Magnitudes are reduced over channels with max-abs (spatial
metrics) or mean (spectral metrics).
"""

from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from advwt.imaging import to_gray

DEFAULT_THRESHOLD = 0.05
DEFAULT_BINS = 36
MIN_REGION_AREA = 5
ELONGATION_CAP = 1e4
EIG_FLOOR = 1e-9
EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class PerturbationStats:
    fourier_entropy_bits: float
    spatial_coverage_pct: float
    largest_region_ratio: float
    mean_elongation: float
    ssim: float

    def to_dict(self):
        return asdict(self)


def compute_delta(x_adv, x_clean):
    a = np.asarray(x_adv, dtype=np.float32)
    b = np.asarray(x_clean, dtype=np.float32)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return np.clip(a - b, -1.0, 1.0)


def entropy_bits(weights):
    """Shannon entropy in bits of a non-negative weight array (0 when empty)."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    total = w.sum()
    if total <= 0:
        return 0.0
    p = w[w > 0] / total
    return float(max(-(p * np.log2(p)).sum(), 0.0))


def spectral_energy(delta):
    """``|DFT|^2`` of the channel-averaged plane, DC set to zero."""
    d = np.asarray(delta, dtype=np.float64)
    plane = d.mean(axis=2) if d.ndim == 3 else d
    energy = np.abs(np.fft.fft2(plane)) ** 2
    energy[0, 0] = 0.0
    return energy


def orientation_histogram(energy, bins=DEFAULT_BINS):
    """Energy summed into ``bins`` orientation bins over [0, pi)."""
    h, w = energy.shape
    v = np.fft.fftfreq(h)[:, None]
    u = np.fft.fftfreq(w)[None, :]
    angle = np.mod(np.arctan2(np.broadcast_to(v, (h, w)), np.broadcast_to(u, (h, w))), np.pi)
    idx = np.minimum((angle / (np.pi / bins)).astype(np.int64), bins - 1)
    e = energy.copy()
    e[0, 0] = 0.0
    return np.bincount(idx.ravel(), weights=e.ravel(), minlength=bins)


def fourier_entropy(delta, mode="full_spectrum", bins=DEFAULT_BINS):
    """Entropy (bits) of the perturbation's spectral energy distribution.

    ``mode="orientation_bins"`` histograms energy by frequency orientation;
    ``mode="full_spectrum"`` uses every non-DC coefficient as its own cell.
    """
    energy = spectral_energy(delta)
    if mode == "orientation_bins":
        return entropy_bits(orientation_histogram(energy, bins))
    if mode == "full_spectrum":
        return entropy_bits(energy)
    raise ValueError(f"unknown entropy mode {mode!r}")


def perturbation_mask(delta, threshold=DEFAULT_THRESHOLD):
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    d = np.abs(np.asarray(delta, dtype=np.float64))
    mag = d.max(axis=2) if d.ndim == 3 else d
    return mag > threshold


def spatial_coverage(delta, threshold=DEFAULT_THRESHOLD):
    """Percentage of pixels whose max-channel ``|delta|`` exceeds ``threshold``."""
    return float(100.0 * perturbation_mask(delta, threshold).mean())


def label_components(mask):
    """8-connected component labels (0 = background) and the component count."""
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT_CONNECTED)
    return labels, int(n)


def largest_region_ratio(delta, threshold=DEFAULT_THRESHOLD):
    mask = perturbation_mask(delta, threshold)
    total = int(mask.sum())
    if total == 0:
        return 0.0
    labels, n = label_components(mask)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return float(sizes.max() / total)


def region_elongation(coords):
    """Major/minor eigenvalue ratio of the coordinate covariance of one region."""
    cov = np.cov(np.asarray(coords, dtype=np.float64).T, bias=True)
    lo, hi = np.linalg.eigvalsh(cov)
    if lo < EIG_FLOOR:
        return ELONGATION_CAP
    return float(hi / lo)


def mask_elongation(mask):
    labels, n = label_components(mask)
    total = 0.0
    weight = 0
    for k in range(1, n + 1):
        coords = np.argwhere(labels == k)
        if len(coords) < MIN_REGION_AREA:
            continue
        total += len(coords) * region_elongation(coords)
        weight += len(coords)
    return float(total / weight) if weight else 1.0


def elongation(delta, threshold=DEFAULT_THRESHOLD):
    """Area-weighted mean elongation over regions of at least 5 pixels."""
    return mask_elongation(perturbation_mask(delta, threshold))


def gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(plane, g):
    rows = sliding_window_view(plane, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def ssim(x, y, data_range=1.0, window=11, sigma=1.5):
    """Single-scale SSIM on the luminance plane with a Gaussian window."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = to_gray(a), to_gray(b)
    size = min(window, *a.shape)
    if size % 2 == 0:
        size -= 1
    g = gaussian_window(size, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def analyze_pair(x_adv, x_clean, threshold=DEFAULT_THRESHOLD, bins=DEFAULT_BINS, mode="full_spectrum"):
    delta = compute_delta(x_adv, x_clean)
    mask = perturbation_mask(delta, threshold)
    return PerturbationStats(
        fourier_entropy_bits=fourier_entropy(delta, mode, bins),
        spatial_coverage_pct=float(100.0 * mask.mean()),
        largest_region_ratio=largest_region_ratio(delta, threshold),
        mean_elongation=mask_elongation(mask),
        ssim=ssim(x_adv, x_clean),
    )

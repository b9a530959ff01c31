"""The seven translation-model objectives as standalone functions.

These evaluate single instances of each loss on caller-supplied values; no
networks or training loop live here. Encoder and discriminator outputs are
passed in already computed.
"""

from dataclasses import dataclass

import numpy as np

EPS = 1e-7
TRIPLET_MARGIN = 0.1
LOSS_ORDER = ("sty", "ds", "cyc", "adv", "tri", "kl", "cont")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 2.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    lambda5: float = 1.0
    lambda6: float = 1.0
    lambda7: float = 1.0

    def __post_init__(self):
        if any(w < 0 for w in self.as_array()):
            raise ValueError("loss weights must be non-negative")

    def as_array(self):
        return np.array([self.lambda1, self.lambda2, self.lambda3, self.lambda4,
                         self.lambda5, self.lambda6, self.lambda7], dtype=np.float64)


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    variance: np.ndarray

    @classmethod
    def fit(cls, codes):
        """Diagonal Gaussian from a sample of style codes (rows)."""
        codes = np.asarray(codes, dtype=np.float64)
        return cls(codes.mean(axis=0), codes.var(axis=0))


def _same_shape(a, b, what):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def style_reconstruction_loss(s, s_hat):
    s, s_hat = _same_shape(s, s_hat, "style_reconstruction_loss")
    return float(np.abs(s - s_hat).mean())


def diversity_loss(img1, img2):
    a, b = _same_shape(img1, img2, "diversity_loss")
    return -float(np.abs(a - b).mean())


def cycle_loss(x, x_reconstructed):
    a, b = _same_shape(x, x_reconstructed, "cycle_loss")
    return float(np.abs(a - b).mean())


def adversarial_loss(d_real, d_fake):
    """``log D(x) + log(1 - D(G(x, s)))`` with probabilities clamped to [eps, 1-eps]."""
    d_real = min(max(float(d_real), EPS), 1.0 - EPS)
    d_fake = min(max(float(d_fake), EPS), 1.0 - EPS)
    return float(np.log(d_real) + np.log1p(-d_fake))


def triplet_loss(anchor, positive, negative, beta=TRIPLET_MARGIN):
    a, p = _same_shape(anchor, positive, "triplet_loss")
    a, n = _same_shape(anchor, negative, "triplet_loss")
    if beta < 0:
        raise ValueError("triplet margin must be non-negative")
    return float(max(np.linalg.norm(a - p) - np.linalg.norm(a - n) + beta, 0.0))


def kl_loss(stats):
    """Closed-form KL divergence of a diagonal Gaussian from N(0, I)."""
    mean = np.asarray(stats.mean, dtype=np.float64)
    var = np.asarray(stats.variance, dtype=np.float64)
    if mean.shape != var.shape:
        raise ValueError("mean and variance must have the same shape")
    if np.any(var <= 0):
        raise ValueError("variance entries must be positive")
    return float(0.5 * np.sum(var + mean**2 - 1.0 - np.log(var)))


def pooled_features(img, grid=8):
    """Grayscale average pool onto a ``grid x grid`` lattice of blocks."""
    arr = np.asarray(img, dtype=np.float64)
    gray = arr.mean(axis=2) if arr.ndim == 3 else arr
    h, w = gray.shape
    ys = np.linspace(0, h, grid + 1).astype(int)
    xs = np.linspace(0, w, grid + 1).astype(int)
    out = np.empty((grid, grid))
    for i in range(grid):
        for j in range(grid):
            out[i, j] = gray[ys[i]:ys[i + 1], xs[j]:xs[j + 1]].mean()
    return out.ravel()


def content_loss(x, g, feature_fn=pooled_features):
    x, g = _same_shape(x, g, "content_loss")
    fx = np.asarray(feature_fn(x), dtype=np.float64)
    fg = np.asarray(feature_fn(g), dtype=np.float64)
    if fx.shape != fg.shape:
        raise RuntimeError(f"feature_fn returned mismatched shapes {fx.shape} vs {fg.shape}")
    return float(np.abs(fx - fg).mean())


def total_objective(losses, weights=LossWeights()):
    """Weighted sum in the order sty, ds, cyc, adv, tri, kl, cont."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.shape != (7,):
        raise ValueError(f"expected 7 loss values, got shape {losses.shape}")
    if not np.all(np.isfinite(losses)):
        raise ValueError("loss values must be finite")
    return float(weights.as_array() @ losses)


def selftest():
    """Evaluate the loss invariants; returns rows of (check, value, expected, ok)."""
    rng = np.random.default_rng(0)
    rows = []

    def check(name, value, expected, tol=1e-9):
        rows.append((name, value, expected, abs(value - expected) <= tol))

    check("sty [1,-1] vs 0", style_reconstruction_loss([1.0, -1.0], [0.0, 0.0]), 1.0)
    ones = np.ones((4, 4, 3))
    check("ds zeros vs ones", diversity_loss(np.zeros_like(ones), ones), -1.0)
    check("cyc half reconstruction", cycle_loss(ones, 0.5 * ones), 0.5)
    check("adv (0.5, 0.5)", adversarial_loss(0.5, 0.5), 2 * np.log(0.5))
    a = rng.normal(size=8)
    n = a.copy()
    n[0] += 1.0
    check("tri a=p, |a-n|=1", triplet_loss(a, a, n, 0.1), 0.0)
    check("tri a=p=n", triplet_loss(a, a, a, 0.1), 0.1)
    check("kl standard normal", kl_loss(GaussianStats(np.zeros(5), np.ones(5))), 0.0)
    check("kl mean=1", kl_loss(GaussianStats(np.ones(1), np.ones(1))), 0.5)
    check("cont zeros vs ones", content_loss(np.zeros((16, 16, 3)), np.ones((16, 16, 3))), 1.0)
    check("total all ones", total_objective(np.ones(7)), 8.0)
    return rows

"""Synthetic traffic-sign renderer, dataset generation and directory ingestion."""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from advwt.imaging import ImageDecodeError, load_image, resize, save_image

SHAPES = ("circle", "triangle", "octagon", "square")

SUPERSAMPLE = 4
SIGN_RADIUS = 0.94
RIM_FRACTION = 0.14

_FONT = {
    "0": ["01110", "10001", "10001", "10001", "10001", "10001", "01110"],
    "1": ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    "3": ["11110", "00001", "00001", "01110", "00001", "00001", "11110"],
    "5": ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    "6": ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    "8": ["01110", "10001", "10001", "11111", "10001", "10001", "01110"],
    "O": ["01110", "10001", "10001", "10001", "10001", "10001", "01110"],
    "P": ["11110", "10001", "10001", "11110", "10000", "10000", "10000"],
    "S": ["01111", "10000", "10000", "01110", "00001", "00001", "11110"],
    "T": ["11111", "00100", "00100", "00100", "00100", "00100", "00100"],
}

# non-text glyph codes: (bitmap rows, box height as a fraction of the sign diameter)
_SYMBOLS = {
    "ARROW_L": (["0001000000", "0011000000", "0111111111", "1111111111",
                 "0111111111", "0011000000", "0001000000"], 0.5),
    "ARROW_R": (["0000001000", "0000001100", "1111111110", "1111111111",
                 "1111111110", "0000001100", "0000001000"], 0.5),
    "BAR": (["1111111111", "1111111111"], 0.16),
}


class DatasetError(ValueError):
    """Raised when a dataset cannot be built or ingested."""


@dataclass(frozen=True)
class SignClass:
    id: int
    name: str
    shape: str
    glyph: str
    fg_color: tuple
    bg_color: tuple
    rim_color: tuple

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown sign shape {self.shape!r}")
        glyph_bitmap(self.glyph)


@dataclass(frozen=True)
class RenderParams:
    rotation: float = 0.0
    scale: float = 1.0
    bg_tint: tuple = (0.5, 0.5, 0.5)
    illumination_gain: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not -15.0 <= self.rotation <= 15.0:
            raise ValueError(f"rotation {self.rotation} outside [-15, 15]")
        if not 0.7 <= self.scale <= 1.0:
            raise ValueError(f"scale {self.scale} outside [0.7, 1.0]")
        if not 0.6 <= self.illumination_gain <= 1.4:
            raise ValueError(f"illumination_gain {self.illumination_gain} outside [0.6, 1.4]")
        if not 0.0 <= self.noise_sigma <= 0.05:
            raise ValueError(f"noise_sigma {self.noise_sigma} outside [0, 0.05]")
        if len(self.bg_tint) != 3 or not all(0.0 <= c <= 1.0 for c in self.bg_tint):
            raise ValueError(f"bg_tint must be an RGB triple in [0, 1], got {self.bg_tint}")


@dataclass
class LabeledDataset:
    """Images stacked as ``(n, H, W, C)`` float32 with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    catalog: list = field(default_factory=list)
    split_tag: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DatasetError("images and labels differ in length")
        q = self.num_classes
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= q):
            raise DatasetError(f"labels must lie in [0, {q})")

    @property
    def num_classes(self):
        if self.catalog:
            return len(self.catalog)
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def items(self):
        return list(zip(self.images, (int(v) for v in self.labels)))

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return iter(self.items)

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.catalog, self.split_tag)


def default_catalog():
    """Ten classes: five speed limits, stop, yield, no entry, two arrows."""
    white = (1.0, 1.0, 1.0)
    black = (0.05, 0.05, 0.05)
    red = (0.8, 0.08, 0.1)
    blue = (0.1, 0.3, 0.75)
    classes = []
    for speed in ("30", "50", "60", "80", "100"):
        classes.append(dict(name=f"speed_{speed}", shape="circle", glyph=speed,
                            fg_color=black, bg_color=white, rim_color=red))
    classes += [
        dict(name="stop", shape="octagon", glyph="STOP", fg_color=white, bg_color=red, rim_color=white),
        dict(name="yield", shape="triangle", glyph="", fg_color=black, bg_color=white, rim_color=red),
        dict(name="no_entry", shape="circle", glyph="BAR", fg_color=white, bg_color=red, rim_color=red),
        dict(name="left_arrow", shape="circle", glyph="ARROW_L", fg_color=white, bg_color=blue, rim_color=white),
        dict(name="right_arrow", shape="circle", glyph="ARROW_R", fg_color=white, bg_color=blue, rim_color=white),
    ]
    return [SignClass(id=i, **c) for i, c in enumerate(classes)]


def glyph_bitmap(code):
    """Bitmap (rows x cols, bool) and box height fraction for a glyph code."""
    if code == "":
        return np.zeros((1, 1), dtype=bool), 0.0
    if code in _SYMBOLS:
        rows, height = _SYMBOLS[code]
        return np.array([[c == "1" for c in r] for r in rows]), height
    missing = [ch for ch in code if ch not in _FONT]
    if missing:
        raise ValueError(f"unknown glyph code {code!r} (no bitmap for {missing})")
    rows = []
    for r in range(7):
        rows.append("0".join(_FONT[ch][r] for ch in code))
    height = 0.52 if len(code) <= 2 else (0.44 if len(code) == 3 else 0.3)
    return np.array([[c == "1" for c in r] for r in rows]), height


def _shape_metric(shape, u, v):
    """Normalized radius: <= 1 inside a shape of unit size."""
    if shape == "circle":
        return np.hypot(u, v)
    if shape == "octagon":
        apothem = np.cos(np.pi / 8)
        return np.maximum(np.maximum(np.abs(u), np.abs(v)), (np.abs(u) + np.abs(v)) / np.sqrt(2)) / apothem
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) / 0.82
    # inverted equilateral triangle, centroid at the origin, circumradius 1
    d1 = -v  # top edge at v = -0.5 (image y grows downwards)
    d2 = (np.sqrt(3) * u + v) / 2
    d3 = (-np.sqrt(3) * u + v) / 2
    return 2.0 * np.maximum(np.maximum(d1, d2), d3)


def _glyph_mask(code, u, v):
    bitmap, height = glyph_bitmap(code)
    if not bitmap.any():
        return np.zeros(u.shape, dtype=bool)
    n_rows, n_cols = bitmap.shape
    diameter = 2 * SIGN_RADIUS
    cell_h = height * diameter / n_rows
    max_width = 0.72 * diameter
    cell_w = min(cell_h * 0.8, max_width / n_cols)
    rr, cc = np.nonzero(bitmap)
    # center the glyph on its ink mass
    cy = (rr.mean() + 0.5) * cell_h
    cx = (cc.mean() + 0.5) * cell_w
    col = np.floor((u + cx) / cell_w).astype(np.int64)
    row = np.floor((v + cy) / cell_h).astype(np.int64)
    inside = (row >= 0) & (row < n_rows) & (col >= 0) & (col < n_cols)
    out = np.zeros(u.shape, dtype=bool)
    out[inside] = bitmap[row[inside], col[inside]]
    return out


def sign_layers(sign, params, resolution):
    """Anti-aliased coverage masks ``(body, inner, glyph)`` at ``resolution``."""
    if resolution < 32:
        raise ValueError(f"resolution must be >= 32, got {resolution}")
    n = resolution * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    x, y = np.meshgrid(coords, coords)
    theta = np.deg2rad(params.rotation)
    c, s = np.cos(theta), np.sin(theta)
    u = (c * x + s * y) / params.scale
    v = (-s * x + c * y) / params.scale
    metric = _shape_metric(sign.shape, u, v)
    body = metric <= SIGN_RADIUS
    inner = metric <= SIGN_RADIUS * (1.0 - RIM_FRACTION)
    glyph = _glyph_mask(sign.glyph, u, v) & inner

    def down(m):
        return m.reshape(resolution, SUPERSAMPLE, resolution, SUPERSAMPLE).mean(axis=(1, 3))

    return down(body.astype(np.float64)), down(inner.astype(np.float64)), down(glyph.astype(np.float64))


def render_sign(sign, params, resolution=64):
    """Rasterize ``sign`` under ``params`` into an RGB float32 image."""
    body, inner, glyph = sign_layers(sign, params, resolution)
    bg = np.asarray(params.bg_tint, dtype=np.float64)
    rim = np.asarray(sign.rim_color, dtype=np.float64)
    face = np.asarray(sign.bg_color, dtype=np.float64)
    fg = np.asarray(sign.fg_color, dtype=np.float64)
    body, inner, glyph = body[..., None], inner[..., None], glyph[..., None]
    img = bg * (1 - body) + rim * (body - inner) + face * (inner - glyph) + fg * glyph
    img = img * params.illumination_gain
    if params.noise_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([params.seed & 0xFFFFFFFFFFFFFFFF, 0x51C]))
        img = img + rng.normal(0.0, params.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def item_seed(seed, index):
    """Per-item child seed, independent of generation order."""
    return int(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, index]).generate_state(1, np.uint64)[0])


def random_params(rng):
    return RenderParams(
        rotation=float(rng.uniform(-15.0, 15.0)),
        scale=float(rng.uniform(0.7, 1.0)),
        bg_tint=tuple(float(v) for v in rng.uniform(0.15, 0.85, size=3)),
        illumination_gain=float(rng.uniform(0.6, 1.4)),
        noise_sigma=float(rng.uniform(0.0, 0.05)),
        seed=int(rng.integers(0, 2**63 - 1)),
    )


def generate_dataset(catalog, n_per_class, seed, resolution=64):
    """Render ``n_per_class`` signs per class and split them 80/20."""
    if not catalog:
        raise DatasetError("catalog is empty")
    if n_per_class < 2:
        raise DatasetError(f"n_per_class must be >= 2, got {n_per_class}")
    n_train = int(round(0.8 * n_per_class))
    n_train = min(max(n_train, 1), n_per_class - 1)
    tr_imgs, tr_labels, te_imgs, te_labels = [], [], [], []
    for sign in catalog:
        for k in range(n_per_class):
            index = sign.id * n_per_class + k
            rng = np.random.default_rng(item_seed(seed, index))
            img = render_sign(sign, random_params(rng), resolution)
            if k < n_train:
                tr_imgs.append(img)
                tr_labels.append(sign.id)
            else:
                te_imgs.append(img)
                te_labels.append(sign.id)
    train = LabeledDataset(np.stack(tr_imgs), np.array(tr_labels), list(catalog), "train")
    test = LabeledDataset(np.stack(te_imgs), np.array(te_labels), list(catalog), "test")
    return train, test


def load_external(directory, resolution=64, split_tag="test"):
    """Ingest a directory with one subdirectory of images per class.

    Label ids follow the lexicographic order of the subdirectory names.
    """
    root = Path(directory)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    class_dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name)
    if not class_dirs:
        raise DatasetError(f"{root}: no class subdirectories")
    images, labels, catalog = [], [], []
    for label, cdir in enumerate(class_dirs):
        catalog.append(SignClass(id=label, name=cdir.name, shape="square", glyph="",
                                 fg_color=(0.0, 0.0, 0.0), bg_color=(1.0, 1.0, 1.0), rim_color=(0.0, 0.0, 0.0)))
        files = sorted(p for p in cdir.iterdir() if p.is_file())
        if not files:
            raise DatasetError(f"{cdir}: class directory holds no images")
        for path in files:
            try:
                img = load_image(path)
            except ImageDecodeError as exc:
                raise DatasetError(f"cannot ingest {path}: {exc}") from exc
            images.append(resize(img, resolution, resolution))
            labels.append(label)
    return LabeledDataset(np.stack(images), np.array(labels), catalog, split_tag)


def _catalog_to_json(catalog):
    return [asdict(c) for c in catalog]


def catalog_from_json(rows):
    return [SignClass(**{**r, "fg_color": tuple(r["fg_color"]), "bg_color": tuple(r["bg_color"]),
                         "rim_color": tuple(r["rim_color"])}) for r in rows]


def write_dataset(out_dir, datasets):
    """Save images as PNG under ``out_dir`` and write ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    catalog = []
    for ds in datasets:
        catalog = catalog or ds.catalog
        sub = out / ds.split_tag
        sub.mkdir(exist_ok=True)
        for i, (img, label) in enumerate(ds):
            rel = f"{ds.split_tag}/{i:05d}_c{label:02d}.png"
            save_image(img, out / rel)
            entries.append({"path": rel, "label": label, "split": ds.split_tag})
    manifest = {"schema": "advwt-manifest/1", "catalog": _catalog_to_json(catalog), "items": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_manifest(path, resolution=None):
    """Read a manifest into ``{split: LabeledDataset}``."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{path}: unreadable manifest ({exc})") from exc
    catalog = catalog_from_json(manifest.get("catalog", []))
    grouped = {}
    for entry in manifest["items"]:
        img_path = path.parent / entry["path"]
        try:
            img = load_image(img_path)
        except ImageDecodeError as exc:
            raise DatasetError(f"cannot ingest {img_path}: {exc}") from exc
        if resolution is not None:
            img = resize(img, resolution, resolution)
        grouped.setdefault(entry["split"], ([], []))
        grouped[entry["split"]][0].append(img)
        grouped[entry["split"]][1].append(int(entry["label"]))
    return {split: LabeledDataset(np.stack(imgs), np.array(labels), catalog, split)
            for split, (imgs, labels) in grouped.items()}

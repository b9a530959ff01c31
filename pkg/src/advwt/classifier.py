"""Softmax classifiers trained from scratch with mini-batch Adam.

Three architectures share one flat parameter vector representation:
``linear`` (multinomial logistic regression), ``mlp`` (ReLU hidden layers)
and ``smallconv`` (one valid convolution, ReLU, average pool, dense head).
Models expose a score oracle ``model.scores(images) -> (n, q)`` and nothing
else is needed by the attack engine.
"""

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from advwt.imaging import resize

ARCHS = ("linear", "mlp", "smallconv")
FEATURES = ("raw_pixels", "pooled8", "edge_hist")
MAGIC = b"AWTM1"
POOL = 4
EDGE_CELLS = 4
EDGE_BINS = 8


class TrainingError(RuntimeError):
    """Raised when training diverges."""


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "mlp"
    hidden: tuple = (128,)
    filters: int = 8
    kernel: int = 5
    input_resolution: int = 32
    feature: str = "raw_pixels"
    num_classes: int = 10
    channels: int = 3

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.feature not in FEATURES:
            raise ValueError(f"unknown feature {self.feature!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if any(int(h) < 1 for h in self.hidden) or self.filters < 1 or self.kernel < 1:
            raise ValueError("layer widths, filter counts and kernel size must be positive")
        if self.arch == "smallconv":
            if self.feature == "edge_hist":
                raise ValueError("smallconv needs a spatial feature (raw_pixels or pooled8)")
            side = self._spatial_side()
            if side - self.kernel + 1 < 1:
                raise ValueError("kernel larger than the feature map")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def _spatial_side(self):
        return 8 if self.feature == "pooled8" else self.input_resolution

    @property
    def feature_dim(self):
        if self.feature == "raw_pixels":
            return self.input_resolution**2 * self.channels
        if self.feature == "pooled8":
            return 64 * self.channels
        return EDGE_CELLS * EDGE_CELLS * EDGE_BINS

    def param_shapes(self):
        q = self.num_classes
        if self.arch == "linear":
            return [(self.feature_dim, q), (q,)]
        if self.arch == "mlp":
            dims = [self.feature_dim, *self.hidden, q]
            shapes = []
            for a, b in zip(dims[:-1], dims[1:]):
                shapes += [(a, b), (b,)]
            return shapes
        side = self._spatial_side()
        out = side - self.kernel + 1
        pool = POOL if out >= POOL else 1
        flat = (out // pool) ** 2 * self.filters
        return [(self.kernel * self.kernel * self.channels, self.filters), (self.filters,), (flat, q), (q,)]

    @property
    def num_params(self):
        return int(sum(np.prod(s) for s in self.param_shapes()))

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", ()))
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 16
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class ClassifierModel:
    spec: ModelSpec
    params: np.ndarray
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.spec.num_params,):
            raise ValueError(f"expected {self.spec.num_params} parameters, got {self.params.shape}")
        if not np.all(np.isfinite(self.params)):
            raise ValueError("parameters must be finite")

    def logits(self, images):
        return forward(self.spec, self.params, featurize(self.spec, images))[0]

    def scores(self, images):
        """Softmax probabilities for a stack of images, shape ``(n, q)``."""
        return softmax(self.logits(images))

    __call__ = scores


def softmax(logits):
    """Max-shifted softmax along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _edge_hist(gray):
    # gray: (n, r, r)
    gy, gx = np.gradient(gray, axis=(1, 2))
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    bins = np.minimum((ang / (2 * np.pi) * EDGE_BINS).astype(np.int64), EDGE_BINS - 1)
    n, r, _ = gray.shape
    cell = r // EDGE_CELLS
    out = np.zeros((n, EDGE_CELLS, EDGE_CELLS, EDGE_BINS))
    for i in range(EDGE_CELLS):
        for j in range(EDGE_CELLS):
            sl = (slice(None), slice(i * cell, (i + 1) * cell), slice(j * cell, (j + 1) * cell))
            b = bins[sl].reshape(n, -1)
            m = mag[sl].reshape(n, -1)
            for k in range(EDGE_BINS):
                out[:, i, j, k] = np.where(b == k, m, 0.0).sum(axis=1)
    out /= np.sqrt((out**2).sum(axis=3, keepdims=True)) + 1e-3
    return out.reshape(n, -1)


def featurize(spec, images):
    """Map an image stack ``(n, H, W, C)`` to model inputs."""
    imgs = np.asarray(images, dtype=np.float32)
    if imgs.ndim == 3:
        imgs = imgs[None]
    r = spec.input_resolution
    small = resize(imgs, r, r).astype(np.float64)
    if spec.feature == "raw_pixels":
        x = small - 0.5
    elif spec.feature == "pooled8":
        n, _, _, c = small.shape
        blk = r // 8
        x = small[:, :blk * 8, :blk * 8].reshape(n, 8, blk, 8, blk, c).mean(axis=(2, 4)) - 0.5
    else:
        gray = small @ np.array([0.299, 0.587, 0.114]) if small.shape[3] == 3 else small[..., 0]
        return _edge_hist(gray)
    if spec.arch == "smallconv":
        return x
    return x.reshape(len(x), -1)


def unpack(spec, params):
    out = []
    pos = 0
    for shape in spec.param_shapes():
        size = int(np.prod(shape))
        out.append(params[pos:pos + size].reshape(shape))
        pos += size
    return out


def _conv_cols(spec, x):
    k = spec.kernel
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # (n, o, o, C, k, k)
    n, o = win.shape[0], win.shape[1]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * o * o, k * k * x.shape[3])
    return cols, o


def forward(spec, params, x):
    """Logits plus the cache needed by :func:`backward`."""
    layers = unpack(spec, params)
    if spec.arch == "linear":
        w, b = layers
        return x @ w + b, (x,)
    if spec.arch == "mlp":
        acts = [x]
        h = x
        for i in range(0, len(layers) - 2, 2):
            h = np.maximum(h @ layers[i] + layers[i + 1], 0.0)
            acts.append(h)
        return h @ layers[-2] + layers[-1], tuple(acts)
    wc, bc, wd, bd = layers
    cols, o = _conv_cols(spec, x)
    n = x.shape[0]
    pre = (cols @ wc + bc).reshape(n, o, o, spec.filters)
    act = np.maximum(pre, 0.0)
    pool = POOL if o >= POOL else 1
    p = o // pool
    crop = act[:, :p * pool, :p * pool]
    pooled = crop.reshape(n, p, pool, p, pool, spec.filters).mean(axis=(2, 4))
    flat = pooled.reshape(n, -1)
    return flat @ wd + bd, (cols, pre, flat, o, pool, p)


def backward(spec, params, cache, dlogits):
    """Gradient of a scalar loss w.r.t. the flat parameters."""
    layers = unpack(spec, params)
    grads = []
    if spec.arch == "linear":
        (x,) = cache
        grads = [x.T @ dlogits, dlogits.sum(axis=0)]
    elif spec.arch == "mlp":
        acts = cache
        d = dlogits
        for i in range(len(layers) - 2, -1, -2):
            a = acts[i // 2]
            grads = [a.T @ d, d.sum(axis=0)] + grads
            if i > 0:
                d = (d @ layers[i].T) * (acts[i // 2] > 0)
    else:
        wc, bc, wd, bd = layers
        cols, pre, flat, o, pool, p = cache
        n = dlogits.shape[0]
        g_wd = flat.T @ dlogits
        g_bd = dlogits.sum(axis=0)
        dpooled = (dlogits @ wd.T).reshape(n, p, 1, p, 1, spec.filters) / (pool * pool)
        dcrop = np.broadcast_to(dpooled, (n, p, pool, p, pool, spec.filters)).reshape(n, p * pool, p * pool, spec.filters)
        dact = np.zeros_like(pre)
        dact[:, :p * pool, :p * pool] = dcrop
        dpre = (dact * (pre > 0)).reshape(-1, spec.filters)
        grads = [cols.T @ dpre, dpre.sum(axis=0), g_wd, g_bd]
    return np.concatenate([g.ravel() for g in grads])


def loss_and_grad(spec, params, x, labels):
    """Mean cross-entropy over the batch and its parameter gradient."""
    logits, cache = forward(spec, params, x)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return float(loss), backward(spec, params, cache, dlogits)


def init_params(spec, rng):
    """He-normal weights, zero biases."""
    parts = []
    for shape in spec.param_shapes():
        if len(shape) == 1:
            parts.append(np.zeros(shape))
        else:
            parts.append(rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape))
    return np.concatenate([p.ravel() for p in parts])


class Augmentation:
    """Per-image training transform applied with ``probability``.

    Subclasses override :meth:`__call__`; :meth:`begin_epoch` receives a
    frozen snapshot of the model being trained.
    """

    probability = 0.5

    def begin_epoch(self, model, epoch):
        pass

    def __call__(self, img, label, rng):
        raise NotImplementedError


def _streams(seed):
    shuffle_ss, init_ss, aug_ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 0x7A1]).spawn(3)
    return np.random.default_rng(shuffle_ss), np.random.default_rng(init_ss), aug_ss


def train(dataset, spec, cfg=TrainConfig(), augment=None, eval_set=None):
    """Fit ``spec`` on ``dataset`` by minimizing cross-entropy with Adam."""
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot train on an empty dataset")
    if labels.min() < 0 or labels.max() >= spec.num_classes:
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")
    shuffle_rng, init_rng, aug_ss = _streams(cfg.seed)
    params = init_params(spec, init_rng)
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    step = 0
    use_aug = augment is not None and augment.probability > 0
    clean_x = featurize(spec, dataset.images)
    for epoch in range(cfg.epochs):
        x = clean_x
        if use_aug:
            snapshot = ClassifierModel(spec, params.copy())
            augment.begin_epoch(snapshot, epoch)
            ep_rng = np.random.default_rng(aug_ss.spawn(1)[0])
            imgs = np.array(dataset.images, copy=True)
            flips = ep_rng.random(len(labels)) < augment.probability
            item_seeds = ep_rng.integers(0, 2**63 - 1, size=len(labels))
            for i in np.nonzero(flips)[0]:
                imgs[i] = augment(imgs[i], int(labels[i]), np.random.default_rng(int(item_seeds[i])))
            x = featurize(spec, imgs)
        order = shuffle_rng.permutation(len(labels))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, g = loss_and_grad(spec, params, x[idx], labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss became non-finite at epoch {epoch}")
            step += 1
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            mhat = m / (1 - cfg.beta1**step)
            vhat = v / (1 - cfg.beta2**step)
            params = params - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)
    model = ClassifierModel(spec, params)
    meta = {"seed": cfg.seed, "epochs": cfg.epochs, "train_accuracy": evaluate(model, dataset)}
    if eval_set is not None:
        meta["test_accuracy"] = evaluate(model, eval_set)
    model.training_meta = meta
    return model


def predict(model, x):
    """``(label, confidence, scores)`` for one image; ties go to the lowest index."""
    scores = np.asarray(model.scores(np.asarray(x)[None]))[0]
    label = int(np.argmax(scores))
    return label, float(scores[label]), scores


def predict_labels(model, images, batch=256):
    out = []
    for start in range(0, len(images), batch):
        out.append(np.argmax(model.scores(images[start:start + batch]), axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model, dataset):
    """Fraction of items whose predicted label equals the ground truth."""
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(predict_labels(model, dataset.images) == np.asarray(dataset.labels)))


def save_model(model, path):
    """Write ``AWTM1`` binary (LE descriptor + float64 params) and a JSON sidecar."""
    path = Path(path)
    desc = json.dumps(model.spec.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(desc)))
        fh.write(desc)
        fh.write(struct.pack("<Q", model.params.size))
        fh.write(model.params.astype("<f8").tobytes())
    Path(str(path) + ".json").write_text(json.dumps(model.training_meta, indent=1, sort_keys=True))


def load_model(path):
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not an AWTM1 model file")
    pos = len(MAGIC)
    (dlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    spec = ModelSpec.from_dict(json.loads(data[pos:pos + dlen].decode()))
    pos += dlen
    (count,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    params = np.frombuffer(data[pos:pos + 8 * count], dtype="<f8").astype(np.float64)
    if params.size != count:
        raise ValueError(f"{path}: truncated parameter block")
    meta_path = Path(str(path) + ".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return ClassifierModel(spec, params, meta)


def with_classes(spec, num_classes):
    return replace(spec, num_classes=num_classes)

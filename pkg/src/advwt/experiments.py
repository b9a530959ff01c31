"""Desk-scale experiment drivers producing :class:`RunRecord` objects.

Each driver takes a resolved :class:`~advwt.config.ExperimentConfig` and a
worker count. Only per-item attack work is parallel; aggregation walks items
in index order, so aggregates do not depend on ``jobs``.
"""

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from advwt import __version__
from advwt.analysis import analyze_pair
from advwt.attack import alpha_sweep, attack_dataset, find_adversarial_style
from advwt.classifier import (
    Augmentation,
    evaluate,
    load_model,
    predict_labels,
    train,
    with_classes,
)
from advwt.config import ConfigError, from_dict, resolve_path
from advwt.damage import DamageModel
from advwt.imaging import CORRUPTION_KINDS, CorruptionSpec, apply_corruption, save_image
from advwt.signs import (
    LabeledDataset,
    default_catalog,
    generate_dataset,
    item_seed,
    load_external,
    load_manifest,
)

SEVERITIES = (1, 2, 3, 4, 5)

# full-scale reference values shown as report footnotes
REFERENCE = {
    "attack": ["reference ASR (full scale, RN18): Hybrid 96.2, GTSRB-HQ 99.68"],
    "defense_at": ["reference accuracy under attack (full scale, Hybrid): undefended 4.6, robust 50.7",
                   "reference clean accuracy (full scale, Hybrid): undefended 96.5, robust 98.0"],
    "ood": ["reference damaged-set accuracy (full scale): plain 90.1, corruption-augmented 93.4, "
            "damage-augmented 95.4"],
    "corruption_stability": ["reference example (full scale): true-class confidence 20% -> 14% under fog"],
}


@dataclass
class RunRecord:
    experiment: str
    config: dict
    rows: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    tool_version: str = __version__
    timings: dict = field(default_factory=dict)
    status: str = "running"
    context: list = field(default_factory=list)
    # aggregates excluded from replay comparison (wall-clock values)
    nondeterministic: list = field(default_factory=list)
    images: list = field(default_factory=list, repr=False)

    def to_dict(self):
        d = asdict(self)
        d.pop("images")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("images", None)
        return cls(**d)

    def table(self, name):
        agg = self.aggregates[name]
        return [dict(zip(agg["columns"], row)) for row in agg["rows"]]


def table(columns, rows):
    return {"columns": list(columns), "rows": [list(r) for r in rows]}


def _f(v):
    return None if v is None else float(v)


def snapshot(cfg):
    """Config dict with file references made absolute."""
    d = cfg.to_dict()
    ds = d["dataset"]
    for key in ("train_dir", "test_dir", "manifest"):
        if ds[key]:
            ds[key] = str(resolve_path(cfg, ds[key]).resolve())
    for m in d["models"]:
        if m["path"]:
            m["path"] = str(resolve_path(cfg, m["path"]).resolve())
    return d


def balanced_subset(ds, k):
    """First ``k`` items taken round-robin over classes (all when ``k`` is 0)."""
    if k <= 0 or k >= len(ds):
        return ds
    labels = ds.labels
    rank = np.zeros(len(labels), dtype=np.int64)
    for c in np.unique(labels):
        where = np.nonzero(labels == c)[0]
        rank[where] = np.arange(len(where))
    order = np.lexsort((labels, rank))
    return ds.subset(np.sort(order[:k]))


def load_data(cfg):
    ds = cfg.dataset
    if ds.source == "synthetic":
        tr, te = generate_dataset(default_catalog(), ds.n_per_class, ds.seed, ds.resolution)
    elif ds.source == "external":
        tr = load_external(resolve_path(cfg, ds.train_dir), ds.resolution, "train")
        te = load_external(resolve_path(cfg, ds.test_dir), ds.resolution, "test")
    else:
        splits = load_manifest(resolve_path(cfg, ds.manifest), ds.resolution)
        if "train" not in splits or "test" not in splits:
            raise ConfigError(f"manifest {ds.manifest} needs train and test splits")
        tr, te = splits["train"], splits["test"]
    return tr, balanced_subset(te, ds.max_test_items)


def damage_model(cfg):
    return DamageModel(cfg.damage.style_dim, cfg.damage.noise_dim, cfg.damage.mapper_seed)


def fit_model(cfg, entry, train_ds, test_ds, augment=None):
    if entry.path:
        return load_model(resolve_path(cfg, entry.path))
    spec = with_classes(entry.spec, train_ds.num_classes)
    return train(train_ds, spec, entry.train, augment=augment, eval_set=test_ds)


class AdvWTAugmentation(Augmentation):
    """Replace a training image by its adversarially damaged version.

    Codes are searched against the frozen snapshot handed to
    :meth:`begin_epoch`, so they are refreshed once per epoch.
    """

    def __init__(self, damage, attack_cfg, probability=0.5):
        self.damage = damage
        self.attack_cfg = attack_cfg
        self.probability = probability
        self.model = None

    def begin_epoch(self, model, epoch):
        self.model = model

    def __call__(self, img, label, rng):
        seeds = rng.integers(0, 2**63 - 1, size=2)
        cfg = replace(self.attack_cfg, rng_seed=int(seeds[0]), texture_seed=int(seeds[1]))
        return find_adversarial_style(img, self.model, cfg, y=label, damage=self.damage).adversarial_image


class CorruptionAugmentation(Augmentation):
    """Random environmental corruption (uniform kind and severity)."""

    def __init__(self, max_severity=5, probability=0.5):
        self.max_severity = max_severity
        self.probability = probability

    def __call__(self, img, label, rng):
        kind = CORRUPTION_KINDS[int(rng.integers(len(CORRUPTION_KINDS)))]
        sev = int(rng.integers(1, self.max_severity + 1))
        return apply_corruption(img, CorruptionSpec(kind, sev), seed=int(rng.integers(0, 2**63 - 1)))


def augmentation_attack(cfg):
    d = cfg.defense
    return replace(cfg.attack, steps_K=d.aug_steps_K, samples_T=d.aug_samples_T)


def _new_record(cfg):
    return RunRecord(cfg.experiment, snapshot(cfg), context=list(REFERENCE.get(cfg.experiment, [])))


def _models(cfg, train_ds, test_ds, oracles, record):
    """Trained (or injected) models keyed by name, in config order."""
    out = {}
    for entry in cfg.models:
        if oracles and entry.name in oracles:
            out[entry.name] = oracles[entry.name]
            continue
        t0 = time.perf_counter()
        out[entry.name] = fit_model(cfg, entry, train_ds, test_ds)
        record.timings[f"train_{entry.name}_s"] = time.perf_counter() - t0
    return out


def _item_rows(name, run, dataset, with_analysis=None):
    rows = []
    for idx, res in zip(run.indices, run.results):
        row = {"model": name, "index": int(idx), "label": int(dataset.labels[idx]), **res.to_record()}
        if with_analysis is not None and res.success:
            row["analysis"] = with_analysis(res.adversarial_image, dataset.images[idx]).to_dict()
        rows.append(row)
    return rows


def run_attack_experiment(cfg, jobs=1, oracles=None):
    record = _new_record(cfg)
    start = time.perf_counter()
    train_ds, test_ds = load_data(cfg)
    models = _models(cfg, train_ds, test_ds, oracles, record)
    damage = damage_model(cfg)
    a = cfg.analysis

    def analyze(adv, clean):
        return analyze_pair(adv, clean, a.threshold, a.bins, a.mode)

    summary, structure = [], []
    for name, model in models.items():
        t0 = time.perf_counter()
        run = attack_dataset(test_ds, model, cfg.attack, damage, jobs)
        record.timings[f"attack_{name}_s"] = time.perf_counter() - t0
        rows = _item_rows(name, run, test_ds, analyze)
        record.rows += rows
        queries = [r.queries for r in run.results]
        summary.append([name, run.benign_error, run.asr, run.attempted, run.successes,
                        float(np.mean(queries)) if queries else 0.0])
        stats = [r["analysis"] for r in rows if "analysis" in r]
        keys = ["fourier_entropy_bits", "spatial_coverage_pct", "largest_region_ratio", "mean_elongation", "ssim"]
        structure.append([name, len(stats)] + [float(np.mean([s[k] for s in stats])) if stats else None
                                               for k in keys])
        for idx, res in zip(run.indices, run.results):
            record.images.append((f"{name}_{idx:05d}", res.adversarial_image, test_ds.images[idx]))
    record.aggregates["attack"] = table(
        ["model", "benign_error", "asr", "attempted", "successes", "mean_queries"], summary)
    record.aggregates["structure"] = table(
        ["model", "successes", "fourier_entropy_bits", "spatial_coverage_pct", "largest_region_ratio",
         "mean_elongation", "ssim"], structure)
    return _finish(record, start)


def run_alpha_sweep(cfg, jobs=1, oracles=None):
    record = _new_record(cfg)
    start = time.perf_counter()
    train_ds, test_ds = load_data(cfg)
    models = _models(cfg, train_ds, test_ds, oracles, record)
    name, model = next(iter(models.items()))
    damage = damage_model(cfg)
    run = attack_dataset(test_ds, model, cfg.attack, damage, jobs)
    record.rows = _item_rows(name, run, test_ds)
    rows = alpha_sweep(test_ds, model, cfg.attack, cfg.alphas, damage, jobs, run=run)
    record.aggregates["alpha_sweep"] = table(["alpha", "asr", "mean_ssim"], rows)
    return _finish(record, start)


def transfer_matrix(models, test_ds, attack_cfg, damage, jobs=1):
    """White-box and transfer ASR for every (surrogate, target) pair.

    Adversarial images crafted on a surrogate (successes and best-effort
    failures alike) are reused for every target. A cell is the fraction of
    items the target classifies correctly when clean that it misclassifies
    on the surrogate's image.
    """
    names = list(models)
    labels = test_ds.labels
    clean = {n: predict_labels(models[n], test_ds.images) for n in names}
    cells = {}
    runs = {}
    for s in names:
        run = attack_dataset(test_ds, models[s], attack_cfg, damage, jobs)
        runs[s] = run
        idx = np.asarray(run.indices, dtype=np.int64)
        advs = np.stack([r.adversarial_image for r in run.results]) if run.results else None
        for t in names:
            if advs is None:
                cells[s, t] = 0.0
                continue
            ok = clean[t][idx] == labels[idx]
            if not ok.any():
                cells[s, t] = 0.0
                continue
            fooled = predict_labels(models[t], advs[ok]) != labels[idx][ok]
            cells[s, t] = float(np.mean(fooled))
    clean_error = {n: float(np.mean(clean[n] != labels)) for n in names}
    return cells, clean_error, runs


def run_transfer_experiment(cfg, jobs=1, oracles=None):
    if len(cfg.models) < 2:
        raise ConfigError("transfer needs at least 2 models")
    record = _new_record(cfg)
    start = time.perf_counter()
    train_ds, test_ds = load_data(cfg)
    models = _models(cfg, train_ds, test_ds, oracles, record)
    names = list(models)
    cells, clean_error, runs = transfer_matrix(models, test_ds, cfg.attack, damage_model(cfg), jobs)
    for s in names:
        record.rows += _item_rows(s, runs[s], test_ds)
    matrix, white = [], []
    for s in names:
        off = [cells[s, t] for t in names if t != s]
        matrix.append([s] + [None if t == s else cells[s, t] for t in names] + [float(np.mean(off))])
        white.append([s, cells[s, s], float(np.mean(off))])
    record.aggregates["transfer_matrix"] = table(["surrogate"] + names + ["avg_asr"], matrix)
    record.aggregates["white_box"] = table(["surrogate", "white_box_asr", "black_box_mean"], white)
    record.aggregates["clean_error"] = table(["model", "clean_error"], [[n, clean_error[n]] for n in names])
    return _finish(record, start)


def under_attack_accuracy(model, test_ds, attack_cfg, damage, jobs=1):
    """Fraction of test items that are classified correctly and survive the attack."""
    run = attack_dataset(test_ds, model, attack_cfg, damage, jobs)
    return (run.attempted - run.successes) / len(test_ds), run


def run_defense_at(cfg, jobs=1):
    record = _new_record(cfg)
    start = time.perf_counter()
    train_ds, test_ds = load_data(cfg)
    entry = cfg.models[0]
    damage = damage_model(cfg)
    t0 = time.perf_counter()
    base = fit_model(cfg, replace(entry, path=""), train_ds, test_ds)
    record.timings["train_baseline_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    aug = AdvWTAugmentation(damage, augmentation_attack(cfg), cfg.defense.probability)
    robust = fit_model(cfg, replace(entry, path=""), train_ds, test_ds, augment=aug)
    record.timings["train_robust_s"] = time.perf_counter() - t0
    rows = []
    for name, model in (("baseline", base), ("advwt_at", robust)):
        acc, run = under_attack_accuracy(model, test_ds, cfg.attack, damage, jobs)
        record.rows += _item_rows(name, run, test_ds)
        rows.append([name, evaluate(model, test_ds), acc, run.asr])
    record.aggregates["defense"] = table(["model", "benign_accuracy", "under_attack_accuracy", "asr"], rows)
    return _finish(record, start)


def damaged_holdout(dataset, cfg, damage_cfg):
    """Naturally damaged copy of ``dataset`` with an unseen mapper and texture seeds."""
    o = cfg.ood
    dm = DamageModel(damage_cfg.style_dim, damage_cfg.noise_dim, o.mapper_seed)
    out = np.empty_like(dataset.images)
    for i, x in enumerate(dataset.images):
        rng = np.random.default_rng(item_seed(o.data_seed, i))
        s = dm.map(dm.sample_noise(rng)) * rng.uniform(o.code_scale_min, o.code_scale_max)
        out[i] = dm.render(x, s, item_seed(o.texture_seed, i))
    return LabeledDataset(out, dataset.labels.copy(), dataset.catalog, "ood")


def run_ood_experiment(cfg, jobs=1):
    record = _new_record(cfg)
    start = time.perf_counter()
    train_ds, test_ds = load_data(cfg)
    entry = replace(cfg.models[0], path="")
    damage = damage_model(cfg)
    holdout = damaged_holdout(test_ds, cfg, cfg.damage)
    p = cfg.defense.probability
    variants = (
        ("plain", None),
        ("corruption_aug", CorruptionAugmentation(cfg.defense.corruption_max_severity, p)),
        ("advwt_aug", AdvWTAugmentation(damage, augmentation_attack(cfg), p)),
    )
    rows = []
    for name, aug in variants:
        t0 = time.perf_counter()
        model = fit_model(cfg, entry, train_ds, test_ds, augment=aug)
        record.timings[f"train_{name}_s"] = time.perf_counter() - t0
        preds = predict_labels(model, holdout.images)
        record.rows += [{"model": name, "index": i, "label": int(y), "prediction": int(q)}
                        for i, (y, q) in enumerate(zip(holdout.labels, preds))]
        rows.append([name, evaluate(model, test_ds), float(np.mean(preds == holdout.labels))])
    record.aggregates["ood"] = table(["model", "clean_accuracy", "damaged_accuracy"], rows)
    return _finish(record, start)


def persistence(model, advs, labels, seeds, kind, severity):
    """Fraction of adversarial images still misclassified after a corruption."""
    if len(advs) == 0:
        return 0.0, 0.0
    spec = CorruptionSpec(kind, severity)
    imgs = np.stack([apply_corruption(a, spec, seed=s) for a, s in zip(advs, seeds)])
    scores = np.asarray(model(imgs))
    still = np.argmax(scores, axis=1) != labels
    return float(np.mean(still)), float(np.mean(scores[np.arange(len(labels)), labels]))


def run_corruption_stability(cfg, jobs=1, oracles=None):
    record = _new_record(cfg)
    start = time.perf_counter()
    train_ds, test_ds = load_data(cfg)
    models = _models(cfg, train_ds, test_ds, oracles, record)
    name, model = next(iter(models.items()))
    run = attack_dataset(test_ds, model, cfg.attack, damage_model(cfg), jobs)
    record.rows = _item_rows(name, run, test_ds)
    wins = [(i, r) for i, r in zip(run.indices, run.results) if r.success]
    advs = np.stack([r.adversarial_image for _, r in wins]) if wins else np.zeros((0,))
    labels = np.array([int(test_ds.labels[i]) for i, _ in wins], dtype=np.int64)
    seeds = [item_seed(cfg.attack.texture_seed ^ 0xC0, i) for i, _ in wins]
    cells = []
    for kind in CORRUPTION_KINDS:
        for sev in SEVERITIES:
            frac, conf = persistence(model, advs, labels, seeds, kind, sev)
            cells.append([kind, sev, len(wins), frac, conf])
    record.aggregates["stability"] = table(
        ["kind", "severity", "adversarial_examples", "persistence", "mean_true_confidence"], cells)
    return _finish(record, start)


def run_timing(cfg, jobs=1, oracles=None):
    record = _new_record(cfg)
    start = time.perf_counter()
    train_ds, test_ds = load_data(cfg)
    models = _models(cfg, train_ds, test_ds, oracles, record)
    damage = damage_model(cfg)
    timing, queries = [], []
    for name, model in models.items():
        run = attack_dataset(test_ds, model, cfg.attack, damage, jobs)
        record.rows += _item_rows(name, run, test_ds)
        ms = np.array([r.wall_time_ms for r in run.results])
        q = np.array([r.queries for r in run.results])
        timing.append([name, len(ms), float(ms.mean()) if len(ms) else 0.0, float(ms.std()) if len(ms) else 0.0,
                       float(ms.sum() / q.sum()) if len(q) else 0.0])
        queries.append([name, len(q), float(q.mean()) if len(q) else 0.0])
    record.aggregates["timing"] = table(["model", "items", "mean_ms", "std_ms", "ms_per_query"], timing)
    record.aggregates["queries"] = table(["model", "items", "mean_queries"], queries)
    record.nondeterministic = ["timing"]
    return _finish(record, start)


def _finish(record, start):
    record.timings["total_s"] = time.perf_counter() - start
    record.status = "complete"
    return record


RUNNERS = {
    "attack": run_attack_experiment,
    "alpha_sweep": run_alpha_sweep,
    "transfer": run_transfer_experiment,
    "defense_at": run_defense_at,
    "ood": run_ood_experiment,
    "corruption_stability": run_corruption_stability,
    "timing": run_timing,
}


def run_experiment(cfg, jobs=1):
    return RUNNERS[cfg.experiment](cfg, jobs=jobs)


def write_run(record, out_dir, images=True):
    """Write ``run.json``, ``items.jsonl`` and (optionally) PNG pairs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps(record.to_dict(), indent=1, sort_keys=True))
    with open(out / "items.jsonl", "w") as fh:
        for row in record.rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    if images and record.images:
        img_dir = out / "images"
        img_dir.mkdir(exist_ok=True)
        for stem, adv, clean in record.images:
            save_image(adv, img_dir / f"{stem}_adv.png")
            save_image(clean, img_dir / f"{stem}_clean.png")
    return out / "run.json"


def read_run(path):
    path = Path(path)
    if path.is_dir():
        path = path / "run.json"
    return RunRecord.from_dict(json.loads(path.read_text()))


def compare_aggregates(a, b, skip=()):
    """Names of aggregates that differ between two records (exact comparison)."""
    diffs = []
    for name in sorted(set(a.aggregates) | set(b.aggregates)):
        if name in skip:
            continue
        if json.dumps(a.aggregates.get(name)) != json.dumps(b.aggregates.get(name)):
            diffs.append(name)
    return diffs


def replay(path, jobs=1):
    """Re-run a stored record from its config snapshot; returns ``(diffs, new_record)``."""
    old = read_run(path)
    cfg = from_dict(old.config)
    new = run_experiment(cfg, jobs)
    return compare_aggregates(old, new, skip=set(old.nondeterministic)), new

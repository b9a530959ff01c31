"""Score-based gray-box search for adversarial damage style codes.

The engine only sees a score oracle: a callable mapping an image stack
``(n, H, W, C)`` to softmax rows ``(n, q)``. Starting from a style code mapped
from Gaussian noise, it escalates a perturbation strength ``alpha`` from
``c_min`` to ``c_max`` over ``steps_K`` values, sampling ``samples_T``
candidate codes uniformly inside ``[s - alpha|s|, s + alpha|s|]`` at each
step and re-centering on the lowest-confidence candidate.
"""

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from advwt.analysis import ssim
from advwt.damage import DamageModel
from advwt.signs import item_seed

COMPARE_MODES = ("vs_initial_prediction", "vs_ground_truth")
ZERO_FLOOR = 1e-4


class OracleError(RuntimeError):
    """Raised when a score oracle returns malformed scores."""


class AttackError(RuntimeError):
    """Wraps an oracle failure with the index of the offending item."""


@dataclass(frozen=True)
class AttackConfig:
    c_min: float = 0.1
    c_max: float = 1.5
    steps_K: int = 15
    samples_T: int = 30
    compare_mode: str = "vs_initial_prediction"
    rng_seed: int = 0
    texture_seed: int = 0

    def __post_init__(self):
        if not 0 < self.c_min <= self.c_max:
            raise ValueError("need 0 < c_min <= c_max")
        if self.steps_K < 1 or self.samples_T < 1:
            raise ValueError("steps_K and samples_T must be >= 1")
        if self.compare_mode not in COMPARE_MODES:
            raise ValueError(f"unknown compare_mode {self.compare_mode!r}")

    @property
    def step_size(self):
        return (self.c_max - self.c_min) / (self.steps_K - 1) if self.steps_K > 1 else 0.0

    def schedule(self):
        return [self.c_min + k * self.step_size for k in range(self.steps_K)]

    @property
    def max_queries(self):
        return 1 + self.steps_K * self.samples_T

    def to_dict(self):
        return asdict(self)


@dataclass
class AttackResult:
    success: bool
    s_adv: np.ndarray
    alpha_used: float
    queries: int
    confidence_trajectory: list
    adversarial_image: np.ndarray
    original_label: int
    adversarial_label: int
    wall_time_ms: float
    pre_misclassified: bool = False
    initial_label: int = -1
    initial_confidence: float = float("nan")
    step_codes: list = field(default_factory=list, repr=False)
    success_step: int = -1
    initial_style: np.ndarray = field(default=None, repr=False)

    def to_record(self):
        """JSON-serializable summary (no image)."""
        return {
            "success": bool(self.success),
            "pre_misclassified": bool(self.pre_misclassified),
            "alpha_used": float(self.alpha_used),
            "queries": int(self.queries),
            "original_label": int(self.original_label),
            "adversarial_label": int(self.adversarial_label),
            "initial_label": int(self.initial_label),
            "initial_confidence": float(self.initial_confidence),
            "confidence_trajectory": [[float(a), float(c)] for a, c in self.confidence_trajectory],
            "s_adv": [float(v) for v in self.s_adv],
            "wall_time_ms": float(self.wall_time_ms),
        }


def _score(oracle, img):
    p = np.asarray(oracle(img[None]), dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != 1:
        raise OracleError(f"oracle must return shape (1, q), got {p.shape}")
    p = p[0]
    if not np.all(np.isfinite(p)) or p.min() < 0 or abs(p.sum() - 1.0) > 1e-6:
        raise OracleError("oracle returned scores that are not a probability vector")
    return p


def find_adversarial_style(x, oracle, cfg=AttackConfig(), y=None, damage=None, initial_style=None):
    """Search for a style code whose damaged rendering changes the prediction.

    ``y`` is the ground-truth label; it is required for ``vs_ground_truth``
    and, when given, an initial damaged image that is already misclassified
    ends the search immediately. ``initial_style`` overrides the mapped
    starting code (the noise draw still happens so the random stream is
    unchanged).
    """
    if cfg.compare_mode == "vs_ground_truth" and y is None:
        raise ValueError("vs_ground_truth mode needs the ground-truth label y")
    damage = damage or DamageModel()
    start = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed & 0xFFFFFFFFFFFFFFFF, 0xA77]))

    s_theta = damage.map(damage.sample_noise(rng))
    if initial_style is not None:
        s_theta = np.asarray(initial_style, dtype=np.float64).copy()
    s_init = s_theta
    x_d = damage.render(x, s_theta, cfg.texture_seed)
    p0 = _score(oracle, x_d)
    queries = 1
    y_hat = int(np.argmax(p0))

    def finish(success, code, alpha, img, label, trajectory, codes, step=-1, pre=False):
        return AttackResult(
            success=success, s_adv=code, alpha_used=alpha, queries=queries,
            confidence_trajectory=trajectory, adversarial_image=img,
            original_label=ref, adversarial_label=label,
            wall_time_ms=(time.perf_counter() - start) * 1e3,
            pre_misclassified=pre, initial_label=y_hat, initial_confidence=float(p0[y_hat]),
            step_codes=codes, success_step=step, initial_style=s_init)

    ref = int(y) if (cfg.compare_mode == "vs_ground_truth" or (y is not None and y_hat != y)) else y_hat
    if y is not None and y_hat != int(y):
        return finish(True, s_theta, 0.0, x_d, y_hat, [], [], step=0, pre=True)

    conf = float(p0[ref])
    s_best = s_theta
    best_img = x_d
    trajectory = []
    codes = []
    for k, alpha in enumerate(cfg.schedule()):
        delta = alpha * np.maximum(np.abs(s_theta), ZERO_FLOOR)
        candidates = rng.uniform(s_theta - delta, s_theta + delta, size=(cfg.samples_T, s_theta.size))
        for cand in candidates:
            img = damage.render(x, cand, cfg.texture_seed)
            p = _score(oracle, img)
            queries += 1
            label = int(np.argmax(p))
            if label != ref:
                trajectory.append((alpha, conf))
                codes.append(s_best)
                return finish(True, cand, alpha, img, label, trajectory, codes, step=k + 1)
            if p[ref] < conf:
                conf = float(p[ref])
                s_best = cand
                best_img = img
        s_theta = s_best
        trajectory.append((alpha, conf))
        codes.append(s_best)
    return finish(False, s_best, cfg.c_max, best_img, ref, trajectory, codes)


@dataclass
class DatasetAttack:
    asr: float
    results: list
    indices: list
    benign_error: float
    clean_predictions: np.ndarray
    attempted: int

    def __iter__(self):
        return iter((self.asr, self.results))

    @property
    def successes(self):
        return sum(r.success for r in self.results)


def item_config(cfg, index):
    return replace(cfg, rng_seed=item_seed(cfg.rng_seed, index), texture_seed=item_seed(cfg.texture_seed, index))


def _attack_one(args):
    index, x, label, oracle, cfg, damage, initial_style = args
    try:
        return find_adversarial_style(x, oracle, item_config(cfg, index), y=label, damage=damage,
                                      initial_style=initial_style)
    except OracleError as exc:
        raise AttackError(f"item {index}: {exc}") from exc


def clean_predictions(oracle, images, batch=128):
    out = []
    for start in range(0, len(images), batch):
        out.append(np.argmax(np.asarray(oracle(images[start:start + batch])), axis=1))
    return np.concatenate(out).astype(np.int64) if out else np.zeros(0, dtype=np.int64)


def attack_dataset(dataset, oracle, cfg=AttackConfig(), damage=None, jobs=1, initial_style=None):
    """Attack every clean-correct item; ASR excludes items misclassified clean."""
    if len(dataset) == 0:
        raise ValueError("cannot attack an empty dataset")
    damage = damage or DamageModel()
    labels = np.asarray(dataset.labels)
    preds = clean_predictions(oracle, dataset.images)
    indices = [int(i) for i in np.nonzero(preds == labels)[0]]
    tasks = [(i, dataset.images[i], int(labels[i]), oracle, cfg, damage, initial_style) for i in indices]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_attack_one, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_attack_one(t) for t in tasks]
    n = len(results)
    asr = sum(r.success for r in results) / n if n else 0.0
    return DatasetAttack(asr=asr, results=results, indices=indices,
                         benign_error=float(np.mean(preds != labels)),
                         clean_predictions=preds, attempted=n)


def steps_within(cfg, alpha):
    """Number of schedule steps whose strength does not exceed ``alpha``."""
    return sum(1 for a in cfg.schedule() if a <= alpha + 1e-9)


def capped_outcome(result, cfg, alpha, x, damage):
    """``(success, image)`` the same search would give with strengths capped at ``alpha``.

    Candidate draws for a step are made before any early exit, so the capped
    search consumes the random stream identically and is a prefix of the
    full one.
    """
    k = steps_within(cfg, alpha)
    if result.success and result.success_step <= k:
        return True, result.adversarial_image
    code = result.step_codes[k - 1] if k > 0 else result.initial_style
    return False, damage.render(x, code, cfg.texture_seed)


def alpha_sweep(dataset, oracle, cfg=AttackConfig(), alphas=(), damage=None, jobs=1, run=None,
                initial_style=None):
    """ASR and mean SSIM(adversarial, clean) for each strength cap in ``alphas``."""
    alphas = [float(a) for a in alphas]
    if alphas != sorted(alphas) or any(a < 0 or a > cfg.c_max + 1e-9 for a in alphas):
        raise ValueError("alphas must be sorted ascending within [0, c_max]")
    damage = damage or DamageModel()
    if run is None:
        run = attack_dataset(dataset, oracle, cfg, damage, jobs, initial_style=initial_style)
    rows = []
    for alpha in alphas:
        wins = 0
        sims = []
        for idx, res in zip(run.indices, run.results):
            x = dataset.images[idx]
            ok, img = capped_outcome(res, item_config(cfg, idx), alpha, x, damage)
            wins += ok
            sims.append(ssim(img, x))
        n = len(run.results)
        rows.append((alpha, wins / n if n else 0.0, float(np.mean(sims)) if sims else 1.0))
    return rows

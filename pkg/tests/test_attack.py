import numpy as np
import pytest

from advwt.analysis import ssim
from advwt.attack import (
    AttackConfig,
    AttackError,
    OracleError,
    alpha_sweep,
    attack_dataset,
    capped_outcome,
    find_adversarial_style,
    item_config,
    steps_within,
)
from advwt.damage import DamageModel

X = np.zeros((2, 2, 1), dtype=np.float32)


class LineDamage:
    """Renders a code as a constant image holding ``sum(code)``; logs every code."""

    def __init__(self, dim=4):
        self.dim = dim
        self.rendered = []

    def sample_noise(self, rng):
        return rng.normal(size=self.dim)

    def map(self, z):
        return np.asarray(z, dtype=np.float64)

    def render(self, x, s, texture_seed):
        self.rendered.append(np.array(s, dtype=np.float64))
        return np.full((2, 2, 1), float(np.sum(s)), dtype=np.float64)


def threshold_oracle(t):
    """Class 1 once the rendered value exceeds ``t``; confidence falls smoothly before that."""
    def oracle(imgs):
        v = imgs.reshape(len(imgs), -1)[:, 0]
        p1 = np.where(v > t, 0.9, 0.4 / (1.0 + np.exp(-(v - t))))
        return np.stack([1 - p1, p1], axis=1)
    return oracle


def constant_oracle(imgs):
    return np.tile([0.7, 0.2, 0.1], (len(imgs), 1))


def reference_search(cfg, t, dim=4):
    """Plain re-statement of the search loop for the planted-threshold oracle."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 0xA77]))
    s = rng.normal(size=dim)
    oracle = threshold_oracle(t)

    def p_ref(code):
        return oracle(np.full((1, 2, 2, 1), code.sum()))[0]

    p = p_ref(s)
    ref = int(np.argmax(p))
    best, conf, queries = s, p[ref], 1
    for k in range(cfg.steps_K):
        alpha = cfg.c_min + k * (cfg.c_max - cfg.c_min) / (cfg.steps_K - 1)
        lo = s - alpha * np.maximum(np.abs(s), 1e-4)
        hi = s + alpha * np.maximum(np.abs(s), 1e-4)
        cands = rng.uniform(lo, hi, size=(cfg.samples_T, dim))
        for c in cands:
            queries += 1
            q = p_ref(c)
            if np.argmax(q) != ref:
                return True, queries, k + 1, c
            if q[ref] < conf:
                best, conf = c, q[ref]
        s = best
    return False, queries, -1, best


def test_schedule_and_budget():
    cfg = AttackConfig()
    sched = cfg.schedule()
    assert len(sched) == 15
    assert sched[0] == pytest.approx(0.1) and sched[-1] == pytest.approx(1.5)
    assert np.diff(sched) == pytest.approx([0.1] * 14)
    assert cfg.max_queries == 451
    assert AttackConfig(steps_K=1).schedule() == [0.1]
    for bad in (dict(c_min=0), dict(c_min=2.0), dict(steps_K=0), dict(samples_T=0), dict(compare_mode="x")):
        with pytest.raises(ValueError):
            AttackConfig(**bad)


def test_constant_oracle_exhausts_budget():
    dmg = LineDamage()
    r = find_adversarial_style(X, constant_oracle, AttackConfig(rng_seed=5), damage=dmg)
    assert not r.success
    assert r.queries == 451 == len(dmg.rendered)
    assert r.alpha_used == pytest.approx(1.5)
    assert len(r.confidence_trajectory) == 15
    assert {c for _, c in r.confidence_trajectory} == {0.7}
    assert r.original_label == r.adversarial_label == 0


@pytest.mark.parametrize("seed", range(12))
@pytest.mark.parametrize("t", [1.5, 4.0, 9.0])
def test_matches_reference_search(seed, t):
    cfg = AttackConfig(rng_seed=seed, samples_T=6)
    ok, queries, step, code = reference_search(cfg, t)
    r = find_adversarial_style(X, threshold_oracle(t), cfg, damage=LineDamage())
    assert r.success == ok
    assert r.queries == queries
    assert r.success_step == step
    assert np.allclose(r.s_adv, code, rtol=1e-12, atol=0)


def test_candidates_within_bounds():
    dmg = LineDamage(dim=6)
    cfg = AttackConfig(rng_seed=1, samples_T=8)
    r = find_adversarial_style(X, constant_oracle, cfg, damage=dmg)
    center = dmg.rendered[0]
    codes = dmg.rendered[1:]
    assert len(codes) == 15 * 8 == r.queries - 1
    for k, alpha in enumerate(cfg.schedule()):
        block = np.array(codes[k * 8:(k + 1) * 8])
        half = alpha * np.maximum(np.abs(center), 1e-4)
        assert np.all(block >= center - half - 1e-12)
        assert np.all(block <= center + half + 1e-12)
        # constant confidence never improves, so the center stays put
    assert np.array_equal(r.s_adv, center)


def test_recenters_on_lowest_confidence():
    # oracle whose class-0 confidence decreases with the rendered value but never flips
    def oracle(imgs):
        v = imgs.reshape(len(imgs), -1)[:, 0]
        p0 = 0.6 + 0.3 / (1 + np.exp(v))
        return np.stack([p0, 1 - p0], axis=1)

    dmg = LineDamage()
    cfg = AttackConfig(rng_seed=2, samples_T=5, steps_K=4)
    r = find_adversarial_style(X, oracle, cfg, damage=dmg)
    codes = dmg.rendered
    center = codes[0]
    for k, alpha in enumerate(cfg.schedule()):
        block = codes[1 + 5 * k:1 + 5 * (k + 1)]
        half = alpha * np.maximum(np.abs(center), 1e-4)
        assert all(np.all(np.abs(c - center) <= half + 1e-12) for c in block)
        pool = [center] + list(block)
        center = max(pool, key=lambda c: c.sum())
        assert np.array_equal(r.step_codes[k], center)
    confs = [c for _, c in r.confidence_trajectory]
    assert confs == sorted(confs, reverse=True)


def test_pre_misclassified_short_circuits():
    dmg = LineDamage()
    r = find_adversarial_style(X, constant_oracle, AttackConfig(), y=2, damage=dmg)
    assert r.success and r.pre_misclassified
    assert r.queries == 1 and r.alpha_used == 0.0 and r.success_step == 0
    assert r.original_label == 2 and r.adversarial_label == 0


def test_ground_truth_mode():
    with pytest.raises(ValueError):
        find_adversarial_style(X, constant_oracle, AttackConfig(compare_mode="vs_ground_truth"), damage=LineDamage())
    r = find_adversarial_style(X, constant_oracle, AttackConfig(compare_mode="vs_ground_truth"), y=0,
                               damage=LineDamage())
    assert not r.success and r.original_label == 0


@pytest.mark.parametrize("bad", [
    lambda imgs: np.ones((len(imgs), 3)),
    lambda imgs: np.full((len(imgs), 2), np.nan),
    lambda imgs: np.ones(3) / 3,
])
def test_malformed_scores_rejected(bad):
    with pytest.raises(OracleError):
        find_adversarial_style(X, bad, AttackConfig(), damage=LineDamage())


def test_initial_style_override():
    dmg = LineDamage()
    start = np.array([1.0, 2.0, 3.0, 4.0])
    r = find_adversarial_style(X, constant_oracle, AttackConfig(steps_K=2, samples_T=2), damage=dmg,
                               initial_style=start)
    assert np.array_equal(dmg.rendered[0], start)
    assert np.array_equal(r.initial_style, start)


def test_self_consistency_on_real_model(small_data, small_model):
    _, te = small_data
    damage = DamageModel()
    cfg = AttackConfig(rng_seed=4, texture_seed=8)
    hits = 0
    for i in range(6):
        r = find_adversarial_style(te.images[i], small_model.scores, item_config(cfg, i), y=int(te.labels[i]),
                                   damage=damage)
        assert r.queries <= 451
        label = int(np.argmax(small_model.scores(r.adversarial_image[None])[0]))
        img = damage.render(te.images[i], r.s_adv, item_config(cfg, i).texture_seed)
        assert np.array_equal(img, r.adversarial_image)
        if r.success:
            hits += 1
            assert label == r.adversarial_label != r.original_label
        else:
            assert label == r.original_label
    assert hits >= 1


def test_deterministic_and_parallel_equal(small_data, small_model):
    _, te = small_data
    sub = te.subset(range(6))
    cfg = AttackConfig(rng_seed=9, texture_seed=3, samples_T=5)
    a = attack_dataset(sub, small_model, cfg, jobs=1)
    b = attack_dataset(sub, small_model, cfg, jobs=1)
    c = attack_dataset(sub, small_model, cfg, jobs=2)
    for run in (b, c):
        assert run.indices == a.indices and run.asr == a.asr
        for x, y in zip(a.results, run.results):
            assert np.array_equal(x.s_adv, y.s_adv)
            assert x.queries == y.queries
            assert np.array_equal(x.adversarial_image, y.adversarial_image)


def test_dataset_asr_excludes_clean_errors(small_data):
    _, te = small_data
    sub = te.subset(range(10))

    def wrong_for_odd(imgs):
        # predicts class 0 for everything: only label-0 items count
        return np.tile(np.eye(10)[0] * 0.9 + 0.01, (len(imgs), 1))

    run = attack_dataset(sub, wrong_for_odd, AttackConfig(steps_K=2, samples_T=2))
    expected = [i for i in range(10) if sub.labels[i] == 0]
    assert run.indices == expected
    assert run.benign_error == pytest.approx(1 - len(expected) / 10)
    assert run.asr == 0.0


def test_oracle_failure_names_item(small_data):
    _, te = small_data
    calls = {"n": 0}

    def flaky(imgs):
        calls["n"] += 1
        if calls["n"] > 1:
            return np.zeros((len(imgs), 10))
        return np.tile(np.eye(10)[int(te.labels[0])], (len(imgs), 1))

    with pytest.raises(AttackError, match="item 0"):
        attack_dataset(te.subset([0]), flaky, AttackConfig(steps_K=2, samples_T=2))
    with pytest.raises(ValueError):
        attack_dataset(te.subset([]), flaky)


def test_steps_within():
    cfg = AttackConfig()
    assert steps_within(cfg, 0.0) == 0
    assert steps_within(cfg, 0.1) == 1
    assert steps_within(cfg, 0.75) == 7
    assert steps_within(cfg, 1.5) == 15


@pytest.mark.parametrize("seed", range(5))
def test_capped_outcome_equals_capped_search(seed):
    # rerunning with a truncated schedule reproduces the prefix derivation
    t = 5.0
    cfg = AttackConfig(rng_seed=seed, samples_T=4)
    full = find_adversarial_style(X, threshold_oracle(t), cfg, damage=LineDamage())
    for k in (1, 3, 8):
        short = AttackConfig(c_min=0.1, c_max=0.1 + (k - 1) * 0.1, steps_K=k, samples_T=4, rng_seed=seed)
        capped = find_adversarial_style(X, threshold_oracle(t), short, damage=LineDamage())
        ok, img = capped_outcome(full, cfg, short.c_max, X, LineDamage())
        assert ok == capped.success
        assert np.allclose(img, capped.adversarial_image, rtol=1e-12, atol=0)


def test_alpha_sweep_properties(small_data, small_model):
    _, te = small_data
    sub = te.subset(range(8))
    cfg = AttackConfig(rng_seed=2, texture_seed=5, samples_T=8)
    run = attack_dataset(sub, small_model, cfg)
    rows = alpha_sweep(sub, small_model, cfg, [0.3, 0.9, 1.5], run=run)
    asr = [r[1] for r in rows]
    assert asr == sorted(asr)
    assert rows[-1][1] == pytest.approx(run.asr)
    zero = alpha_sweep(sub, small_model, cfg, [0.0], initial_style=np.zeros(64))
    assert zero[0][1] == 0.0
    assert zero[0][2] == pytest.approx(1.0)
    # SSIM rows are means over the rendered outcomes
    x = sub.images[run.indices[0]]
    _, img = capped_outcome(run.results[0], item_config(cfg, run.indices[0]), 1.5, x, DamageModel())
    assert ssim(img, x) <= 1.0
    for bad in ([0.5, 0.3], [2.0], [-0.1]):
        with pytest.raises(ValueError):
            alpha_sweep(sub, small_model, cfg, bad, run=run)

"""Schedule, optimizer, loss, MixUp, and the training/eval loops.

Oracles: closed-form schedule points, a 1-D quadratic descent run for Adam,
hand-computed softmax losses, Beta-distribution moments, and a constructed
network whose logits provably reveal the label.
"""

import math

import numpy as np
import pytest

from randvit.data import synth_glyphs
from randvit.errors import EmptySplit, NonFiniteGradient
from randvit.model import VitConfig, init_params
from randvit.posenc import PosEncConfig, encode
from randvit.sampling import RunStreams
from randvit.train import (AdamState, TrainConfig, adam_init, adam_step,
                           cross_entropy, evaluate, lr_at, mixup, mixup_blend,
                           train_run)


def cfg_with(**kw):
    base = dict(epochs=1, batch_size=4, lr=0.0007, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

def test_lr_schedule_worked_examples():
    cfg = cfg_with(lr=0.0007, warmup_frac=0.0444)
    total = 10000  # w = round(0.0444 * 10000) = 444
    assert lr_at(0, total, cfg) == 0.0
    assert lr_at(444, total, cfg) == 0.0007
    assert lr_at(222, total, cfg) == 0.00035
    assert abs(lr_at(total, total, cfg)) < 1e-12


def test_lr_schedule_continuity_at_junction():
    cfg = cfg_with(lr=0.01, warmup_frac=0.1)
    total = 1000
    w = 100
    left = lr_at(w - 1, total, cfg) + 0.01 / w
    assert lr_at(w, total, cfg) == pytest.approx(0.01, rel=1e-12)
    assert left == pytest.approx(0.01, rel=1e-9)
    # cosine side starts at the same peak
    assert lr_at(w, total, cfg) >= lr_at(w + 1, total, cfg)


def test_lr_monotone_shape():
    cfg = cfg_with(lr=1.0, warmup_frac=0.2)
    vals = [lr_at(s, 100, cfg) for s in range(101)]
    w = 20
    assert all(vals[i] < vals[i + 1] for i in range(w))       # rising warmup
    assert all(vals[i] >= vals[i + 1] for i in range(w, 100))  # decaying tail


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_pure_decay():
    cfg = cfg_with(weight_decay=0.01, decoupled_decay=True)
    params = {"w": np.full(3, 2.0)}
    state = adam_init(params)
    adam_step(params, {"w": np.zeros(3)}, state, lr=0.1, cfg=cfg)
    assert np.allclose(params["w"], 2.0 - 0.1 * 0.01 * 2.0, atol=1e-12)


def test_adam_quadratic_convergence():
    # f(theta) = theta^2, grad 2 theta, 500 steps at lr 0.01 from theta = 1
    cfg = cfg_with(weight_decay=0.0)
    params = {"t": np.array([1.0])}
    state = adam_init(params)
    for _ in range(500):
        adam_step(params, {"t": 2.0 * params["t"]}, state, lr=0.01, cfg=cfg)
    assert abs(params["t"][0]) < 0.05


def test_adam_first_step_is_signed_lr():
    # with bias correction, m-hat / sqrt(v-hat) = 1 on the first step
    cfg = cfg_with(weight_decay=0.0)
    for g in (0.3, -2.0, 5e-4):
        params = {"t": np.array([0.0])}
        state = adam_init(params)
        adam_step(params, {"t": np.array([g])}, state, lr=0.01, cfg=cfg)
        # off by eps / |g| from the epsilon in the denominator
        assert params["t"][0] == pytest.approx(-np.sign(g) * 0.01, rel=5e-5)


def test_adam_l2_mode_folds_decay_into_gradient():
    cfg = cfg_with(weight_decay=0.5, decoupled_decay=False)
    params = {"t": np.array([1.0])}
    state = adam_init(params)
    adam_step(params, {"t": np.array([0.0])}, state, lr=0.01, cfg=cfg)
    # gradient becomes 0 + 0.5 * 1.0, so the step is -lr * sign
    assert params["t"][0] == pytest.approx(1.0 - 0.01, rel=1e-6)


def test_adam_rejects_nonfinite():
    cfg = cfg_with()
    params = {"t": np.array([1.0])}
    state = adam_init(params)
    with pytest.raises(NonFiniteGradient):
        adam_step(params, {"t": np.array([np.nan])}, state, 0.01, cfg)
    with pytest.raises(NonFiniteGradient):
        adam_step(params, {"t": np.array([np.inf])}, state, 0.01, cfg)


# ---------------------------------------------------------------------------
# cross-entropy
# ---------------------------------------------------------------------------

def test_ce_uniform_logits():
    for k in (2, 5, 10):
        loss, _ = cross_entropy(np.zeros(k), np.eye(k)[0])
        assert loss == pytest.approx(math.log(k), rel=1e-12)


def test_ce_worked_example():
    loss, _ = cross_entropy(np.array([math.log(3), 0.0]),
                            np.array([1.0, 0.0]))
    assert loss == pytest.approx(math.log(4 / 3), rel=1e-12)


def test_ce_gradient_matches_fd():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=6)
    target = rng.dirichlet(np.ones(6))
    _, grad = cross_entropy(logits, target)
    eps = 1e-6
    for i in range(6):
        lp = cross_entropy(logits + eps * np.eye(6)[i], target)[0]
        lm = cross_entropy(logits - eps * np.eye(6)[i], target)[0]
        assert grad[i] == pytest.approx((lp - lm) / (2 * eps), abs=1e-8)
    # analytic identity: softmax - target
    z = logits - logits.max()
    p = np.exp(z) / np.exp(z).sum()
    assert np.allclose(grad, p - target, atol=1e-12)


def test_ce_stable_under_huge_logits():
    loss, grad = cross_entropy(np.array([1e4, 0.0]), np.array([1.0, 0.0]))
    assert loss == 0.0 and np.all(np.isfinite(grad))


def test_ce_batched_mean_and_scaling():
    logits = np.array([[0.0, 0.0], [math.log(3), 0.0]])
    target = np.array([[1.0, 0.0], [1.0, 0.0]])
    loss, grad = cross_entropy(logits, target)
    assert loss == pytest.approx((math.log(2) + math.log(4 / 3)) / 2)
    single = cross_entropy(logits[1], target[1])[1]
    assert np.allclose(grad[1], single / 2)


# ---------------------------------------------------------------------------
# MixUp
# ---------------------------------------------------------------------------

def test_mixup_m_one_is_identity():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 1, 4, 4))
    y = np.eye(5)[[0, 1, 2]].astype(np.float64)
    bx, by = mixup_blend(x, y, np.array([2, 0, 1]), np.ones(3))
    assert np.array_equal(bx, x) and np.array_equal(by, y)


def test_mixup_half_blend_labels():
    y = np.eye(3)[[0, 1]]
    x = np.zeros((2, 1, 2, 2))
    _, by = mixup_blend(x, y, np.array([1, 0]), np.full(2, 0.5))
    assert np.allclose(by[0], [0.5, 0.5, 0.0], atol=1e-15)


def test_mixup_label_sums_exactly_one():
    rng = np.random.default_rng(2)
    for _ in range(20):
        b = int(rng.integers(2, 17))
        y = np.eye(7)[rng.integers(0, 7, b)]
        x = rng.normal(size=(b, 1, 2, 2))
        _, by = mixup(x, y, rng, alpha=0.2)
        assert np.all(by.sum(axis=1) == 1.0)  # exact, not approx


def test_mixup_beta_mean():
    rng = np.random.default_rng(3)
    m = rng.beta(0.2, 0.2, size=10_000)
    # Beta(0.2, 0.2): mean 0.5, var = ab / ((a+b)^2 (a+b+1)) = 1/5.6
    se = math.sqrt(1 / 5.6 / 10_000)
    assert abs(m.mean() - 0.5) < 3 * se


def test_mixup_deterministic_given_stream():
    x = np.random.default_rng(4).normal(size=(8, 1, 2, 2))
    y = np.eye(5)[np.arange(8) % 5]
    a = mixup(x, y, RunStreams(9).mixup(0, 0), 0.2)
    b = mixup(x, y, RunStreams(9).mixup(0, 0), 0.2)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


# ---------------------------------------------------------------------------
# one-step descent property
# ---------------------------------------------------------------------------

def test_single_step_decreases_loss():
    from randvit.model import backward_batch, forward_batch
    from randvit.sampling import PatchGeometry, grid_coords
    from randvit.train import _batch_tokens, _onehot

    ds = synth_glyphs(16, 5, "train")
    cfg = VitConfig.from_mode("grid", patch=8, dim=16, depth=1, heads=2,
                              n_classes=5, channels=1, dtype="float64")
    tcfg = cfg_with(weight_decay=0.0, mixup_alpha=0.0)
    geom = PatchGeometry(64, 64, 8)
    coords = np.broadcast_to(grid_coords(geom).coords, (16, 64, 2))
    tokens, pos = _batch_tokens(ds.images.astype(np.float64), coords, cfg)
    y = _onehot(ds.labels, 5)
    wins = 0
    for trial in range(100):
        params = init_params(cfg, RunStreams(trial).init())
        state = adam_init(params)
        logits, _, cache = forward_batch(tokens, pos, params, cfg,
                                         want_cache=True)
        l0, dl = cross_entropy(logits, y)
        grads = backward_batch(dl, cache, params, cfg)
        adam_step(params, grads, state, 1e-3, tcfg)
        l1, _ = cross_entropy(forward_batch(tokens, pos, params, cfg)[0], y)
        wins += l1 < l0
    assert wins >= 95


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _constructed_perfect_model():
    """One-token geometry where logit sign equals the image sign.

    Images are constant +1 or -1 over a single 4x4 patch; the embedder's
    first output channel averages the pixels, all blocks are zeroed
    (residual identity), and the head reads the sign of the first feature
    after the final layer norm, which preserves its ordering here.
    """
    cfg = VitConfig.from_mode("grid", patch=4, dim=8, depth=1, heads=2,
                              n_classes=2, channels=1, dtype="float64")
    params = init_params(cfg, RunStreams(0).init())
    for k in params:
        params[k] = np.zeros_like(params[k])
    params["embed.w"][0] = 1.0 / 16.0  # mean of the patch
    params["norm.g"][:] = 1.0
    params["head.w"][0, 0] = 1.0
    params["head.w"][1, 0] = -1.0
    images = np.ones((10, 1, 4, 4))
    images[5:] = -1.0
    labels = np.array([0] * 5 + [1] * 5)
    from randvit.data import Dataset
    return cfg, params, Dataset(images=images, labels=labels, n_classes=2,
                                split="val")


def test_evaluate_constructed_oracle():
    cfg, params, ds = _constructed_perfect_model()
    top1, loss = evaluate(cfg, params, ds, eval_seed=0)
    assert top1 == 1.0
    assert np.isfinite(loss)


def test_evaluate_chance_level():
    ds = synth_glyphs(500, 11, "val")
    cfg = VitConfig.from_mode("grid", patch=8, dim=16, depth=1, heads=2,
                              n_classes=5, channels=1)
    params = init_params(cfg, RunStreams(123).init())
    top1, _ = evaluate(cfg, params, ds, eval_seed=0)
    sigma = math.sqrt(0.2 * 0.8 / 500)
    assert abs(top1 - 0.2) < 3 * sigma


def test_evaluate_mode_b_seed_invariant():
    ds = synth_glyphs(40, 3, "val")
    cfg = VitConfig.from_mode("B", patch=8, dim=16, depth=1, heads=2,
                              n_classes=5, channels=1, r=2.0)
    params = init_params(cfg, RunStreams(5).init())
    a = evaluate(cfg, params, ds, eval_seed=1)
    b = evaluate(cfg, params, ds, eval_seed=2)
    assert a == b


def test_evaluate_mode_a_seed_sensitive_but_reproducible():
    ds = synth_glyphs(40, 3, "val")
    cfg = VitConfig.from_mode("A", patch=8, dim=16, depth=1, heads=2,
                              n_classes=5, channels=1, r=0.5)
    params = init_params(cfg, RunStreams(5).init())
    a1 = evaluate(cfg, params, ds, eval_seed=1)
    a2 = evaluate(cfg, params, ds, eval_seed=1)
    assert a1 == a2


def test_evaluate_empty_split():
    from randvit.data import Dataset
    cfg = VitConfig.from_mode("grid", patch=4, dim=8, depth=1, heads=2,
                              n_classes=2, channels=1)
    params = init_params(cfg, RunStreams(0).init())
    ds = Dataset(images=np.zeros((0, 1, 4, 4)), labels=np.zeros(0, np.int64),
                 n_classes=2, split="val")
    with pytest.raises(EmptySplit):
        evaluate(cfg, params, ds, eval_seed=0)


# ---------------------------------------------------------------------------
# train_run
# ---------------------------------------------------------------------------

def _micro_setup(mode="grid", r=1.0, mixup_alpha=0.0):
    train_ds = synth_glyphs(40, 2, "train", height=16, width=16)
    val_ds = synth_glyphs(20, 2, "val", height=16, width=16)
    mcfg = VitConfig.from_mode(mode, patch=8, dim=16, depth=1, heads=2,
                               n_classes=5, channels=1, r=r)
    tcfg = TrainConfig(epochs=2, batch_size=8, lr=0.001, seed=3,
                       mixup_alpha=mixup_alpha, warmup_frac=0.25)
    return mcfg, tcfg, train_ds, val_ds


def test_train_run_deterministic():
    mcfg, tcfg, tr, va = _micro_setup("A", r=1.5, mixup_alpha=0.2)
    p1, m1 = train_run(mcfg, tcfg, tr, va)
    p2, m2 = train_run(mcfg, tcfg, tr, va)
    assert [
        (m.epoch, m.train_loss, m.val_loss, m.val_top1, m.lr) for m in m1
    ] == [
        (m.epoch, m.train_loss, m.val_loss, m.val_top1, m.lr) for m in m2
    ]
    for k in p1:
        assert np.array_equal(p1[k], p2[k])


def test_train_run_metrics_shape(tmp_path):
    mcfg, tcfg, tr, va = _micro_setup()
    _, metrics = train_run(mcfg, tcfg, tr, va, out_dir=tmp_path)
    assert [m.epoch for m in metrics] == [1, 2]
    assert all(np.isfinite(m.train_loss) and np.isfinite(m.val_loss)
               for m in metrics)
    text = (tmp_path / "metrics.csv").read_text().splitlines()
    assert text[0] == "epoch,train_loss,val_loss,val_top1,lr"
    assert len(text) == 3
    assert (tmp_path / "checkpoint").exists()
    assert (tmp_path / "timing.csv").exists()


def test_train_run_checkpoint_records_decay_mode(tmp_path):
    from randvit.model import load_checkpoint
    mcfg, tcfg, tr, va = _micro_setup()
    train_run(mcfg, tcfg, tr, va, out_dir=tmp_path)
    _, _, extra = load_checkpoint(tmp_path / "checkpoint")
    assert extra["weight_decay_mode"] == "decoupled"
    assert extra["train"]["epochs"] == 2
    assert extra["rng"]["seed"] == 3


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=1, batch_size=0, lr=0.001, seed=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=1, batch_size=4, lr=0.001, warmup_frac=1.5, seed=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0, batch_size=4, lr=0.001, seed=0)

import math
import sys

import numpy as np
import pytest

from patchstitch.fit import (DIVERGENCE_FACTOR, DIVERGENCE_PATIENCE, VARIANTS, FitConfig, FitDivergedError, Fitter,
                             NonFiniteGradientError, OptimizerState, finetune, init_atlas, optimizer_step, pretrain,
                             run_ablation)
from patchstitch.losses import ConsistencyConfig, LossWeights
from patchstitch.patchmodel import sample_uv, forward
from patchstitch.spatial import NeighborConfig

from conftest import random_gt

fitmod = sys.modules["patchstitch.fit"]


def adam_trajectory(x0, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v, xs = x0, 0.0, 0.0, [x0]
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        xs.append(x)
    return xs


def test_zero_gradient_leaves_params_unchanged(rng):
    p = rng.normal(size=7)
    s = OptimizerState.zeros(7)
    for _ in range(5):
        q, s = optimizer_step(s, p, np.zeros(7), 1e-3)
        assert np.array_equal(q, p)
    assert s.step == 5


def test_constant_gradient_step_approaches_lr():
    p, s = np.zeros(3), OptimizerState.zeros(3)
    g = np.array([0.01, 5.0, -300.0])
    for _ in range(1000):
        q, s = optimizer_step(s, p, g, 1e-3)
        step, p = q - p, q
    np.testing.assert_allclose(np.abs(step), 1e-3, rtol=0.05)
    assert np.all(np.sign(step) == -np.sign(g))


def test_quadratic_matches_reference_and_decreases():
    x, s = np.array([1.0]), OptimizerState.zeros(1)
    xs = [1.0]
    for _ in range(50):
        x, s = optimizer_step(s, x, 2 * x, 0.1)
        xs.append(float(x[0]))
    ref = adam_trajectory(1.0, lambda x: 2 * x, 0.1, 50)
    np.testing.assert_allclose(xs, ref, rtol=0, atol=1e-14)
    f = np.square(xs)
    # monotone until the first overshoot of the minimum, then damped oscillation
    assert np.all(np.diff(f[:12]) < 0)
    assert f[-1] < 1e-4 * f[0]


def test_optimizer_errors():
    s = OptimizerState.zeros(2)
    with pytest.raises(ValueError):
        optimizer_step(s, np.zeros(2), np.zeros(3), 1e-3)
    with pytest.raises(NonFiniteGradientError) as e:
        optimizer_step(s, np.zeros(2), np.array([np.nan, 0.0]), 1e-3, term="l_sc")
    assert e.value.term == "l_sc" and "l_sc" in str(e.value)


def test_init_is_seeded():
    cfg = FitConfig(K=3, hidden=16)
    a = init_atlas(cfg, np.random.default_rng(5)).params
    b = init_atlas(cfg, np.random.default_rng(5)).params
    c = init_atlas(cfg, np.random.default_rng(6)).params
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_default_init_stays_near_origin():
    grid = sample_uv(100, "regular-grid")
    worst = 0.0
    for seed in range(100):
        atlas = init_atlas(FitConfig(), np.random.default_rng(seed))
        pts, _ = forward(atlas, np.broadcast_to(grid, (atlas.K,) + grid.shape).copy(), jacobian=False)
        worst = max(worst, float(np.linalg.norm(pts.value, axis=-1).max()))
    assert worst < 3.0


def test_config_validation():
    with pytest.raises(ValueError):
        FitConfig(variant="bogus")
    with pytest.raises(ValueError):
        FitConfig(total_iters=10, pretrain_iters=11)
    with pytest.raises(ValueError):
        FitConfig(M=8)  # needs M >= n + 1 = 9
    with pytest.raises(ValueError):
        FitConfig(K=1, variant="stitch")
    FitConfig(K=1, variant="analyt")
    assert FitConfig(total_iters=10).n_pretrain == 5


@pytest.mark.parametrize("variant, sc, st, ol, mode", [
    ("dsp", 0.0, 0.0, 0.1, "analytic"),
    ("aprox", 0.001, 0.0, 0.1, "approximate"),
    ("analyt", 0.001, 0.0, 0.1, "analytic"),
    ("stitch", 0.0, 0.001, 0.1, "analytic"),
    ("analyt+stitch", 0.001, 0.001, 0.1, "analytic"),
    ("analyt-area", 0.001, 0.0, 0.0, "analytic"),
    ("analyt+stitch-area", 0.001, 0.001, 0.0, "analytic"),
])
def test_variant_weights(variant, sc, st, ol, mode):
    cfg = FitConfig(variant=variant)
    w = cfg.phase_weights("finetune")
    assert (w.alpha_sc, w.alpha_st, w.alpha_ol) == (sc, st, ol)
    assert (w.alpha_E, w.alpha_G, w.alpha_sk) == (0.001, 0.001, 0.001)
    p = cfg.phase_weights("pretrain")
    assert (p.alpha_sc, p.alpha_st, p.alpha_ol) == (0.0, 0.0, 0.1)
    assert cfg.phase_consistency("finetune").normal_mode == mode
    # the variant decides the normal mode even when the config says otherwise
    other = ConsistencyConfig(normal_mode="approximate" if mode == "analytic" else "analytic")
    assert FitConfig(variant=variant, consistency=other).phase_consistency("finetune").normal_mode == mode
    assert set(VARIANTS) >= {variant}


def small_config(**kw):
    base = dict(K=2, M=12, hidden=8, total_iters=8, pretrain_iters=4, eval_every=4,
                consistency=ConsistencyConfig(neighbor=NeighborConfig(4, 120.0)), seed=3)
    base.update(kw)
    return FitConfig(**base)


@pytest.fixture
def small_gt():
    return random_gt(np.random.default_rng(11), 60, scale=0.5)


def test_schedule_and_history(small_gt):
    res = fitmod.fit(small_gt, small_config(variant="analyt+stitch"))
    assert [h.iteration for h in res.history] == list(range(1, 9))
    for h in res.history[:4]:
        assert h.losses.l_sc == 0.0 and h.losses.l_st == 0.0
    for h in res.history[4:]:
        assert h.losses.l_sc > 0.0 and h.losses.l_st > 0.0
    assert [it for it, _ in res.reports] == [0, 4, 8]
    dsp = fitmod.fit(small_gt, small_config(variant="dsp"))
    assert all(h.losses.l_sc == 0.0 and h.losses.l_st == 0.0 for h in dsp.history)


def test_fit_is_bit_reproducible(small_gt):
    cfg = small_config(variant="analyt+stitch")
    a, b = fitmod.fit(small_gt, cfg), fitmod.fit(small_gt, cfg)
    assert np.array_equal(a.atlas.params, b.atlas.params)
    assert [h.losses for h in a.history] == [h.losses for h in b.history]
    assert [r for _, r in a.reports] == [r for _, r in b.reports]


def test_ablation_matches_direct_fits(small_gt):
    cfg = small_config()
    res = run_ablation(small_gt, cfg, ["dsp", "analyt+stitch"])
    for v, r in res.items():
        direct = fitmod.fit(small_gt, cfg.with_variant(v))
        assert np.array_equal(r.atlas.params, direct.atlas.params)
        assert r.final_report == direct.final_report
    with pytest.raises(ValueError):
        run_ablation(small_gt, cfg, ["nope"])


def test_finetune_does_not_touch_pretrained(small_gt):
    cfg = small_config()
    base = pretrain(small_gt, cfg)
    before = base.atlas.params.copy()
    finetune(small_gt, cfg, base)
    assert np.array_equal(base.atlas.params, before) and base.iteration == 4


def test_rebuild_every_reuses_batches(small_gt):
    a = fitmod.fit(small_gt, small_config(rebuild_every=1))
    b = fitmod.fit(small_gt, small_config(rebuild_every=4))
    assert not np.array_equal(a.atlas.params, b.atlas.params)
    with pytest.raises(ValueError):
        small_config(rebuild_every=0)


def test_divergence_guard(small_gt):
    cfg = small_config()
    f = Fitter(small_gt, cfg)
    st = f.init_state()
    st.ref_total = 1.0
    big = DIVERGENCE_FACTOR * 1.5
    for _ in range(DIVERGENCE_PATIENCE - 1):
        f._guard(st, big, "finetune")
    f._guard(st, 0.5, "finetune")
    assert st.over_count == 0
    for _ in range(DIVERGENCE_PATIENCE - 1):
        f._guard(st, big, "finetune")
    with pytest.raises(FitDivergedError, match="post-pretraining"):
        f._guard(st, big, "finetune")


def test_non_finite_gradient_names_the_term(small_gt):
    small_gt.area = float("inf")
    cfg = small_config(diagnostics=True)
    with pytest.raises(NonFiniteGradientError) as e:
        fitmod.fit(small_gt, cfg)
    assert e.value.term == "l_ol"


# ---- directional checks on synthetic fixtures


def mean_patch_normal(atlas, k):
    from patchstitch.patchmodel import analytic_normal, jacobian

    n = analytic_normal(jacobian(atlas, k, sample_uv(100, "regular-grid"))).mean(axis=0)
    return n / np.linalg.norm(n)


def dihedral(atlas):
    return math.degrees(math.acos(min(1.0, abs(float(mean_patch_normal(atlas, 0) @ mean_patch_normal(atlas, 1))))))


def test_crossing_patches_flatten():
    from test_acceptance import crossing_atlas, crossing_runs

    out, atlases = crossing_runs()
    assert out["analyt"] < out["initial"]
    start = dihedral(crossing_atlas())
    assert abs(start - 60.0) < 1e-9
    assert dihedral(atlases["analyt"]) < start


@pytest.mark.slow
def test_stitching_closes_the_gap():
    # the fixture's ">= 50%" directional bound yields to the acceptance bound of 25%
    from test_acceptance import strip_runs

    out, _ = strip_runs()
    assert out["analyt+stitch"].m_s <= 0.75 * out["dsp"].m_s


@pytest.mark.slow
def test_sphere_fit_regression(sphere_runs):
    res = sphere_runs[0]["analyt"]
    (it0, first), final = res.reports[0], res.final_report
    assert it0 == 0
    assert final.cd < 5e-3
    assert final.cd * 100 <= first.cd

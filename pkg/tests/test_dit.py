import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskmoe import dit
from taskmoe.config import DitConfig, MoeConfig
from taskmoe.errors import DimensionError, ParameterError
from taskmoe.gradcheck import dit_objective, random_dit_problem, small_dit_config


def small_config(**moe_kw):
    m = dict(n_experts=4, top_k=2, rank=3, emb_width=4, n_tasks=5)
    m.update(moe_kw)
    return DitConfig(d_in=3, d_model=8, n_heads=2, n_blocks=3, n_tgt=4, n_src=4, grid_width=2, time_dim=8,
                     mlp_ratio=2, moe=MoeConfig(**m))


def random_batch(rng, cfg, b=3):
    return dit.FlowBatch(rng.standard_normal((b, cfg.n_tgt, cfg.d_in)),
                         rng.standard_normal((b, cfg.n_src, cfg.d_in)),
                         rng.standard_normal((b, cfg.n_tgt, cfg.d_in)),
                         rng.uniform(0.01, 0.99, b), rng.integers(0, cfg.moe.n_tasks, b))


def fresh_model(cfg, seed=0):
    return dit.DitModel.init(cfg, np.random.default_rng(seed), np.random.default_rng(seed + 1))


# --- losses ---------------------------------------------------------------


def test_flow_target_examples():
    rng = np.random.default_rng(0)
    x0, eps = rng.standard_normal((2, 2, 4, 3))
    assert np.all(dit.flow_target(x0, x0) == 0)
    assert np.array_equal(dit.flow_target(np.zeros_like(eps), eps), eps)
    expected = np.array([[[e - x for x, e in zip(rx, re)] for rx, re in zip(bx, be)] for bx, be in zip(x0, eps)])
    assert np.array_equal(dit.flow_target(x0, eps), expected)
    with pytest.raises(DimensionError):
        dit.flow_target(x0, eps[:, :2])


def test_diffusion_loss_examples():
    rng = np.random.default_rng(1)
    u = rng.standard_normal((3, 4, 2))
    assert dit.diffusion_loss(u, u) == 0.0
    assert dit.diffusion_loss(u + 1.0, u) == pytest.approx(1.0, abs=1e-15)
    v = rng.standard_normal(u.shape)
    diffs = [(a - b) ** 2 for a, b in zip(v.ravel().tolist(), u.ravel().tolist())]
    oracle = math.fsum(diffs) / len(diffs)
    assert abs(dit.diffusion_loss(v, u) - oracle) / oracle < 1e-12
    with pytest.raises(DimensionError):
        dit.diffusion_loss(v, u[:1])


def test_total_loss_examples():
    assert dit.total_loss(0.0, 2.0, 0.2) == pytest.approx(0.4, abs=1e-15)
    assert dit.total_loss(0.7, 3.0, 0.0) == 0.7
    assert dit.total_loss(0.693147, 1.0, 0.2) == pytest.approx(0.893147, abs=1e-12)
    assert dit.total_loss(0.5, 1.0) == pytest.approx(0.7)
    with pytest.raises(ParameterError):
        dit.total_loss(0.1, 0.1, -1.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 5))
def test_loss_ordering(l_task, l_diff, lam):
    assert dit.total_loss(l_task, l_diff, lam) >= l_task


def test_interpolate_endpoints():
    rng = np.random.default_rng(2)
    x0, eps = rng.standard_normal((2, 2, 3, 2))
    assert np.array_equal(dit.interpolate(x0, eps, np.zeros(2)), x0)
    assert np.array_equal(dit.interpolate(x0, eps, np.ones(2)), eps)


# --- forward --------------------------------------------------------------


def test_zero_init_matches_backbone_on_20_batches():
    cfg = small_config()
    model = fresh_model(cfg)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        batch = random_batch(rng, cfg, b=4)
        v_a, h_a = dit.dit_forward(model, batch)
        v_b, h_b = dit.dit_forward(model, batch, use_adapters=False)
        worst = max(worst, float(np.max(np.abs(v_a - v_b))))
        worst = max(worst, max(float(np.max(np.abs(a.h - b.h))) for a, b in zip(h_a, h_b)))
    assert worst <= 1e-15


def test_plain_lora_zero_init_matches_backbone():
    cfg = small_config(n_experts=0)
    model = fresh_model(cfg)
    batch = random_batch(np.random.default_rng(4), cfg)
    assert np.array_equal(dit.dit_forward(model, batch)[0], dit.dit_forward(model, batch, use_adapters=False)[0])


def test_batch_independence():
    _, model, _ = random_dit_problem(5)
    cfg = model.config
    batch = random_batch(np.random.default_rng(5), cfg, b=3)
    batch.y = batch.y % cfg.moe.n_tasks
    v3, _ = dit.dit_forward(model, batch)
    for i in range(3):
        v1, _ = dit.dit_forward(model, batch[i])
        assert np.max(np.abs(v1[0] - v3[i])) < 1e-12


def test_forward_deterministic_and_shapes():
    cfg = small_config()
    batch = random_batch(np.random.default_rng(6), cfg)
    v1, h1 = dit.dit_forward(fresh_model(cfg, 7), batch)
    v2, h2 = dit.dit_forward(fresh_model(cfg, 7), batch)
    assert v1.shape == (3, cfg.n_tgt, cfg.d_in)
    assert np.array_equal(v1, v2)
    assert len(h1) == cfg.n_blocks
    for l, hb in enumerate(h1):
        assert hb.layer == l
        assert hb.h.shape == (3, cfg.n_src + cfg.n_tgt, cfg.d_model)
        assert np.array_equal(hb.y, batch.y)
        assert np.array_equal(hb.h, h2[l].h)


def test_reference_tokens_condition_output():
    cfg = small_config()
    model = fresh_model(cfg)
    batch = random_batch(np.random.default_rng(8), cfg)
    v1, _ = dit.dit_forward(model, batch)
    batch.src = batch.src + 1.0
    v2, _ = dit.dit_forward(model, batch)
    assert v1.shape == v2.shape and not np.allclose(v1, v2)


def test_shape_mismatch_raises():
    cfg = small_config()
    model = fresh_model(cfg)
    batch = random_batch(np.random.default_rng(9), cfg)
    batch.src = batch.src[:, :2]
    with pytest.raises(DimensionError):
        dit.dit_forward(model, batch)


def test_init_on_float32_grid_and_trainable_set():
    cfg = small_config()
    model = fresh_model(cfg)
    for arr in model.state().values():
        assert np.array_equal(arr, arr.astype(np.float32).astype(np.float64))
    names = set(model.trainable())
    assert "task_table" in names
    assert not any(k.startswith("backbone.") for k in names)
    lora = fresh_model(small_config(n_experts=0))
    assert "task_table" not in lora.trainable()
    assert not any("gate" in k for k in lora.trainable())


# --- backward -------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1])
def test_total_loss_gradient(seed):
    from taskmoe.gradcheck import run_suite
    reports = run_suite("dit", seed=seed)
    assert all(r.passed for r in reports), [str(r) for r in reports]


@pytest.mark.parametrize("moe_kw", [dict(n_experts=0), dict(task_aware=False)])
def test_gradient_variants(moe_kw):
    from taskmoe import numerics as nx
    cfg = small_dit_config(**moe_kw)
    rng, model, batch = random_dit_problem(11, cfg)
    _, grads = dit_objective(model, batch)
    params = model.trainable()
    assert set(grads) >= set(params)
    for name in list(params)[:6]:
        arr = params[name]
        rep = nx.finite_diff_check(lambda p, a=arr: _set_eval(model, batch, a, p), arr.copy(), grads[name],
                                   probes=8, tolerance=1e-4, name=name, rng=rng)
        assert rep.passed, str(rep)


def _set_eval(model, batch, arr, value):
    saved = arr.copy()
    arr[...] = value
    try:
        return dit_objective(model, batch, with_grad=False)[0]
    finally:
        arr[...] = saved


def test_task_weight_zero_gives_diffusion_only():
    _, model, batch = random_dit_problem(12)
    total, _ = dit_objective(model, batch, lam=0.2, task_weight=0.0, with_grad=False)
    v, _ = dit.dit_forward(model, batch)
    assert total == pytest.approx(0.2 * dit.diffusion_loss(v, dit.flow_target(batch.x0, batch.eps)), rel=1e-14)


# --- sampling -------------------------------------------------------------


def test_single_euler_step():
    rng = np.random.default_rng(13)
    x1 = rng.standard_normal((4, 2))
    w = rng.standard_normal((2, 2))

    def velocity(x, t):
        return x @ w + t

    assert np.array_equal(dit.euler_integrate(velocity, x1, 1), x1 - velocity(x1, 1.0))
    with pytest.raises(ParameterError):
        dit.euler_integrate(velocity, x1, 0)


def gaussian_velocity(m, s):
    """Exact marginal velocity when x0 ~ N(m, s^2) elementwise and eps ~ N(0, 1)."""

    def velocity(x, t):
        mu = (1 - t) * m
        var = (1 - t) ** 2 * s ** 2 + t ** 2
        return -m + (t - (1 - t) * s ** 2) / var * (x - mu)

    return velocity


def test_euler_converges_on_exact_velocity_field():
    m, s = 1.5, 0.4
    x1 = np.random.default_rng(14).standard_normal((16, 4))
    target = m + s * x1  # exact ODE endpoint
    errs = [float(np.max(np.abs(dit.euler_integrate(gaussian_velocity(m, s), x1, n) - target)))
            for n in (1, 4, 16, 64, 256)]
    assert all(a > b for a, b in zip(errs, errs[1:]))
    # first-order: error roughly quarters when steps quadruple
    assert errs[-1] < 0.02
    assert 2.5 < errs[-2] / errs[-1] < 6.0


def test_euler_sample_deterministic():
    _, model, _ = random_dit_problem(15)
    src = np.random.default_rng(16).standard_normal((model.config.n_src, model.config.d_in))
    a = dit.euler_sample(model, src, 1, 4, rng=7)
    b = dit.euler_sample(model, src, 1, 4, rng=7)
    assert a.shape == (model.config.n_tgt, model.config.d_in)
    assert np.array_equal(a, b)
    other = dit.euler_sample(model, src, model.config.moe.n_tasks - 1, 4, rng=7)
    assert np.all(np.isfinite(other))

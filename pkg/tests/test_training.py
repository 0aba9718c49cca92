"""Training machinery checks: gate dynamics, optimizers, probes, sampler,
stage loops, checkpoints, and reports."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgmd.errors import StructuralError
from kgmd.fields import Grid
from kgmd.gating import GateState, gamma_update, gate_h, open_window_end
from kgmd.network import Architecture
from kgmd.physics import make_problem
from kgmd.training import (AdamState, LbfgsState, SamplerState, TrainConfig,
                           adam_step, grad_correlation, init_sampler,
                           lbfgs_step, load_checkpoint, output_param_gradient,
                           resample_gated, rng_stream, save_checkpoint,
                           stiffness_coefficient, time_avg_correlation_check,
                           train_stage1, train_stage2, TrainReport)

from conftest import small_arch, random_params


# ---------------------------------------------------------------- gate

def test_gate_midpoint_value():
    g = GateState(alpha=5.0, gamma=0.4)
    assert np.isclose(gate_h(0.4, 1.0, g), 0.5)


def test_gate_closed_endpoint():
    g = GateState(alpha=5.0, gamma=0.0)
    assert np.isclose(gate_h(1.0, 1.0, g), (1.0 - np.tanh(5.0)) / 2.0)
    assert np.isclose(gate_h(1.0, 1.0, g), 4.5398e-05, rtol=1e-3)


def test_gate_fully_open_window():
    g = GateState(alpha=5.0, gamma=1.5)
    t = np.linspace(0.0, 1.0, 33)
    h = gate_h(t, 1.0, g)
    assert np.all(h >= (1.0 - np.tanh(2.5)) / 2.0 - 1e-15)
    assert h.min() >= 0.9933 - 1e-4


@settings(max_examples=40, deadline=None)
@given(gamma=st.floats(-1.0, 2.0), alpha=st.floats(0.5, 10.0),
       variant=st.sampled_from(["tanh", "relu-tanh"]))
def test_gate_range_and_monotonicity(gamma, alpha, variant):
    g = GateState(alpha=alpha, gamma=gamma, variant=variant)
    t = np.linspace(0.0, 1.0, 65)
    h = gate_h(t, 1.0, g)
    assert np.all(h >= 0.0) and np.all(h <= 1.0)
    assert np.all(np.diff(h) <= 1e-15)


def test_gamma_update_clipped_rate():
    # zero correlation: the increment is exactly eta * delta_max
    g = GateState(eta=1e-3, delta_max=0.1, eps_tol=1.0)
    g2 = gamma_update(g, 0.0)
    assert g2.gamma == g.gamma + 1e-3 * 0.1


def test_gamma_update_stalls_for_large_correlation():
    g = GateState(eta=1e-3, delta_max=0.1)
    g2 = gamma_update(g, 1e6)
    assert 0.0 <= g2.gamma - g.gamma < 1e-12


def test_gamma_update_exponential_regime():
    g = GateState(eta=1e-3, delta_max=1.0, eps_tol=1.0)
    g2 = gamma_update(g, np.log(10.0))
    assert np.isclose(g2.gamma - g.gamma, 1e-3 * 0.1)


def test_gamma_never_decreases():
    g = GateState()
    rng = np.random.default_rng(0)
    for _ in range(100):
        g2 = gamma_update(g, float(rng.uniform(0, 10)))
        assert g2.gamma >= g.gamma
        g = g2


def test_open_window_end():
    g = GateState(alpha=5.0, gamma=0.5)
    t_edge = open_window_end(1.0, g, 0.05)
    assert np.isclose(gate_h(t_edge, 1.0, g), 0.05, atol=1e-12)
    g_neg = GateState(alpha=5.0, gamma=-0.5)
    assert open_window_end(1.0, g_neg, 0.05) <= 0.0


# ----------------------------------------------------------- optimizers

def test_adam_zero_gradient_is_identity():
    st_ = AdamState.fresh(4, lr=0.1)
    params = np.array([1.0, -2.0, 3.0, 0.0])
    _, new = adam_step(st_, np.zeros(4), params)
    assert np.array_equal(new, params)


def test_adam_descends_quadratic():
    # the scalar recursion descends strictly until it overshoots near the
    # optimum (step 11 at this rate) and ends far below the start
    st_ = AdamState.fresh(1, lr=0.1)
    theta = np.array([1.0])
    losses = []
    for _ in range(50):
        st_, theta = adam_step(st_, 2.0 * theta, theta)
        losses.append(float(theta[0] ** 2))
    assert all(b < a for a, b in zip(losses[:10], losses[1:10]))
    assert losses[-1] < 1e-4


def test_lbfgs_zero_gradient_is_identity():
    st_ = LbfgsState()
    params = np.ones(3)
    _, new, _, _ = lbfgs_step(st_, lambda th: 0.0,
                              lambda th: (0.0, np.zeros(3)), params, 0.0,
                              np.zeros(3))
    assert np.array_equal(new, params)


def test_lbfgs_solves_convex_quadratic():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(10, 10))
    H = A @ A.T + 10.0 * np.eye(10)
    b = rng.normal(size=10)

    def loss(th):
        return 0.5 * float(th @ H @ th) - float(b @ th)

    def grad(th):
        return (loss(th), H @ th - b)

    st_ = LbfgsState(depth=20)
    theta = np.zeros(10)
    l0, g0 = grad(theta)
    for _ in range(50):
        st_, theta, res, _ = lbfgs_step(st_, loss, grad, theta, l0, g0)
        l0, g0 = res[0], res[1]
        if np.linalg.norm(g0) < 1e-8:
            break
    assert np.linalg.norm(g0) < 1e-8


# ------------------------------------------------------------- probes

def test_grad_correlation_self_is_squared_norm():
    arch = small_arch(n_outputs=1)
    params = random_params(arch, 2)
    x = np.array([[0.3]])
    g = output_param_gradient(arch, params.flat, x, 0.5, 1.0)
    corr = grad_correlation(arch, params.flat, x, 0.5, 0.0, 1.0)
    assert np.isclose(corr, float(g @ g), rtol=1e-12)


def test_grad_correlation_gate_closed_is_zero():
    arch = small_arch(n_outputs=1)
    params = random_params(arch, 3)
    gate = GateState(alpha=50.0, gamma=-10.0)   # h ~ 0 everywhere
    corr = grad_correlation(arch, params.flat, np.array([[0.1]]), 0.5, 0.02,
                            1.0, gate=gate)
    assert corr < 1e-12


def test_stiffness_zero_gradient():
    # at t=0 the hard-IC blend multiplies the parameter-dependent branch by
    # zero, so the parameter gradient vanishes exactly and the stiffness is 0
    arch = small_arch(n_outputs=1)
    params = random_params(arch, 4)

    def zero_ic(x, layout):
        return np.zeros((layout.n, np.atleast_2d(x).shape[0]))

    hic = ([zero_ic], [zero_ic])
    g0 = output_param_gradient(arch, params.flat, np.array([[0.2]]), 0.0, 1.0,
                               hard_ic=hic)
    assert np.all(g0 == 0.0)
    d = stiffness_coefficient(arch, params.flat, np.array([[0.2]]), 0.0,
                              0.02, 1.0, hard_ic=hic)
    assert d == 0.0


def test_stiffness_matches_correlation():
    arch = small_arch(n_outputs=1)
    rel = []
    for seed in range(10):
        params = random_params(arch, 50 + seed)
        x = np.array([[0.7]])
        corr = grad_correlation(arch, params.flat, x, 0.4, 0.02, 1.0)
        stiff = stiffness_coefficient(arch, params.flat, x, 0.4, 0.02, 1.0,
                                      lam_probe=1e-6)
        rel.append(abs(stiff - corr) / max(corr, 1e-12))
    assert max(rel) < 1e-3


def test_stiffness_richardson_in_probe_size():
    arch = small_arch(n_outputs=1)
    params = random_params(arch, 60)
    x = np.array([[0.7]])
    corr = grad_correlation(arch, params.flat, x, 0.4, 0.02, 1.0)
    err = []
    for lam in (2e-4, 1e-4):
        d = stiffness_coefficient(arch, params.flat, x, 0.4, 0.02, 1.0,
                                  lam_probe=lam)
        err.append(abs(d - corr))
    assert err[1] < 0.75 * err[0]    # first-order remainder shrinks with lam


def test_time_avg_trivial_cases():
    arch = small_arch(n_outputs=1, with_regions=False)
    out = time_avg_correlation_check(arch, 1.0, region=0.06, k=0,
                                     n_samples=5, seed=0)
    assert out["pass_fraction"] == 1.0


def test_time_avg_zero_offsets_quadruple():
    # all offsets zero: averaged gradient doubles, correlation quadruples
    arch = small_arch(n_outputs=1, with_regions=False)
    params = random_params(arch, 8)
    x = np.array([[0.3]])

    def g(t):
        return output_param_gradient(arch, params.flat, x, t, 1.0)

    base = abs(float(g(0.4) @ g(0.42)))
    avg_a = g(0.4) + g(0.4)
    avg_b = g(0.42) + g(0.42)
    assert np.isclose(abs(float(avg_a @ avg_b)), 4.0 * base, rtol=1e-12)


# -------------------------------------------------------------- sampler

def _mini_cfg(**kw):
    defaults = dict(iterations=4, adam_iterations=2, n_collocation=32,
                    n_initial=8, n_boundary=8, probe_points=2,
                    resample_every=2, prep_grid_n=64, seed=5)
    defaults.update(kw)
    return TrainConfig(**defaults)


def test_sampler_sizes_preserved():
    prob = make_problem("gauss-sech", eps=0.5, T=1.0)
    cfg = _mini_cfg()
    s = init_sampler(prob, cfg, rng_stream(0, "s"))
    assert s.sizes == (32, 8, 8)
    s.residual_mag = np.random.default_rng(1).uniform(size=32)
    s2 = resample_gated(s, GateState(gamma=0.5), prob, cfg, rng_stream(0, "r"))
    assert s2.sizes == s.sizes


def test_resample_zero_swap_is_identity():
    prob = make_problem("gauss-sech", eps=0.5, T=1.0)
    cfg = _mini_cfg(swap_fraction=0.0)
    s = init_sampler(prob, cfg, rng_stream(1, "s"))
    s2 = resample_gated(s, GateState(), prob, cfg, rng_stream(1, "r"))
    assert s2 is s


def test_resample_ties_swap_lowest_indices():
    prob = make_problem("gauss-sech", eps=0.5, T=1.0)
    cfg = _mini_cfg(swap_fraction=0.25)
    s = init_sampler(prob, cfg, rng_stream(2, "s"))
    s.residual_mag = np.zeros(32)    # equal residuals: all weights tie
    gate = GateState(gamma=1.5)      # fully open
    s2 = resample_gated(s, gate, prob, cfg, rng_stream(2, "r"))
    changed = np.nonzero(s2.t_f != s.t_f)[0]
    assert np.all(changed < 8)       # the 8 lowest indices were replaced


def test_resample_new_times_inside_window():
    prob = make_problem("gauss-sech", eps=0.5, T=1.0)
    cfg = _mini_cfg(swap_fraction=0.5)
    gate = GateState(alpha=5.0, gamma=0.2)
    t_max = open_window_end(prob.T, gate, cfg.window_min_gate)
    s = init_sampler(prob, cfg, rng_stream(3, "s"))
    s.residual_mag = np.random.default_rng(4).uniform(size=32)
    s2 = resample_gated(s, gate, prob, cfg, rng_stream(3, "r"))
    changed = s2.t_f != s.t_f
    assert np.all(gate_h(s2.t_f[changed], prob.T, gate)
                  >= cfg.window_min_gate - 1e-12)
    assert np.all(s2.t_f[changed] <= t_max + 1e-12)


def test_resample_empty_window_fallback():
    prob = make_problem("gauss-sech", eps=0.5, T=1.0)
    cfg = _mini_cfg(swap_fraction=0.5, window_floor_time=0.3)
    gate = GateState(alpha=5.0, gamma=-0.9)      # window empty
    s = init_sampler(prob, cfg, rng_stream(6, "s"))
    s.residual_mag = np.random.default_rng(7).uniform(size=32)
    s2 = resample_gated(s, gate, prob, cfg, rng_stream(6, "r"))
    changed = s2.t_f != s.t_f
    assert changed.sum() == 16
    assert np.all(s2.t_f[changed] <= 0.3)


# --------------------------------------------------------- stage loops

def test_zero_iterations_returns_initialization():
    prob = make_problem("gauss-sech", eps=0.5, T=1.0)
    cfg = _mini_cfg(iterations=0, adam_iterations=0)
    params, report, gate = train_stage1(prob, cfg)
    from kgmd.network import init_params
    expected = init_params(params.arch, rng_stream(cfg.seed, "stage1-init"))
    assert np.array_equal(params.flat, expected.flat)
    assert report.rows == []


def test_training_is_deterministic_under_seed():
    prob = make_problem("gauss-sech", eps=0.5, T=1.0)
    arch = small_arch()
    arch = Architecture(dim=1, modes=2, periods=prob.periods, d_model=6,
                        n_outputs=2, radii=(0.03, 0.05), counts=(2, 3),
                        encoder_widths=(6,), mixer_hidden=4,
                        head_widths=(6, 6))
    cfg = _mini_cfg(iterations=5, adam_iterations=3)
    p1, r1, g1 = train_stage1(prob, cfg, arch)
    p2, r2, g2 = train_stage1(prob, cfg, arch)
    assert np.array_equal(p1.flat, p2.flat)
    assert r1.content_hash() == r2.content_hash()
    assert g1.gamma == g2.gamma


def test_stage2_never_mutates_frozen_envelope():
    prob = make_problem("gauss-sech", eps=0.5, T=1.0)
    arch1 = Architecture(dim=1, modes=2, periods=prob.periods, d_model=6,
                         n_outputs=2, radii=(0.03, 0.05), counts=(2, 3),
                         encoder_widths=(6,), mixer_hidden=4,
                         head_widths=(6, 6))
    cfg = _mini_cfg(iterations=3, adam_iterations=2)
    z_params, _, z_gate = train_stage1(prob, cfg, arch1)
    before = z_params.flat.copy()
    checksum = hash(z_params.flat.tobytes())
    arch2 = Architecture(dim=1, modes=2, periods=prob.periods, d_model=6,
                         n_outputs=1, radii=(0.03, 0.05), counts=(2, 3),
                         encoder_widths=(6,), mixer_hidden=4,
                         head_widths=(6, 6))
    train_stage2(prob, z_params, z_gate, cfg, arch2)
    assert hash(z_params.flat.tobytes()) == checksum
    assert np.array_equal(z_params.flat, before)


def test_gamma_monotone_over_run():
    prob = make_problem("gauss-sech", eps=0.5, T=1.0)
    arch = Architecture(dim=1, modes=2, periods=prob.periods, d_model=6,
                        n_outputs=2, radii=(0.03, 0.05), counts=(2, 3),
                        encoder_widths=(6,), mixer_hidden=4,
                        head_widths=(6, 6))
    cfg = _mini_cfg(iterations=6, adam_iterations=3)
    _, report, _ = train_stage1(prob, cfg, arch)
    gammas = [row[5] for row in report.rows]
    assert all(b >= a for a, b in zip(gammas, gammas[1:]))


# ------------------------------------------------- checkpoints, reports

def test_checkpoint_roundtrip(tmp_path):
    arch = small_arch()
    params = random_params(arch, 9)
    gate = GateState(gamma=0.25)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, params, stage="stage1", seed=42, gate=gate)
    loaded, loaded_gate, meta = load_checkpoint(path)
    assert np.array_equal(loaded.flat, params.flat)
    assert loaded.arch == arch
    assert loaded_gate == gate
    assert meta["stage"] == "stage1" and meta["seed"] == 42


def test_checkpoint_version_mismatch(tmp_path):
    arch = small_arch()
    params = random_params(arch, 9)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, params, stage="stage1", seed=0)
    raw = bytearray(path.read_bytes())
    raw[8:12] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(StructuralError):
        load_checkpoint(path)


def test_report_roundtrip_and_hash(tmp_path):
    rep = TrainReport(stage="stage1", seed=7)
    rep.add(iter=0, loss_total=1.0, loss_res=0.5, loss_ic=0.25, loss_bd=0.25,
            gamma=-0.5, G_mean=0.9, wall_ms=12.3)
    rep.add(iter=1, loss_total=0.8, loss_res=0.4, loss_ic=0.2, loss_bd=0.2,
            gamma=-0.4999, G_mean=0.8, wall_ms=9.9)
    path = tmp_path / "report.csv"
    rep.to_csv(path)
    back = TrainReport.from_csv(path)
    assert back.content_hash() == rep.content_hash()
    # wall time must not affect the hash
    rep2 = TrainReport(stage="stage1", seed=7)
    for row in rep.rows:
        kw = dict(zip(("iter", "loss_total", "loss_res", "loss_ic", "loss_bd",
                       "gamma", "G_mean", "wall_ms"), row))
        kw["wall_ms"] = kw["wall_ms"] + 100.0
        rep2.add(**kw)
    assert rep2.content_hash() == rep.content_hash()

"""PDE-level checks: residual operators against closed-form solutions,
well-prepared data, reconstruction, metrics, and loss assembly."""

import numpy as np
import pytest

from kgmd.errors import DataError, MetricError, StructuralError
from kgmd.fields import Field, Grid
from kgmd.physics import (INITIAL_DATA, LossWeights, ProblemSpec,
                          assemble_loss_stage1, assemble_loss_stage2,
                          coupling_term, error_criterion, make_problem,
                          mean_square_sum, nkge_residual, nlsw_residual,
                          prepare_r_initial, prepare_z_initial, rmae,
                          remainder_residual, rrmse, wkb_reconstruct)


def _jet(v=0.0, dt=0.0, dtt=0.0, dxx=0.0):
    return {"v": v, "d:t": dt, "dd:t": dtt, "dd:x0": dxx}


def _spec(eps=1.0, lam=1.0, T=1.0):
    return ProblemSpec(eps=eps, lam=lam, domain=((-16.0, 16.0),), T=T, dim=1,
                       phi1=lambda x: np.zeros(x.shape[0]),
                       phi2=lambda x: np.zeros(x.shape[0]))


# ------------------------------------------------------------ full equation

def test_nkge_residual_zero_field():
    assert nkge_residual(_jet(), _spec()) == 0.0


def test_nkge_residual_constant_field():
    spec = _spec(eps=1.0, lam=1.0)
    c = 0.7
    assert np.isclose(nkge_residual(_jet(v=c), spec), c + c ** 3)


def test_nkge_residual_linear_plane_wave():
    # u = cos(kx) cos(w t) with w = sqrt(1 + eps^2 k^2)/eps^2 solves lam=0
    eps, k = 0.35, 1.3
    spec = _spec(eps=eps, lam=0.0)
    w = np.sqrt(1.0 + eps ** 2 * k ** 2) / eps ** 2
    rng = np.random.default_rng(0)
    for _ in range(10):
        x, t = rng.uniform(-3, 3), rng.uniform(0, 1)
        u = np.cos(k * x) * np.cos(w * t)
        jet = _jet(v=u, dtt=-w ** 2 * u, dxx=-k ** 2 * u)
        assert abs(nkge_residual(jet, spec)) < 1e-10


# ------------------------------------------------------- envelope equation

def test_nlsw_residual_zero():
    imag_eq, real_eq = nlsw_residual(_jet(), _jet(), _spec())
    assert imag_eq == 0.0 and real_eq == 0.0


def _envelope_roots(eps, k, lam, a):
    # z = a exp(i(kx - w t)) needs eps^2 w^2 - 2 w - (k^2 + 3 lam a^2) = 0
    c = k ** 2 + 3.0 * lam * a ** 2
    disc = np.sqrt(1.0 + eps ** 2 * c)
    return (1.0 - disc) / eps ** 2, (1.0 + disc) / eps ** 2


def test_nlsw_residual_plane_wave_both_roots():
    eps, k, lam, a = 0.4, 0.9, 1.0, 0.6
    spec = _spec(eps=eps, lam=lam)
    rng = np.random.default_rng(1)
    for w in _envelope_roots(eps, k, lam, a):
        for _ in range(5):
            x, t = rng.uniform(-3, 3), rng.uniform(0, 1)
            ph = k * x - w * t
            zre, zim = a * np.cos(ph), a * np.sin(ph)
            jre = _jet(v=zre, dt=w * a * np.sin(ph), dtt=-w ** 2 * zre,
                       dxx=-k ** 2 * zre)
            jim = _jet(v=zim, dt=-w * a * np.cos(ph), dtt=-w ** 2 * zim,
                       dxx=-k ** 2 * zim)
            imag_eq, real_eq = nlsw_residual(jre, jim, spec)
            assert abs(imag_eq) < 1e-10 and abs(real_eq) < 1e-10


def test_nlsw_epsilon_term_deletion_matches_limit_equation():
    # dropping the eps^2 d_tt contribution reproduces the limiting equation
    spec = _spec(eps=0.3, lam=1.0)
    rng = np.random.default_rng(2)
    jre = _jet(*rng.normal(size=4))
    jim = _jet(*rng.normal(size=4))
    imag_eq, real_eq = nlsw_residual(jre, jim, spec)
    mod2 = jre["v"] ** 2 + jim["v"] ** 2
    lim_imag = 2 * jre["d:t"] - jim["dd:x0"] + 3 * mod2 * jim["v"]
    lim_real = -2 * jim["d:t"] - jre["dd:x0"] + 3 * mod2 * jre["v"]
    assert np.isclose(imag_eq - spec.eps ** 2 * jim["dd:t"], lim_imag)
    assert np.isclose(real_eq - spec.eps ** 2 * jre["dd:t"], lim_real)


# --------------------------------------------------------- prepared data

def test_prepare_z_benchmark_value_at_origin():
    prob = make_problem("gauss-sech", eps=0.5)
    grid = Grid((256,), prob.domain)
    z0, _ = prepare_z_initial(prob, grid)
    i0 = np.argmin(np.abs(grid.axis(0)))
    assert abs(grid.axis(0)[i0]) < 1e-12
    assert np.isclose(z0[i0].real, 1.0 / (2.0 * np.sqrt(np.pi)), atol=1e-12)
    assert abs(z0[i0].imag) < 1e-12


def test_prepare_z_zero_data():
    prob = _spec()
    grid = Grid((64,), prob.domain)
    z0, dz0 = prepare_z_initial(prob, grid)
    assert np.all(z0 == 0) and np.all(dz0 == 0)


def test_prepare_z_constant_data_cubic():
    c = 0.8
    prob = ProblemSpec(eps=1.0, lam=1.0, domain=((-16.0, 16.0),), T=1.0,
                       dim=1, phi1=lambda x: np.full(x.shape[0], c),
                       phi2=lambda x: np.zeros(x.shape[0]))
    grid = Grid((64,), prob.domain)
    z0, dz0 = prepare_z_initial(prob, grid)
    assert np.allclose(z0, c / 2.0)
    assert np.allclose(dz0, 3j * c ** 3 / 16.0, atol=1e-12)


def test_prepare_z_rejects_non_periodic_data():
    prob = ProblemSpec(eps=1.0, lam=1.0, domain=((-16.0, 16.0),), T=1.0,
                       dim=1, phi1=lambda x: x[:, 0],
                       phi2=lambda x: np.zeros(x.shape[0]))
    grid = Grid((64,), prob.domain)
    with pytest.raises(DataError):
        prepare_z_initial(prob, grid)


def test_prepare_r_initial():
    _, dr0 = prepare_r_initial(np.array([0.0 + 0.0j]))
    assert dr0[0] == 0.0
    _, dr0 = prepare_r_initial(np.array([2.5j]))
    assert dr0[0] == 0.0
    _, dr0 = prepare_r_initial(np.array([1.0 + 2.0j]))
    assert dr0[0] == -2.0


# ------------------------------------------------------ remainder equation

def test_remainder_residual_zero():
    assert remainder_residual(_jet(), 0.0, 0.0, _spec(), 0.0) == 0.0


def test_remainder_reduces_to_full_equation_without_envelope():
    spec = _spec(eps=1.0, lam=1.0)
    c = 0.9
    res = remainder_residual(_jet(v=c), 0.0, 0.0, spec, 0.3)
    assert np.isclose(res, c + c ** 3)


def test_remainder_forcing_at_unit_envelope():
    spec = _spec(eps=1.0, lam=1.0)
    res = remainder_residual(_jet(), 1.0, 0.0, spec, 0.0)
    assert np.isclose(res, 2.0 * spec.lam)


def test_decomposition_consistency_plane_wave():
    # with an exact envelope plane wave and r = 0, the full-equation residual
    # of the reconstruction equals the remainder forcing at that point
    eps, k, lam, a = 0.45, 1.1, 1.0, 0.5
    spec = _spec(eps=eps, lam=lam)
    w = _envelope_roots(eps, k, lam, a)[0]
    Om = 1.0 / eps ** 2 - w
    rng = np.random.default_rng(3)
    for _ in range(10):
        x, t = rng.uniform(-3, 3), rng.uniform(0, 2)
        u = 2.0 * a * np.cos(k * x + Om * t)
        jet = _jet(v=u, dtt=-Om ** 2 * u, dxx=-k ** 2 * u)
        lhs = nkge_residual(jet, spec)
        ph = k * x - w * t
        rhs = coupling_term(a * np.cos(ph), a * np.sin(ph), 0.0, t, spec)
        assert abs(lhs - rhs) < 1e-8


def test_linear_regime_oracle():
    # lam = 0: reconstruction of the exact linear envelope solves the full
    # equation pointwise
    eps, k, a = 0.6, 0.8, 0.9
    spec = _spec(eps=eps, lam=0.0)
    w = _envelope_roots(eps, k, 0.0, a)[0]
    Om = 1.0 / eps ** 2 - w
    rng = np.random.default_rng(4)
    for _ in range(10):
        x, t = rng.uniform(-3, 3), rng.uniform(0, 2)
        u = 2.0 * a * np.cos(k * x + Om * t)
        jet = _jet(v=u, dtt=-Om ** 2 * u, dxx=-k ** 2 * u)
        assert abs(nkge_residual(jet, spec)) <= 1e-8


# ------------------------------------------------------- reconstruction

def _grid_field(vals, times, grid):
    return Field(vals, times, grid)


def test_wkb_reconstruct_real_constant():
    grid = Grid((8,), ((-1.0, 1.0),))
    times = np.array([0.0, 0.5, 1.0])
    z = Field(np.ones((3, 8), dtype=complex), times, grid)
    u = wkb_reconstruct(z, None, eps=1.0)
    expected = 2.0 * np.cos(times)
    assert np.allclose(u.values, expected[:, None])


def test_wkb_reconstruct_imaginary_constant():
    grid = Grid((8,), ((-1.0, 1.0),))
    times = np.array([0.3])
    z = Field(np.full((1, 8), 1j), times, grid)
    u = wkb_reconstruct(z, None, eps=0.5)
    assert np.allclose(u.values, -2.0 * np.sin(0.3 / 0.25))


def test_wkb_reconstruct_remainder_passthrough():
    grid = Grid((8,), ((-1.0, 1.0),))
    times = np.array([0.2, 0.9])
    r_vals = np.random.default_rng(5).normal(size=(2, 8))
    z = Field(np.zeros((2, 8), dtype=complex), times, grid)
    r = Field(r_vals, times, grid)
    u = wkb_reconstruct(z, r, eps=0.7)
    assert np.array_equal(u.values, r_vals)


def test_wkb_reconstruct_identity_property():
    # matches the hand-expanded form to near machine precision
    grid = Grid((32,), ((-4.0, 4.0),))
    times = np.linspace(0.0, 2.0, 9)
    rng = np.random.default_rng(6)
    zv = rng.normal(size=(9, 32)) + 1j * rng.normal(size=(9, 32))
    rv = rng.normal(size=(9, 32))
    eps = 0.31
    u = wkb_reconstruct(Field(zv, times, grid), Field(rv, times, grid), eps)
    ph = times[:, None] / eps ** 2
    expected = 2.0 * (zv.real * np.cos(ph) - zv.imag * np.sin(ph)) + rv
    assert np.max(np.abs(u.values - expected)) < 1e-14


def test_wkb_grid_mismatch_is_structural():
    grid = Grid((8,), ((-1.0, 1.0),))
    other = Grid((8,), ((-2.0, 2.0),))
    times = np.array([0.1])
    z = Field(np.zeros((1, 8), dtype=complex), times, grid)
    r = Field(np.zeros((1, 8)), times, other)
    with pytest.raises(StructuralError):
        wkb_reconstruct(z, r, eps=1.0)


# ------------------------------------------------------------- selection

def _criterion_fields():
    grid = Grid((16,), ((-1.0, 1.0),))
    times = np.array([0.0, 1.0])
    truth = Field(np.random.default_rng(7).normal(size=(2, 16)), times, grid)
    return grid, times, truth


def test_error_criterion_prefers_exact_remainder():
    grid, times, truth = _criterion_fields()
    u_amp = Field(truth.values + 0.5, times, grid)
    u_full = Field(truth.values.copy(), times, grid)
    sel, tag = error_criterion(u_amp, u_full, truth)
    assert tag == "with-remainder" and sel is u_full


def test_error_criterion_prefers_exact_amplitude():
    grid, times, truth = _criterion_fields()
    u_amp = Field(truth.values.copy(), times, grid)
    u_full = Field(truth.values + 0.2, times, grid)
    sel, tag = error_criterion(u_amp, u_full, truth)
    assert tag == "amplitude-only" and sel is u_amp


def test_error_criterion_tie_goes_to_amplitude():
    grid, times, truth = _criterion_fields()
    u_amp = Field(truth.values + 0.1, times, grid)
    u_full = Field(truth.values - 0.1, times, grid)
    _, tag = error_criterion(u_amp, u_full, truth)
    assert tag == "amplitude-only"


def test_error_criterion_matches_min_error():
    grid, times, truth = _criterion_fields()
    rng = np.random.default_rng(8)
    u_amp = Field(truth.values + 0.3 * rng.normal(size=truth.values.shape),
                  times, grid)
    u_full = Field(truth.values + 0.3 * rng.normal(size=truth.values.shape),
                   times, grid)
    sel, _ = error_criterion(u_amp, u_full, truth)
    errs = [np.linalg.norm(f.values - truth.values) for f in (u_amp, u_full)]
    assert np.isclose(np.linalg.norm(sel.values - truth.values), min(errs))


# --------------------------------------------------------------- metrics

def test_metrics_zero_for_exact_prediction():
    truth = np.random.default_rng(9).normal(size=(4, 8))
    assert rmae(truth, truth) == 0.0
    assert rrmse(truth, truth) == 0.0


def test_metrics_doubling():
    truth = np.abs(np.random.default_rng(10).normal(size=64)) + 0.1
    assert np.isclose(rmae(2 * truth, truth), 1.0)
    assert np.isclose(rrmse(2 * truth, truth), 1.0)


def test_metrics_match_brute_force():
    rng = np.random.default_rng(11)
    truth = rng.normal(size=100)
    pred = truth + 0.37
    # independent straightforward re-implementation of the printed formulas
    e = np.abs(pred - truth)
    brute_rmae = np.sqrt(e.sum() / np.abs(truth).sum())
    brute_rrmse = np.sqrt((e ** 2).sum() / (truth ** 2).sum())
    assert abs(rmae(pred, truth) - brute_rmae) <= 1e-14
    assert abs(rrmse(pred, truth) - brute_rrmse) <= 1e-14
    assert np.isclose(rmae(pred, truth, outer_sqrt=False), brute_rmae ** 2)


def test_metric_scale_covariance():
    truth = np.random.default_rng(12).normal(size=50)
    for c in (0.5, 1.7, -2.0):
        assert np.isclose(rrmse(c * truth, truth), abs(c - 1.0))


def test_metric_zero_truth_raises():
    with pytest.raises(MetricError):
        rmae(np.ones(4), np.zeros(4))
    with pytest.raises(MetricError):
        rrmse(np.ones(4), np.zeros(4))


# ---------------------------------------------------------- loss assembly

def test_assemble_loss_all_zero():
    w = LossWeights()
    loss = assemble_loss_stage1([np.zeros(3)], [np.zeros(2)], [np.zeros(2)], w)
    assert float(loss) == 0.0


def test_assemble_loss_residual_only_weights():
    w = LossWeights(w_res=1.0, w_ic=0.0, w_bd=0.0)
    res = [np.array([1.0, 2.0, 3.0])]
    ic = [np.array([5.0])]
    bd = [np.array([7.0])]
    loss = assemble_loss_stage1(res, ic, bd, w)
    assert np.isclose(float(loss), np.mean([1.0, 4.0, 9.0]))


def test_assemble_loss_hand_summed_three_points():
    w = LossWeights(w_res=2.0, w_ic=0.5, w_bd=1.5)
    r1 = np.array([0.1, -0.2, 0.3])
    r2 = np.array([1.0, 0.0, -1.0])
    ic = [np.array([0.5, -0.5])]
    bd = [np.array([0.25])]
    expected = (2.0 * np.mean(r1 ** 2 + r2 ** 2)
                + 0.5 * np.mean(ic[0] ** 2)
                + 1.5 * np.mean(bd[0] ** 2))
    loss = assemble_loss_stage1([r1, r2], ic, bd, w)
    assert np.isclose(float(loss), expected, rtol=1e-14)
    loss2 = assemble_loss_stage2([r1, r2], ic, bd, w)
    assert float(loss2) == float(loss)


def test_mean_square_sum_with_weights():
    terms = [np.array([1.0, 2.0])]
    weights = np.array([0.5, 2.0])
    out = mean_square_sum(terms, weights)
    assert np.isclose(float(out), np.mean([0.5, 8.0]))


def test_problem_validation():
    with pytest.raises(StructuralError):
        make_problem("gauss-sech", eps=0.0)
    with pytest.raises(StructuralError):
        make_problem("gauss-sech", eps=1.5)
    with pytest.raises(StructuralError):
        make_problem("no-such-data", eps=0.5)

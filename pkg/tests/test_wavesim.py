import math
import warnings

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from hypothesis import given, settings
from hypothesis import strategies as st

from cemgmsdg.assembly import FineOperators, l2_project, load_vector
from cemgmsdg.cem import build_multiscale_basis
from cemgmsdg.grid import build_hierarchy
from cemgmsdg.medium import constant_field
from cemgmsdg.spectral import build_spectral_basis
from cemgmsdg.wavesim import (SourceLoad, SourceSpec, StabilityWarning, WaveState,
                              discrete_energy, downscale, estimate_cfl, init_coarse, init_fine,
                              ricker, ricker_time, run_coarse, run_fine, step_coarse, step_fine)


@pytest.fixture(scope="module")
def coarse(small_setup):
    mesh, field, ops = small_setup
    ts = build_spectral_basis(mesh, field, ops.M, 4)
    return mesh, ops, build_multiscale_basis(mesh, ops.A, ts, 1)


def _bump(x, y):
    return np.exp(-((x - 0.4) ** 2 + (y - 0.6) ** 2) / 0.02)


def test_ricker_formula_values():
    f0, h = 20.0, 1.0 / 256
    t, x, y = 0.12, 0.5 + 3 * h, 0.5 - 2 * h
    s = t - 2 / f0
    r2 = 13 * h * h
    expect = s / (4 * h * h) * math.exp(-math.pi ** 2 * f0 ** 2 * s * s) * math.exp(r2 / (4 * h * h))
    assert ricker(t, x, y) == pytest.approx(expect, rel=1e-13)
    neg = ricker(t, x, y, spatial_sign="negative")
    assert neg == pytest.approx(expect * math.exp(-2 * r2 / (4 * h * h)), rel=1e-13)
    assert ricker(2 / f0, 0.5, 0.5) == 0.0
    assert ricker_time(0.1 + 0.01, 20.0) == -ricker_time(0.1 - 0.01, 20.0)


@pytest.mark.parametrize("kwargs", [dict(kind="gauss"), dict(f0=0.0), dict(h_src=-1.0),
                                    dict(spatial_sign="up"), dict(kind="callback")])
def test_source_spec_validation(kwargs):
    with pytest.raises(ValueError):
        SourceSpec(**kwargs)


def test_source_load_is_separable():
    mesh = build_hierarchy(2, 4)
    spec = SourceSpec(h_src=1 / 32, spatial_sign="negative", center=(0.4, 0.55))
    load = SourceLoad(mesh, spec)
    for t in (0.0, 0.07, 0.1, 0.13):
        direct = load_vector(mesh, lambda x, y: ricker(t, x, y, spec.f0, spec.h_src, spec.center,
                                                       "negative"))
        np.testing.assert_allclose(load(t), direct, rtol=1e-12, atol=1e-12 * abs(direct).max())
    assert SourceLoad(mesh, SourceSpec(kind="none")).is_zero
    cb = SourceLoad(mesh, SourceSpec(kind="callback", callback=lambda t, x, y: t + 0 * x))
    assert cb(2.0).sum() == pytest.approx(2.0)


def test_wave_state():
    s = WaveState("coarse", np.zeros(2), np.ones(2), 3, 0.01, 0.2)
    assert s.N_T == 20 and s.t == pytest.approx(0.03)
    r = s.reversed()
    assert np.all(r.U_prev == 1) and np.all(r.U_curr == 0) and r.n == 3


def test_coarse_energy_conservation(coarse):
    mesh, ops, basis = coarse
    cfl = estimate_cfl(basis.coarse_stiffness)
    tau = 0.5 * cfl.tau_max
    u0 = l2_project(mesh, _bump, solver=ops.mass_solver)
    U0, U1 = init_coarse(u0, 0 * u0, 0 * u0, basis, ops.A, ops.M, tau)
    state, diag = run_coarse(basis, U0, U1, tau, 400, energy=True, tau_max=cfl.tau_max)
    assert len(diag.E_half) == 401
    assert diag.max_relative_drift() < 1e-11
    assert diag.rho == pytest.approx(0.5)
    # the running diagnostic agrees with the standalone formula
    assert diag.E_half[-1] == pytest.approx(
        discrete_energy(state.U_prev, state.U_curr, tau, basis.coarse_stiffness), rel=1e-10)


def test_fine_energy_conservation(small_setup):
    mesh, _, ops = small_setup
    cfl = estimate_cfl(ops.A, ops.mass_solver, ops.M)
    tau = 0.5 * cfl.tau_max
    u0 = l2_project(mesh, _bump, solver=ops.mass_solver)
    U0, U1 = init_fine(u0, 0 * u0, 0 * u0, ops.A, ops.mass_solver, tau)
    state, diag = run_fine(ops.A, ops.mass_solver, ops.M, U0, U1, tau, 300, energy=True)
    assert diag.max_relative_drift() < 1e-10
    assert diag.E_half[-1] == pytest.approx(
        discrete_energy(state.U_prev, state.U_curr, tau, ops.A, ops.M), rel=1e-10)


def test_time_reversibility(coarse):
    mesh, ops, basis = coarse
    tau = 0.5 * estimate_cfl(basis.coarse_stiffness).tau_max
    rng = np.random.default_rng(0)
    U0, U1 = rng.standard_normal((2, basis.n_coarse))
    fwd, _ = run_coarse(basis, U0, U1, tau, 200)
    back, _ = run_coarse(basis, fwd.U_curr, fwd.U_prev, tau, 200)
    scale = np.linalg.norm(np.concatenate([U0, U1]))
    err = np.linalg.norm(np.concatenate([back.U_curr - U0, back.U_prev - U1]))
    assert err / scale < 1e-9

    tau_f = 0.5 * estimate_cfl(ops.A, ops.mass_solver, ops.M).tau_max
    W0, W1 = rng.standard_normal((2, mesh.n_dofs))
    fwd, _ = run_fine(ops.A, ops.mass_solver, ops.M, W0, W1, tau_f, 100)
    back, _ = run_fine(ops.A, ops.mass_solver, ops.M, fwd.U_curr, fwd.U_prev, tau_f, 100)
    assert np.linalg.norm(back.U_curr - W0) / np.linalg.norm(W0) < 1e-9


def test_single_steps_match_runner(coarse):
    mesh, ops, basis = coarse
    spec = SourceSpec(h_src=1 / 16, spatial_sign="negative")
    load = SourceLoad(mesh, spec)
    tau = 1e-3
    U0, U1 = init_coarse(np.zeros(mesh.n_dofs), np.zeros(mesh.n_dofs), load(0.0), basis, ops.A,
                         ops.M, tau)
    st_ = WaveState("coarse", U0, U1, 1, tau, 0.1)
    for _ in range(30):
        st_ = step_coarse(st_, basis, load(st_.t))
    ref, _ = run_coarse(basis, U0, U1, tau, 30, load)
    np.testing.assert_allclose(st_.U_curr, ref.U_curr, rtol=1e-12, atol=1e-14)
    with pytest.raises(ValueError):
        step_fine(st_, ops.A, ops.mass_solver)

    W0, W1 = init_fine(np.zeros(mesh.n_dofs), np.zeros(mesh.n_dofs), load(0.0), ops.A,
                       ops.mass_solver, tau)
    sf = WaveState("fine", W0, W1, 1, tau, 0.1)
    for _ in range(10):
        sf = step_fine(sf, ops.A, ops.mass_solver, load(sf.t))
    rf, _ = run_fine(ops.A, ops.mass_solver, ops.M, W0, W1, tau, 10, load)
    np.testing.assert_allclose(sf.U_curr, rf.U_curr, rtol=1e-12, atol=1e-14)
    with pytest.raises(ValueError):
        step_coarse(sf, basis)


def test_initialisation_options(coarse):
    mesh, ops, basis = coarse
    tau = 1e-3
    z = np.zeros(mesh.n_dofs)
    U0, U1 = init_coarse(z, z, z, basis, ops.A, ops.M, tau)
    assert not U0.any() and not U1.any()
    u0 = l2_project(mesh, _bump, solver=ops.mass_solver)
    v0 = l2_project(mesh, lambda x, y: x * (1 - x), solver=ops.mass_solver)
    a = init_coarse(u0, v0, z, basis, ops.A, ops.M, tau)
    np.testing.assert_allclose(a[0], basis.Phi.T @ (ops.M @ u0))
    b = init_coarse(u0, v0, z, basis, ops.A, ops.M, tau, stiffness="fine")
    c = init_coarse(u0, v0, z, basis, ops.A, ops.M, tau, init="l2-gram")
    # the variants differ at the size of the tau^2 correction or the projection gap
    assert np.abs(a[1] - b[1]).max() < tau * tau * np.abs(basis.coarse_stiffness @ a[0]).max()
    assert np.linalg.norm(downscale(basis, c[0]) - u0) <= np.linalg.norm(downscale(basis, a[0]) - u0) * 1.5
    with pytest.raises(ValueError):
        init_coarse(u0, v0, z, basis, ops.A, ops.M, tau, init="exact")
    with pytest.raises(ValueError):
        init_coarse(u0, v0, z, basis, ops.A, ops.M, tau, stiffness="none")


def test_cfl_matches_eigensolver(coarse):
    mesh, ops, basis = coarse
    K = basis.coarse_stiffness
    lam = spla.eigsh(K, k=1, which="LA", return_eigenvectors=False)[0]
    est = estimate_cfl(K)
    assert est.lambda_max == pytest.approx(np.linalg.eigvalsh(K.toarray())[-1], rel=1e-10)
    assert est.converged and est.method == "lanczos"
    assert est.lambda_max == pytest.approx(lam, rel=1e-10)
    assert est.tau_max == pytest.approx(2 / math.sqrt(lam), rel=1e-6)
    lam_f = spla.eigsh(ops.A, k=1, M=ops.M, which="LA", return_eigenvectors=False)[0]
    assert estimate_cfl(ops.A, ops.mass_solver, ops.M).lambda_max == pytest.approx(lam_f, rel=1e-6)


def test_cfl_gershgorin_fallback():
    # a dense random spectrum keeps Lanczos from converging in two restarts
    d = np.random.default_rng(0).uniform(0.0, 1.0, 3000)
    K = sp.diags(d).tocsr()
    with pytest.warns(RuntimeWarning, match="Gershgorin"):
        est = estimate_cfl(K, tol=1e-14, maxiter=2)
    assert not est.converged and est.method == "gershgorin"
    assert est.lambda_max >= d.max()


def test_unstable_step_warns_and_grows(coarse):
    mesh, ops, basis = coarse
    cfl = estimate_cfl(basis.coarse_stiffness)
    tau = 1.05 * cfl.tau_max
    U0 = np.random.default_rng(3).standard_normal(basis.n_coarse)
    with pytest.warns(StabilityWarning):
        _, diag = run_coarse(basis, U0, U0, tau, 500, energy=True, tau_max=cfl.tau_max)
    assert diag.growth() > 10


@settings(max_examples=10, deadline=None)
@given(st.floats(0.05, 0.9), st.integers(0, 1000))
def test_energy_conserved_below_cfl(frac, seed):
    mesh = build_hierarchy(2, 3)
    ops = FineOperators(mesh, constant_field(mesh, 2.0), check_coercivity=False)
    cfl = estimate_cfl(ops.A, ops.mass_solver, ops.M)
    rng = np.random.default_rng(seed)
    W0, W1 = rng.standard_normal((2, mesh.n_dofs))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        _, diag = run_fine(ops.A, ops.mass_solver, ops.M, W0, W1, frac * cfl.tau_max, 200,
                           energy=True)
    assert diag.max_relative_drift() < 1e-9

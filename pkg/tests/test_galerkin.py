import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from fplab.drift import LinearGrowthDrift, NavierStokesDrift, ZeroDrift, fit_coercivity_constant
from fplab.errors import NumericalBlowUp
from fplab.galerkin import (SolverConfig, energy_inequality_monitor, fit_budget_constant, fit_energy_constant,
                            gronwall_envelope, integrate_v, moment_scan, noise_norms, overlapping, phi1,
                            vnorm_budget_check)
from fplab.ou import OUParams, OUPathEnsemble, observed_order, sample_ensemble
from fplab.spectrum import Spectrum, build_torus_basis


def zero_noise(s, T=1.0, dt=0.01, M=1):
    p = OUParams(s, T, dt, M=M)
    J = p.n_steps
    return OUPathEnsemble(p.grid, np.zeros((M, J + 1, s.n_z)), p, np.arange(M), np.zeros((M, J, s.n_z)))


def test_phi1_series_branch():
    x = np.array([0.0, 1e-10, 1e-3, 1.0, 50.0])
    ref = np.array([1.0] + [math.expm1(v) / v for v in x[1:]])
    np.testing.assert_allclose(phi1(x), ref, rtol=1e-14)


def test_linear_decay_exact():
    s = Spectrum([1.0, 4.0, 9.0], [0.0] * 3, 0.0, 3, 3)
    ens = zero_noise(s)
    v0 = np.array([1.0, -2.0, 0.5])
    tr = integrate_v(v0, ens, ZeroDrift(), SolverConfig(3))
    exact = np.exp(-np.outer(ens.grid, s.alphas_sq)) * v0
    np.testing.assert_allclose(tr.V[0], exact, atol=1e-12)


def test_forced_single_mode_matches_variation_of_constants():
    # f = 0, Z a known smooth path: V' = -al V + lam Z
    al, lam = 2.0, 3.0
    s = Spectrum([al], [0.0], lam, 1, 1)
    T = 1.0
    exact = integrate.quad(lambda r: math.exp(-al * (T - r)) * lam * math.sin(4 * r), 0, T, epsabs=1e-13)[0]
    hs, errs = [0.04, 0.02, 0.01, 0.005], []
    for dt in hs:
        p = OUParams(s, T, dt)
        z = np.sin(4 * p.grid)
        ens = OUPathEnsemble(p.grid, z[None, :, None], p, np.arange(1), None)
        tr = integrate_v(np.zeros(1), ens, ZeroDrift(), SolverConfig(1, lam, forcing="hold"))
        errs.append(abs(tr.V[0, -1, 0] - exact))
    # Z is held at the left node over each step, so the scheme is first order
    assert errs[-1] < 0.01
    assert observed_order(hs, errs) >= 0.9


def _ns_setup(n_modes=4, M=16, lam=0.0, seed=1, dt=0.02):
    b = build_torus_basis(2, 2)
    s = Spectrum.torus(b, 1.0, lam, n_modes, n_modes)
    ens = sample_ensemble(OUParams(s, 1.0, dt, seed=seed, M=M), with_convolution=True)
    return b, s, ens, NavierStokesDrift(b, n_modes, n_modes)


def test_ns_step_halving_order():
    b, s, ens, model = _ns_setup(n_modes=12, M=8)
    v0 = 2.0 * np.random.default_rng(0).normal(size=(8, 12))
    ref = integrate_v(v0, ens, model, SolverConfig(12, 0.0, refine=64)).V[:, -1]
    hs, errs = [], []
    for r in (1, 2, 4, 8):
        v = integrate_v(v0, ens, model, SolverConfig(12, 0.0, refine=r)).V[:, -1]
        hs.append(ens.params.dt / r)
        errs.append(np.abs(v - ref).max())
    assert observed_order(hs, errs) >= 0.9
    rk = integrate_v(v0, ens, model, SolverConfig(12, 0.0, refine=1, method="rk4")).V[:, -1]
    assert np.abs(rk - ref).max() < errs[0]


def test_solver_guards():
    b, s, ens, model = _ns_setup(M=2)
    with pytest.raises(ValueError):
        integrate_v(np.zeros(4), ens, model, SolverConfig(4, lam=1.0))
    with pytest.raises(ValueError):
        integrate_v(np.zeros(8), ens, model, SolverConfig(8))
    boom = LinearGrowthDrift(lambda x, t: 1e6 * np.exp(np.minimum(np.abs(x), 700)), 1.0)
    with pytest.raises(NumericalBlowUp) as info:
        integrate_v(np.ones(4), ens, boom, SolverConfig(4, ceiling=1e3))
    assert info.value.time is not None
    tr = integrate_v(np.ones(4), ens, boom, SolverConfig(4, ceiling=1e3, on_blowup="mask"))
    assert tr.failed.all() and np.isnan(tr.V[:, -1]).all()


def test_adaptive_refinement_tracks_reference():
    b, s, ens, model = _ns_setup(n_modes=12, M=4)
    v0 = np.full(12, 1.5)
    ref = integrate_v(v0, ens, model, SolverConfig(12, refine=64)).V[:, -1]
    ad = integrate_v(v0, ens, model, SolverConfig(12, adaptive=True, tol=1e-5)).V[:, -1]
    plain = integrate_v(v0, ens, model, SolverConfig(12)).V[:, -1]
    assert np.abs(ad - ref).max() < np.abs(plain - ref).max()


def test_energy_monitor_zero_case():
    s = Spectrum([1.0, 4.0], [0.0, 0.0], 0.0, 2, 2)
    ens = zero_noise(s)
    tr = integrate_v(np.array([1.0, 1.0]), ens, ZeroDrift(), SolverConfig(2))
    d = np.diff(tr.diagnostics["h_norm"] ** 2, axis=-1)
    assert np.all(d <= 0)
    assert np.all(energy_inequality_monitor(tr, ens, ZeroDrift(), 0.0) >= -1e-6)


def test_energy_monitor_ns_and_refinement():
    b, s, ens, model = _ns_setup(n_modes=12, M=32, lam=2.0, dt=0.02)
    v0 = np.random.default_rng(3).normal(size=(32, 12))
    cfg = SolverConfig(12, 2.0)
    tr = integrate_v(v0, ens, model, cfg)
    C = fit_energy_constant(tr, ens, model)
    m = energy_inequality_monitor(tr, ens, model, C)
    assert m.min() >= -ens.params.dt
    viol = []
    for dt in (0.04, 0.02, 0.01):
        e = sample_ensemble(OUParams(s, 1.0, dt, seed=1, M=32), with_convolution=True)
        t = integrate_v(v0, e, model, cfg)
        viol.append(int(np.sum(energy_inequality_monitor(t, e, model, 0.5 * C) < 0)))
    assert viol[-1] <= viol[0]


def test_gronwall_envelope():
    s = Spectrum([1.0, 4.0], [0.0, 0.0], 0.0, 2, 2)
    ens = zero_noise(s)
    v0 = np.array([1.0, -1.0])
    for scale in (1.0, 10.0):
        tr = integrate_v(scale * v0, ens, ZeroDrift(), SolverConfig(2))
        g = gronwall_envelope(tr, ens, 1.0, 0.0, 2.0)
        assert g["dominated_all"]
        assert np.all(np.exp(g["log_envelope"]) >= scale * math.sqrt(2) - 1e-12)
    b, s, ens, model = _ns_setup(n_modes=12, M=32, lam=2.0)
    tr = integrate_v(np.random.default_rng(3).normal(size=(32, 12)), ens, model, SolverConfig(12, 2.0))
    Cbar = fit_energy_constant(tr, ens, model)
    assert gronwall_envelope(tr, ens, Cbar, Cbar, model.k0)["dominated_all"]


def test_vnorm_budget():
    s = Spectrum([1.0, 4.0], [0.0, 0.0], 0.0, 2, 2)
    ens = zero_noise(s, T=1.0, dt=0.001)
    v0 = np.array([0.6, 0.8])
    tr = integrate_v(v0, ens, ZeroDrift(), SolverConfig(2))
    lhs = integrate.trapezoid(tr.diagnostics["v_norm_sq"][0], dx=0.001)
    exact = float(np.sum(v0**2 * -np.expm1(-2 * s.alphas_sq * 1.0) / 2))
    assert abs(lhs - exact) < 1e-5
    assert np.all(vnorm_budget_check(tr, ens, 1.0, 2.0) >= 0)
    tr0 = integrate_v(np.zeros(2), ens, ZeroDrift(), SolverConfig(2))
    np.testing.assert_allclose(vnorm_budget_check(tr0, ens, 0.7, 2.0), 0.7)
    b, s, ens, model = _ns_setup(n_modes=12, M=32, lam=1.0)
    tr = integrate_v(np.random.default_rng(4).normal(size=(32, 12)), ens, model, SolverConfig(12, 1.0))
    C = fit_budget_constant(tr, ens, model.k0)
    assert np.all(vnorm_budget_check(tr, ens, C, model.k0) >= 0)


def test_moment_scan_trivial_and_jensen():
    s = Spectrum([1.0, 4.0, 9.0, 16.0], [0.0] * 4, 0.0, 4, 4)
    p = OUParams(s, 0.5, 0.05, M=10)
    rows = moment_scan([2, 4], 2.5, p, lambda n: ZeroDrift(), lambda n: np.zeros(n), SolverConfig(4))
    assert all(r.estimate == 0.0 for r in rows)
    b, s, ens, model = _ns_setup(n_modes=12, M=64)
    v0 = lambda n: np.ones(n)
    mk = lambda n: NavierStokesDrift(b, s.n_z, n)
    r25 = moment_scan([4, 12], 2.5, ens.params, mk, v0, SolverConfig(12), ens=ens)
    r3 = moment_scan([4, 12], 3.0, ens.params, mk, v0, SolverConfig(12), ens=ens)
    for a, c in zip(r25, r3):
        assert c.norm_p >= a.norm_p - 1e-12
    assert overlapping(r25[:1])


@settings(max_examples=20, deadline=None)
@given(al=st.floats(0.1, 100), v=st.floats(-10, 10), dt=st.floats(1e-3, 0.5))
def test_linear_decay_property(al, v, dt):
    s = Spectrum([al], [0.0], 0.0, 1, 1)
    ens = zero_noise(s, T=1.0, dt=dt)
    tr = integrate_v(np.array([v]), ens, ZeroDrift(), SolverConfig(1))
    np.testing.assert_allclose(tr.V[0, :, 0], v * np.exp(-al * ens.grid), rtol=1e-12, atol=1e-300)

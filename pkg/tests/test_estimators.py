import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from porofix.estimators import (
    EstimatorBreakdown,
    EstimatorContext,
    IntervalData,
    IntervalEstimate,
    aggregate_components,
    aggregate_total,
    interval_estimates,
    jnl_weights,
)
from porofix.postprocess import lagrange_p2_values
from porofix.spaces import FESpace, MaterialData, interpolate_flux, interpolate_stress
from conftest import perturbed_square


def jnl_closed(times, n, l):
    t = times
    if l == n:
        return 2.0 * (np.cosh(t[n + 1] - t[n]) - 1.0)
    return (np.exp(t[n + 1]) - np.exp(t[n])) * (np.exp(-t[l]) - np.exp(-t[l + 1]))


def test_jnl_closed_form():
    times = np.array([0.0, 0.1, 0.35, 0.4, 1.0])
    J = jnl_weights(times)
    for n in range(4):
        for l in range(n + 1):
            assert J[n, l] == pytest.approx(jnl_closed(times, n, l), rel=1e-12, abs=1e-15)
        assert np.all(J[n, n + 1:] == 0)


def test_jnl_by_quadrature():
    times = np.array([0.0, 0.3, 0.5])
    J = jnl_weights(times)
    for n in range(2):
        for l in range(n + 1):
            q, _ = integrate.dblquad(lambda s, t: np.exp(t - s), times[n], times[n + 1], times[l], times[l + 1],
                                     epsabs=1e-14, epsrel=1e-13)
            assert J[n, l] == pytest.approx(q, rel=1e-12)


def test_jnl_no_overflow_late_times():
    J = jnl_weights(np.array([1000.0, 1000.5, 1001.0]))
    assert np.all(np.isfinite(J))
    assert J[1, 1] == pytest.approx(2 * (np.cosh(0.5) - 1), rel=1e-12)


def test_jnl_rejects_unsorted():
    with pytest.raises(ValueError):
        jnl_weights([0.0, 0.5, 0.5])


def make_interval(tau, **vals):
    base = dict(eta_P=0.0, eta_U=0.0, nc1_P=0.0, nc1_U=0.0, nc2_P=0.0, nc2_U=0.0,
                sp_P=0.0, sp_U=0.0, tm_P=0.0, tm_U=0.0, it_P=0.0, it_U=0.0)
    base.update(vals)
    return IntervalEstimate(tau=tau, **base)


def test_aggregation_one_interval():
    tau, mu = 0.2, 3.0
    iv = make_interval(tau, eta_P=0.7, eta_U=1.1, nc1_P=0.3, nc1_U=0.2, nc2_P=0.05, nc2_U=0.4,
                       sp_P=0.5, sp_U=0.6, tm_P=0.25, tm_U=0.15, it_P=0.01, it_U=0.02)
    bd = EstimatorBreakdown(np.array([0.0, tau]), [iv], ncf_P=0.09, ncf_U=0.08, mu=mu)
    J = 2 * (np.cosh(tau) - 1)
    out = aggregate_total(bd)
    # single interval: every sum collapses to one term
    eP = np.sqrt(0.5 * (0.7**2 + 2 * tau * 0.7**2 + 2 * J * 0.7**2))
    eU = np.sqrt(0.5 / mu * (1.1**2 + 2 * tau * 1.1**2 + 2 * J * 1.1**2))
    ncP = np.sqrt(0.3**2 + 0.05**2 + 4 * tau * 0.3**2 + 4 * J * 0.3**2 + 0.09**2)
    ncU = np.sqrt(0.2**2 + 0.4**2 + 4 * tau * 0.2**2 + 4 * J * 0.2**2 + 0.08**2)
    assert out["eta_P"] == pytest.approx(eP, rel=1e-12)
    assert out["eta_U"] == pytest.approx(eU, rel=1e-12)
    assert out["eta_NC_P"] == pytest.approx(ncP, rel=1e-12)
    assert out["eta_NC_U"] == pytest.approx(ncU, rel=1e-12)
    assert out["total"] == pytest.approx(eP + eU + ncP + ncU, rel=1e-12)
    comp = aggregate_components(bd, out)
    f = lambda x, L: np.sqrt(L / 2) * (x + np.sqrt(2 * tau * x**2) + np.sqrt(2 * J * x**2))
    assert comp["sp_P"] == pytest.approx(f(0.5, 1) + ncP, rel=1e-12)
    assert comp["sp_U"] == pytest.approx(f(0.6, 1 / mu) + ncU, rel=1e-12)
    assert comp["tm_U"] == pytest.approx(f(0.15, 1 / mu), rel=1e-12)
    assert comp["it_P"] == pytest.approx(f(0.01, 1), rel=1e-12)
    assert comp["total"] == pytest.approx(comp["sp"] + comp["tm"] + comp["it"], rel=1e-12)


def test_aggregation_two_intervals():
    t = np.array([0.0, 0.3, 0.8])
    t1, t2 = 0.3, 0.5
    a, b = 0.4, 0.9  # eta_P on the two intervals
    c, d = 0.2, 0.1  # nc1_P
    e, f = 0.03, 0.07  # nc2_P
    s1, s2 = 0.6, 0.35  # tm_P
    ivs = [make_interval(t1, eta_P=a, nc1_P=c, nc2_P=e, tm_P=s1),
           make_interval(t2, eta_P=b, nc1_P=d, nc2_P=f, tm_P=s2)]
    bd = EstimatorBreakdown(t, ivs, ncf_P=0.11, mu=2.0)
    J11 = jnl_closed(t, 0, 0)
    J21 = jnl_closed(t, 1, 0)
    J22 = jnl_closed(t, 1, 1)
    # sum_n sum_{l<=n} J_nl sum_{q<=l} x_q^2 expanded by hand
    jsum = lambda x1, x2: J11 * x1**2 + J21 * x1**2 + J22 * (x1**2 + x2**2)
    tsum = lambda x1, x2: t1 * x1**2 + t2 * (x1**2 + x2**2)
    out = aggregate_total(bd)
    eP = np.sqrt(0.5 * (a**2 + b**2 + 2 * tsum(a, b) + 2 * jsum(a, b)))
    ncP = np.sqrt(c**2 + d**2 + e**2 + f**2 + 4 * tsum(c, d) + 4 * jsum(c, d) + 0.11**2)
    assert out["eta_P"] == pytest.approx(eP, rel=1e-12)
    assert out["eta_NC_P"] == pytest.approx(ncP, rel=1e-12)
    assert out["eta_U"] == 0.0
    comp = aggregate_components(bd, out)
    tm = np.sqrt(0.5) * (np.sqrt(s1**2 + s2**2) + np.sqrt(2 * tsum(s1, s2)) + np.sqrt(2 * jsum(s1, s2)))
    assert comp["tm_P"] == pytest.approx(tm, rel=1e-12)
    assert comp["sp_P"] == pytest.approx(ncP, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=6), st.floats(0.1, 5.0))
def test_aggregation_homogeneous(taus, scale):
    # the global values scale linearly with the local ones
    t = np.r_[0.0, np.cumsum(taus)]
    rng = np.random.default_rng(len(taus))
    vals = rng.uniform(0, 1, size=(len(taus), 6))
    ivs = [make_interval(tau, eta_P=v[0], eta_U=v[1], nc1_P=v[2], sp_P=v[3], tm_U=v[4], it_P=v[5])
           for tau, v in zip(taus, vals)]
    ivs2 = [make_interval(tau, eta_P=scale * v[0], eta_U=scale * v[1], nc1_P=scale * v[2],
                          sp_P=scale * v[3], tm_U=scale * v[4], it_P=scale * v[5])
            for tau, v in zip(taus, vals)]
    a = aggregate_components(EstimatorBreakdown(t, ivs))
    b = aggregate_components(EstimatorBreakdown(t, ivs2))
    assert b["total"] == pytest.approx(scale * a["total"], rel=1e-10)


def consistent_interval(fe, mat, tau=0.1):
    # linear p and quadratic u: flux and total stress lie exactly in the discrete spaces
    q = lambda x, y: 1 + x - 0.5 * y
    ux = lambda x, y: 0.3 * x * x - 0.1 * x * y
    uy = lambda x, y: 0.2 * y * y + 0.4 * x * y
    pn = lagrange_p2_values(fe, q)
    un = np.stack([lagrange_p2_values(fe, ux), lagrange_p2_values(fe, uy)], axis=-1)

    def total(x, y):
        G = np.array([[0.6 * x - 0.1 * y, -0.1 * x], [0.4 * y, 0.4 * y + 0.4 * x]])
        eps = 0.5 * (G + np.swapaxes(G, 0, 1))
        div = G[0, 0] + G[1, 1]
        return 2 * mat.mu * eps + (mat.lam * div - mat.alpha * q(x, y)) * np.eye(2)[:, :, None]

    w = interpolate_flux(fe, lambda x, y: np.array([-np.ones_like(x), 0.5 * np.ones_like(x)]))
    s = interpolate_stress(fe, total)
    lam, mu, al = mat.lam, mat.mu, mat.alpha
    fx = -(1.6 * mu + lam - al)
    fy = -(0.7 * mu + 0.3 * lam + 0.5 * al)
    f = lambda x, y, t: np.array([np.full_like(x, fx), np.full_like(x, fy)])
    return IntervalData(tau, tau, w, s, w, s, (pn, pn), (un, un), (pn, pn), (un, un), None, f)


def test_estimators_vanish_for_consistent_fields():
    fe = FESpace(perturbed_square(3, seed=2))
    mat = MaterialData.uniform(fe.mesh.n_cells, 1.0, c0=1.0, alpha=0.5, mu=1.0, lam=2.0)
    d = consistent_interval(fe, mat)
    est = interval_estimates(EstimatorContext(fe, mat), d, final=True)
    for name in ("eta_P", "eta_U", "nc1_P", "nc1_U", "nc2_P", "nc2_U", "tm_P", "tm_U", "it_P", "it_U",
                 "sp_P", "sp_U"):
        assert getattr(est, name) <= 1e-11, name


def test_estimators_detect_perturbation():
    fe = FESpace(perturbed_square(3, seed=2))
    mat = MaterialData.uniform(fe.mesh.n_cells, 1.0, c0=1.0, alpha=0.5, mu=1.0, lam=2.0)
    d = consistent_interval(fe, mat)
    ctx = EstimatorContext(fe, mat)
    d.w_h = d.w_h + 0.01
    d.p_til = (d.p_til[0] + 0.01, d.p_til[1] + 0.01)
    est = interval_estimates(ctx, d)
    assert est.it_P > 0 and est.sp_P > 0 and est.nc1_P > 0
    assert est.eta_P <= 1e-11  # the reconstructed flux is untouched

"""Dense monolithic backward Euler solve of the coupled five-field system."""

import numpy as np

from porofix.coupling import Problem
from porofix.flow_step import cell_integrals
from porofix.spaces import (
    FESpace,
    cell_means,
    flux_divergence_matrix,
    flux_mass_matrix,
    stress_compliance_matrix,
    stress_divergence_matrix,
    stress_skew_matrix,
    stress_trace_matrix,
)


def pin(A, b, dofs):
    for d in dofs:
        A[d, :] = 0.0
        A[d, d] = 1.0
        b[d] = 0.0


def monolithic_solution(problem: Problem, taus):
    """Backward Euler for the fully coupled five-field system, all steps in one dense solve.

    Mass: (c0 + c_r) dp/dt + coupling d(tr sigma)/dt + div w = g.
    Constitutive: A sigma + coupling p I = grad u - rotation, with Darcy K^-1 w = -grad p.
    """
    fe = FESpace(problem.mesh)
    mat = problem.material
    M, E = problem.mesh.n_cells, problem.mesh.n_edges
    nS = fe.layout.n_stress
    Mk = flux_mass_matrix(fe, mat.K_inv).toarray()
    D = flux_divergence_matrix(fe).toarray()
    A = stress_compliance_matrix(fe, mat).toarray()
    Bu = stress_divergence_matrix(fe).toarray()
    Bz = stress_skew_matrix(fe).toarray()
    Tr = stress_trace_matrix(fe).toarray()
    area = problem.mesh.areas
    c_eff, cpl = mat.c0 + mat.c_r, mat.coupling
    fixed_w = [] if problem.fixed_flux is None else list(problem.fixed_flux)
    fixed_s = [] if problem.fixed_stress is None else list(problem.fixed_stress)
    n_step = E + M + nS + 2 * M + M
    off = lambda k: k * n_step
    sw, sp, ss = 0, E, E + M
    su, sz = E + M + nS, E + M + nS + 2 * M

    # initial mechanics state from p0
    p0 = cell_means(fe, problem.p0) if callable(problem.p0) else (
        np.zeros(M) if problem.p0 is None else np.asarray(problem.p0, float))
    K0 = np.zeros((nS + 3 * M, nS + 3 * M))
    K0[:nS, :nS] = A
    K0[:nS, nS:nS + 2 * M] = Bu.T
    K0[:nS, nS + 2 * M:] = Bz.T
    K0[nS:nS + 2 * M, :nS] = Bu
    K0[nS + 2 * M:, :nS] = Bz
    b0 = np.zeros(nS + 3 * M)
    b0[:nS] = -cpl * Tr.T @ p0
    b0[nS:nS + 2 * M] = -cell_integrals(fe, problem.f, 0.0, ncomp=2).ravel()
    pin(K0, b0, fixed_s)
    sigma0 = np.linalg.solve(K0, b0)[:nS]

    N = len(taus)
    G = np.zeros((N * n_step, N * n_step))
    rhs = np.zeros(N * n_step)
    t = 0.0
    for k, tau in enumerate(taus):
        t += tau
        o = off(k)
        # Darcy
        G[o + sw:o + sp, o + sw:o + sp] = Mk
        G[o + sw:o + sp, o + sp:o + ss] = -D.T
        # mass balance
        r = slice(o + sp, o + ss)
        G[r, o + sw:o + sp] = D
        G[r, o + sp:o + ss] = np.diag(c_eff * area / tau)
        G[r, o + ss:o + su] = cpl * Tr / tau
        rhs[r] = cell_integrals(fe, problem.g, t)
        if k == 0:
            rhs[r] += c_eff * area / tau * p0 + cpl * Tr @ sigma0 / tau
        else:
            q = off(k - 1)
            G[r, q + sp:q + ss] = -np.diag(c_eff * area / tau)
            G[r, q + ss:q + su] = -cpl * Tr / tau
        # constitutive law and equilibrium
        r = slice(o + ss, o + su)
        G[r, o + ss:o + su] = A
        G[r, o + sp:o + ss] = cpl * Tr.T
        G[r, o + su:o + sz] = Bu.T
        G[r, o + sz:o + n_step] = Bz.T
        G[o + su:o + sz, o + ss:o + su] = Bu
        rhs[o + su:o + sz] = -cell_integrals(fe, problem.f, t, ncomp=2).ravel()
        G[o + sz:o + n_step, o + ss:o + su] = Bz
        pin_rows = [o + sw + e for e in fixed_w] + [o + ss + d for d in fixed_s]
        pin(G, rhs, pin_rows)
    x = np.linalg.solve(G, rhs)
    X = x.reshape(N, n_step)
    return {"w": X[:, sw:sp], "p": X[:, sp:ss], "sigma": X[:, ss:su], "u": X[:, su:sz], "zeta": X[:, sz:]}


def relerr(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)

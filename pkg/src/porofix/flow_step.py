"""Backward-Euler step of the fixed-stress stabilized mixed Darcy problem."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .saddle_solver import Factorization, FactorizationCache
from .spaces import (
    FESpace,
    MaterialData,
    RULE_DEG4,
    assemble_darcy_system,
    stress_trace_matrix,
)

SourceLike = Callable | np.ndarray | None


def cell_integrals(fe: FESpace, source: SourceLike, t: float, ncomp: int = 1) -> np.ndarray:
    """(f, 1)_K of a source given as a callable f(x, y, t), precomputed
    cell integrals, or None (zero)."""
    M = fe.mesh.n_cells
    shape = (M,) if ncomp == 1 else (M, ncomp)
    if source is None:
        return np.zeros(shape)
    if callable(source):
        x = fe.points(RULE_DEG4.bary)
        vals = np.asarray(source(x[..., 0], x[..., 1], t), dtype=float)
        wq = fe.weights(RULE_DEG4)
        if ncomp == 1:
            out = np.einsum("mq,mq->m", wq, np.broadcast_to(vals, wq.shape))
        else:
            vals = np.broadcast_to(vals, (ncomp,) + wq.shape)
            out = np.einsum("mq,cmq->mc", wq, vals)
    else:
        out = np.asarray(source, dtype=float).reshape(shape)
    if not np.all(np.isfinite(out)):
        raise ValueError("source evaluation produced non-finite values")
    return out


@dataclass
class FlowStepInput:
    p_prev: np.ndarray  # p^{k,n-1}
    p_lag: np.ndarray  # p^{k-1,n}
    p_lag_prev: np.ndarray  # p^{k-1,n-1}
    stress_rate: np.ndarray  # lagged time derivative of the stress (coefficients)
    source: SourceLike  # g, sampled at t
    t: float
    tau: float
    beta: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("time step must be positive")
        n = len(self.p_prev)
        if len(self.p_lag) != n or len(self.p_lag_prev) != n:
            raise ValueError("pressure inputs live on different meshes")


class FlowOperator:
    """Shared data for flow steps on one mesh: trace operator, fixed fluxes
    and factorizations cached by time step."""

    def __init__(self, fe: FESpace, material: MaterialData, beta: float,
                 fixed_flux: np.ndarray | None = None, cache: FactorizationCache | None = None):
        self.fe = fe
        self.material = material
        self.beta = float(beta)
        self.fixed_flux = np.asarray(fixed_flux if fixed_flux is not None else [], dtype=np.int64)
        self.trace = stress_trace_matrix(fe)
        self.cache = cache or FactorizationCache()

    def factorization(self, tau: float) -> Factorization:
        return self.cache.get(
            ("darcy", round(float(tau), 15), self.beta),
            lambda: assemble_darcy_system(self.fe, self.material, tau, self.beta, self.fixed_flux),
        )

    def rhs(self, inp: FlowStepInput) -> np.ndarray:
        fe, mat = self.fe, self.material
        area = fe.mesh.areas
        c = mat.c0 + mat.c_r + inp.beta
        g = cell_integrals(fe, inp.source, inp.t)
        mass = (
            g
            + (c / inp.tau) * area * inp.p_prev
            + (inp.beta / inp.tau) * area * (inp.p_lag - inp.p_lag_prev)
            - mat.coupling * (self.trace @ inp.stress_rate)
        )
        b = np.zeros(fe.layout.n_flux + fe.layout.n_pressure)
        b[fe.layout.n_flux:] = -mass
        b[self.fixed_flux] = 0.0
        return b

    def step(self, inp: FlowStepInput, factorization: Factorization | None = None):
        fac = factorization or self.factorization(inp.tau)
        return flow_time_step(inp, fac, self)


def flow_time_step(inp: FlowStepInput, factorization: Factorization, op: FlowOperator):
    """Solve one step; returns (w, p) coefficient vectors."""
    meta = factorization.system.meta
    if meta.get("kind") != "darcy":
        raise ValueError("factorization is not a Darcy system")
    if not np.isclose(meta["tau"], inp.tau, rtol=1e-12, atol=0) or not np.isclose(
        meta["beta"], inp.beta, rtol=1e-12, atol=1e-300
    ):
        raise ValueError(f"factorization built for tau={meta['tau']}, beta={meta['beta']};"
                         f" step needs tau={inp.tau}, beta={inp.beta}")
    if meta["n_cells"] != len(inp.p_prev):
        raise ValueError("factorization belongs to a different mesh")
    x = factorization.solve(op.rhs(inp))
    parts = factorization.system.split(x)
    return parts["w"].copy(), parts["p"].copy()


def multirate_flow_substeps(inputs: Sequence[FlowStepInput], factorization: Factorization,
                            op: FlowOperator):
    """Chain substeps inside one coarse mechanics step.

    Each input's ``p_prev`` is overwritten by the pressure of the previous
    substep (the first input keeps its own).
    """
    out = []
    prev = None
    for inp in inputs:
        if prev is not None:
            inp = FlowStepInput(prev, inp.p_lag, inp.p_lag_prev, inp.stress_rate,
                                inp.source, inp.t, inp.tau, inp.beta)
        w, p = flow_time_step(inp, factorization, op)
        out.append((w, p))
        prev = p
    return out


def mass_balance_residual(op: FlowOperator, inp: FlowStepInput, w: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Per-cell residual of the discrete mass balance row."""
    fe, mat = op.fe, op.material
    area = fe.mesh.areas
    g = cell_integrals(fe, inp.source, inp.t)
    c = mat.c0 + mat.c_r + inp.beta
    div = np.zeros(fe.mesh.n_cells)
    np.add.at(div, np.arange(fe.mesh.n_cells).repeat(3),
              (fe.mesh.cell_edge_sign * w[fe.layout.cell_edges]).ravel())
    return (g + (inp.beta / inp.tau) * area * (inp.p_lag - inp.p_lag_prev)
            - mat.coupling * (op.trace @ inp.stress_rate)
            - (c / inp.tau) * area * (p - inp.p_prev) - div)

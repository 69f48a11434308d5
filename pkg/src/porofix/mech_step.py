"""Mixed elasticity solve with weakly imposed stress symmetry and pressure load."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow_step import SourceLike, cell_integrals
from .saddle_solver import Factorization, FactorizationCache
from .spaces import (
    FESpace,
    MaterialData,
    assemble_elasticity_system,
    stress_divergence_matrix,
    stress_skew_matrix,
    stress_trace_matrix,
)


@dataclass
class MechStepInput:
    pressure: np.ndarray  # P0 pressure at the mechanics node
    force: SourceLike  # f(x, y, t) -> (2, ...) or cell integrals (M, 2)
    t: float


class MechOperator:
    def __init__(self, fe: FESpace, material: MaterialData,
                 fixed_stress: np.ndarray | None = None, cache: FactorizationCache | None = None):
        self.fe = fe
        self.material = material
        self.fixed_stress = np.asarray(fixed_stress if fixed_stress is not None else [], dtype=np.int64)
        self.trace = stress_trace_matrix(fe)
        self.cache = cache or FactorizationCache()

    def factorization(self) -> Factorization:
        return self.cache.get(
            ("elasticity",),
            lambda: assemble_elasticity_system(self.fe, self.material, self.fixed_stress),
        )

    def rhs(self, inp: MechStepInput) -> np.ndarray:
        lay = self.fe.layout
        nS, nU = lay.n_stress, lay.n_displacement
        b = np.zeros(nS + nU + lay.n_rotation)
        b[:nS] = -self.material.coupling * (self.trace.T @ np.asarray(inp.pressure, dtype=float))
        b[nS:nS + nU] = -cell_integrals(self.fe, inp.force, inp.t, ncomp=2).ravel()
        b[self.fixed_stress] = 0.0
        return b

    def step(self, inp: MechStepInput, factorization: Factorization | None = None):
        return mech_time_step(inp, factorization or self.factorization(), self)

    def sweep(self, pressures: np.ndarray, force: SourceLike, times) -> tuple:
        """Independent solves at several time nodes with one multi-column
        back substitution; returns stacked (sigma, u, zeta)."""
        pressures = np.atleast_2d(np.asarray(pressures, dtype=float))
        if len(pressures) == 0:
            lay = self.fe.layout
            return (np.zeros((0, lay.n_stress)), np.zeros((0, lay.n_displacement)),
                    np.zeros((0, lay.n_rotation)))
        fac = self.factorization()
        B = np.stack([self.rhs(MechStepInput(p, force, t)) for p, t in zip(pressures, times)], axis=1)
        X = fac.solve(B)
        sl = fac.system.blocks
        return X[sl["sigma"]].T.copy(), X[sl["u"]].T.copy(), X[sl["zeta"]].T.copy()


def mech_time_step(inp: MechStepInput, factorization: Factorization, op: MechOperator):
    """Returns (sigma, u, zeta) coefficient vectors."""
    meta = factorization.system.meta
    if meta.get("kind") != "elasticity":
        raise ValueError("factorization is not an elasticity system")
    if meta["n_cells"] != len(inp.pressure):
        raise ValueError("factorization belongs to a different mesh")
    x = factorization.solve(op.rhs(inp))
    parts = factorization.system.split(x)
    return parts["sigma"].copy(), parts["u"].copy(), parts["zeta"].copy()


def momentum_residual(op: MechOperator, inp: MechStepInput, sigma: np.ndarray) -> np.ndarray:
    """(div sigma + f, e_i)_K per cell, shape (M, 2)."""
    div = (stress_divergence_matrix(op.fe) @ sigma).reshape(-1, 2)
    return div + cell_integrals(op.fe, inp.force, inp.t, ncomp=2)


def symmetry_residual(op: MechOperator, sigma: np.ndarray) -> np.ndarray:
    return stress_skew_matrix(op.fe) @ sigma

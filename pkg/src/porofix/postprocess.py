"""Elementwise post-processing into broken P2, multirate interpolation of the
mechanics fields, and piecewise-affine time semantics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spaces import RULE_DEG4, FESpace, MaterialData, apply_compliance, stress_at


class SingularLocalSystem(RuntimeError):
    pass


# ------------------------------------------------------------- time fields


@dataclass
class TimeAffineField:
    """Nodal values on a time grid, continuous and affine between nodes."""

    times: np.ndarray
    values: np.ndarray  # (N+1, ndof)
    space: str = "p2"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if len(self.times) != len(self.values):
            raise ValueError("one nodal field per time node is required")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("time nodes must be strictly increasing")

    def at_node(self, n: int) -> np.ndarray:
        return self.values[n]

    def __call__(self, t: float) -> np.ndarray:
        T = self.times
        if t < T[0] - 1e-14 or t > T[-1] + 1e-14:
            raise ValueError("time outside the grid")
        n = int(np.clip(np.searchsorted(T, t, side="left"), 1, len(T) - 1))
        s = (t - T[n - 1]) / (T[n] - T[n - 1])
        return (1 - s) * self.values[n - 1] + s * self.values[n]

    def backward_difference(self, n: int) -> np.ndarray:
        if n < 1:
            raise IndexError("backward difference needs n >= 1")
        return (self.values[n] - self.values[n - 1]) / (self.times[n] - self.times[n - 1])


# ----------------------------------------------------- multirate interpolation


def interpolate_mech_to_fine(coarse_start: np.ndarray, coarse_end: np.ndarray, delta: int,
                             mode: str = "literal", fractions=None) -> list[np.ndarray]:
    """Fields at the interior fine nodes m = 1..delta-1 of one coarse step.

    ``literal``: start + s_m * end, exactly as the printed formula.
    ``affine``: start + s_m * (end - start), linear interpolation.
    Here s_m = m / delta unless nonuniform ``fractions`` are given.
    """
    if coarse_start is None or coarse_end is None:
        raise ValueError("both coarse nodes are required")
    if delta < 1:
        raise ValueError("delta must be at least 1")
    a = np.asarray(coarse_start, dtype=float)
    b = np.asarray(coarse_end, dtype=float)
    s = [m / delta for m in range(1, delta)] if fractions is None else list(fractions)
    if len(s) != delta - 1:
        raise ValueError("need one fraction per interior fine node")
    if mode == "literal":
        return [a + sm * b for sm in s]
    if mode == "affine":
        return [a + sm * (b - a) for sm in s]
    raise ValueError(f"unknown interpolation mode {mode!r}")


# -------------------------------------------------------- local least squares


class P2Fitter:
    """Per-cell fit of a P2 function to a target gradient with a mean constraint.

    The unknowns are the five non-constant monomials in local scaled
    coordinates; the constant is fixed afterwards from the mean.
    """

    def __init__(self, fe: FESpace, rule=RULE_DEG4):
        self.fe = fe
        self.rule = rule
        m = fe.mesh
        self.h = m.diameters
        self.xc = m.centroids
        xq = fe.points(rule.bary)
        self.wq = fe.weights(rule)
        self.xi_q = (xq - self.xc[:, None, :]) / self.h[:, None, None]
        self.G = self._grad_basis(self.xi_q)  # (M,Q,5,2)
        N = np.einsum("mq,mqad,mqbd->mab", self.wq, self.G, self.G)
        cond = np.linalg.cond(N)
        if np.any(~np.isfinite(cond)) or np.any(cond > 1e12):
            raise SingularLocalSystem("degenerate cell in local post-processing system")
        self.N_inv = np.linalg.inv(N)
        # cell means of the monomials
        self.mono_mean = np.einsum("q,mqa->ma", rule.weights, self._basis(self.xi_q))
        xn = np.einsum("qi,mid->mqd", fe.p2_nodes_bary, m.vertices[m.cells])
        self.mono_nodes = self._basis((xn - self.xc[:, None, :]) / self.h[:, None, None])  # (M,6,5)
        self.rt = fe.rt0_values(rule.bary)  # basis tables at the fitting points
        self.sv = fe.stress_values(rule.bary).reshape(xq.shape[0], xq.shape[1], 12, 4)

    def flux(self, w: np.ndarray) -> np.ndarray:
        c = np.asarray(w)[self.fe.layout.cell_edges]
        return np.matmul(c[:, None, None, :], self.rt)[:, :, 0, :]

    def stress(self, s: np.ndarray) -> np.ndarray:
        c = np.asarray(s)[self.fe.layout.cell_stress]
        M, Q = self.wq.shape
        return np.matmul(c[:, None, None, :], self.sv).reshape(M, Q, 2, 2)

    @staticmethod
    def _basis(xi):
        x, y = xi[..., 0], xi[..., 1]
        return np.stack([x, y, x * x, x * y, y * y], axis=-1)

    def _grad_basis(self, xi):
        x, y = xi[..., 0], xi[..., 1]
        z, o = np.zeros_like(x), np.ones_like(x)
        g = np.stack([
            np.stack([o, z], -1), np.stack([z, o], -1), np.stack([2 * x, z], -1),
            np.stack([y, x], -1), np.stack([z, 2 * y], -1),
        ], axis=-2)
        return g / self.h[:, None, None, None]

    def fit(self, target: np.ndarray, mean: np.ndarray):
        """``target`` (M, Q, 2) gradient samples, ``mean`` (M,) cell means.

        Returns nodal values (M, 6) and the max pointwise gradient residual.
        """
        rhs = np.einsum("mq,mqad,mqd->ma", self.wq, self.G, target)
        c = np.einsum("mab,mb->ma", self.N_inv, rhs)
        const = mean - np.einsum("ma,ma->m", self.mono_mean, c)
        nodes = np.einsum("mna,ma->mn", self.mono_nodes, c) + const[:, None]
        grad = np.einsum("mqad,ma->mqd", self.G, c)
        resid = np.abs(grad - target).max() if target.size else 0.0
        return nodes, float(resid)


def lagrange_p2_values(fe: FESpace, func, t: float | None = None) -> np.ndarray:
    """Nodal values (M, 6[, ncomp]) of a callable at the broken P2 nodes."""
    m = fe.mesh
    xn = np.einsum("qi,mid->mqd", fe.p2_nodes_bary, m.vertices[m.cells])
    v = func(xn[..., 0], xn[..., 1]) if t is None else func(xn[..., 0], xn[..., 1], t)
    v = np.asarray(v, dtype=float)
    if v.ndim == 3:  # (ncomp, M, 6)
        v = np.moveaxis(v, 0, -1)
    return np.broadcast_to(v, (m.n_cells, 6) + v.shape[2:]).copy()


@dataclass
class PostProcessor:
    fe: FESpace
    material: MaterialData
    fitter: P2Fitter = field(init=False)
    max_ls_residual: float = field(default=0.0, init=False)

    def __post_init__(self):
        self.fitter = P2Fitter(self.fe)

    def pressure(self, w: np.ndarray, p: np.ndarray) -> np.ndarray:
        return postprocess_pressure(self.fe, w, p, self.material, self.fitter)[0]

    def displacement(self, sigma, u, zeta, p) -> np.ndarray:
        out, res = postprocess_displacement(self.fe, sigma, u, zeta, p, self.material, self.fitter)
        self.max_ls_residual = max(self.max_ls_residual, res)
        return out


def postprocess_pressure(fe: FESpace, w: np.ndarray, p: np.ndarray, material: MaterialData,
                         fitter: P2Fitter | None = None):
    """Broken P2 pressure with -K grad = w and preserved cell means.

    Returns (nodal values (M, 6), max gradient residual).
    """
    fitter = fitter or P2Fitter(fe)
    target = -np.matmul(fitter.flux(w), material.K_inv)
    return fitter.fit(target, np.asarray(p, dtype=float))


def displacement_gradient_target(fe: FESpace, sigma, zeta, p, material: MaterialData, bary,
                                 fitter: P2Fitter | None = None):
    """(M, Q, 2, 2) samples of compliance(sigma) + coupling p I + rotation."""
    S = fitter.stress(sigma) if fitter is not None else stress_at(fe, sigma, bary)
    T = apply_compliance(material, S)
    T = T + (material.coupling * np.asarray(p))[:, None, None, None] * np.eye(2)
    z = np.asarray(zeta)[:, None]
    T[..., 0, 1] += z
    T[..., 1, 0] -= z
    return T


def postprocess_displacement(fe: FESpace, sigma, u, zeta, p, material: MaterialData,
                             fitter: P2Fitter | None = None):
    """Broken P2 vector displacement by componentwise least squares.

    Returns (nodal values (M, 6, 2), max pointwise least-squares residual).
    """
    fitter = fitter or P2Fitter(fe)
    T = displacement_gradient_target(fe, sigma, zeta, p, material, fitter.rule.bary, fitter)
    um = np.asarray(u, dtype=float).reshape(-1, 2)
    out = np.zeros((fe.mesh.n_cells, 6, 2))
    res = 0.0
    for r in range(2):
        out[..., r], rr = fitter.fit(T[:, :, r, :], um[:, r])
        res = max(res, rr)
    return out, res


# ---------------------------------------------------- broken P2 evaluation


def broken_values(fe: FESpace, nodes: np.ndarray, bary: np.ndarray) -> np.ndarray:
    """Values at barycentric points: (M, Q[, ncomp])."""
    N = fe.p2_shape(bary)
    return np.einsum("qi,mi...->mq...", N, nodes)


def broken_grads(fe: FESpace, nodes: np.ndarray, bary: np.ndarray) -> np.ndarray:
    """Gradients at barycentric points: (M, Q, 2) scalar or (M, Q, ncomp, 2) vector."""
    G = fe.p2_grads(bary)
    if nodes.ndim == 2:
        return np.einsum("mqid,mi->mqd", G, nodes)
    return np.einsum("mqid,mic->mqcd", G, nodes)


def broken_means(fe: FESpace, nodes: np.ndarray) -> np.ndarray:
    """Cell means of a broken P2 field (mean of the three midpoint values)."""
    return nodes[:, 3:].mean(axis=1)

"""Discrete spaces, quadrature, basis tables and system assembly.

Flow uses lowest-order Raviart-Thomas fluxes with piecewise-constant
pressures. Mechanics uses the lowest-order Arnold-Falk-Winther triple:
row-wise P1 H(div) stresses, piecewise-constant displacements and
piecewise-constant skew rotations. Post-processed fields live in broken P2.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sps

from .mesh import Mesh
from .saddle_solver import SaddleSystem, pin_dofs

DIM = 2

# --------------------------------------------------------------- quadrature


def _sym_rule(groups):
    pts, wts = [], []
    for kind, w, *c in groups:
        if kind == "c":
            pts.append([1 / 3, 1 / 3, 1 / 3])
            wts.append(w)
        elif kind == "a":
            a = c[0]
            b = 1 - 2 * a
            for p in ([a, a, b], [a, b, a], [b, a, a]):
                pts.append(p)
                wts.append(w)
        else:
            a, b = c
            g = 1 - a - b
            for p in ([a, b, g], [a, g, b], [b, a, g], [b, g, a], [g, a, b], [g, b, a]):
                pts.append(p)
                wts.append(w)
    return np.array(pts), np.array(wts)


@dataclass(frozen=True)
class TriangleRule:
    bary: np.ndarray  # (Q, 3)
    weights: np.ndarray  # (Q,) summing to 1
    degree: int


# symmetric 6-point rule, exact for degree 4
RULE_DEG4 = TriangleRule(*_sym_rule([
    ("a", 0.223381589678011065716, 0.445948490915964886318),
    ("a", 0.109951743655321601617, 0.091576213509770743460),
]), degree=4)

# symmetric 12-point rule, exact for degree 6 (used for estimator norms)
RULE_DEG6 = TriangleRule(*_sym_rule([
    ("a", 0.116786275726379366030, 0.249286745170910421292),
    ("a", 0.050844906370206816921, 0.063089014491502228340),
    ("b", 0.082851075618373575194, 0.053145049844816947353, 0.310352451033784405416),
]), degree=6)


def gauss_interval(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


# -------------------------------------------------------------- dof layout

SPACE_TAGS = ("rt0", "p0", "stress", "p0vec", "skew", "p2", "p2vec", "p2cont")


@dataclass(frozen=True)
class DofLayout:
    n_cells: int
    n_edges: int
    n_vertices: int
    cell_edges: np.ndarray  # (M,3) flux dofs per cell
    cell_stress: np.ndarray  # (M,12) stress dofs per cell, local 4e+2r+m
    cell_p2: np.ndarray  # (M,6) continuous-P2 nodes: 3 vertices then 3 edge midpoints

    @property
    def n_flux(self) -> int:
        return self.n_edges

    @property
    def n_pressure(self) -> int:
        return self.n_cells

    @property
    def n_stress(self) -> int:
        return 4 * self.n_edges

    @property
    def n_displacement(self) -> int:
        return 2 * self.n_cells

    @property
    def n_rotation(self) -> int:
        return self.n_cells

    @property
    def n_p2(self) -> int:
        return 6 * self.n_cells

    @property
    def n_p2vec(self) -> int:
        return 12 * self.n_cells

    @property
    def n_p2cont(self) -> int:
        return self.n_vertices + self.n_edges

    def count(self, tag: str) -> int:
        return {
            "rt0": self.n_flux, "p0": self.n_pressure, "stress": self.n_stress,
            "p0vec": self.n_displacement, "skew": self.n_rotation, "p2": self.n_p2,
            "p2vec": self.n_p2vec, "p2cont": self.n_p2cont,
        }[tag]


def build_dof_layout(mesh: Mesh) -> DofLayout:
    ce = np.asarray(mesh.cell_edges)
    st = (4 * ce[:, :, None] + np.arange(4)[None, None, :]).reshape(-1, 12)
    p2 = np.concatenate([mesh.cells, mesh.n_vertices + ce], axis=1)
    return DofLayout(mesh.n_cells, mesh.n_edges, mesh.n_vertices, ce, st, p2)


# ---------------------------------------------------------------- material


@dataclass(frozen=True)
class MaterialData:
    K: np.ndarray  # (M,2,2) permeability per cell
    c0: float
    alpha: float
    mu: float
    lam: float

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        if K.ndim != 3 or K.shape[1:] != (2, 2):
            raise ValueError("K must have shape (n_cells, 2, 2)")
        if not np.allclose(K, K.transpose(0, 2, 1), rtol=1e-12, atol=0):
            raise ValueError("permeability must be symmetric")
        ev = np.linalg.eigvalsh(K)
        if np.any(ev[:, 0] <= 0):
            raise ValueError("permeability must be positive definite")
        if self.alpha <= 0 or self.mu <= 0 or self.lam <= 0 or self.c0 < 0:
            raise ValueError("need alpha, mu, lambda > 0 and c0 >= 0")
        object.__setattr__(self, "K", K)

    @classmethod
    def uniform(cls, n_cells: int, k: float | np.ndarray, **kw) -> "MaterialData":
        k = np.asarray(k, dtype=float)
        Km = k * np.eye(2) if k.ndim == 0 else k
        return cls(np.broadcast_to(Km, (n_cells, 2, 2)).copy(), **kw)

    @cached_property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    @cached_property
    def K_eigs(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.K)

    @property
    def c_K(self) -> np.ndarray:
        """Smallest permeability eigenvalue per cell."""
        return self.K_eigs[:, 0]

    @property
    def C_K(self) -> np.ndarray:
        return self.K_eigs[:, -1]

    @property
    def c_r(self) -> float:
        return DIM * self.alpha**2 / (2 * self.mu + DIM * self.lam)

    @property
    def coupling(self) -> float:
        """The factor c_r / (d alpha) multiplying pI and tr(sigma)."""
        return self.c_r / (DIM * self.alpha)


def apply_compliance(material: MaterialData, tensor: np.ndarray) -> np.ndarray:
    """Inverse of the elasticity tensor acting on (..., 2, 2) arrays."""
    t = np.asarray(tensor, dtype=float)
    mu, lam = material.mu, material.lam
    tr = np.trace(t, axis1=-2, axis2=-1)
    return (t - (lam / (2 * mu + DIM * lam)) * tr[..., None, None] * np.eye(2)) / (2 * mu)


def default_beta(material: MaterialData, delta: float = 2.0) -> float:
    return material.alpha**2 / (delta * (2 * material.mu / DIM + material.lam))


# ------------------------------------------------------------ basis tables


class FESpace:
    """Per-mesh basis tables evaluated at quadrature points.

    All evaluations are vectorized over cells; shapes carry a leading cell
    axis ``M`` and quadrature axis ``Q``.
    """

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.layout = build_dof_layout(mesh)
        self._stress_coef = self._bdm_dual()

    # -- geometry helpers
    def points(self, bary: np.ndarray) -> np.ndarray:
        """Physical coordinates (M, Q, 2) of barycentric points (Q, 3)."""
        x = self.mesh.vertices[self.mesh.cells]
        return np.einsum("qi,mid->mqd", bary, x)

    def weights(self, rule: TriangleRule) -> np.ndarray:
        return self.mesh.areas[:, None] * rule.weights[None, :]

    # -- RT0
    def rt0_values(self, bary: np.ndarray) -> np.ndarray:
        """(M, Q, 3, 2) values of the flux basis; dof = flux through the edge."""
        m = self.mesh
        x = self.points(bary)
        xv = m.vertices[m.cells]  # vertex opposite each local edge
        coef = m.cell_edge_sign / (2 * m.areas[:, None])
        return coef[:, None, :, None] * (x[:, :, None, :] - xv[:, None, :, :])

    def rt0_div(self) -> np.ndarray:
        m = self.mesh
        return m.cell_edge_sign / m.areas[:, None]

    # -- row-wise BDM1 stress
    def _local_coords(self, x: np.ndarray) -> np.ndarray:
        m = self.mesh
        return (x - m.centroids[:, None, :]) / m.diameters[:, None, None]

    @staticmethod
    def _monomials(xi: np.ndarray) -> np.ndarray:
        """Vector monomials (M, Q, 6, 2) of P1^2 in local coordinates."""
        M, Q = xi.shape[:2]
        out = np.zeros((M, Q, 6, 2))
        out[:, :, 0, 0] = 1.0
        out[:, :, 1, 0] = xi[..., 0]
        out[:, :, 2, 0] = xi[..., 1]
        out[:, :, 3, 1] = 1.0
        out[:, :, 4, 1] = xi[..., 0]
        out[:, :, 5, 1] = xi[..., 1]
        return out

    def _bdm_dual(self) -> np.ndarray:
        """Coefficients (M, 6 monomials, 6 dofs) of the dual row basis.

        Dofs per local edge e: 2e -> integral of v.n, 2e+1 -> sqrt(3) times
        the moment against the Legendre polynomial running lo -> hi vertex.
        """
        m = self.mesh
        s, w = gauss_interval(2)
        ge = m.cell_edges
        A = m.vertices[m.edges[ge, 0]]  # (M,3,2)
        B = m.vertices[m.edges[ge, 1]]
        n = m.edge_normals[ge]
        L = m.edge_lengths[ge]
        D = np.zeros((m.n_cells, 6, 6))
        for g in range(2):
            pts = A + s[g] * (B - A)  # (M,3,2)
            mono = self._monomials(self._local_coords(pts))  # (M,3,6,2)
            vn = np.einsum("mekd,med->mek", mono, n)
            D[:, 0::2, :] += (w[g] * L)[:, :, None] * vn
            D[:, 1::2, :] += (w[g] * L * np.sqrt(3) * (2 * s[g] - 1))[:, :, None] * vn
        return np.linalg.inv(D)

    def row_values(self, bary: np.ndarray) -> np.ndarray:
        """(M, Q, 6, 2) values of the row basis at barycentric points."""
        mono = self._monomials(self._local_coords(self.points(bary)))
        return np.einsum("mqkd,mkj->mqjd", mono, self._stress_coef)

    def row_div(self) -> np.ndarray:
        """(M, 6) constant divergence of each row basis function."""
        c = self._stress_coef
        return (c[:, 1, :] + c[:, 5, :]) / self.mesh.diameters[:, None]

    def stress_values(self, bary: np.ndarray) -> np.ndarray:
        """(M, Q, 12, 2, 2) tensor values; local dof 4e+2r+m lives in row r."""
        rv = self.row_values(bary)
        M, Q = rv.shape[:2]
        out = np.zeros((M, Q, 12, 2, 2))
        for e in range(3):
            for r in range(2):
                for k in range(2):
                    out[:, :, 4 * e + 2 * r + k, r, :] = rv[:, :, 2 * e + k, :]
        return out

    def stress_div(self) -> np.ndarray:
        """(M, 12, 2) divergence (vector) of each local stress basis tensor."""
        rd = self.row_div()
        out = np.zeros((self.mesh.n_cells, 12, 2))
        for e in range(3):
            for r in range(2):
                for k in range(2):
                    out[:, 4 * e + 2 * r + k, r] = rd[:, 2 * e + k]
        return out

    # -- P2 Lagrange (vertices, then midpoints of edges opposite each vertex)
    @staticmethod
    def p2_shape(bary: np.ndarray) -> np.ndarray:
        l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
        return np.stack([
            l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
            4 * l1 * l2, 4 * l2 * l0, 4 * l0 * l1,
        ], axis=1)

    @staticmethod
    def p2_shape_dlambda(bary: np.ndarray) -> np.ndarray:
        """(Q, 6, 3) derivatives of the P2 shapes w.r.t. barycentric coords."""
        l = bary
        Q = len(bary)
        d = np.zeros((Q, 6, 3))
        for i in range(3):
            d[:, i, i] = 4 * l[:, i] - 1
        for i, (j, k) in enumerate([(1, 2), (2, 0), (0, 1)]):
            d[:, 3 + i, j] = 4 * l[:, k]
            d[:, 3 + i, k] = 4 * l[:, j]
        return d

    def p2_grads(self, bary: np.ndarray) -> np.ndarray:
        """(M, Q, 6, 2) physical gradients of the P2 shapes."""
        return np.einsum("qij,mjd->mqid", self.p2_shape_dlambda(bary), self.mesh.bary_grads)

    @staticmethod
    def bubble(bary: np.ndarray) -> np.ndarray:
        return 27.0 * bary[:, 0] * bary[:, 1] * bary[:, 2]

    def bubble_grads(self, bary: np.ndarray) -> np.ndarray:
        l = bary
        dl = 27.0 * np.stack([l[:, 1] * l[:, 2], l[:, 2] * l[:, 0], l[:, 0] * l[:, 1]], axis=1)
        return np.einsum("qj,mjd->mqd", dl, self.mesh.bary_grads)

    @cached_property
    def p2_nodes_bary(self) -> np.ndarray:
        return np.array([
            [1, 0, 0], [0, 1, 0], [0, 0, 1], [0, .5, .5], [.5, 0, .5], [.5, .5, 0],
        ], dtype=float)


# ---------------------------------------------------------- discrete field


@dataclass
class DiscreteField:
    space: str
    coefficients: np.ndarray
    mesh: Mesh

    def __post_init__(self):
        if self.space not in SPACE_TAGS:
            raise ValueError(f"unknown space tag {self.space!r}")
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        n = build_dof_layout(self.mesh).count(self.space)
        if self.coefficients.size != n:
            raise ValueError(f"{self.space} field needs {n} coefficients, got {self.coefficients.size}")


def evaluate_field(field: DiscreteField, cell: int, point, fe: FESpace | None = None):
    """Value of ``field`` at a barycentric point of ``cell``."""
    mesh = field.mesh
    if not 0 <= cell < mesh.n_cells:
        raise IndexError("cell index out of range")
    bary = np.asarray(point, dtype=float).reshape(1, 3)
    if np.any(bary < -1e-12) or abs(bary.sum() - 1) > 1e-12:
        raise ValueError("point must be barycentric coordinates inside the cell")
    c = field.coefficients
    tag = field.space
    if tag == "p0":
        return float(c[cell])
    if tag == "p0vec":
        return c.reshape(-1, 2)[cell].copy()
    if tag == "skew":
        r = c[cell]
        return np.array([[0.0, r], [-r, 0.0]])
    if tag in ("p2", "p2vec", "p2cont"):
        N = FESpace.p2_shape(bary)[0]
        if tag == "p2":
            return float(N @ c.reshape(-1, 6)[cell])
        if tag == "p2vec":
            return N @ c.reshape(-1, 6, 2)[cell]
        nodes = build_dof_layout(mesh).cell_p2[cell]
        return float(N @ c[nodes])
    fe = fe or FESpace(mesh)
    if tag == "rt0":
        vals = fe.rt0_values(bary)[cell, 0]
        return vals.T @ c[fe.layout.cell_edges[cell]]
    vals = fe.stress_values(bary)[cell, 0]
    return np.einsum("kij,k->ij", vals, c[fe.layout.cell_stress[cell]])


# ----------------------------------------------------------------- assembly


def _scatter(rows: np.ndarray, cols: np.ndarray, vals: np.ndarray, shape) -> sps.csr_matrix:
    r = np.broadcast_to(rows, vals.shape).ravel()
    c = np.broadcast_to(cols, vals.shape).ravel()
    return sps.coo_matrix((vals.ravel(), (r, c)), shape=shape).tocsr()


def flux_mass_matrix(fe: FESpace, Kinv: np.ndarray | None = None) -> sps.csr_matrix:
    """(Kinv w, v) over RT0; identity weight if ``Kinv`` is None."""
    rule = RULE_DEG4
    phi = fe.rt0_values(rule.bary)
    wq = fe.weights(rule)
    if Kinv is None:
        loc = np.einsum("mq,mqid,mqjd->mij", wq, phi, phi)
    else:
        loc = np.einsum("mq,mqid,mde,mqje->mij", wq, phi, Kinv, phi)
    ce = fe.layout.cell_edges
    n = fe.layout.n_flux
    return _scatter(ce[:, :, None], ce[:, None, :], loc, (n, n))


def flux_divergence_matrix(fe: FESpace) -> sps.csr_matrix:
    """B[K, j] = (div phi_j, 1)_K."""
    m = fe.mesh
    vals = m.cell_edge_sign.astype(float)
    rows = np.repeat(np.arange(m.n_cells)[:, None], 3, axis=1)
    return _scatter(rows, fe.layout.cell_edges, vals, (m.n_cells, m.n_edges))


def stress_compliance_matrix(fe: FESpace, material: MaterialData) -> sps.csr_matrix:
    rule = RULE_DEG4
    S = fe.stress_values(rule.bary)
    wq = fe.weights(rule)
    AS = apply_compliance(material, S)
    loc = np.einsum("mq,mqiab,mqjab->mij", wq, AS, S)
    cs = fe.layout.cell_stress
    n = fe.layout.n_stress
    return _scatter(cs[:, :, None], cs[:, None, :], loc, (n, n))


def stress_mass_matrix(fe: FESpace) -> sps.csr_matrix:
    rule = RULE_DEG4
    S = fe.stress_values(rule.bary)
    wq = fe.weights(rule)
    loc = np.einsum("mq,mqiab,mqjab->mij", wq, S, S)
    cs = fe.layout.cell_stress
    n = fe.layout.n_stress
    return _scatter(cs[:, :, None], cs[:, None, :], loc, (n, n))


def stress_divergence_matrix(fe: FESpace) -> sps.csr_matrix:
    """B[(K, i), j] = (div tau_j, e_i)_K for displacement component i."""
    m = fe.mesh
    dv = fe.stress_div() * m.areas[:, None, None]  # (M,12,2)
    rows = 2 * np.arange(m.n_cells)[:, None, None] + np.arange(2)[None, None, :]
    cols = fe.layout.cell_stress[:, :, None]
    vals = dv
    return _scatter(np.broadcast_to(rows, vals.shape), np.broadcast_to(cols, vals.shape), vals,
                    (2 * m.n_cells, fe.layout.n_stress))


def stress_trace_matrix(fe: FESpace) -> sps.csr_matrix:
    """T[K, j] = (tr tau_j, 1)_K."""
    rule = RULE_DEG4
    S = fe.stress_values(rule.bary)
    wq = fe.weights(rule)
    vals = np.einsum("mq,mqi->mi", wq, S[..., 0, 0] + S[..., 1, 1])
    rows = np.repeat(np.arange(fe.mesh.n_cells)[:, None], 12, axis=1)
    return _scatter(rows, fe.layout.cell_stress, vals, (fe.mesh.n_cells, fe.layout.n_stress))


def stress_skew_matrix(fe: FESpace) -> sps.csr_matrix:
    """C[K, j] = (tau_j, gamma)_K with gamma = [[0, 1], [-1, 0]]."""
    rule = RULE_DEG4
    S = fe.stress_values(rule.bary)
    wq = fe.weights(rule)
    vals = np.einsum("mq,mqi->mi", wq, S[..., 0, 1] - S[..., 1, 0])
    rows = np.repeat(np.arange(fe.mesh.n_cells)[:, None], 12, axis=1)
    return _scatter(rows, fe.layout.cell_stress, vals, (fe.mesh.n_cells, fe.layout.n_stress))


def assemble_darcy_system(
    fe: FESpace,
    material: MaterialData,
    tau: float,
    beta: float,
    fixed_flux: np.ndarray | None = None,
) -> SaddleSystem:
    """Block system [[Mk, B^T], [B, -c/tau Mp]] for unknowns (w, p).

    Here ``B = -(div w, q)`` and ``c = c0 + c_r + beta``. The second block
    row is the negated mass balance, which keeps the matrix symmetric.
    """
    if tau <= 0:
        raise ValueError("time step must be positive")
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    mesh = fe.mesh
    Mk = flux_mass_matrix(fe, material.K_inv)
    B = -flux_divergence_matrix(fe)
    c = (material.c0 + material.c_r + beta) / tau
    Mp = sps.diags(c * mesh.areas)
    A = sps.bmat([[Mk, B.T], [B, -Mp]], format="csc")
    nE = mesh.n_edges
    fixed = np.asarray(fixed_flux if fixed_flux is not None else [], dtype=np.int64)
    if len(fixed):
        A = pin_dofs(A, fixed)
    return SaddleSystem(
        A, {"w": slice(0, nE), "p": slice(nE, nE + mesh.n_cells)}, fixed=fixed,
        meta={"kind": "darcy", "tau": float(tau), "beta": float(beta), "n_cells": mesh.n_cells},
    )


def assemble_elasticity_system(
    fe: FESpace,
    material: MaterialData,
    fixed_stress: np.ndarray | None = None,
) -> SaddleSystem:
    """Block system for (sigma, u, zeta) with weak symmetry."""
    mesh = fe.mesh
    A = stress_compliance_matrix(fe, material)
    Bu = stress_divergence_matrix(fe)
    Bz = stress_skew_matrix(fe)
    M = sps.bmat([[A, Bu.T, Bz.T], [Bu, None, None], [Bz, None, None]], format="csc")
    nS, nU, nR = fe.layout.n_stress, 2 * mesh.n_cells, mesh.n_cells
    fixed = np.asarray(fixed_stress if fixed_stress is not None else [], dtype=np.int64)
    if len(fixed):
        M = pin_dofs(M, fixed)
    return SaddleSystem(
        M,
        {"sigma": slice(0, nS), "u": slice(nS, nS + nU), "zeta": slice(nS + nU, nS + nU + nR)},
        fixed=fixed,
        meta={"kind": "elasticity", "n_cells": mesh.n_cells},
    )


# --------------------------------------------------------- field helpers


def cell_means(fe: FESpace, func, rule: TriangleRule = RULE_DEG4, t: float | None = None) -> np.ndarray:
    """(f, 1)_K / |K| of a callable f(x, y[, t]) by quadrature; vector-valued ok."""
    x = fe.points(rule.bary)
    vals = func(x[..., 0], x[..., 1]) if t is None else func(x[..., 0], x[..., 1], t)
    vals = np.asarray(vals, dtype=float)
    w = rule.weights
    if vals.ndim == 2:
        return vals @ w
    return np.einsum("mq...,q->m...", vals, w)


def flux_at(fe: FESpace, w: np.ndarray, bary: np.ndarray) -> np.ndarray:
    """(M, Q, 2) values of an RT0 field."""
    phi = fe.rt0_values(bary)
    return np.einsum("mqid,mi->mqd", phi, w[fe.layout.cell_edges])


def stress_at(fe: FESpace, s: np.ndarray, bary: np.ndarray) -> np.ndarray:
    """(M, Q, 2, 2) values of an AFW stress field."""
    S = fe.stress_values(bary)
    return np.einsum("mqiab,mi->mqab", S, s[fe.layout.cell_stress])


def interpolate_flux(fe: FESpace, func) -> np.ndarray:
    """RT0 interpolant: edge fluxes of a vector callable via 3-point Gauss."""
    m = fe.mesh
    s, w = gauss_interval(3)
    A = m.vertices[m.edges[:, 0]]
    B = m.vertices[m.edges[:, 1]]
    out = np.zeros(m.n_edges)
    for g in range(len(s)):
        p = A + s[g] * (B - A)
        v = np.asarray(func(p[:, 0], p[:, 1]))
        out += w[g] * np.einsum("de,ed->e", v, m.edge_normals)
    return out * m.edge_lengths


def interpolate_stress(fe: FESpace, func) -> np.ndarray:
    """Row-wise BDM1 interpolant of a tensor callable returning (2, 2, ...)."""
    m = fe.mesh
    s, w = gauss_interval(3)
    A = m.vertices[m.edges[:, 0]]
    B = m.vertices[m.edges[:, 1]]
    out = np.zeros((m.n_edges, 2, 2))
    for g in range(len(s)):
        p = A + s[g] * (B - A)
        T = np.asarray(func(p[:, 0], p[:, 1]))  # (2,2,E)
        tn = np.einsum("rde,ed->er", T, m.edge_normals)
        out[:, :, 0] += w[g] * tn
        out[:, :, 1] += w[g] * np.sqrt(3) * (2 * s[g] - 1) * tn
    return (out * m.edge_lengths[:, None, None]).reshape(-1)

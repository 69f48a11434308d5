"""Conforming pressure/displacement reconstructions and equilibrated
flux/stress reconstructions from vertex-patch mixed problems.

Every patch problem is linear in its data, so the equilibration is
precomputed once per mesh as a pair of global sparse operators; applying
them afterwards costs one sparse product per time node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sps

from .mesh import Mesh
from .spaces import RULE_DEG4, FESpace

BUBBLE_MEAN = 9.0 / 20.0  # mean of 27 l0 l1 l2 over a triangle


# ------------------------------------------------------------ conforming


def clamp_mask(mesh: Mesh, edges: np.ndarray | None = None) -> np.ndarray:
    """Continuous-P2 nodes lying on the given boundary edges (all boundary
    edges if None)."""
    if edges is None:
        edges = np.flatnonzero(mesh.boundary_edge)
    edges = np.asarray(edges, dtype=np.int64)
    mask = np.zeros(mesh.n_vertices + mesh.n_edges, dtype=bool)
    mask[mesh.edges[edges].ravel()] = True
    mask[mesh.n_vertices + edges] = True
    return mask


def averaging_interpolate(fe: FESpace, broken: np.ndarray, clamp: np.ndarray | None = None) -> np.ndarray:
    """Average the broken nodal values over all cells sharing each node.

    ``broken`` is (M, 6) or (M, 6, c); ``clamp`` is a boolean node mask, or
    (n_nodes, c) for per-component clamping; clamped nodes are set to zero.
    """
    lay = fe.layout
    broken = np.asarray(broken, dtype=float)
    n = lay.n_p2cont
    idx = lay.cell_p2.ravel()
    tail = broken.shape[2:]
    sums = np.zeros((n,) + tail)
    np.add.at(sums, idx, broken.reshape((-1,) + tail))
    counts = np.bincount(idx, minlength=n).astype(float)
    out = sums / counts.reshape((-1,) + (1,) * len(tail))
    if clamp is None:
        clamp = clamp_mask(fe.mesh)
    clamp = np.asarray(clamp, dtype=bool)
    if clamp.ndim == 1 and out.ndim == 2:
        clamp = np.repeat(clamp[:, None], out.shape[1], axis=1)
    out[clamp] = 0.0
    return out


@dataclass
class ConformingField:
    """Continuous P2 plus one cubic bubble per cell (per component)."""

    nodal: np.ndarray  # (n_nodes,) or (n_nodes, c)
    bubble: np.ndarray  # (M,) or (M, c)
    mesh: Mesh

    def cell_nodes(self, fe: FESpace) -> np.ndarray:
        return self.nodal[fe.layout.cell_p2]

    def values(self, fe: FESpace, bary: np.ndarray) -> np.ndarray:
        N = fe.p2_shape(bary)
        b = fe.bubble(bary)
        v = np.einsum("qi,mi...->mq...", N, self.cell_nodes(fe))
        return v + np.einsum("q,m...->mq...", b, self.bubble)

    def grads(self, fe: FESpace, bary: np.ndarray) -> np.ndarray:
        G = fe.p2_grads(bary)
        gb = fe.bubble_grads(bary)
        nodes = self.cell_nodes(fe)
        if nodes.ndim == 2:
            return np.einsum("mqid,mi->mqd", G, nodes) + gb * self.bubble[:, None, None]
        return (np.einsum("mqid,mic->mqcd", G, nodes)
                + np.einsum("mqd,mc->mqcd", gb, self.bubble))

    def means(self) -> np.ndarray:
        nodes = self.nodal[_cell_p2(self.mesh)]
        return nodes[:, 3:].mean(axis=1) + BUBBLE_MEAN * self.bubble

    def __sub__(self, other: "ConformingField") -> "ConformingField":
        return ConformingField(self.nodal - other.nodal, self.bubble - other.bubble, self.mesh)

    def scaled(self, c: float) -> "ConformingField":
        return ConformingField(c * self.nodal, c * self.bubble, self.mesh)


def _cell_p2(mesh: Mesh) -> np.ndarray:
    return np.concatenate([mesh.cells, mesh.n_vertices + mesh.cell_edges], axis=1)


def conform_pressure(fe: FESpace, broken: np.ndarray, clamp: np.ndarray | None = None,
                     bubble: bool = True) -> ConformingField:
    """Averaged continuous P2 field corrected by bubbles to keep cell means."""
    broken = np.asarray(broken, dtype=float)
    nodal = averaging_interpolate(fe, broken, clamp)
    cont_mean = nodal[fe.layout.cell_p2][:, 3:].mean(axis=1)
    target = broken[:, 3:].mean(axis=1)
    a = (target - cont_mean) / BUBBLE_MEAN if bubble else np.zeros_like(target)
    return ConformingField(nodal, a, fe.mesh)


def conform_displacement(fe: FESpace, broken: np.ndarray, clamp: np.ndarray | None = None,
                         bubble: bool = True) -> ConformingField:
    broken = np.asarray(broken, dtype=float)
    if broken.ndim != 3 or broken.shape[2] != 2:
        raise ValueError("vector broken P2 field must have shape (M, 6, 2)")
    return conform_pressure(fe, broken, clamp, bubble)


def divergence_integrals(fe: FESpace, field: ConformingField | np.ndarray) -> np.ndarray:
    """(div v, 1)_K for a conforming vector field or broken nodal (M, 6, 2)."""
    rule = RULE_DEG4
    if isinstance(field, ConformingField):
        G = field.grads(fe, rule.bary)
    else:
        G = np.einsum("mqid,mic->mqcd", fe.p2_grads(rule.bary), field)
    return np.einsum("mq,mq->m", fe.weights(rule), G[..., 0, 0] + G[..., 1, 1])


def fluid_content_integrals(fe: FESpace, c0: float, alpha: float, p_means: np.ndarray,
                            div_int: np.ndarray) -> np.ndarray:
    """(c0 p + alpha div u, 1)_K."""
    return c0 * fe.mesh.areas * p_means + alpha * div_int


def check_mean_value_lemma(fe: FESpace, c0: float, alpha: float, tau: float,
                           phat: tuple, uhat: tuple, ptil: tuple, util: tuple,
                           relative: bool = True) -> np.ndarray:
    """Per-cell |(d_t phi(phat, uhat) - d_t phi(ptil, util), 1)_K|.

    Each pair argument holds the (n-1, n) fields; conforming fields are
    ConformingField, broken fields are nodal arrays. With ``relative`` the
    values are divided by the data scale max_K |(d_t phi(ptil, util), 1)_K|.
    """
    def content(p, u):
        pm = p.means() if isinstance(p, ConformingField) else np.asarray(p)[:, 3:].mean(axis=1)
        return fluid_content_integrals(fe, c0, alpha, pm, divergence_integrals(fe, u))

    hat = (content(phat[1], uhat[1]) - content(phat[0], uhat[0])) / tau
    til = (content(ptil[1], util[1]) - content(ptil[0], util[0])) / tau
    r = np.abs(hat - til)
    if relative:
        scale = np.abs(til).max()
        r = r / scale if scale > 0 else r
    return r


# ------------------------------------------------------------ equilibration


def _pinv_abs(A: np.ndarray, tol: float) -> np.ndarray:
    """Pseudo-inverse dropping singular values below an absolute cutoff."""
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    keep = s > tol
    return (Vt[keep].T / s[keep]) @ U[:, keep].T


def _left_null(G: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    if G.size == 0:
        return np.eye(G.shape[0])
    U, s, _ = np.linalg.svd(G)
    rank = int(np.sum(s > tol * max(s.max(), 1e-300)))
    return U[:, rank:]


def _solve_augmented(A: np.ndarray, G: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Inverse of [[A, G^T, 0], [G, 0, Y], [0, Y^T, 0]] restricted to the
    first two block columns of the right-hand side; returns the rows of the
    primal unknown, shape (nx, nx + nb)."""
    nx, nb, ny = A.shape[0], G.shape[0], Y.shape[1]
    K = np.zeros((nx + nb + ny, nx + nb + ny))
    K[:nx, :nx] = A
    K[:nx, nx:nx + nb] = G.T
    K[nx:nx + nb, :nx] = G
    K[nx:nx + nb, nx + nb:] = Y
    K[nx + nb:, nx:nx + nb] = Y.T
    R = np.zeros((nx + nb + ny, nx + nb))
    R[:nx + nb, :] = np.eye(nx + nb)
    sol = sla.solve(K, R, assume_a="sym")
    return sol[:nx]


class _PatchTopology:
    def __init__(self, mesh: Mesh):
        self.mesh = mesh

    def patch(self, a: int):
        m = self.mesh
        cells = m.vertex_cells(a)
        loc = np.argmax(m.cells[cells] == a, axis=1)  # local index of a in each cell
        edges = np.unique(m.cell_edges[cells].ravel())
        through = (m.edges[edges, 0] == a) | (m.edges[edges, 1] == a)
        return cells, loc, edges, through


MODES = ("correction", "hat", "literal")


class FluxEquilibrator:
    """Equilibrated RT0 flux as w_hat = Ew @ w_h + Er @ R, where R holds the
    cell integrals of (g - d_t phi).

    Modes: ``hat`` weights data and shift by the vertex hat function;
    ``literal`` uses the unweighted data on every patch; ``correction``
    adds to w_h the patch corrections driven by the hat-weighted residual
    R - div w_h, so an already balanced w_h is returned unchanged.
    """

    def __init__(self, fe: FESpace, mode: str = "correction", fixed_flux=None,
                 boundary_zero_mean: bool = False):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.fe, self.mode = fe, mode
        m = fe.mesh
        fixed = np.zeros(m.n_edges, dtype=bool)
        if fixed_flux is not None:
            fixed[np.asarray(fixed_flux, dtype=np.int64)] = True
        rule = RULE_DEG4
        phi = fe.rt0_values(rule.bary)  # (M,Q,3,2)
        wq = fe.weights(rule)
        lam = rule.bary  # (Q,3)
        mass = np.einsum("mq,mqid,mqjd->mij", wq, phi, phi)
        wmass = np.einsum("mq,qv,mqid,mqjd->mvij", wq, lam, phi, phi)
        phi_int = np.einsum("mq,mqid->mid", wq, phi)  # (M,3,2)
        sign = m.cell_edge_sign.astype(float)
        top = _PatchTopology(m)
        rows_w, cols_w, vals_w = [], [], []
        rows_r, cols_r, vals_r = [], [], []
        self.patch_incompatibility = np.zeros(m.n_vertices)
        self._patch_info = []
        for a in range(m.n_vertices):
            cells, loc, edges, through = top.patch(a)
            gidx = {e: i for i, e in enumerate(edges)}
            boundary_free = m.boundary_edge[edges] & ~fixed[edges]
            free_mask = (through | boundary_free) & ~fixed[edges]
            free = np.flatnonzero(free_mask)
            nl, nc = len(edges), len(cells)
            A = np.zeros((nl, nl))
            Ash = np.zeros((nl, nl))
            Dw = np.zeros((nc, nl))
            Dr = np.zeros((nc, nc))
            G = np.zeros((nc, nl))
            for c, (K, v) in enumerate(zip(cells, loc)):
                li = [gidx[e] for e in m.cell_edges[K]]
                A[np.ix_(li, li)] += mass[K]
                G[c, li] = sign[K]
                if mode == "hat":
                    Ash[np.ix_(li, li)] += wmass[K, v]
                    Dr[c, c] = 1.0 / 3.0
                    Dw[c, li] += phi_int[K] @ m.bary_grads[K, v]
                elif mode == "correction":
                    Dr[c, c] = 1.0 / 3.0
                    Dw[c, li] -= sign[K] / 3.0
                else:
                    Ash[np.ix_(li, li)] += mass[K]
                    Dr[c, c] = 1.0
            Af, Gf = A[np.ix_(free, free)], G[:, free]
            Y = _left_null(Gf)
            if boundary_zero_mean and m.boundary_vertex[a] and Y.shape[1] == 0:
                Y = (m.areas[cells] / np.linalg.norm(m.areas[cells]))[:, None]
            S = _solve_augmented(Af, Gf, Y)
            nf = len(free)
            # x = S[:, :nf] @ (Ash_f @ w_loc) + S[:, nf:] @ (Dw w_loc + Dr R_loc)
            Opw = S[:, :nf] @ Ash[free, :] + S[:, nf:] @ Dw
            Opr = S[:, nf:] @ Dr
            ge = edges[free]
            rows_w.append(np.repeat(ge, nl)); cols_w.append(np.tile(edges, nf)); vals_w.append(Opw.ravel())
            rows_r.append(np.repeat(ge, nc)); cols_r.append(np.tile(cells, nf)); vals_r.append(Opr.ravel())
            self._patch_info.append((cells, edges, Dw, Dr, Y))
        E, M = m.n_edges, m.n_cells
        self.Ew = sps.coo_matrix((np.concatenate(vals_w), (np.concatenate(rows_w), np.concatenate(cols_w))),
                                 shape=(E, E)).tocsr()
        if mode == "correction":
            self.Ew = (self.Ew + sps.identity(E, format="csr")).tocsr()
        self.Er = sps.coo_matrix((np.concatenate(vals_r), (np.concatenate(rows_r), np.concatenate(cols_r))),
                                 shape=(E, M)).tocsr()

    def __call__(self, w_h: np.ndarray, residual_integrals: np.ndarray) -> np.ndarray:
        return self.Ew @ w_h + self.Er @ residual_integrals

    def compatibility(self, w_h: np.ndarray, residual_integrals: np.ndarray) -> np.ndarray:
        """Norm of the patch data component lying outside the divergence range."""
        out = np.zeros(len(self._patch_info))
        for a, (cells, edges, Dw, Dr, Y) in enumerate(self._patch_info):
            if Y.shape[1]:
                b = Dw @ w_h[edges] + Dr @ residual_integrals[cells]
                out[a] = np.linalg.norm(Y.T @ b)
        return out


class StressEquilibrator:
    """Equilibrated AFW stress as sigma_hat = Ss @ sigma_h + Sf @ F, where F
    holds the cell integrals (M, 2) of the body force, flattened. Modes as
    for the flux."""

    def __init__(self, fe: FESpace, mode: str = "correction", fixed_stress=None,
                 boundary_zero_mean: bool = False):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.fe, self.mode = fe, mode
        m = fe.mesh
        lay = fe.layout
        fixed = np.zeros(lay.n_stress, dtype=bool)
        if fixed_stress is not None:
            fixed[np.asarray(fixed_stress, dtype=np.int64)] = True
        rule = RULE_DEG4
        Sv = fe.stress_values(rule.bary)  # (M,Q,12,2,2)
        wq = fe.weights(rule)
        lam = rule.bary
        mass = np.einsum("mq,mqiab,mqjab->mij", wq, Sv, Sv)
        wmass = np.einsum("mq,qv,mqiab,mqjab->mvij", wq, lam, Sv, Sv)
        skew = Sv[..., 0, 1] - Sv[..., 1, 0]  # (M,Q,12)
        skew_int = np.einsum("mq,mqi->mi", wq, skew)
        wskew = np.einsum("mq,qv,mqi->mvi", wq, lam, skew)
        S_int = np.einsum("mq,mqiab->miab", wq, Sv)  # (M,12,2,2)
        div = fe.stress_div() * m.areas[:, None, None]  # (M,12,2)
        top = _PatchTopology(m)
        rows_s, cols_s, vals_s = [], [], []
        rows_f, cols_f, vals_f = [], [], []
        self._patch_info = []
        for a in range(m.n_vertices):
            cells, loc, edges, through = top.patch(a)
            sdofs = (4 * edges[:, None] + np.arange(4)).ravel()
            thr = np.repeat(through, 4)
            bnd = np.repeat(m.boundary_edge[edges], 4)
            free_mask = (thr | bnd) & ~fixed[sdofs]
            free = np.flatnonzero(free_mask)
            gidx = {d: i for i, d in enumerate(sdofs)}
            nl, nc = len(sdofs), len(cells)
            A = np.zeros((nl, nl))
            Ash = np.zeros((nl, nl))
            G = np.zeros((3 * nc, nl))  # rows: (cell, comp) then symmetry per cell
            Ds = np.zeros((3 * nc, nl))
            Df = np.zeros((3 * nc, 2 * nc))
            for c, (K, v) in enumerate(zip(cells, loc)):
                li = [gidx[d] for d in lay.cell_stress[K]]
                A[np.ix_(li, li)] += mass[K]
                G[2 * c, li] = div[K, :, 0]
                G[2 * c + 1, li] = div[K, :, 1]
                G[2 * nc + c, li] = skew_int[K]
                if mode == "hat":
                    Ash[np.ix_(li, li)] += wmass[K, v]
                    gpsi = m.bary_grads[K, v]
                    Ds[2 * c, li] += S_int[K, :, 0, :] @ gpsi
                    Ds[2 * c + 1, li] += S_int[K, :, 1, :] @ gpsi
                    Ds[2 * nc + c, li] += wskew[K, v]
                    Df[2 * c, 2 * c] = -1.0 / 3.0
                    Df[2 * c + 1, 2 * c + 1] = -1.0 / 3.0
                elif mode == "correction":
                    Ds[2 * c, li] -= div[K, :, 0] / 3.0
                    Ds[2 * c + 1, li] -= div[K, :, 1] / 3.0
                    Df[2 * c, 2 * c] = -1.0 / 3.0
                    Df[2 * c + 1, 2 * c + 1] = -1.0 / 3.0
                else:
                    Ash[np.ix_(li, li)] += mass[K]
                    Df[2 * c, 2 * c] = -1.0
                    Df[2 * c + 1, 2 * c + 1] = -1.0
            Af, Gf = A[np.ix_(free, free)], G[:, free]
            Y = _left_null(Gf)
            if boundary_zero_mean and m.boundary_vertex[a]:
                T = np.zeros((3 * nc, 2))
                T[0:2 * nc:2, 0] = m.areas[cells]
                T[1:2 * nc:2, 1] = m.areas[cells]
                Y = np.linalg.qr(np.hstack([Y, T]))[0][:, :np.linalg.matrix_rank(np.hstack([Y, T]))]
            # move the rotation-type incompatibility into the symmetry rows
            P = np.zeros((3 * nc, nc))
            P[2 * nc:, :] = np.eye(nc)
            L = np.eye(3 * nc)
            if Y.shape[1]:
                YP = Y.T @ P
                L = L - P @ _pinv_abs(YP, 1e-10) @ Y.T
            S = _solve_augmented(Af, Gf, Y)
            nf = len(free)
            Ops = S[:, :nf] @ Ash[free, :] + S[:, nf:] @ (L @ Ds)
            Opf = S[:, nf:] @ (L @ Df)
            gd = sdofs[free]
            fcols = (2 * cells[:, None] + np.arange(2)).ravel()
            rows_s.append(np.repeat(gd, nl)); cols_s.append(np.tile(sdofs, nf)); vals_s.append(Ops.ravel())
            rows_f.append(np.repeat(gd, 2 * nc)); cols_f.append(np.tile(fcols, nf)); vals_f.append(Opf.ravel())
            self._patch_info.append((cells, sdofs, fcols, Ds, Df, L, Y))
        nS, nU = lay.n_stress, lay.n_displacement
        self.Ss = sps.coo_matrix((np.concatenate(vals_s), (np.concatenate(rows_s), np.concatenate(cols_s))),
                                 shape=(nS, nS)).tocsr()
        self.Sf = sps.coo_matrix((np.concatenate(vals_f), (np.concatenate(rows_f), np.concatenate(cols_f))),
                                 shape=(nS, nU)).tocsr()
        if mode == "correction":
            self.Ss = (self.Ss + sps.identity(nS, format="csr")).tocsr()

    def __call__(self, sigma_h: np.ndarray, force_integrals: np.ndarray) -> np.ndarray:
        return self.Ss @ sigma_h + self.Sf @ np.asarray(force_integrals).ravel()

    def compatibility(self, sigma_h: np.ndarray, force_integrals: np.ndarray) -> np.ndarray:
        F = np.asarray(force_integrals).ravel()
        out = np.zeros(len(self._patch_info))
        for a, (cells, sdofs, fcols, Ds, Df, L, Y) in enumerate(self._patch_info):
            if Y.shape[1]:
                b = L @ (Ds @ sigma_h[sdofs] + Df @ F[fcols])
                out[a] = np.linalg.norm(Y.T @ b)
        return out


def equilibrated_flux(eq: FluxEquilibrator, w_h: np.ndarray, residual_integrals: np.ndarray) -> np.ndarray:
    return eq(w_h, residual_integrals)


def equilibrated_stress(eq: StressEquilibrator, sigma_h: np.ndarray, force_integrals: np.ndarray) -> np.ndarray:
    return eq(sigma_h, force_integrals)

"""Conforming triangulations: loading, structured generators, refinement, patches."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    """Raised for malformed mesh files or invalid topology."""


@dataclass(frozen=True)
class CellGeometry:
    area: float
    diameter: float
    normals: np.ndarray  # (3, 2) outward unit normal of the edge opposite each vertex
    edge_lengths: np.ndarray  # (3,)
    bary_grads: np.ndarray  # (3, 2)


@dataclass(frozen=True)
class Patch:
    center_vertex: int
    cells: np.ndarray
    is_boundary_vertex: bool
    edges: np.ndarray  # all edges of the patch cells, sorted
    interior_edges: np.ndarray  # edges through the center vertex shared by two patch cells
    vertices: np.ndarray  # all vertices of the patch cells, sorted


class Mesh:
    """Immutable triangle mesh with derived edge and patch connectivity.

    Cells are stored counterclockwise. Local edge ``i`` of a cell is the edge
    opposite its local vertex ``i``. Each global edge ``(a, b)`` has ``a < b``
    and carries the unit normal obtained by rotating ``x_b - x_a`` clockwise.
    """

    def __init__(
        self,
        vertices: np.ndarray,
        cells: np.ndarray,
        cell_material: np.ndarray | None = None,
        boundary_tags: dict[tuple[int, int], str] | None = None,
        default_tag: str = "boundary",
    ):
        vertices = np.array(vertices, dtype=float).reshape(-1, 2)
        cells = np.array(cells, dtype=np.int64).reshape(-1, 3)
        if cells.size and (cells.min() < 0 or cells.max() >= len(vertices)):
            raise MeshError("cell references a vertex index out of range")
        if cell_material is None:
            cell_material = np.zeros(len(cells), dtype=np.int64)
        cell_material = np.array(cell_material, dtype=np.int64).reshape(-1)
        if len(cell_material) != len(cells):
            raise MeshError("one material id per cell is required")

        self.vertices = vertices
        self.cells = cells
        self.cell_material = cell_material
        self._build_edges()
        self._check_topology()
        self._build_geometry()
        self._build_boundary(boundary_tags or {}, default_tag)
        self._build_vertex_cells()
        for arr in (
            self.vertices, self.cells, self.cell_material, self.edges, self.cell_edges,
            self.cell_edge_sign, self.edge_cells, self.areas, self.diameters,
            self.bary_grads, self.edge_lengths, self.edge_normals, self.boundary_edge,
            self.boundary_vertex,
        ):
            arr.setflags(write=False)

    # ------------------------------------------------------------------ build
    def _build_edges(self):
        c = self.cells
        local = np.stack([c[:, [1, 2]], c[:, [2, 0]], c[:, [0, 1]]], axis=1)  # (M,3,2)
        lo = local.min(axis=2)
        hi = local.max(axis=2)
        keys = np.stack([lo, hi], axis=2).reshape(-1, 2)
        edges, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        if np.any(counts > 2):
            raise MeshError("non-matching mesh: an edge is shared by more than two cells")
        if len(c) and len(np.unique(np.sort(c, axis=1), axis=0)) != len(c):
            raise MeshError("duplicated cell")
        self.edges = edges
        self.cell_edges = inverse.reshape(-1, 3)
        # +1 when the global edge normal points out of the cell (CCW local direction lo->hi)
        self.cell_edge_sign = np.where(local[:, :, 0] < local[:, :, 1], 1.0, -1.0)
        edge_cells = -np.ones((len(edges), 2), dtype=np.int64)
        flat = self.cell_edges.reshape(-1)
        cell_of = np.repeat(np.arange(len(c)), 3)
        order = np.argsort(flat, kind="stable")
        first = np.ones(len(flat), dtype=bool)
        first[1:] = flat[order][1:] != flat[order][:-1]
        e_sorted = flat[order]
        edge_cells[e_sorted[first], 0] = cell_of[order][first]
        edge_cells[e_sorted[~first], 1] = cell_of[order][~first]
        self.edge_cells = edge_cells

    def _check_topology(self):
        v = self.vertices
        c = self.cells
        x0, x1, x2 = v[c[:, 0]], v[c[:, 1]], v[c[:, 2]]
        signed = 0.5 * ((x1[:, 0] - x0[:, 0]) * (x2[:, 1] - x0[:, 1])
                        - (x2[:, 0] - x0[:, 0]) * (x1[:, 1] - x0[:, 1]))
        scale = max(np.ptp(v[:, 0]) if len(v) else 1.0, np.ptp(v[:, 1]) if len(v) else 1.0) ** 2
        if np.any(signed <= 1e-14 * scale):
            bad = int(np.argmax(signed <= 1e-14 * scale))
            raise MeshError(f"cell {bad} is inverted or degenerate")
        inner = self.edge_cells[:, 1] >= 0
        # the two cells of an interior edge must see opposite outward normals
        k0 = self.edge_cells[inner, 0]
        k1 = self.edge_cells[inner, 1]
        e_idx = np.nonzero(inner)[0]
        s0 = self._sign_of(k0, e_idx)
        s1 = self._sign_of(k1, e_idx)
        if np.any(s0 * s1 > 0):
            raise MeshError("non-matching mesh: overlapping cells across an edge")
        # hanging vertices: a vertex strictly inside a boundary edge
        bnd = np.nonzero(~inner)[0]
        if len(bnd):
            a = v[self.edges[bnd, 0]]
            b = v[self.edges[bnd, 1]]
            t = b - a
            L2 = np.einsum("ij,ij->i", t, t)
            for start in range(0, len(bnd), 256):
                sl = slice(start, start + 256)
                d = v[None, :, :] - a[sl, None, :]
                s = np.einsum("ijk,ik->ij", d, t[sl]) / L2[sl, None]
                cross = d[:, :, 0] * t[sl, None, 1] - d[:, :, 1] * t[sl, None, 0]
                hit = (s > 1e-10) & (s < 1 - 1e-10) & (np.abs(cross) <= 1e-10 * L2[sl, None])
                if np.any(hit):
                    raise MeshError("non-matching mesh: hanging vertex on an edge")
        self.signed_areas = signed

    def _sign_of(self, cells, edges):
        loc = np.argmax(self.cell_edges[cells] == edges[:, None], axis=1)
        return self.cell_edge_sign[cells, loc]

    def _build_geometry(self):
        v = self.vertices
        c = self.cells
        x = v[c]  # (M,3,2)
        self.areas = self.signed_areas.copy()
        # barycentric gradients: grad(lambda_i) = rot90(x_{i+2}-x_{i+1}) / (2|K|)
        e = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
        self.bary_grads = np.stack([-e[:, :, 1], e[:, :, 0]], axis=2) / (2.0 * self.areas[:, None, None])
        self.cell_edge_lengths = np.linalg.norm(e, axis=2)
        self.diameters = self.cell_edge_lengths.max(axis=1)
        # outward normals of local edges
        self.cell_normals = np.stack([e[:, :, 1], -e[:, :, 0]], axis=2) / self.cell_edge_lengths[:, :, None]
        t = v[self.edges[:, 1]] - v[self.edges[:, 0]]
        self.edge_lengths = np.linalg.norm(t, axis=1)
        self.edge_normals = np.stack([t[:, 1], -t[:, 0]], axis=1) / self.edge_lengths[:, None]
        self.centroids = x.mean(axis=1)

    def _build_boundary(self, tags, default_tag):
        self.boundary_edge = self.edge_cells[:, 1] < 0
        lookup = {}
        for (a, b), tag in tags.items():
            lookup[(min(a, b), max(a, b))] = str(tag)
        edge_tag = np.full(len(self.edges), "", dtype=object)
        for j in np.nonzero(self.boundary_edge)[0]:
            a, b = self.edges[j]
            edge_tag[j] = lookup.pop((int(a), int(b)), default_tag)
        if lookup:
            raise MeshError(f"boundary tag given for a non-boundary edge {next(iter(lookup))}")
        self.edge_tag = edge_tag
        bv = np.zeros(len(self.vertices), dtype=bool)
        bv[self.edges[self.boundary_edge].ravel()] = True
        self.boundary_vertex = bv

    def _build_vertex_cells(self):
        flat = self.cells.reshape(-1)
        order = np.argsort(flat, kind="stable")
        self._vc_cells = (order // 3).astype(np.int64)
        self._vc_ptr = np.zeros(len(self.vertices) + 1, dtype=np.int64)
        np.add.at(self._vc_ptr, flat + 1, 1)
        self._vc_ptr = np.cumsum(self._vc_ptr)

    # --------------------------------------------------------------- queries
    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def vertex_cells(self, vertex: int) -> np.ndarray:
        return self._vc_cells[self._vc_ptr[vertex]:self._vc_ptr[vertex + 1]]

    def boundary_tags(self) -> dict[tuple[int, int], str]:
        return {
            (int(self.edges[j, 0]), int(self.edges[j, 1])): self.edge_tag[j]
            for j in np.nonzero(self.boundary_edge)[0]
        }

    def edges_with_tag(self, tag: str) -> np.ndarray:
        return np.nonzero(self.boundary_edge & (self.edge_tag == tag))[0]


def geometry(mesh: Mesh, cell: int) -> CellGeometry:
    if not 0 <= cell < mesh.n_cells:
        raise IndexError(f"cell index {cell} out of range")
    if mesh.areas[cell] <= 0:
        raise MeshError("degenerate cell")
    return CellGeometry(
        area=float(mesh.areas[cell]),
        diameter=float(mesh.diameters[cell]),
        normals=mesh.cell_normals[cell].copy(),
        edge_lengths=mesh.cell_edge_lengths[cell].copy(),
        bary_grads=mesh.bary_grads[cell].copy(),
    )


def vertex_patch(mesh: Mesh, vertex: int) -> Patch:
    if not 0 <= vertex < mesh.n_vertices:
        raise IndexError(f"vertex index {vertex} out of range")
    cells = np.sort(mesh.vertex_cells(vertex))
    edges = np.unique(mesh.cell_edges[cells])
    through = edges[(mesh.edges[edges, 0] == vertex) | (mesh.edges[edges, 1] == vertex)]
    interior = through[~mesh.boundary_edge[through]]
    return Patch(
        center_vertex=int(vertex),
        cells=cells,
        is_boundary_vertex=bool(mesh.boundary_vertex[vertex]),
        edges=edges,
        interior_edges=interior,
        vertices=np.unique(mesh.cells[cells]),
    )


def uniform_refine(mesh: Mesh) -> Mesh:
    """Split every triangle into four by joining edge midpoints."""
    nv = mesh.n_vertices
    mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    verts = np.vstack([mesh.vertices, mids])
    c = mesh.cells
    m = nv + mesh.cell_edges  # midpoint of the edge opposite local vertex i
    children = np.concatenate([
        np.stack([c[:, 0], m[:, 2], m[:, 1]], axis=1),
        np.stack([m[:, 2], c[:, 1], m[:, 0]], axis=1),
        np.stack([m[:, 1], m[:, 0], c[:, 2]], axis=1),
        np.stack([m[:, 0], m[:, 1], m[:, 2]], axis=1),
    ])
    mat = np.tile(mesh.cell_material, 4)
    tags = {}
    for j in np.nonzero(mesh.boundary_edge)[0]:
        a, b = mesh.edges[j]
        tags[(int(a), nv + j)] = mesh.edge_tag[j]
        tags[(nv + j, int(b))] = mesh.edge_tag[j]
    return Mesh(verts, children, mat, tags)


def structured_square(n: int, x0=0.0, x1=1.0, y0=0.0, y1=1.0) -> Mesh:
    """n x n grid of squares, each cut along its lower-left to upper-right diagonal.

    Sides are tagged ``bottom``, ``right``, ``top``, ``left``.
    """
    xs = np.linspace(x0, x1, n + 1)
    ys = np.linspace(y0, y1, n + 1)
    X, Y = np.meshgrid(xs, ys)
    verts = np.stack([X.ravel(), Y.ravel()], axis=1)
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    cells = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    tags = {}
    for i in range(n):
        tags[(int(idx[0, i]), int(idx[0, i + 1]))] = "bottom"
        tags[(int(idx[n, i]), int(idx[n, i + 1]))] = "top"
        tags[(int(idx[i, 0]), int(idx[i + 1, 0]))] = "left"
        tags[(int(idx[i, n]), int(idx[i + 1, n]))] = "right"
    return Mesh(verts, cells, None, tags)


def load_mesh(path: str | Path) -> Mesh:
    """Read the ``poromesh 1`` ASCII format."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise FileNotFoundError(str(exc)) from exc
    rows = [(i + 1, ln.split()) for i, ln in enumerate(lines)]
    rows = [(i, t) for i, t in rows if t and not t[0].startswith("#")]
    pos = 0

    def take(kind):
        nonlocal pos
        if pos >= len(rows):
            raise MeshError(f"{path}: unexpected end of file, expected '{kind}'")
        lineno, tok = rows[pos]
        pos += 1
        return lineno, tok

    def section(name):
        lineno, tok = take(name)
        if len(tok) != 2 or tok[0] != name:
            raise MeshError(f"{path}:{lineno}: expected '{name} <count>'")
        try:
            return int(tok[1])
        except ValueError:
            raise MeshError(f"{path}:{lineno}: bad count '{tok[1]}'") from None

    lineno = 0
    lineno, tok = take("poromesh")
    if tok != ["poromesh", "1"]:
        raise MeshError(f"{path}:{lineno}: header must be 'poromesh 1'")
    try:
        nv = section("vertices")
        verts = []
        for _ in range(nv):
            lineno, tok = take("vertex")
            if len(tok) != 2:
                raise MeshError(f"{path}:{lineno}: vertex line needs 'x y'")
            verts.append([float(tok[0]), float(tok[1])])
        nc = section("cells")
        cells, mats = [], []
        for _ in range(nc):
            lineno, tok = take("cell")
            if len(tok) != 4:
                raise MeshError(f"{path}:{lineno}: cell line needs 'i j k mat'")
            cells.append([int(t) for t in tok[:3]])
            mats.append(int(tok[3]))
        nb = section("boundary")
        tags = {}
        for _ in range(nb):
            lineno, tok = take("boundary edge")
            if len(tok) != 3:
                raise MeshError(f"{path}:{lineno}: boundary line needs 'i j tag'")
            tags[(int(tok[0]), int(tok[1]))] = tok[2]
    except ValueError as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"{path}:{lineno}: {exc}") from None
    if pos != len(rows):
        raise MeshError(f"{path}:{rows[pos][0]}: trailing content")
    return Mesh(np.array(verts), np.array(cells, dtype=np.int64), np.array(mats), tags)


def save_mesh(mesh: Mesh, path: str | Path) -> None:
    out = ["poromesh 1", f"vertices {mesh.n_vertices}"]
    out += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices]
    out.append(f"cells {mesh.n_cells}")
    out += [f"{a} {b} {c} {m}" for (a, b, c), m in zip(mesh.cells, mesh.cell_material)]
    bt = mesh.boundary_tags()
    out.append(f"boundary {len(bt)}")
    out += [f"{a} {b} {t}" for (a, b), t in bt.items()]
    Path(path).write_text("\n".join(out) + "\n")

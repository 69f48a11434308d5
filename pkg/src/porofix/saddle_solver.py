"""Sparse direct factorization of symmetric indefinite saddle-point systems."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla


class SingularMatrixError(RuntimeError):
    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message)
        self.pivot = pivot


class AsymmetricMatrixError(ValueError):
    pass


@dataclass
class SaddleSystem:
    """Sparse symmetric matrix plus the index ranges of each physical unknown."""

    matrix: sps.csc_matrix
    blocks: dict[str, slice] = field(default_factory=dict)
    fixed: np.ndarray | None = None  # dofs pinned to zero (identity rows)
    meta: dict = field(default_factory=dict)  # e.g. kind and time step, for mismatch checks

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def split(self, x: np.ndarray) -> dict[str, np.ndarray]:
        return {name: x[sl] for name, sl in self.blocks.items()}

    def asymmetry(self) -> float:
        A = self.matrix
        d = abs(A - A.T)
        scale = abs(A).max() if A.nnz else 1.0
        return (d.max() if d.nnz else 0.0) / max(scale, 1e-300)


def pin_dofs(A: sps.spmatrix, dofs: np.ndarray) -> sps.csc_matrix:
    """Replace rows and columns of ``dofs`` by identity, keeping symmetry."""
    A = sps.csr_matrix(A)
    if len(dofs) == 0:
        return A.tocsc()
    keep = np.ones(A.shape[0])
    keep[dofs] = 0.0
    D = sps.diags(keep)
    pinned = np.zeros(A.shape[0])
    pinned[dofs] = 1.0
    return (D @ A @ D + sps.diags(pinned)).tocsc()


class Factorization:
    """Reusable sparse LU factors of a saddle system.

    SuperLU is thread-safe for concurrent solves; a lock guards the very
    first solve only to keep the lazy verification path deterministic.
    """

    def __init__(self, system: SaddleSystem, verify: bool = False):
        A = system.matrix
        if A.shape[0] != A.shape[1]:
            raise ValueError("matrix must be square")
        if system.asymmetry() > 1e-13:
            raise AsymmetricMatrixError(f"matrix is not symmetric (rel. {system.asymmetry():.2e})")
        self.system = system
        self.dimension = A.shape[0]
        self.verify = verify
        self._lock = threading.Lock()
        if A.nnz == 0:
            raise SingularMatrixError("matrix is singular (all zero)", pivot=0)
        try:
            self._lu = spla.splu(sps.csc_matrix(A), permc_spec="COLAMD")
        except RuntimeError as exc:
            raise SingularMatrixError(f"matrix is singular: {exc}") from None
        diagU = np.abs(self._lu.U.diagonal())
        tiny = diagU <= 1e-14 * max(diagU.max(), 1e-300)
        if np.any(tiny):
            col = int(self._lu.perm_c[np.argmax(tiny)])
            raise SingularMatrixError(f"matrix is singular (zero pivot at index {col})", pivot=col)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.dimension:
            raise ValueError(f"rhs has length {rhs.shape[0]}, expected {self.dimension}")
        x = self._lu.solve(rhs)
        if self.verify:
            A = self.system.matrix
            nb = np.linalg.norm(rhs)
            if nb > 0:
                res = np.linalg.norm(A @ x - rhs) / nb
                if res > 1e-10:
                    raise RuntimeError(f"solve residual {res:.3e} above 1e-10")
        return x


def factorize(system: SaddleSystem, verify: bool = False) -> Factorization:
    return Factorization(system, verify=verify)


def solve(factorization: Factorization, rhs: np.ndarray) -> np.ndarray:
    return factorization.solve(rhs)


class FactorizationCache:
    """Factorizations keyed by (system kind, time step)."""

    def __init__(self, verify: bool = False):
        self._store: dict = {}
        self.verify = verify
        self.builds = 0

    def get(self, key, build):
        fac = self._store.get(key)
        if fac is None:
            fac = factorize(build(), verify=self.verify)
            self._store[key] = fac
            self.builds += 1
        return fac

    def __len__(self):
        return len(self._store)

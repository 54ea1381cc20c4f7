"""Truncated graph-Laplacian eigenbasis on mesh node connectivity."""

from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from .mesh import Mesh, _edge_adjacency

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"BCSRBAS1"
CACHE_VERSION = 1
_HEADER = struct.Struct("<8sIQQQ")  # magic, version, fingerprint, N, N_b
DENSE_LIMIT = 3000

TRUNCATION_FRACTIONS = {"tank": 0.05, "simulation": 0.1}


@dataclass(frozen=True)
class GraphBasis:
    adjacency: sp.csr_matrix
    eigenvalues: np.ndarray  # (N_b,), ascending
    basis: np.ndarray  # (N, N_b), orthonormal columns

    @property
    def n_basis(self) -> int:
        return self.basis.shape[1]

    @property
    def degree(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel()

    @property
    def laplacian(self) -> sp.csr_matrix:
        return graph_laplacian(self.adjacency)

    def truncate(self, n_basis: int) -> "GraphBasis":
        if not 1 <= n_basis <= self.n_basis:
            raise ValueError(f"cannot truncate {self.n_basis} modes to {n_basis}")
        return GraphBasis(self.adjacency, self.eigenvalues[:n_basis], self.basis[:, :n_basis])


def build_adjacency(mesh: Mesh) -> sp.csr_matrix:
    """Unweighted 0/1 adjacency: ``w_ij = 1`` iff nodes i, j share an element edge."""
    return _edge_adjacency(mesh.elements, mesh.n_nodes)


def graph_laplacian(W: sp.spmatrix) -> sp.csr_matrix:
    deg = np.asarray(W.sum(axis=1)).ravel()
    return (sp.diags(deg) - W).tocsr()


def fix_signs(vectors: np.ndarray, rtol: float = 1e-9) -> np.ndarray:
    """Make the largest-magnitude entry of every column positive.

    Entries within ``rtol`` of the column maximum count as ties; the lowest
    index among them decides.
    """
    v = np.array(vectors, dtype=float, copy=True)
    mag = np.abs(v)
    peak = mag.max(axis=0)
    is_peak = mag >= peak * (1 - rtol)
    first = np.argmax(is_peak, axis=0)
    signs = np.sign(v[first, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return v * signs


def _rayleigh_ritz(lap, V):
    Q, _ = np.linalg.qr(V)
    H = Q.T @ (lap @ Q)
    w, S = np.linalg.eigh(0.5 * (H + H.T))
    return w, Q @ S


def build_basis(W: sp.spmatrix, n_basis: int) -> GraphBasis:
    """Smallest ``n_basis`` eigenpairs of ``D - W`` with a fixed sign convention.

    Dense LAPACK (``eigh`` restricted to the index range) is used up to
    ``DENSE_LIMIT`` nodes; larger graphs use shift-invert Lanczos followed by
    a Rayleigh-Ritz cleanup so that the columns are orthonormal to machine
    precision.
    """
    W = sp.csr_matrix(W, dtype=float)
    n = W.shape[0]
    if W.shape != (n, n):
        raise ValueError("adjacency must be square")
    if not 1 <= n_basis <= n:
        raise ValueError(f"n_basis must lie in [1, {n}], got {n_basis}")
    ncomp, _ = connected_components(W, directed=False)
    if ncomp != 1:
        raise ValueError(f"graph is disconnected ({ncomp} components); lambda_2 = 0")
    lap = graph_laplacian(W)

    if n <= DENSE_LIMIT or n_basis > n // 3:
        w, V = sla.eigh(lap.toarray(), subset_by_index=[0, n_basis - 1], driver="evr")
    else:
        # shift slightly below zero so the singular Laplacian factorizes
        v0 = np.linspace(1.0, 2.0, n)
        ncv = min(n, max(2 * n_basis + 1, n_basis + 32))
        w, V = spla.eigsh(lap, k=n_basis, sigma=-1e-3, which="LM", v0=v0, ncv=ncv, tol=0)
        w, V = _rayleigh_ritz(lap, V)
    order = np.argsort(w, kind="stable")
    w = w[order]
    V = fix_signs(V[:, order])
    # the null vector is known exactly for a connected graph
    w[0] = 0.0
    V[:, 0] = 1.0 / math.sqrt(n)
    return GraphBasis(W, w, V)


def default_truncation(n_nodes: int, regime: str = "simulation") -> int:
    """``round(f * N)`` with f = 0.05 (tank) or 0.1 (simulation), clamped to [1, N]."""
    if n_nodes < 20:
        raise ValueError("default truncation needs N >= 20")
    try:
        frac = TRUNCATION_FRACTIONS[regime]
    except KeyError:
        raise ValueError(f"unknown truncation regime {regime!r}") from None
    nb = math.floor(frac * n_nodes + 0.5)
    return int(min(max(nb, 1), n_nodes))


# -- binary cache ----------------------------------------------------------------


def save_basis_cache(path, basis: GraphBasis, fingerprint: int) -> None:
    n, nb = basis.basis.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, fingerprint, n, nb))
        fh.write(np.asarray(basis.basis, dtype="<f8").tobytes(order="F"))
        fh.write(np.asarray(basis.eigenvalues, dtype="<f8").tobytes())


def load_basis_cache(path, mesh: Mesh, n_basis: int | None = None) -> GraphBasis:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated basis cache")
    magic, version, fp, n, nb = _HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        raise ValueError(f"{path}: not a basis cache (version {version})")
    if fp != mesh.fingerprint() or n != mesh.n_nodes:
        raise ValueError(f"{path}: cache belongs to a different mesh")
    if n_basis is not None and nb != n_basis:
        raise ValueError(f"{path}: cache holds {nb} modes, {n_basis} requested")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if body.size != n * nb + nb:
        raise ValueError(f"{path}: corrupt basis cache")
    B = body[: n * nb].reshape((n, nb), order="F").copy()
    lam = body[n * nb :].copy()
    return GraphBasis(build_adjacency(mesh), lam, B)


def cache_dir() -> Path | None:
    d = os.environ.get("BCSR_CACHE_DIR")
    return Path(d) if d else None


def mesh_basis(mesh: Mesh, n_basis: int, cache: Path | None = None) -> GraphBasis:
    """Basis for ``mesh`` with ``n_basis`` modes, using the on-disk cache if set."""
    cache = cache if cache is not None else cache_dir()
    path = None
    if cache is not None:
        path = Path(cache) / f"basis_{mesh.fingerprint():016x}_{n_basis}.bin"
        if path.exists():
            try:
                return load_basis_cache(path, mesh, n_basis)
            except ValueError as exc:
                logger.warning("ignoring basis cache: %s", exc)
    basis = build_basis(build_adjacency(mesh), n_basis)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_basis_cache(path, basis, mesh.fingerprint())
    return basis

"""Simplicial FEM meshes with surface electrodes.

Meshes are immutable once constructed: validation runs in ``__post_init__``,
elements are re-oriented to positive signed measure and all arrays are
frozen (read-only).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from itertools import combinations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

DEFAULT_CONTACT_IMPEDANCE = 0.01


class MeshError(ValueError):
    """Raised when a mesh or electrode layout violates its invariants."""


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


def _facet_key(facets: np.ndarray) -> np.ndarray:
    return np.sort(facets, axis=1)


def _element_faces(elements: np.ndarray) -> np.ndarray:
    """All (d-1)-faces of the simplices, one row per (element, local face)."""
    k = elements.shape[1]
    faces = [np.delete(elements, i, axis=1) for i in range(k)]
    return np.stack(faces, axis=1).reshape(-1, k - 1)


def simplex_measures(nodes: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    """Unsigned measure (length/area/volume) of each simplex.

    Works for simplices of any dimension embedded in R^d (boundary facets
    included) via the Gram determinant.
    """
    x0 = nodes[simplices[:, 0]]
    edges = nodes[simplices[:, 1:]] - x0[:, None, :]
    gram = np.einsum("eid,ejd->eij", edges, edges)
    k = simplices.shape[1] - 1
    return np.sqrt(np.abs(np.linalg.det(gram))) / math.factorial(k)


def _signed_volumes(nodes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    x0 = nodes[elements[:, 0]]
    edges = nodes[elements[:, 1:]] - x0[:, None, :]
    d = elements.shape[1] - 1
    return np.linalg.det(edges) / math.factorial(d)


@dataclass(frozen=True)
class Mesh:
    """Unstructured triangle (2D) or tetrahedron (3D) mesh.

    Parameters
    ----------
    nodes : (N, d) array
        Node coordinates.
    elements : (E, d+1) int array
        Simplices as zero-based node indices. Negatively oriented simplices
        are flipped on construction.
    boundary_facets : (F, d) int array
        Boundary edges (2D) or faces (3D). Must coincide with the set of
        element faces that belong to exactly one element.
    """

    nodes: np.ndarray
    elements: np.ndarray
    boundary_facets: np.ndarray
    dimension: int = field(init=False)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        elements = np.asarray(self.elements, dtype=np.int64)
        facets = np.asarray(self.boundary_facets, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] not in (2, 3):
            raise MeshError(f"nodes must be (N, 2) or (N, 3), got {nodes.shape}")
        d = nodes.shape[1]
        if elements.ndim != 2 or elements.shape[1] != d + 1:
            raise MeshError(f"elements must be (E, {d + 1}) for a {d}D mesh")
        if facets.ndim != 2 or facets.shape[1] != d:
            raise MeshError(f"boundary_facets must be (F, {d}) for a {d}D mesh")
        if not np.all(np.isfinite(nodes)):
            raise MeshError("non-finite node coordinate")
        n = len(nodes)
        bad = np.flatnonzero((elements < 0).any(axis=1) | (elements >= n).any(axis=1))
        if bad.size:
            raise MeshError(f"element {bad[0]} references a node outside [0, {n})")
        bad = np.flatnonzero((facets < 0).any(axis=1) | (facets >= n).any(axis=1))
        if bad.size:
            raise MeshError(f"boundary facet {bad[0]} references a node outside [0, {n})")

        vol = _signed_volumes(nodes, elements)
        scale = np.ptp(nodes, axis=0).max() ** d
        degenerate = np.flatnonzero(np.abs(vol) <= 1e-14 * scale)
        if degenerate.size:
            raise MeshError(f"element {degenerate[0]} is degenerate")
        elements = elements.copy()
        flip = vol < 0
        elements[flip, 0], elements[flip, 1] = elements[flip, 1], elements[flip, 0].copy()

        # boundary = faces used by exactly one element
        faces = _facet_key(_element_faces(elements))
        uniq, counts = np.unique(faces, axis=0, return_counts=True)
        if np.any(counts > 2):
            raise MeshError("non-manifold mesh: a face is shared by more than two elements")
        outer = uniq[counts == 1]
        given = _facet_key(facets)
        given_u, given_counts = np.unique(given, axis=0, return_counts=True)
        if np.any(given_counts > 1):
            raise MeshError("duplicate boundary facet")
        outer_set = {tuple(f) for f in outer}
        for i, f in enumerate(given):
            if tuple(f) not in outer_set:
                raise MeshError(f"boundary facet {i} does not belong to exactly one element")
        if len(given_u) != len(outer):
            raise MeshError("boundary facets do not form a closed surface")

        adj = _edge_adjacency(elements, n)
        ncomp, _ = connected_components(adj, directed=False)
        if ncomp != 1:
            raise MeshError(f"node connectivity graph has {ncomp} components")

        object.__setattr__(self, "nodes", _frozen(nodes, float))
        object.__setattr__(self, "elements", _frozen(elements, np.int64))
        object.__setattr__(self, "boundary_facets", _frozen(facets, np.int64))
        object.__setattr__(self, "dimension", d)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @cached_property
    def element_measures(self) -> np.ndarray:
        return simplex_measures(self.nodes, self.elements)

    @cached_property
    def facet_measures(self) -> np.ndarray:
        return simplex_measures(self.nodes, self.boundary_facets)

    @cached_property
    def shape_gradients(self) -> np.ndarray:
        """(E, d+1, d) gradients of the linear hat functions per element."""
        x0 = self.nodes[self.elements[:, 0]]
        t = self.nodes[self.elements[:, 1:]] - x0[:, None, :]  # (E, d, d), rows = edges
        # rows of inv(t).T are gradients of barycentrics 1..d
        g = np.linalg.inv(t).transpose(0, 2, 1)
        g0 = -g.sum(axis=1, keepdims=True)
        return np.concatenate([g0, g], axis=1)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    def fingerprint(self) -> int:
        """64-bit hash of the sorted node coordinates and element arrays."""
        order = np.lexsort(self.nodes.T[::-1])
        nodes = self.nodes[order]
        elems = np.sort(self.elements, axis=1)
        elems = elems[np.lexsort(elems.T[::-1])]
        h = hashlib.blake2b(digest_size=8)
        h.update(np.ascontiguousarray(nodes, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(elems, dtype="<i8").tobytes())
        return int.from_bytes(h.digest(), "little")


def _edge_adjacency(elements: np.ndarray, n: int) -> sp.csr_matrix:
    pairs = np.concatenate(
        [elements[:, [i, j]] for i, j in combinations(range(elements.shape[1]), 2)]
    )
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    w = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    w.data[:] = 1.0
    return w


@dataclass(frozen=True)
class ElectrodeLayout:
    """Electrode patches as sets of boundary-facet indices.

    ``contact_impedances`` holds one positive ``z_q`` per electrode.
    """

    patches: tuple
    contact_impedances: np.ndarray

    def __post_init__(self):
        patches = tuple(_frozen(np.unique(p), np.int64) for p in self.patches)
        z = np.asarray(self.contact_impedances, dtype=float)
        if z.ndim == 0:
            z = np.full(len(patches), float(z))
        if len(patches) < 2:
            raise MeshError("at least two electrodes are required")
        if z.shape != (len(patches),):
            raise MeshError("one contact impedance per electrode is required")
        if not np.all(np.isfinite(z)) or np.any(z <= 0):
            raise MeshError("contact impedances must be positive")
        seen = set()
        for q, p in enumerate(patches):
            if p.size == 0:
                raise MeshError(f"electrode {q + 1} has an empty patch")
            overlap = seen.intersection(p.tolist())
            if overlap:
                raise MeshError(f"electrode {q + 1} overlaps another electrode")
            seen.update(p.tolist())
        object.__setattr__(self, "patches", patches)
        object.__setattr__(self, "contact_impedances", _frozen(z, float))

    @property
    def n_electrodes(self) -> int:
        return len(self.patches)

    def with_impedances(self, z) -> "ElectrodeLayout":
        return ElectrodeLayout(self.patches, z)

    def check_against(self, mesh: Mesh) -> None:
        """Validate patch indices and facet-connectivity against ``mesh``."""
        nf = len(mesh.boundary_facets)
        for q, p in enumerate(self.patches):
            if p.min() < 0 or p.max() >= nf:
                raise MeshError(f"electrode {q + 1} references facet outside [0, {nf})")
            if not _facets_connected(mesh.boundary_facets[p], mesh.dimension):
                raise MeshError(f"electrode {q + 1} patch is not facet-connected")

    def electrode_measures(self, mesh: Mesh) -> np.ndarray:
        fm = mesh.facet_measures
        return np.array([fm[p].sum() for p in self.patches])


def _facets_connected(facets: np.ndarray, d: int) -> bool:
    # facets are adjacent when they share a (d-2)-subface, i.e. d-1 nodes
    if len(facets) == 1:
        return True
    sub = {}
    for i, f in enumerate(facets):
        for s in combinations(sorted(f.tolist()), d - 1):
            sub.setdefault(s, []).append(i)
    rows, cols = [], []
    for members in sub.values():
        for a, b in combinations(members, 2):
            rows += [a, b]
            cols += [b, a]
    g = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(facets),) * 2)
    return connected_components(g, directed=False)[0] == 1


def validate(mesh: Mesh, layout: ElectrodeLayout | None = None) -> Mesh:
    """Re-run all invariant checks; returns an equivalent validated mesh."""
    out = Mesh(mesh.nodes, mesh.elements, mesh.boundary_facets)
    if layout is not None:
        layout.check_against(out)
    return out


# -- generators ---------------------------------------------------------------


def _coverage_fraction(coverage: float) -> Fraction:
    frac = Fraction(coverage).limit_denominator(1000)
    if abs(float(frac) - coverage) > 1e-12:
        raise ValueError(f"electrode_coverage {coverage} is not a simple rational")
    return frac


def _ring_counts(n_rings: int, n_electrodes: int, boundary_multiple: int) -> list[int]:
    counts = [max(1, math.ceil(2 * math.pi * k / n_electrodes)) for k in range(1, n_rings + 1)]
    last = counts[-1]
    last = math.ceil(last / boundary_multiple) * boundary_multiple
    counts[-1] = max(last, counts[-2] if n_rings > 1 else last)
    return [n_electrodes * c for c in counts]


def _stitch(inner: list[int], n_in: int, outer: list[int], n_out: int) -> list[tuple]:
    """Triangulate the annulus between two rings whose first node sits at angle 0.

    Angles are compared in exact integer arithmetic, so the triangulation is
    periodic in any common divisor of the ring sizes.
    """
    tris = []
    i = j = 0
    while i < n_in or j < n_out:
        advance_inner = j == n_out or (i < n_in and (i + 1) * n_out < (j + 1) * n_in)
        if advance_inner:
            tris.append((inner[i % n_in], inner[(i + 1) % n_in], outer[j % n_out]))
            i += 1
        else:
            tris.append((inner[i % n_in], outer[(j + 1) % n_out], outer[j % n_out]))
            j += 1
    return tris


def _disk_core(radius, n_rings, n_electrodes, electrode_coverage):
    if n_rings < 2:
        raise ValueError("n_rings must be >= 2")
    if n_electrodes < 2:
        raise ValueError("n_electrodes must be >= 2")
    if not 0 < electrode_coverage < 1:
        raise ValueError("electrode_coverage must lie in (0, 1)")
    if radius <= 0:
        raise ValueError("radius must be positive")
    frac = _coverage_fraction(electrode_coverage)
    counts = _ring_counts(n_rings, n_electrodes, frac.denominator)

    nodes = [(0.0, 0.0)]
    rings = [[0]]
    for k, n_k in enumerate(counts, start=1):
        r = radius * k / n_rings
        start = len(nodes)
        theta = 2 * np.pi * np.arange(n_k) / n_k
        nodes.extend(zip(r * np.cos(theta), r * np.sin(theta)))
        rings.append(list(range(start, start + n_k)))

    tris = [(0, rings[1][j], rings[1][(j + 1) % counts[0]]) for j in range(counts[0])]
    for k in range(1, n_rings):
        tris += _stitch(rings[k], counts[k - 1], rings[k + 1], counts[k])

    outer = rings[-1]
    n_b = counts[-1]
    facets = np.array([(outer[j], outer[(j + 1) % n_b]) for j in range(n_b)])
    per_sector = n_b // n_electrodes
    on_electrode = int(frac * per_sector)
    offset = (per_sector - on_electrode) // 2
    # facet j spans angles [2*pi*j/n_b, 2*pi*(j+1)/n_b]
    patches = [
        np.arange(q * per_sector + offset, q * per_sector + offset + on_electrode)
        for q in range(n_electrodes)
    ]
    return np.array(nodes), np.array(tris), facets, patches


def generate_disk_mesh(
    radius: float = 1.0,
    n_rings: int = 24,
    n_electrodes: int = 16,
    electrode_coverage: float = 0.5,
    contact_impedance: float = DEFAULT_CONTACT_IMPEDANCE,
) -> tuple[Mesh, ElectrodeLayout]:
    """Triangulated disk with ``n_electrodes`` equispaced boundary electrodes.

    Nodes sit on ``n_rings`` concentric rings; every ring size is a multiple
    of ``n_electrodes`` so the mesh is invariant under rotation by one
    electrode pitch. Electrode ``q`` (zero-based) is centred in the angular
    sector ``[2*pi*q/L, 2*pi*(q+1)/L]`` and covers ``electrode_coverage`` of
    its boundary length.
    """
    nodes, tris, facets, patches = _disk_core(radius, n_rings, n_electrodes, electrode_coverage)
    mesh = Mesh(nodes, tris, facets)
    layout = ElectrodeLayout(patches, contact_impedance)
    layout.check_against(mesh)
    return mesh, layout


def _layer_levels(height, n_layers, windows):
    """z-levels with every electrode edge present as an exact level."""
    z0 = -height / 2
    uniform = z0 + height * np.arange(n_layers + 1) / n_layers
    edges = sorted({e for w in windows for e in w})
    dz = height / n_layers
    keep = [z for z in uniform if min(abs(z - e) for e in edges) > 0.3 * dz]
    levels = np.array(sorted(set(keep) | set(edges) | {uniform[0], uniform[-1]}))
    return levels


def generate_cylinder_mesh(
    radius: float = 1.0,
    height: float = 1.0,
    n_layers: int = 8,
    rings: int = 2,
    electrodes_per_ring: int = 8,
    n_rings_2d: int = 8,
    electrode_coverage: float = 0.5,
    electrode_height: float | None = None,
    contact_impedance: float = DEFAULT_CONTACT_IMPEDANCE,
) -> tuple[Mesh, ElectrodeLayout]:
    """Tetrahedral cylinder ``r <= radius, |z| <= height/2`` with electrode rings.

    A disk mesh is extruded through the z-levels and every prism is split
    into three tetrahedra by the global-index rule, which keeps neighbouring
    splits conforming. Ring ``r`` is centred at
    ``z = -height/2 + height*(r+0.5)/rings``; electrodes are numbered
    ring-major starting from the bottom ring. ``electrode_height`` defaults to
    half the ring spacing.
    """
    if rings not in (1, 2, 4):
        raise ValueError("rings must be 1, 2 or 4")
    if electrodes_per_ring < 2:
        raise ValueError("electrodes_per_ring must be >= 2")
    if n_layers < rings:
        raise ValueError("n_layers must be >= rings")
    if height <= 0:
        raise ValueError("height must be positive")
    spacing = height / rings
    eh = 0.5 * spacing if electrode_height is None else electrode_height
    if not 0 < eh < spacing:
        raise ValueError("electrode_height must lie in (0, height/rings)")

    nodes2, tris2, facets2, patches2 = _disk_core(
        radius, n_rings_2d, electrodes_per_ring, electrode_coverage
    )
    centres = [-height / 2 + spacing * (r + 0.5) for r in range(rings)]
    windows = [(c - eh / 2, c + eh / 2) for c in centres]
    levels = _layer_levels(height, n_layers, windows)
    nz = len(levels)
    n2 = len(nodes2)

    nodes = np.concatenate(
        [np.column_stack([nodes2, np.full(n2, z)]) for z in levels]
    )
    tris_sorted = np.sort(tris2, axis=1)
    tets = []
    for k in range(nz - 1):
        a, b, c = (tris_sorted[:, i] + k * n2 for i in range(3))
        a1, b1, c1 = a + n2, b + n2, c + n2
        tets += [np.column_stack(t) for t in ((a, b, c, c1), (a, b, b1, c1), (a, a1, b1, c1))]
    tets = np.concatenate(tets)

    # side faces follow the same diagonal rule: lower index bottom -> higher index top
    side = []
    side_owner = []  # (2D facet index, layer)
    for k in range(nz - 1):
        for f, (p, q) in enumerate(facets2):
            lo, hi = (p, q) if p < q else (q, p)
            lo0, hi0 = lo + k * n2, hi + k * n2
            side.append((lo0, hi0, hi0 + n2))
            side.append((lo0, lo0 + n2, hi0 + n2))
            side_owner += [(f, k), (f, k)]
    caps = [tris2, tris2 + (nz - 1) * n2]
    facets = np.concatenate([np.array(side)] + caps)

    owner = np.array(side_owner)
    mids = 0.5 * (levels[:-1] + levels[1:])
    patches = []
    for lo, hi in windows:
        layers = np.flatnonzero((mids > lo) & (mids < hi))
        for p2 in patches2:
            patches.append(np.flatnonzero(np.isin(owner[:, 0], p2) & np.isin(owner[:, 1], layers)))

    mesh = Mesh(nodes, tets, facets)
    layout = ElectrodeLayout(patches, contact_impedance)
    layout.check_against(mesh)
    return mesh, layout


def boundary_measure(mesh: Mesh) -> float:
    return float(mesh.facet_measures.sum())

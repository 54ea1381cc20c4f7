"""Mesh import/export: native JSON, Gmsh MSH 2.2 ASCII and legacy VTK."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .mesh import DEFAULT_CONTACT_IMPEDANCE, ElectrodeLayout, Mesh, MeshError, _element_faces

_GMSH_FACET = {2: 1, 3: 2}  # dimension -> facet element type (line, triangle)
_GMSH_CELL = {2: 2, 3: 4}  # dimension -> cell element type (triangle, tetrahedron)
_VTK_CELL = {2: 5, 3: 10}


class MeshFormatError(MeshError):
    """Raised when a mesh file cannot be parsed."""


def _boundary_from_elements(elements: np.ndarray) -> np.ndarray:
    faces = _element_faces(elements)
    key = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return faces[counts[inverse.ravel()] == 1]


def _patches_from_facets(mesh: Mesh, electrode_facets: list[np.ndarray]) -> list[np.ndarray]:
    lookup = {tuple(sorted(f)): i for i, f in enumerate(mesh.boundary_facets.tolist())}
    patches = []
    for q, facets in enumerate(electrode_facets):
        idx = []
        for f in np.asarray(facets, dtype=np.int64).reshape(-1, mesh.dimension).tolist():
            try:
                idx.append(lookup[tuple(sorted(f))])
            except KeyError:
                raise MeshError(f"electrode {q + 1} facet {f} is not a boundary facet") from None
        patches.append(np.array(idx, dtype=np.int64))
    return patches


# -- native JSON ---------------------------------------------------------------


def mesh_to_dict(mesh: Mesh, layout: ElectrodeLayout) -> dict:
    return {
        "dimension": mesh.dimension,
        "nodes": mesh.nodes.tolist(),
        "elements": mesh.elements.tolist(),
        "electrodes": [
            {"facets": mesh.boundary_facets[p].tolist(), "z": float(z)}
            for p, z in zip(layout.patches, layout.contact_impedances)
        ],
    }


def mesh_from_dict(data: dict) -> tuple[Mesh, ElectrodeLayout]:
    try:
        dim = int(data["dimension"])
        nodes = np.asarray(data["nodes"], dtype=float)
        elements = np.asarray(data["elements"], dtype=np.int64)
        electrodes = data["electrodes"]
    except (KeyError, TypeError, ValueError) as exc:
        raise MeshFormatError(f"malformed native mesh: {exc}") from exc
    if nodes.ndim != 2 or nodes.shape[1] != dim:
        raise MeshFormatError(f"nodes do not match dimension {dim}")
    if elements.ndim != 2 or elements.shape[1] != dim + 1:
        raise MeshFormatError(f"elements do not match dimension {dim}")
    n = len(nodes)
    bad = np.flatnonzero((elements < 0).any(axis=1) | (elements >= n).any(axis=1))
    if bad.size:
        raise MeshError(f"element {bad[0]} references a node outside [0, {n})")
    if not electrodes:
        raise MeshError("no electrodes")
    mesh = Mesh(nodes, elements, _boundary_from_elements(elements))
    patches = _patches_from_facets(mesh, [e["facets"] for e in electrodes])
    z = [float(e.get("z", DEFAULT_CONTACT_IMPEDANCE)) for e in electrodes]
    layout = ElectrodeLayout(patches, z)
    layout.check_against(mesh)
    return mesh, layout


def save_json(path, mesh: Mesh, layout: ElectrodeLayout) -> None:
    Path(path).write_text(json.dumps(mesh_to_dict(mesh, layout)))


# -- Gmsh MSH 2.2 ASCII ----------------------------------------------------------


def _section(lines: list[str], name: str) -> list[str]:
    try:
        start = lines.index(f"${name}")
        end = lines.index(f"$End{name}", start)
    except ValueError:
        raise MeshFormatError(f"missing ${name} section") from None
    return lines[start + 1 : end]


def read_gmsh(path, contact_impedance: float = DEFAULT_CONTACT_IMPEDANCE):
    """Read a MSH 2.2 ASCII file.

    Cells are triangles (type 2) or tetrahedra (type 4). Electrodes are the
    boundary facets (type 1 lines in 2D, type 2 triangles in 3D) whose first
    tag (physical group) is the 1-based electrode number.
    """
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    fmt = _section(lines, "MeshFormat")
    if not fmt or not fmt[0].split()[0].startswith("2"):
        raise MeshFormatError("only MSH 2.x ASCII is supported")
    if len(fmt[0].split()) > 1 and fmt[0].split()[1] != "0":
        raise MeshFormatError("binary MSH files are not supported")

    node_lines = _section(lines, "Nodes")
    try:
        count = int(node_lines[0])
        ids, coords = [], []
        for ln in node_lines[1 : count + 1]:
            parts = ln.split()
            ids.append(int(parts[0]))
            coords.append([float(v) for v in parts[1:4]])
    except (ValueError, IndexError) as exc:
        raise MeshFormatError(f"bad $Nodes section: {exc}") from exc
    index = {nid: i for i, nid in enumerate(ids)}
    coords = np.array(coords)

    by_type: dict[int, list] = {}
    try:
        elem_lines = _section(lines, "Elements")
        count = int(elem_lines[0])
        for ln in elem_lines[1 : count + 1]:
            parts = [int(v) for v in ln.split()]
            etype, ntags = parts[1], parts[2]
            tags = parts[3 : 3 + ntags]
            verts = parts[3 + ntags :]
            by_type.setdefault(etype, []).append((parts[0], tags, verts))
    except (ValueError, IndexError) as exc:
        raise MeshFormatError(f"bad $Elements section: {exc}") from exc

    dim = 3 if 4 in by_type else 2 if 2 in by_type else None
    if dim is None:
        raise MeshFormatError("no triangle or tetrahedron cells found")
    if dim == 2:
        if np.any(np.abs(coords[:, 2]) > 0):
            raise MeshFormatError("2D mesh with non-zero z coordinates")
        coords = coords[:, :2]

    def local(eid, verts):
        try:
            return [index[v] for v in verts]
        except KeyError as exc:
            raise MeshError(f"element {eid} references unknown node {exc.args[0]}") from None

    cells = np.array([local(eid, v) for eid, _, v in by_type[_GMSH_CELL[dim]]], dtype=np.int64)
    groups: dict[int, list] = {}
    for eid, tags, verts in by_type.get(_GMSH_FACET[dim], []):
        if tags and tags[0] >= 1:
            groups.setdefault(tags[0], []).append(local(eid, verts))
    if not groups:
        raise MeshError("no electrodes")
    numbers = sorted(groups)
    if numbers != list(range(1, len(numbers) + 1)):
        raise MeshError(f"electrode physical groups must be 1..L, got {numbers}")

    mesh = Mesh(coords, cells, _boundary_from_elements(cells))
    patches = _patches_from_facets(mesh, [np.array(groups[q]) for q in numbers])
    layout = ElectrodeLayout(patches, contact_impedance)
    layout.check_against(mesh)
    return mesh, layout


def write_gmsh(path, mesh: Mesh, layout: ElectrodeLayout) -> None:
    d = mesh.dimension
    out = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$Nodes", str(mesh.n_nodes)]
    for i, x in enumerate(mesh.nodes):
        xyz = list(x) + [0.0] * (3 - d)
        out.append(f"{i + 1} " + " ".join(repr(float(v)) for v in xyz))
    out.append("$EndNodes")
    rows = []
    for q, p in enumerate(layout.patches):
        for f in mesh.boundary_facets[p]:
            rows.append((_GMSH_FACET[d], q + 1, f))
    for e in mesh.elements:
        rows.append((_GMSH_CELL[d], 0, e))
    out += ["$Elements", str(len(rows))]
    for k, (etype, tag, verts) in enumerate(rows, start=1):
        vs = " ".join(str(int(v) + 1) for v in verts)
        out.append(f"{k} {etype} 2 {tag} {tag} {vs}")
    out.append("$EndElements")
    Path(path).write_text("\n".join(out) + "\n")


def load_mesh(path, format: str | None = None, **kwargs) -> tuple[Mesh, ElectrodeLayout]:
    """Load a mesh with electrodes from ``native_json`` or ``gmsh_msh2``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mesh file not found: {path}")
    if format is None:
        format = "gmsh_msh2" if path.suffix == ".msh" else "native_json"
    if format == "native_json":
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise MeshFormatError(f"{path}: {exc}") from exc
        return mesh_from_dict(data)
    if format == "gmsh_msh2":
        return read_gmsh(path, **kwargs)
    raise ValueError(f"unknown mesh format {format!r}")


def save_mesh(path, mesh: Mesh, layout: ElectrodeLayout, format: str | None = None) -> None:
    path = Path(path)
    if format is None:
        format = "gmsh_msh2" if path.suffix == ".msh" else "native_json"
    if format == "native_json":
        save_json(path, mesh, layout)
    elif format == "gmsh_msh2":
        write_gmsh(path, mesh, layout)
    else:
        raise ValueError(f"unknown mesh format {format!r}")


# -- VTK legacy ----------------------------------------------------------------


def write_vtk(path, mesh: Mesh, point_data: dict | None = None, title: str = "bcsr_eit") -> None:
    """Write an UNSTRUCTURED_GRID legacy ASCII file with nodal scalar fields."""
    d = mesh.dimension
    k = d + 1
    out = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID"]
    out.append(f"POINTS {mesh.n_nodes} double")
    for x in mesh.nodes:
        xyz = list(x) + [0.0] * (3 - d)
        out.append(" ".join(repr(float(v)) for v in xyz))
    out.append(f"CELLS {mesh.n_elements} {mesh.n_elements * (k + 1)}")
    for e in mesh.elements:
        out.append(f"{k} " + " ".join(str(int(v)) for v in e))
    out.append(f"CELL_TYPES {mesh.n_elements}")
    out += [str(_VTK_CELL[d])] * mesh.n_elements
    if point_data:
        out.append(f"POINT_DATA {mesh.n_nodes}")
        for name, values in point_data.items():
            values = np.asarray(values, dtype=float).ravel()
            if values.shape != (mesh.n_nodes,):
                raise ValueError(f"field {name!r} must have one value per node")
            out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            out += [repr(float(v)) for v in values]
    Path(path).write_text("\n".join(out) + "\n")

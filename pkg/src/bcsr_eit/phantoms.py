"""Ground-truth phantoms, the case library and SNR-controlled measurement noise."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .forward import ForwardModel
from .mesh import ElectrodeLayout, Mesh, generate_cylinder_mesh, generate_disk_mesh
from .protocol import StimulationProtocol, adjacent_protocol, protocol_from_config

logger = logging.getLogger(__name__)


# -- shape primitives ---------------------------------------------------------------
# 2D shapes used on 3D meshes act on (x, y) only, i.e. they are extruded along z.


@dataclass(frozen=True)
class Circle:
    center: tuple
    radius: float
    value: float
    label: str | None = None

    def contains(self, pts):
        c = np.asarray(self.center, dtype=float)
        return np.sum((pts[:, :2] - c) ** 2, axis=1) <= self.radius**2


@dataclass(frozen=True)
class Ellipse:
    center: tuple
    axes: tuple
    value: float
    angle: float = 0.0
    label: str | None = None

    def contains(self, pts):
        dx = pts[:, :2] - np.asarray(self.center, dtype=float)
        ca, sa = math.cos(self.angle), math.sin(self.angle)
        u = ca * dx[:, 0] + sa * dx[:, 1]
        v = -sa * dx[:, 0] + ca * dx[:, 1]
        a, b = self.axes
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0


@dataclass(frozen=True)
class Polygon:
    vertices: tuple
    value: float
    label: str | None = None

    def contains(self, pts):
        # even-odd ray casting, vectorized over points
        poly = np.asarray(self.vertices, dtype=float)
        x, y = pts[:, 0], pts[:, 1]
        inside = np.zeros(len(pts), dtype=bool)
        xj, yj = poly[-1]
        for xi, yi in poly:
            crosses = (yi > y) != (yj > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                x_cut = (xj - xi) * (y - yi) / (yj - yi) + xi
            inside ^= crosses & (x < x_cut)
            xj, yj = xi, yi
        return inside


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    value: float
    label: str | None = None

    def contains(self, pts):
        c = np.asarray(self.center, dtype=float)
        return np.sum((pts[:, :3] - c) ** 2, axis=1) <= self.radius**2


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple
    axes: tuple
    value: float
    label: str | None = None

    def contains(self, pts):
        q = (pts[:, :3] - np.asarray(self.center, dtype=float)) / np.asarray(self.axes, dtype=float)
        return np.sum(q**2, axis=1) <= 1.0


@dataclass(frozen=True)
class Cylinder:
    """Vertical circular cylinder with axis through ``center`` (x, y)."""

    center: tuple
    radius: float
    z_range: tuple
    value: float
    label: str | None = None

    def contains(self, pts):
        z0, z1 = self.z_range
        r2 = np.sum((pts[:, :2] - np.asarray(self.center, dtype=float)) ** 2, axis=1)
        return (r2 <= self.radius**2) & (pts[:, 2] >= z0) & (pts[:, 2] <= z1)


@dataclass(frozen=True)
class Frustum:
    """Vertical truncated cone; ``radii`` at the bottom and top of ``z_range``."""

    center: tuple
    z_range: tuple
    radii: tuple
    value: float
    label: str | None = None

    def contains(self, pts):
        z0, z1 = self.z_range
        r0, r1 = self.radii
        z = pts[:, 2]
        t = np.clip((z - z0) / (z1 - z0), 0.0, 1.0)
        r = r0 + t * (r1 - r0)
        r2 = np.sum((pts[:, :2] - np.asarray(self.center, dtype=float)) ** 2, axis=1)
        return (r2 <= r**2) & (z >= z0) & (z <= z1)


@dataclass(frozen=True)
class GaussianBump:
    """Additive smooth term ``amplitude * exp(-|x - center|^2 / (2 width^2))``."""

    center: tuple
    width: float
    amplitude: float

    def evaluate(self, pts):
        c = np.asarray(self.center, dtype=float)
        r2 = np.sum((pts[:, : len(c)] - c) ** 2, axis=1)
        return self.amplitude * np.exp(-r2 / (2 * self.width**2))


_SHAPES = {
    "circle": Circle,
    "ellipse": Ellipse,
    "polygon": Polygon,
    "sphere": Sphere,
    "ellipsoid": Ellipsoid,
    "cylinder": Cylinder,
    "frustum": Frustum,
}
_SHAPES_3D_ONLY = {"sphere", "ellipsoid", "cylinder", "frustum"}


def shape_from_dict(spec: dict):
    spec = dict(spec)
    kind = spec.pop("type")
    try:
        cls = _SHAPES[kind]
    except KeyError:
        raise ValueError(f"unknown shape type {kind!r}") from None
    for key in ("center", "axes", "vertices", "z_range", "radii"):
        if key in spec:
            spec[key] = tuple(tuple(v) if isinstance(v, list) else v for v in spec[key])
    return cls(**spec)


@dataclass(frozen=True)
class Phantom:
    """Background plus piecewise-constant shapes and additive smooth bumps.

    Shapes are painted in order, so a later shape overrides earlier ones
    where they overlap; bumps are added to the painted field afterwards.
    """

    name: str
    background: float
    shapes: tuple = ()
    bumps: tuple = ()
    dimension: int = 2

    def __post_init__(self):
        if self.background <= 0:
            raise ValueError("background conductivity must be positive")
        for s in self.shapes:
            if s.value <= 0:
                raise ValueError(f"shape conductivity must be positive, got {s.value}")
            if self.dimension == 2 and type(s).__name__.lower() in _SHAPES_3D_ONLY:
                raise ValueError(f"{type(s).__name__} needs a 3D phantom")

    def evaluate(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        sigma = np.full(len(pts), float(self.background))
        for s in self.shapes:
            sigma[s.contains(pts)] = s.value
        for b in self.bumps:
            sigma += b.evaluate(pts)
        return sigma

    def labelled(self, label: str):
        for s in self.shapes:
            if s.label == label:
                return s
        raise KeyError(f"phantom {self.name!r} has no region {label!r}")


def rasterize_phantom(phantom: Phantom, mesh: Mesh) -> np.ndarray:
    """Nodal conductivity of ``phantom`` on ``mesh`` (node-in-shape test)."""
    if mesh.dimension != phantom.dimension:
        raise ValueError(f"{phantom.dimension}D phantom on a {mesh.dimension}D mesh")
    sigma = phantom.evaluate(mesh.nodes)
    if np.any(sigma <= 0):
        raise ValueError("phantom produces non-positive conductivity")
    return sigma


def region_mask(mesh: Mesh, shape) -> np.ndarray:
    """Elements whose centroid lies inside ``shape``."""
    return shape.contains(mesh.centroids)


# -- case library -------------------------------------------------------------------


@dataclass(frozen=True)
class Case:
    case_id: str
    phantom: Phantom
    bounds: dict  # {"fine": (l, u), "coarse": (l, u)}
    truncation: str
    domain: dict
    sim_mesh: dict
    recon_mesh: dict
    protocol: dict = field(default_factory=dict)

    def build_mesh(self, which: str = "recon", **overrides) -> tuple[Mesh, ElectrodeLayout]:
        params = dict(self.sim_mesh if which == "sim" else self.recon_mesh)
        params.update(overrides)
        return build_domain_mesh(self.domain, params)

    def build_protocol(self, L: int) -> StimulationProtocol:
        if self.protocol:
            return protocol_from_config(self.protocol, L)
        return adjacent_protocol(L, skip_driven=True)


def build_domain_mesh(domain: dict, params: dict) -> tuple[Mesh, ElectrodeLayout]:
    kind = domain["type"]
    if kind == "disk":
        return generate_disk_mesh(radius=domain.get("radius", 1.0), **params)
    if kind == "cylinder":
        return generate_cylinder_mesh(
            radius=domain.get("radius", 1.0),
            height=domain.get("height", 1.0),
            rings=domain.get("rings", 2),
            electrodes_per_ring=domain.get("electrodes_per_ring", 8),
            **params,
        )
    raise ValueError(f"unknown domain type {kind!r}")


def _library() -> dict:
    text = resources.files("bcsr_eit").joinpath("data/cases.json").read_text()
    return json.loads(text)["cases"]


def case_ids() -> list[str]:
    return sorted(_library())


def case_library(case_id: str) -> Case:
    lib = _library()
    if case_id not in lib:
        raise KeyError(f"unknown case {case_id!r}; known: {', '.join(sorted(lib))}")
    spec = lib[case_id]
    phantom = Phantom(
        case_id,
        float(spec["background"]),
        tuple(shape_from_dict(s) for s in spec.get("shapes", [])),
        tuple(
            GaussianBump(tuple(b["center"]), b["width"], b["amplitude"])
            for b in spec.get("bumps", [])
        ),
        int(spec["dimension"]),
    )
    bounds = {k: tuple(v) for k, v in spec["bounds"].items()}
    return Case(
        case_id,
        phantom,
        bounds,
        spec["truncation"],
        spec["domain"],
        spec["sim_mesh"],
        spec["recon_mesh"],
        spec.get("protocol", {}),
    )


def lung_masks(case: Case, mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Element masks for the ``left_lung`` and ``right_lung`` regions."""
    p = case.phantom
    return region_mask(mesh, p.labelled("left_lung")), region_mask(mesh, p.labelled("right_lung"))


def breathing_sequence(
    mesh: Mesh,
    left_shape,
    right_shape,
    n_frames: int = 20,
    depth: float = 0.2,
    right_left_ratio: float = 1.5,
) -> list[np.ndarray]:
    """Synthetic nodal ``delta sigma`` frames over one breath.

    The drop follows ``depth * sin(pi t)^2`` in the left lung and
    ``right_left_ratio`` times that in the right lung.
    """
    left = left_shape.contains(mesh.nodes)
    right = right_shape.contains(mesh.nodes)
    frames = []
    for t in np.linspace(0.0, 1.0, n_frames):
        a = depth * math.sin(math.pi * t) ** 2
        d = np.zeros(mesh.n_nodes)
        d[left] = -a
        d[right] = -right_left_ratio * a
        frames.append(d)
    return frames


# -- noise and simulation -------------------------------------------------------------


@dataclass
class NoiseModel:
    snr_db: float
    seed: int = 0
    realized_sigma: float | None = None

    def apply(self, v_clean) -> np.ndarray:
        """Add i.i.d. Gaussian noise rescaled so the realized SNR hits ``snr_db``.

        ``snr_db = inf`` returns an unmodified copy.
        """
        v = np.asarray(v_clean, dtype=float)
        if math.isinf(self.snr_db) and self.snr_db > 0:
            self.realized_sigma = 0.0
            return v.copy()
        rng = np.random.default_rng(self.seed)
        e = rng.standard_normal(v.shape)
        power = float(v @ v)
        if power == 0:
            raise ValueError("cannot set an SNR for an all-zero signal")
        e *= math.sqrt(power / 10.0 ** (self.snr_db / 10.0) / float(e @ e))
        self.realized_sigma = float(np.sqrt(np.mean(e**2)))
        return v + e


def realized_snr(v_clean, v_noisy) -> float:
    v = np.asarray(v_clean, dtype=float)
    e = np.asarray(v_noisy, dtype=float) - v
    return 10.0 * math.log10(float(v @ v) / float(e @ e))


def simulate_measurements(
    phantom: Phantom,
    sim_mesh: Mesh,
    layout: ElectrodeLayout,
    protocol: StimulationProtocol,
    noise: NoiseModel,
    model: ForwardModel | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    sigma = rasterize_phantom(phantom, sim_mesh)
    model = model or ForwardModel(sim_mesh, layout, protocol)
    v_clean = model.measure(sigma)
    return v_clean, noise.apply(v_clean)


def write_dataset(path, protocol, v_clean, v_noisy, snr_db, seed, mesh_fingerprint) -> None:
    payload = {
        "protocol": protocol.to_dict(),
        "V_clean": [float(x) for x in v_clean],
        "V_noisy": [float(x) for x in v_noisy],
        "snr_db": None if math.isinf(snr_db) else float(snr_db),
        "seed": int(seed),
        "mesh_fingerprint": f"{mesh_fingerprint:016x}",
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))


def read_dataset(path) -> dict:
    data = json.loads(Path(path).read_text())
    data["protocol"] = StimulationProtocol.from_dict(data["protocol"])
    data["V_clean"] = np.asarray(data["V_clean"], dtype=float)
    data["V_noisy"] = np.asarray(data["V_noisy"], dtype=float)
    data["snr_db"] = math.inf if data["snr_db"] is None else data["snr_db"]
    data["mesh_fingerprint"] = int(data["mesh_fingerprint"], 16)
    return data

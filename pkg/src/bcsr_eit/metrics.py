"""Image-quality metrics on mesh fields and the lung ventilation index."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .mesh import Mesh

SSIM_GRID = 128
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11 x 11 window
SSIM_K1 = 0.01
SSIM_K2 = 0.03
METRIC_COLUMNS = ("case", "method", "snr", "seed", "ssim", "cc", "rmse")


# -- point location on simplicial meshes ----------------------------------------------


class PointLocator:
    """Locate points in a mesh and return barycentric coordinates.

    Candidate elements come from a KD-tree over element centroids. A point
    outside every candidate is assigned to the closest candidate, keeping
    its (extrapolating) barycentric coordinates, if it lies within ``snap``
    element diameters of it; otherwise it is reported as outside.
    """

    def __init__(self, mesh: Mesh, n_candidates: int = 24):
        self.mesh = mesh
        self._tree = cKDTree(mesh.centroids)
        self._k = min(n_candidates, mesh.n_elements)
        pts = mesh.nodes[mesh.elements]
        edges = pts[:, :, None, :] - pts[:, None, :, :]
        self._diam = np.sqrt(np.max(np.sum(edges**2, axis=-1), axis=(1, 2)))

    def _barycentric(self, elems, x):
        m = self.mesh
        G = m.shape_gradients[elems]  # (..., k, d)
        v0 = m.nodes[m.elements[elems, 0]]
        lam = np.einsum("...kd,...d->...k", G, x - v0)
        lam[..., 0] += 1.0
        return lam

    def locate(self, points, tol: float = 1e-9, snap: float = 0.5):
        x = np.atleast_2d(np.asarray(points, dtype=float))
        _, cand = self._tree.query(x, k=self._k)
        cand = cand.reshape(len(x), -1)
        lam = self._barycentric(cand, x[:, None, :])
        worst = lam.min(axis=2)
        pick = np.argmax(worst, axis=1)
        rows = np.arange(len(x))
        elem = cand[rows, pick]
        bary = lam[rows, pick]
        inside = worst[rows, pick] >= -tol
        outside = ~inside
        if np.any(outside):
            clipped = np.clip(bary[outside], 0.0, None)
            clipped /= clipped.sum(axis=1, keepdims=True)
            verts = self.mesh.nodes[self.mesh.elements[elem[outside]]]
            proj = np.einsum("pk,pkd->pd", clipped, verts)
            gap = np.linalg.norm(proj - x[outside], axis=1)
            near = gap <= snap * self._diam[elem[outside]]
            idx = np.flatnonzero(outside)
            inside[idx[near]] = True
            elem[idx[~near]] = -1
        return elem, bary, inside

    def interpolate(self, values, points, chunk: int = 20000, **kw):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        parts = [self.locate(points[i : i + chunk], **kw) for i in range(0, len(points), chunk)]
        elem, bary, ok = (np.concatenate(p) for p in zip(*parts))
        out = np.full(len(elem), np.nan)
        nodes = self.mesh.elements[elem[ok]]
        out[ok] = np.einsum("pk,pk->p", bary[ok], np.asarray(values, dtype=float)[nodes])
        return out, ok


def transfer_field(src_mesh: Mesh, sigma_src, dst_mesh: Mesh) -> np.ndarray:
    """Evaluate the linear interpolant of ``sigma_src`` at the nodes of ``dst_mesh``."""
    sigma_src = np.asarray(sigma_src, dtype=float)
    if sigma_src.shape != (src_mesh.n_nodes,):
        raise ValueError("field does not match the source mesh")
    if src_mesh.dimension != dst_mesh.dimension:
        raise ValueError("meshes differ in dimension")
    out, ok = PointLocator(src_mesh).interpolate(sigma_src, dst_mesh.nodes)
    if not np.all(ok):
        bad = int(np.flatnonzero(~ok)[0])
        raise ValueError(f"destination node {bad} lies outside the source domain")
    return out


# -- SSIM / CC / RMSE ------------------------------------------------------------------


@dataclass
class MetricReport:
    ssim: float
    cc: float
    rmse: float
    meta: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {k: self.meta.get(k, "") for k in ("case", "method", "snr", "seed")}
        out.update(ssim=self.ssim, cc=self.cc, rmse=self.rmse)
        return out


def rmse(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def correlation(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    da, db = a - a.mean(), b - b.mean()
    na, nb = math.sqrt(float(da @ da)), math.sqrt(float(db @ db))
    if na == 0 or nb == 0:
        warnings.warn("correlation undefined for a constant field", RuntimeWarning, stacklevel=2)
        return math.nan
    return float(np.clip((da @ db) / (na * nb), -1.0, 1.0))


def raster_grid(mesh: Mesh, n: int = SSIM_GRID, full_volume: bool = False):
    """Pixel centres over the bounding box (axial mid-plane for 3D meshes)."""
    lo, hi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
    axes = [lo[i] + (hi[i] - lo[i]) * (np.arange(n) + 0.5) / n for i in range(2)]
    if mesh.dimension == 2:
        X, Y = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()]), (n, n)
    if full_volume:
        axes.append(lo[2] + (hi[2] - lo[2]) * (np.arange(n) + 0.5) / n)
        grids = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([g.ravel() for g in grids]), (n, n, n)
    X, Y = np.meshgrid(*axes, indexing="ij")
    z = np.full(X.size, 0.5 * (lo[2] + hi[2]))
    return np.column_stack([X.ravel(), Y.ravel(), z]), (n, n)


def rasterize(mesh: Mesh, values, n: int = SSIM_GRID, full_volume: bool = False, locator=None):
    pts, shape = raster_grid(mesh, n, full_volume)
    locator = locator or PointLocator(mesh)
    img, mask = locator.interpolate(values, pts, snap=0.0)
    img = np.where(mask, img, 0.0)
    return img.reshape(shape), mask.reshape(shape)


def masked_ssim(x, y, mask, data_range: float) -> float:
    """Mean SSIM over window centres inside ``mask``.

    Local moments use a Gaussian window renormalised by the mask, so pixels
    outside the domain never contribute.
    """
    m = mask.astype(float)
    if not m.any():
        raise ValueError("empty SSIM mask")

    def filt(a):
        return gaussian_filter(a, SSIM_SIGMA, mode="constant", radius=SSIM_RADIUS)

    w = filt(m)
    ok = mask & (w > 1e-12)
    w = np.where(ok, w, 1.0)
    mx, my = filt(x * m) / w, filt(y * m) / w
    vx = filt(x * x * m) / w - mx**2
    vy = filt(y * y * m) / w - my**2
    cxy = filt(x * y * m) / w - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    return float(np.mean(smap[ok]))


def ssim(truth, recon, mesh: Mesh, ssim_range: str = "truth", full_volume: bool = False) -> float:
    loc = PointLocator(mesh)
    grid = 64 if (full_volume and mesh.dimension == 3) else SSIM_GRID
    a, mask = rasterize(mesh, truth, grid, full_volume, loc)
    b, _ = rasterize(mesh, recon, grid, full_volume, loc)
    if ssim_range == "truth":
        rng = float(a[mask].max() - a[mask].min())
    elif ssim_range == "pair":
        rng = float(max(a[mask].max(), b[mask].max()) - min(a[mask].min(), b[mask].min()))
    else:
        raise ValueError(f"unknown ssim_range {ssim_range!r}")
    if rng == 0:
        rng = float(max(np.abs(a[mask]).max(), np.abs(b[mask]).max(), 1e-12))
    return masked_ssim(a, b, mask, rng)


def compute_metrics(
    sigma_truth, sigma_recon, mesh: Mesh, ssim_range: str = "truth", full_volume: bool = False, **meta
) -> MetricReport:
    t = np.asarray(sigma_truth, dtype=float)
    r = np.asarray(sigma_recon, dtype=float)
    if t.shape != (mesh.n_nodes,) or r.shape != t.shape:
        raise ValueError("fields must both be nodal vectors on the given mesh")
    return MetricReport(
        ssim(t, r, mesh, ssim_range, full_volume), correlation(t, r), rmse(t, r), dict(meta)
    )


def write_metrics_csv(path, reports, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        if new:
            w.writeheader()
        for rep in reports:
            w.writerow(rep.row() if isinstance(rep, MetricReport) else rep)


# -- ventilation index -----------------------------------------------------------------


def _element_mask(mesh: Mesh, region) -> np.ndarray:
    region = np.asarray(region)
    if region.dtype == bool:
        if region.shape != (mesh.n_elements,):
            raise ValueError(f"region mask has {region.size} entries, mesh has {mesh.n_elements} elements")
        return region
    mask = np.zeros(mesh.n_elements, dtype=bool)
    if region.size and (region.min() < 0 or region.max() >= mesh.n_elements):
        raise ValueError("region references elements outside the mesh")
    mask[region.astype(np.int64)] = True
    return mask


def ventilation_index(mesh: Mesh, delta_sigma, region) -> float:
    """``sum over elements of max(-mean nodal change, 0) * element measure``."""
    d = np.asarray(delta_sigma, dtype=float)
    if d.shape != (mesh.n_nodes,):
        raise ValueError("conductivity change must be nodal")
    mask = _element_mask(mesh, region)
    drop = -d[mesh.elements[mask]].mean(axis=1)
    return float(np.dot(np.maximum(drop, 0.0), mesh.element_measures[mask]))


@dataclass
class VentilationSeries:
    F_left: np.ndarray
    F_right: np.ndarray
    F_total: np.ndarray
    peak: int
    left_fraction: float
    right_fraction: float

    def to_dict(self) -> dict:
        out = asdict(self)
        for k in ("F_left", "F_right", "F_total"):
            out[k] = np.asarray(out[k]).tolist()
        return out


def ventilation_series(mesh: Mesh, frames, left_mask, right_mask) -> VentilationSeries:
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame")
    left = np.array([ventilation_index(mesh, f, left_mask) for f in frames])
    right = np.array([ventilation_index(mesh, f, right_mask) for f in frames])
    total = left + right
    peak = int(np.argmax(total))
    if total[peak] > 0:
        fl, fr = left[peak] / total[peak], right[peak] / total[peak]
    else:
        warnings.warn("no ventilation signal; fractions undefined", RuntimeWarning, stacklevel=2)
        fl = fr = math.nan
    return VentilationSeries(left, right, total, peak, float(fl), float(fr))


def write_ventilation_csv(path, series: VentilationSeries, times=None) -> None:
    n = len(series.F_total)
    times = np.arange(n) if times is None else np.asarray(times)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "F_left", "F_right", "F_total"])
        for row in zip(times, series.F_left, series.F_right, series.F_total):
            w.writerow([repr(float(v)) for v in row])

"""Complete electrode model solver (linear FEM) and the adjoint Jacobian.

Units follow one consistent system: conductivity in mS/cm, lengths in cm,
currents in mA, potentials in V. Contact impedances are given in the same
system (numerically ``kOhm cm^2``, called Ohm cm^2 in configs).

The zero-mean electrode voltage constraint is eliminated through the basis
``U = C beta`` with ``C[0, :] = 1`` and ``C[j+1, j] = -1``, which keeps the
system symmetric positive definite.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import ElectrodeLayout, Mesh
from .protocol import StimulationProtocol, measurement_operator

logger = logging.getLogger(__name__)


class ForwardError(RuntimeError):
    """Raised when the CEM system cannot be solved."""


@dataclass(frozen=True)
class ForwardSolution:
    potentials: np.ndarray  # (n_inj, N)
    electrode_voltages: np.ndarray  # (n_inj, L)
    measurements: np.ndarray  # (M,)


def check_conductivity(sigma, n: int) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (n,):
        raise ValueError(f"conductivity must have shape ({n},), got {sigma.shape}")
    if not np.all(np.isfinite(sigma)):
        raise ValueError("conductivity contains non-finite values")
    if np.any(sigma <= 0):
        raise ValueError(f"conductivity must be positive (min {sigma.min():.3g})")
    return sigma


def _voltage_basis(L: int) -> np.ndarray:
    C = np.zeros((L, L - 1))
    C[0, :] = 1.0
    C[np.arange(1, L), np.arange(L - 1)] = -1.0
    return C


class ForwardModel:
    """CEM forward operator for a fixed mesh, electrode layout and protocol.

    Geometry-dependent pieces (element stiffness, electrode mass matrices)
    are assembled once; :meth:`solve` only rescales the stiffness by the
    element-mean conductivity and factorizes once per conductivity.
    """

    def __init__(self, mesh: Mesh, layout: ElectrodeLayout, protocol: StimulationProtocol):
        if protocol.n_electrodes != layout.n_electrodes:
            raise ValueError(
                f"protocol has {protocol.n_electrodes} electrodes, layout has {layout.n_electrodes}"
            )
        layout.check_against(mesh)
        self.mesh = mesh
        self.layout = layout
        self.protocol = protocol
        self._setup_geometry()

    def _setup_geometry(self):
        mesh = self.mesh
        d = mesh.dimension
        k = d + 1
        n = mesh.n_nodes
        L = self.layout.n_electrodes
        G = mesh.shape_gradients
        vol = mesh.element_measures
        self._local_stiffness = vol[:, None, None] * np.einsum("eid,ejd->eij", G, G)
        el = mesh.elements
        self._rows = np.repeat(el, k, axis=1).ravel()
        self._cols = np.tile(el, (1, k)).ravel()

        # electrode boundary integrals: int psi_i psi_j and int psi_i per patch
        z = self.layout.contact_impedances
        fm = mesh.facet_measures
        kf = d  # nodes per facet
        local_mass = (np.ones((kf, kf)) + np.eye(kf)) / (kf * (kf + 1))
        r_, c_, v_ = [], [], []
        b = np.zeros((n, L))
        for q, patch in enumerate(self.layout.patches):
            facets = mesh.boundary_facets[patch]
            m = fm[patch]
            r_.append(np.repeat(facets, kf, axis=1).ravel())
            c_.append(np.tile(facets, (1, kf)).ravel())
            v_.append((m[:, None, None] * local_mass[None] / z[q]).ravel())
            np.add.at(b[:, q], facets.ravel(), np.repeat(m / kf, kf))
        self._electrode_mass = sp.coo_matrix(
            (np.concatenate(v_), (np.concatenate(r_), np.concatenate(c_))), shape=(n, n)
        ).tocsr()
        self._b = b
        self._electrode_area = self.layout.electrode_measures(mesh)
        C = _voltage_basis(L)
        self._C = C
        AZ = -b / z[None, :]
        AD = np.diag(self._electrode_area / z)
        self._coupling = sp.csr_matrix(AZ @ C)
        self._voltage_block = sp.csr_matrix(C.T @ AD @ C)

        # node <- element scatter for the Jacobian: int psi_n over element = |T|/(d+1)
        E = mesh.n_elements
        self._node_scatter = sp.csr_matrix(
            (np.repeat(vol / k, k), (el.ravel(), np.repeat(np.arange(E), k))), shape=(n, E)
        )
        self._element_mean = sp.csr_matrix(
            (np.full(E * k, 1.0 / k), (np.repeat(np.arange(E), k), el.ravel())), shape=(E, n)
        )

        pairs = self.protocol.measurement_pairs()
        self._meas_pairs = pairs
        pair_index = {tuple(p): i for i, p in enumerate(pairs.tolist())}
        self._meas_pair_idx = np.array(
            [pair_index[(p, q)] for _, p, q in self.protocol.measurements.tolist()]
        )

    # -- assembly -------------------------------------------------------------

    def system_matrix(self, sigma: np.ndarray) -> sp.csc_matrix:
        sigma = check_conductivity(sigma, self.mesh.n_nodes)
        mean = self._element_mean @ sigma
        data = (mean[:, None, None] * self._local_stiffness).ravel()
        n = self.mesh.n_nodes
        K = sp.coo_matrix((data, (self._rows, self._cols)), shape=(n, n)).tocsr()
        A = sp.bmat(
            [[K + self._electrode_mass, self._coupling], [self._coupling.T, self._voltage_block]],
            format="csc",
        )
        return A

    def _factorize(self, sigma):
        A = self.system_matrix(sigma)
        try:
            return spla.splu(A, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            diag = np.abs(A.diagonal())
            ratio = diag.max() / max(diag.min(), np.finfo(float).tiny)
            raise ForwardError(
                f"singular CEM system ({exc}); diagonal ratio {ratio:.3e}, "
                f"sigma range [{np.min(sigma):.3e}, {np.max(sigma):.3e}]"
            ) from exc

    def _solve_patterns(self, lu, currents: np.ndarray):
        """Solve for current patterns ``currents`` (P, L); returns (phi, U)."""
        n = self.mesh.n_nodes
        rhs = np.zeros((n + self.layout.n_electrodes - 1, len(currents)))
        rhs[n:] = self._C.T @ currents.T
        x = lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise ForwardError("non-finite CEM solution")
        phi = x[:n].T
        U = (self._C @ x[n:]).T
        return phi, U

    # -- public API -------------------------------------------------------------

    def solve(self, sigma) -> ForwardSolution:
        lu = self._factorize(sigma)
        phi, U = self._solve_patterns(lu, self.protocol.current_patterns())
        return ForwardSolution(phi, U, measurement_operator(self.protocol, U))

    def measure(self, sigma) -> np.ndarray:
        return self.solve(sigma).measurements

    def _element_gradients(self, phi: np.ndarray) -> np.ndarray:
        # (P, E, d)
        return np.einsum("pek,ekd->ped", phi[:, self.mesh.elements], self.mesh.shape_gradients)

    def solve_with_jacobian(self, sigma) -> tuple[ForwardSolution, np.ndarray]:
        """Forward solution and ``dV/dsigma`` (M, N) by the adjoint method."""
        lu = self._factorize(sigma)
        drive = self.protocol.current_patterns()
        L = self.layout.n_electrodes
        pairs = self._meas_pairs
        adjoint = np.zeros((len(pairs), L))
        adjoint[np.arange(len(pairs)), pairs[:, 0]] = 1.0
        adjoint[np.arange(len(pairs)), pairs[:, 1]] = -1.0
        phi, U = self._solve_patterns(lu, np.vstack([drive, adjoint]))
        n_inj = len(drive)
        sol = ForwardSolution(phi[:n_inj], U[:n_inj], measurement_operator(self.protocol, U[:n_inj]))

        grad_d = self._element_gradients(phi[:n_inj])
        grad_m = self._element_gradients(phi[n_inj:])
        meas = self.protocol.measurements
        S = np.empty((len(meas), self.mesh.n_elements))
        for i in range(n_inj):
            rows = np.flatnonzero(meas[:, 0] == i)
            if rows.size:
                S[rows] = np.einsum("ed,ped->pe", grad_d[i], grad_m[self._meas_pair_idx[rows]])
        J = -(self._node_scatter @ S.T).T
        return sol, np.ascontiguousarray(J)

    def jacobian(self, sigma) -> np.ndarray:
        return self.solve_with_jacobian(sigma)[1]

    def electrode_currents(self, solution: ForwardSolution) -> np.ndarray:
        """Electrode currents recovered from the FEM fields, ``(n_inj, L)``.

        ``I_q = (|e_q| U_q - int_{e_q} phi) / z_q``.
        """
        z = self.layout.contact_impedances
        integral = solution.potentials @ self._b
        return (self._electrode_area[None, :] * solution.electrode_voltages - integral) / z[None, :]


def solve_forward(mesh, layout, protocol, sigma) -> ForwardSolution:
    return ForwardModel(mesh, layout, protocol).solve(sigma)


def jacobian(mesh, layout, protocol, sigma) -> np.ndarray:
    return ForwardModel(mesh, layout, protocol).jacobian(sigma)


def solve_forward_batch(mesh, layout, protocol, sigma_list) -> list[ForwardSolution]:
    if len(sigma_list) == 0:
        return []
    model = ForwardModel(mesh, layout, protocol)
    return [model.solve(s) for s in sigma_list]


def write_measurements_csv(path, protocol: StimulationProtocol, values) -> None:
    """CSV with 1-based electrodes: ``injection,pos,neg,value_mV``."""
    values = np.asarray(values, dtype=float)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["injection", "pos", "neg", "value_mV"])
        for (i, p, n), v in zip(protocol.measurements.tolist(), values):
            w.writerow([i + 1, p + 1, n + 1, repr(1e3 * float(v))])


def condition_hint(model: ForwardModel, sigma) -> float:
    """Cheap 1-norm condition estimate of the CEM system (diagnostics only)."""
    A = model.system_matrix(sigma)
    lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A")
    inv = spla.LinearOperator(A.shape, matvec=lu.solve, rmatvec=lambda x: lu.solve(x, trans="T"))
    return float(spla.onenormest(A) * spla.onenormest(inv))


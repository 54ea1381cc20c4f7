"""Reference reconstructions: one-step linearized difference (LD) and Gauss-Newton L2."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .forward import ForwardModel, check_conductivity

logger = logging.getLogger(__name__)

DEFAULT_ALPHA_REG = 1e-2


@dataclass(frozen=True)
class LDOperator:
    """``A = (J0^T J0 + alpha_reg R)^-1 J0^T`` with ``R = diag(J0^T J0)``.

    ``A`` is applied through the thin SVD of ``K = J0 R^-1/2``, which also
    makes re-weighting for an ``alpha_reg`` sweep cheap.
    """

    J0: np.ndarray
    R: np.ndarray  # diagonal entries
    alpha_reg: float
    sigma0: np.ndarray
    V0: np.ndarray  # model voltages at sigma0
    _U: np.ndarray = field(repr=False)
    _s: np.ndarray = field(repr=False)
    _Vt: np.ndarray = field(repr=False)

    @property
    def A(self) -> np.ndarray:
        return self.apply_matrix()

    def _filter(self, alpha_reg):
        return self._s / (self._s**2 + alpha_reg)

    def apply_matrix(self, alpha_reg: float | None = None) -> np.ndarray:
        a = self.alpha_reg if alpha_reg is None else alpha_reg
        r_isqrt = 1.0 / np.sqrt(self.R)
        return (r_isqrt[:, None] * self._Vt.T) @ (self._filter(a)[:, None] * self._U.T)

    def with_alpha(self, alpha_reg: float) -> "LDOperator":
        if alpha_reg <= 0:
            raise ValueError("alpha_reg must be positive")
        return LDOperator(self.J0, self.R, alpha_reg, self.sigma0, self.V0, self._U, self._s, self._Vt)


def build_ld(mesh, layout, protocol, sigma0, alpha_reg: float = DEFAULT_ALPHA_REG, model=None) -> LDOperator:
    if alpha_reg <= 0:
        raise ValueError("alpha_reg must be positive")
    model = model or ForwardModel(mesh, layout, protocol)
    sigma0 = check_conductivity(sigma0, mesh.n_nodes).copy()
    sol, J0 = model.solve_with_jacobian(sigma0)
    R = np.einsum("mn,mn->n", J0, J0)
    if np.any(R <= 0):
        raise np.linalg.LinAlgError(
            f"{int(np.sum(R <= 0))} nodes have zero sensitivity; NOSER weighting is singular"
        )
    K = J0 / np.sqrt(R)[None, :]
    U, s, Vt = sla.svd(K, full_matrices=False)
    return LDOperator(J0, R, float(alpha_reg), sigma0, sol.measurements, U, s, Vt)


def ld_reconstruct(ld: LDOperator, dV, alpha_reg: float | None = None) -> np.ndarray:
    """``delta sigma = A @ dV``."""
    dV = np.asarray(dV, dtype=float)
    if dV.shape != (ld.J0.shape[0],):
        raise ValueError(f"expected {ld.J0.shape[0]} measurement differences, got {dV.shape}")
    a = ld.alpha_reg if alpha_reg is None else alpha_reg
    coeff = ld._filter(a) * (ld._U.T @ dV)
    return (ld._Vt.T @ coeff) / np.sqrt(ld.R)


def ld_absolute(ld: LDOperator, V, alpha_reg: float | None = None) -> np.ndarray:
    """Absolute-perturbation LD: ``sigma0 + A (V - U(sigma0))``."""
    return ld.sigma0 + ld_reconstruct(ld, np.asarray(V, dtype=float) - ld.V0, alpha_reg)


def _curvature_corner(rho, eta) -> int:
    """Index of maximum curvature of the (log residual, log norm) curve."""
    x, y = np.log(rho), np.log(eta)
    if len(x) < 3:
        return int(np.argmin(x + y))
    dx, dy = np.gradient(x), np.gradient(y)
    ddx, ddy = np.gradient(dx), np.gradient(dy)
    kappa = (dx * ddy - dy * ddx) / np.maximum((dx**2 + dy**2) ** 1.5, 1e-300)
    return int(np.argmax(np.abs(kappa[1:-1]))) + 1


def sweep_alpha(ld: LDOperator, dV, alphas=None, truth_delta=None) -> tuple[float, list[dict]]:
    """Log sweep over ``alpha_reg``.

    With ``truth_delta`` (the true conductivity change on this mesh) the
    minimum-RMSE value wins, otherwise the L-curve corner is taken.
    """
    alphas = np.logspace(-6, 1, 15) if alphas is None else np.asarray(alphas, dtype=float)
    rows = []
    for a in alphas:
        d = ld_reconstruct(ld, dV, a)
        row = {
            "alpha_reg": float(a),
            "residual": float(np.linalg.norm(ld.J0 @ d - dV)),
            "norm": float(np.sqrt(np.dot(ld.R * d, d))),
        }
        if truth_delta is not None:
            row["rmse"] = float(np.sqrt(np.mean((d - truth_delta) ** 2)))
        rows.append(row)
    if truth_delta is not None:
        best = int(np.argmin([r["rmse"] for r in rows]))
    else:
        best = _curvature_corner(
            np.array([max(r["residual"], 1e-300) for r in rows]),
            np.array([max(r["norm"], 1e-300) for r in rows]),
        )
    return float(alphas[best]), rows


# -- Gauss-Newton with identity Tikhonov ------------------------------------------------


@dataclass
class GNResult:
    sigma: np.ndarray
    objective_history: list
    n_iter: int
    termination_reason: str


def default_gn_weight(J0, relative: float = 1e-2) -> float:
    """``relative * mean(diag(J0^T J0))``."""
    return float(relative * np.mean(np.einsum("mn,mn->n", J0, J0)))


def gn_l2_reconstruct(
    mesh,
    layout,
    protocol,
    V,
    sigma_init,
    weight: float,
    iters: int = 20,
    model: ForwardModel | None = None,
    max_halvings: int = 30,
    rtol: float = 1e-10,
) -> GNResult:
    """Damped Gauss-Newton on ``0.5 ||U(s) - V||^2 + weight ||s - sigma_init||^2``.

    Each step solves the normal equations through the ``M x M`` Woodbury
    form and is halved until the objective drops and ``s`` stays positive.
    """
    if weight <= 0:
        raise ValueError("weight must be positive")
    model = model or ForwardModel(mesh, layout, protocol)
    s_ref = check_conductivity(sigma_init, mesh.n_nodes).copy()
    V = np.asarray(V, dtype=float)
    c = 2.0 * weight

    def objective(s, r):
        d = s - s_ref
        return 0.5 * float(r @ r) + weight * float(d @ d)

    sigma = s_ref.copy()
    sol, J = model.solve_with_jacobian(sigma)
    r = sol.measurements - V
    obj = objective(sigma, r)
    history = [obj]
    reason = "max_iter"
    k = 0
    for k in range(1, iters + 1):
        g = J.T @ r + c * (sigma - s_ref)
        # (J^T J + c I)^-1 g = (g - J^T (J J^T + c I)^-1 J g) / c
        small = J @ J.T
        small[np.diag_indices_from(small)] += c
        step = -(g - J.T @ sla.solve(small, J @ g, assume_a="pos")) / c
        if not np.any(step):
            reason = "stationary"
            k -= 1
            break
        t = 1.0
        for _ in range(max_halvings):
            trial = sigma + t * step
            if np.all(trial > 0):
                r_t = model.measure(trial) - V
                obj_t = objective(trial, r_t)
                if obj_t < obj:
                    break
            t *= 0.5
        else:
            reason = "line_search"
            k -= 1
            break
        rel = (obj - obj_t) / max(obj, 1e-300)
        sigma = trial
        obj = obj_t
        history.append(obj)
        if rel < rtol:
            reason = "stalled"
            break
        sol, J = model.solve_with_jacobian(sigma)
        r = sol.measurements - V
    logger.info("gn_l2 finished: %s after %d iterations, objective %.4e", reason, k, obj)
    return GNResult(sigma, history, k, reason)

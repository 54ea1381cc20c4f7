"""BC-SR reconstruction: Levenberg-Marquardt-Fletcher in the latent space.

The conductivity is generated as ``sigma = H(B @ alpha)`` with ``B`` a
truncated graph-Laplacian basis and ``H`` the bound map, and the misfit
``0.5 * ||U(sigma) - V||^2`` (plus an optional smoothed TV term) is
minimised over ``alpha``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla

from .boundmap import BoundMap
from .forward import ForwardModel
from .mesh import Mesh

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LMFConfig:
    mu0: float = 1e-4
    gamma1: float = 0.25
    gamma2: float = 4.0
    rho1: float = 0.25
    rho2: float = 0.75
    max_iter: int = 50
    eps: float | None = None  # None -> 1e-6 * sqrt(N_b)
    max_inner: int = 20
    mu_min_rel: float = 0.0  # floor on mu relative to ||J_alpha^0||_2^2
    ftol: float | None = None  # optional stop on relative objective decrease

    def __post_init__(self):
        if not 0 < self.rho1 < self.rho2 < 1:
            raise ValueError("need 0 < rho1 < rho2 < 1")
        if not 0 < self.gamma1 < 1 < self.gamma2:
            raise ValueError("need 0 < gamma1 < 1 < gamma2")
        if self.mu0 <= 0:
            raise ValueError("mu0 must be positive")
        if self.max_iter < 1 or self.max_inner < 1:
            raise ValueError("iteration caps must be >= 1")
        if self.mu_min_rel < 0:
            raise ValueError("mu_min_rel must be non-negative")
        if self.ftol is not None and not 0 < self.ftol < 1:
            raise ValueError("ftol must lie in (0, 1)")

    def step_tolerance(self, n_basis: int) -> float:
        return self.eps if self.eps is not None else 1e-6 * math.sqrt(n_basis)


@dataclass(frozen=True)
class TVConfig:
    """Smoothed total variation penalty ``lambda(SNR) * TV_beta(sigma)``.

    ``lambda0 = None`` selects the relative default
    ``relative_weight * (0.5 ||r0||^2) / TV(sigma0)``.
    """

    enabled: bool = False
    lambda0: float | None = None
    beta: float = 1e-2
    relative_weight: float = 1e-3

    def __post_init__(self):
        if self.lambda0 is not None and self.lambda0 < 0:
            raise ValueError("lambda0 must be non-negative")
        if self.beta <= 0:
            raise ValueError("beta must be positive")


@dataclass
class ReconResult:
    alpha: np.ndarray
    c: np.ndarray
    sigma: np.ndarray
    objective_history: list = field(default_factory=list)  # initial + after each accepted step
    step_norms: list = field(default_factory=list)  # per trial step
    accepted: list = field(default_factory=list)
    mu_history: list = field(default_factory=list)
    rho_history: list = field(default_factory=list)
    trial_objectives: list = field(default_factory=list)
    termination_reason: str = "max_iter"
    n_outer: int = 0
    tv_weight: float = 0.0
    sigma_trace: list = field(default_factory=list)
    runtime_s: float = 0.0

    @property
    def n_accepted(self) -> int:
        return int(sum(self.accepted))

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("alpha", "c", "sigma"):
            out[key] = np.asarray(out[key]).tolist()
        out.pop("sigma_trace")
        out.pop("runtime_s")
        return out


# -- building blocks ---------------------------------------------------------------


def latent_jacobian(J_sigma, boundmap: BoundMap, c, B) -> np.ndarray:
    """``J_alpha = J_sigma @ diag(H'(c)) @ B``."""
    J_sigma = np.asarray(J_sigma, dtype=float)
    B = np.asarray(B, dtype=float)
    c = np.asarray(c, dtype=float)
    if J_sigma.ndim != 2 or B.ndim != 2 or J_sigma.shape[1] != B.shape[0] or c.shape != (B.shape[0],):
        raise ValueError(
            f"inconsistent shapes J{J_sigma.shape}, c{c.shape}, B{B.shape}"
        )
    h = boundmap.derivative(boundmap.map(c))
    return (J_sigma * h[None, :]) @ B


def lmf_step(J, r, mu: float, gradient=None) -> np.ndarray:
    """Solve ``(J^T J + mu I) d = -g`` with ``g = J^T r`` unless given."""
    J = np.atleast_2d(np.asarray(J, dtype=float))
    g = J.T @ np.atleast_1d(np.asarray(r, dtype=float)) if gradient is None else gradient
    H = J.T @ J
    H[np.diag_indices_from(H)] += mu
    try:
        d = sla.solve(H, -g, assume_a="pos")
    except (sla.LinAlgError, ValueError) as exc:
        raise FloatingPointError(f"damped normal equations failed: {exc}") from exc
    if not np.all(np.isfinite(d)):
        raise FloatingPointError("non-finite LMF step")
    return d


def fletcher_update(mu: float, rho: float, config: LMFConfig = LMFConfig()) -> float:
    if rho < config.rho1:
        return config.gamma2 * mu
    if rho > config.rho2:
        return config.gamma1 * mu
    return mu


def tv_weight(snr_db, lambda0: float) -> float:
    """SNR-adaptive weight: ``lambda0 * sqrt(10)**((60 - SNR)/10)`` below 60 dB."""
    if lambda0 < 0:
        raise ValueError("lambda0 must be non-negative")
    if snr_db is None or snr_db >= 60:
        return float(lambda0)
    return float(lambda0 * math.sqrt(10.0) ** ((60.0 - snr_db) / 10.0))


def tv_value_and_gradient(mesh: Mesh, sigma, beta: float) -> tuple[float, np.ndarray]:
    """``sum_T |T| sqrt(|grad sigma_T|^2 + beta^2)`` and its nodal gradient."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    sigma = np.asarray(sigma, dtype=float)
    G = mesh.shape_gradients  # (E, k, d)
    vol = mesh.element_measures
    g = np.einsum("ek,ekd->ed", sigma[mesh.elements], G)
    norm = np.sqrt(np.einsum("ed,ed->e", g, g) + beta**2)
    value = float(np.dot(vol, norm))
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(norm[:, None] > 0, g / norm[:, None], 0.0)
    local = vol[:, None] * np.einsum("ed,ekd->ek", unit, G)
    grad = np.zeros_like(sigma)
    np.add.at(grad, mesh.elements.ravel(), local.ravel())
    return value, grad


# -- the optimizer ------------------------------------------------------------------


def reconstruct(
    mesh,
    layout,
    protocol,
    V,
    basis,
    boundmap: BoundMap,
    lmf_config: LMFConfig | None = None,
    tv_config: TVConfig | None = None,
    snr_estimate: float | None = None,
    model: ForwardModel | None = None,
    keep_trace: bool = False,
) -> ReconResult:
    """Run the BC-SR LMF loop from ``alpha = 0`` (``sigma = boundmap.sigma0``).

    ``basis`` is a :class:`~bcsr_eit.basis.GraphBasis` or an ``(N, N_b)``
    array. A trial step is accepted iff its reduction ratio exceeds
    ``rho1``; the run stops when the proposed step norm drops to ``eps``
    (``step_tol``), after ``max_iter`` outer iterations (``max_iter``), or
    when ``max_inner`` consecutive trials are rejected (``inner_cap``).
    With ``ftol`` set, an accepted step that lowers the objective by less
    than that fraction also ends the run (``ftol``).
    """
    lmf = lmf_config or LMFConfig()
    tv = tv_config or TVConfig()
    model = model or ForwardModel(mesh, layout, protocol)
    B = np.asarray(getattr(basis, "basis", basis), dtype=float)
    V = np.asarray(V, dtype=float)
    if V.shape != (protocol.M,):
        raise ValueError(f"expected {protocol.M} measurements, got {V.shape}")
    n, nb = B.shape
    if n != mesh.n_nodes or boundmap.sigma0.shape != (n,):
        raise ValueError("basis / bound map do not match the mesh")
    eps = lmf.step_tolerance(nb)
    t_start = time.perf_counter()

    alpha = np.zeros(nb)
    c = np.zeros(n)
    sigma = boundmap.map(c)
    sol, J_sigma = model.solve_with_jacobian(sigma)
    r = sol.measurements - V

    lam = 0.0
    if tv.enabled:
        tv0, _ = tv_value_and_gradient(mesh, sigma, tv.beta)
        lam0 = tv.lambda0
        if lam0 is None:
            lam0 = tv.relative_weight * 0.5 * float(r @ r) / tv0 if tv0 > 0 else 0.0
        lam = tv_weight(snr_estimate, lam0)

    def objective(sig, res):
        value = 0.5 * float(res @ res)
        if lam > 0:
            tv_val, tv_grad = tv_value_and_gradient(mesh, sig, tv.beta)
            return value + lam * tv_val, tv_grad
        return value, None

    obj, tv_grad = objective(sigma, r)
    result = ReconResult(alpha, c, sigma, objective_history=[obj], tv_weight=lam)
    if keep_trace:
        result.sigma_trace.append(sigma.copy())
    mu = lmf.mu0
    mu_floor = 0.0
    if lmf.mu_min_rel > 0:
        J0 = (J_sigma * boundmap.derivative(sigma)[None, :]) @ B
        mu_floor = lmf.mu_min_rel * float(np.linalg.norm(J0, 2)) ** 2
    k = 0
    reason = "max_iter"
    while k < lmf.max_iter:
        h = boundmap.derivative(sigma)
        J_alpha = (J_sigma * h[None, :]) @ B
        g = J_alpha.T @ r
        if tv_grad is not None:
            g = g + lam * (B.T @ (h * tv_grad))
        accepted = False
        for _ in range(lmf.max_inner):
            d = lmf_step(J_alpha, r, mu, gradient=g)
            d_norm = float(np.linalg.norm(d))
            if d_norm <= eps:
                reason = "step_tol"
                break
            alpha_t = alpha + d
            c_t = B @ alpha_t
            sigma_t = boundmap.map(c_t)
            r_t = model.measure(sigma_t) - V
            obj_t, _ = objective(sigma_t, r_t)
            Jd = J_alpha @ d
            predicted = -(float(g @ d) + 0.5 * float(Jd @ Jd))
            rho = (obj - obj_t) / predicted if predicted > 0 else -np.inf
            logger.info(
                "iter %d | obj %.6e | rho %.4f | mu %.3e | step_norm %.3e | accepted %s",
                k, obj_t, rho, mu, d_norm, rho > lmf.rho1,
            )
            result.step_norms.append(d_norm)
            result.mu_history.append(mu)
            result.rho_history.append(float(rho))
            result.trial_objectives.append(obj_t)
            result.accepted.append(bool(rho > lmf.rho1))
            mu = max(fletcher_update(mu, rho, lmf), mu_floor)
            if rho > lmf.rho1:
                accepted = True
                break
        if reason == "step_tol":
            break
        if not accepted:
            reason = "inner_cap"
            break
        alpha, c = alpha_t, c_t
        sigma = sigma_t
        if not (np.all(sigma > boundmap.lower) and np.all(sigma < boundmap.upper)):
            raise AssertionError("iterate left the admissible interval")
        sol, J_sigma = model.solve_with_jacobian(sigma)
        r = sol.measurements - V
        obj_prev = obj
        obj, tv_grad = objective(sigma, r)
        result.objective_history.append(obj)
        if keep_trace:
            result.sigma_trace.append(sigma.copy())
        k += 1
        if lmf.ftol is not None and obj_prev - obj <= lmf.ftol * obj_prev:
            reason = "ftol"
            break

    result.alpha, result.c, result.sigma = alpha, c, sigma
    result.termination_reason = reason
    result.n_outer = k
    result.runtime_s = time.perf_counter() - t_start
    logger.info(
        "bcsr finished: %s after %d accepted / %d trial steps in %.2f s",
        reason, result.n_accepted, len(result.accepted), result.runtime_s,
    )
    return result

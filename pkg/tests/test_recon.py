import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bcsr_eit.basis import build_adjacency, build_basis
from bcsr_eit.boundmap import BoundMap, calibrate_sigma0, warm_start
from bcsr_eit.forward import ForwardModel
from bcsr_eit.mesh import generate_disk_mesh
from bcsr_eit.phantoms import NoiseModel
from bcsr_eit.protocol import adjacent_protocol
from bcsr_eit.recon import (
    LMFConfig,
    TVConfig,
    fletcher_update,
    latent_jacobian,
    lmf_step,
    reconstruct,
    tv_value_and_gradient,
    tv_weight,
)


@pytest.fixture(scope="module")
def setup():
    mesh, layout = generate_disk_mesh(n_rings=8)
    prot = adjacent_protocol(16, skip_driven=True)
    model = ForwardModel(mesh, layout, prot)
    basis = build_basis(build_adjacency(mesh), 25)
    return mesh, layout, prot, model, basis


def blob(mesh, value=1.8, center=(0.4, -0.2), r=0.35):
    s = np.ones(mesh.n_nodes)
    s[np.linalg.norm(mesh.nodes - np.array(center), axis=1) < r] = value
    return s


# -- building blocks ---------------------------------------------------------------


def test_latent_jacobian_identity_composition(rng):
    J = rng.normal(size=(6, 5))
    bm = BoundMap(0.0, 4.0, np.full(5, 2.0))  # H' = (u - l)/4 = 1 at the midpoint
    out = latent_jacobian(J, bm, np.zeros(5), np.eye(5))
    np.testing.assert_allclose(out, J, rtol=1e-15)


def test_latent_jacobian_saturated_node(rng):
    J = rng.normal(size=(4, 3))
    bm = BoundMap(0.2, 2.0, np.full(3, 1.1))
    c = np.array([0.0, 800.0, 0.0])
    out = latent_jacobian(J, bm, c, np.eye(3))
    # the sigmoid saturates to the last float below u, leaving an ulp-sized slope
    assert np.abs(out[:, 1]).max() < 1e-15 * np.abs(out[:, 0]).max()


def test_latent_jacobian_shape_errors(rng):
    bm = BoundMap(0.2, 2.0, np.full(3, 1.1))
    with pytest.raises(ValueError, match="shapes"):
        latent_jacobian(rng.normal(size=(4, 3)), bm, np.zeros(3), np.eye(4))


def test_latent_jacobian_finite_differences(setup, rng):
    mesh, layout, prot, model, basis = setup
    B = basis.basis
    bm = BoundMap(0.2, 2.0, 1.0 + 0.3 * rng.random(mesh.n_nodes))
    alpha = 0.3 * rng.normal(size=B.shape[1])
    c = B @ alpha
    _, J_sigma = model.solve_with_jacobian(bm.map(c))
    Ja = latent_jacobian(J_sigma, bm, c, B)
    errs = []
    for _ in range(10):
        v = rng.normal(size=B.shape[1])
        v /= np.linalg.norm(v)
        h = 1e-5
        fd = (model.measure(bm.map(B @ (alpha + h * v))) - model.measure(bm.map(B @ (alpha - h * v)))) / (2 * h)
        errs.append(np.linalg.norm(fd - Ja @ v) / np.linalg.norm(Ja @ v))
    assert max(errs) < 1e-4


def test_lmf_step_examples(rng):
    J = rng.normal(size=(8, 4))
    np.testing.assert_array_equal(lmf_step(J, np.zeros(8), 1e-3), 0.0)
    assert lmf_step(np.array([[2.0]]), np.array([1.0]), 0.0)[0] == pytest.approx(-0.5, rel=1e-15)
    r = rng.normal(size=8)
    d = lmf_step(J, r, 1e8)
    ref = -(J.T @ r) / 1e8
    assert np.linalg.norm(d - ref) / np.linalg.norm(ref) < 1e-4


def test_lmf_step_normal_equations(rng):
    J = rng.normal(size=(10, 6))
    r = rng.normal(size=10)
    d = lmf_step(J, r, 0.1)
    np.testing.assert_allclose((J.T @ J + 0.1 * np.eye(6)) @ d, -J.T @ r, atol=1e-12)


@given(
    J=arrays(float, (7, 4), elements=st.floats(-10, 10)),
    r=arrays(float, 7, elements=st.floats(-10, 10)),
    mu=st.floats(1e-8, 1e4),
)
@settings(max_examples=80, deadline=None)
def test_predicted_reduction_positive(J, r, mu):
    g = J.T @ r
    if np.linalg.norm(g) < 1e-6:
        return
    d = lmf_step(J, r, mu)
    Jd = J @ d
    predicted = -(g @ d + 0.5 * Jd @ Jd)
    assert predicted > 0
    # via the normal equations this is -0.5 d^T (g - mu d)
    assert predicted == pytest.approx(-0.5 * d @ (g - mu * d), rel=1e-6, abs=1e-10)


def test_fletcher_branches():
    cfg = LMFConfig()
    assert fletcher_update(1e-4, 0.1, cfg) == 4e-4
    assert fletcher_update(1e-4, 0.8, cfg) == 2.5e-5
    assert fletcher_update(1e-4, 0.5, cfg) == 1e-4
    assert fletcher_update(1e-4, 0.25, cfg) == 1e-4
    assert fletcher_update(1e-4, 0.75, cfg) == 1e-4


def test_lmf_defaults_and_validation():
    cfg = LMFConfig()
    assert (cfg.mu0, cfg.gamma1, cfg.gamma2, cfg.rho1, cfg.rho2) == (1e-4, 0.25, 4.0, 0.25, 0.75)
    assert (cfg.max_iter, cfg.max_inner) == (50, 20)
    assert cfg.step_tolerance(100) == pytest.approx(1e-5)
    for bad in ({"rho1": 0.8}, {"gamma1": 1.5}, {"mu0": 0.0}, {"max_inner": 0}, {"ftol": 1.0}):
        with pytest.raises(ValueError):
            LMFConfig(**bad)
    with pytest.raises(ValueError):
        TVConfig(beta=0.0)
    with pytest.raises(ValueError):
        TVConfig(lambda0=-1.0)


@pytest.mark.parametrize(
    "snr,factor",
    [(60, 1.0), (70, 1.0), (50, math.sqrt(10)), (40, 10.0), (30, 10 * math.sqrt(10))],
)
def test_tv_weight(snr, factor):
    assert tv_weight(snr, 2.5) == pytest.approx(2.5 * factor, rel=1e-12)


def test_tv_weight_without_estimate():
    assert tv_weight(None, 3.0) == 3.0
    with pytest.raises(ValueError):
        tv_weight(40, -1.0)


def test_tv_constant_field(setup):
    mesh = setup[0]
    val, grad = tv_value_and_gradient(mesh, np.full(mesh.n_nodes, 3.0), 0.05)
    assert val == pytest.approx(0.05 * mesh.element_measures.sum(), rel=1e-12)
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)


def test_tv_gradient_finite_differences(setup, rng):
    mesh = setup[0]
    s = 1.0 + rng.random(mesh.n_nodes)
    beta = 0.1
    _, grad = tv_value_and_gradient(mesh, s, beta)
    idx = rng.choice(mesh.n_nodes, 25, replace=False)
    h = 1e-6
    for n in idx:
        e = np.zeros(mesh.n_nodes)
        e[n] = h
        fd = (tv_value_and_gradient(mesh, s + e, beta)[0] - tv_value_and_gradient(mesh, s - e, beta)[0]) / (2 * h)
        assert abs(fd - grad[n]) <= 1e-6 * max(abs(grad[n]), 1e-8) + 1e-9


@given(t=st.floats(1.0, 50.0))
@settings(max_examples=20, deadline=None)
def test_tv_positive_homogeneity(t):
    mesh, _ = generate_disk_mesh(n_rings=3)
    s = 1.0 + np.sin(3 * mesh.nodes[:, 0]) * np.cos(2 * mesh.nodes[:, 1])
    a, _ = tv_value_and_gradient(mesh, s, 0.0)
    b, _ = tv_value_and_gradient(mesh, t * s, 0.0)
    assert b == pytest.approx(t * a, rel=1e-12)


# -- the optimizer ------------------------------------------------------------------


def test_noise_free_start_is_fixed_point(setup):
    mesh, layout, prot, model, basis = setup
    sigma0 = np.full(mesh.n_nodes, 0.9)
    V = model.measure(sigma0)
    res = reconstruct(mesh, layout, prot, V, basis, BoundMap(0.2, 2.0, sigma0), model=model)
    assert res.termination_reason == "step_tol"
    assert res.n_accepted == 0
    np.testing.assert_array_equal(res.sigma, sigma0)


def test_warm_start_fixed_point(setup):
    mesh, layout, prot, model, basis = setup
    base = blob(mesh, 1.5)
    V = model.measure(base)
    res = reconstruct(mesh, layout, prot, V, basis, warm_start(base, 0.2, 2.0), model=model)
    assert res.termination_reason == "step_tol"
    assert res.n_accepted == 0
    np.testing.assert_array_equal(res.sigma, base)


@pytest.fixture(scope="module")
def blob_run(setup):
    mesh, layout, prot, model, basis = setup
    truth = blob(mesh)
    V = NoiseModel(60, seed=3).apply(model.measure(truth))
    U = model.measure(np.ones(mesh.n_nodes))
    _, bm = calibrate_sigma0(V, U, np.ones(mesh.n_nodes), 0.2, 2.0)
    res = reconstruct(
        mesh, layout, prot, V, basis, bm, LMFConfig(max_iter=15), model=model, keep_trace=True
    )
    return truth, V, bm, res


def test_accepted_steps_descend(blob_run):
    _, _, _, res = blob_run
    h = np.array(res.objective_history)
    assert len(h) == res.n_accepted + 1
    assert np.all(np.diff(h) < 1e-12 * h[:-1])
    assert all((rho > 0.25) == acc for rho, acc in zip(res.rho_history, res.accepted))


def test_iterates_within_bounds(blob_run):
    _, _, bm, res = blob_run
    for s in res.sigma_trace:
        assert np.all(s > bm.lower) and np.all(s < bm.upper)


def test_reconstruction_improves_on_start(blob_run):
    truth, _, bm, res = blob_run
    assert np.sqrt(np.mean((res.sigma - truth) ** 2)) < np.sqrt(np.mean((bm.sigma0 - truth) ** 2))
    assert res.objective_history[-1] < 5e-2 * res.objective_history[0]


def test_mu_follows_fletcher(blob_run):
    _, _, _, res = blob_run
    cfg = LMFConfig()
    for k in range(len(res.mu_history) - 1):
        assert res.mu_history[k + 1] == fletcher_update(res.mu_history[k], res.rho_history[k], cfg)


def test_determinism(setup, blob_run):
    mesh, layout, prot, model, basis = setup
    _, V, bm, res = blob_run
    again = reconstruct(mesh, layout, prot, V, basis, bm, LMFConfig(max_iter=15), model=model)
    assert json.dumps(again.to_dict()) == json.dumps(res.to_dict())


def test_ftol_stop(setup, blob_run):
    mesh, layout, prot, model, basis = setup
    _, V, bm, _ = blob_run
    res = reconstruct(mesh, layout, prot, V, basis, bm, LMFConfig(ftol=0.5), model=model)
    assert res.termination_reason == "ftol"
    h = res.objective_history
    assert h[-2] - h[-1] <= 0.5 * h[-2]


class RejectingModel:
    """Wraps a model so that every trial point looks worse than the start."""

    def __init__(self, model):
        self.model = model

    def solve_with_jacobian(self, sigma):
        return self.model.solve_with_jacobian(sigma)

    def measure(self, sigma):
        return self.model.measure(sigma) + 1e3


def test_inner_cap(setup, blob_run):
    mesh, layout, prot, model, basis = setup
    _, V, bm, _ = blob_run
    res = reconstruct(
        mesh, layout, prot, V, basis, bm, LMFConfig(max_inner=5), model=RejectingModel(model)
    )
    assert res.termination_reason == "inner_cap"
    assert len(res.accepted) == 5 and not any(res.accepted)
    np.testing.assert_array_equal(res.sigma, bm.sigma0)
    np.testing.assert_allclose(res.mu_history, 1e-4 * 4.0 ** np.arange(5))


def test_max_iter(setup, blob_run):
    mesh, layout, prot, model, basis = setup
    _, V, bm, _ = blob_run
    res = reconstruct(mesh, layout, prot, V, basis, bm, LMFConfig(max_iter=2), model=model)
    assert res.termination_reason == "max_iter"
    assert res.n_outer == 2


def test_tv_enabled_run(setup, blob_run):
    mesh, layout, prot, model, basis = setup
    _, V, bm, _ = blob_run
    res = reconstruct(
        mesh, layout, prot, V, basis, bm, LMFConfig(max_iter=5), TVConfig(enabled=True),
        snr_estimate=40, model=model,
    )
    tv0, _ = tv_value_and_gradient(mesh, bm.sigma0, 1e-2)
    r0 = model.measure(bm.sigma0) - V
    lam0 = 1e-3 * 0.5 * (r0 @ r0) / tv0
    assert res.tv_weight == pytest.approx(10 * lam0, rel=1e-12)
    assert res.objective_history[0] == pytest.approx(0.5 * r0 @ r0 + res.tv_weight * tv0, rel=1e-12)
    assert np.all(np.diff(res.objective_history) < 0)


def test_measurement_length_checked(setup):
    mesh, layout, prot, model, basis = setup
    with pytest.raises(ValueError, match="measurements"):
        reconstruct(mesh, layout, prot, np.ones(3), basis, BoundMap(0.2, 2.0, np.ones(mesh.n_nodes)))


def test_result_serializes(blob_run):
    res = blob_run[3]
    d = json.loads(json.dumps(res.to_dict()))
    assert d["termination_reason"] in {"max_iter", "step_tol", "inner_cap"}
    assert len(d["alpha"]) == 25

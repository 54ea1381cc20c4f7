import time

import numpy as np
import pytest

from bcsr_eit.forward import (
    ForwardModel,
    check_conductivity,
    jacobian,
    solve_forward,
    solve_forward_batch,
    write_measurements_csv,
)
from bcsr_eit.mesh import generate_disk_mesh
from bcsr_eit.protocol import adjacent_protocol, tank_protocol


def smooth_sigma(nodes):
    x, y = nodes[:, 0], nodes[:, 1]
    return 1.0 + 0.5 * np.exp(-((x - 0.3) ** 2 + (y + 0.2) ** 2) / 0.1)


@pytest.fixture(scope="module")
def model_2k(disk_2k, adj16):
    mesh, layout = disk_2k
    return ForwardModel(mesh, layout, adj16)


@pytest.fixture(scope="module")
def sol_2k(model_2k):
    return model_2k.solve(smooth_sigma(model_2k.mesh.nodes))


def test_zero_mean_electrode_voltages(sol_2k):
    assert np.abs(sol_2k.electrode_voltages.sum(axis=1)).max() < 1e-12


def test_current_conservation(model_2k, sol_2k):
    I = model_2k.electrode_currents(sol_2k)
    target = model_2k.protocol.current_patterns()
    assert np.abs(I - target).max() / np.abs(target).max() < 1e-9


def test_reciprocity(model_2k, sol_2k):
    p = model_2k.protocol
    U = sol_2k.electrode_voltages
    L = p.n_electrodes
    scale = np.abs(sol_2k.measurements).max()
    worst = 0.0
    for a in range(L):
        for b in range(L):
            forward = U[a, b] - U[a, (b + 1) % L]
            swapped = U[b, a] - U[b, (a + 1) % L]
            worst = max(worst, abs(forward - swapped))
    assert worst / scale < 1e-10


def test_measurements_match_operator(model_2k, sol_2k):
    m = model_2k.protocol.measurements
    U = sol_2k.electrode_voltages
    np.testing.assert_array_equal(sol_2k.measurements, U[m[:, 0], m[:, 1]] - U[m[:, 0], m[:, 2]])


def test_rotation_symmetry_homogeneous(model_2k):
    V = model_2k.measure(np.ones(model_2k.mesh.n_nodes)).reshape(16, 16)
    # rotating drive and measurement by one electrode permutes V
    rotated = np.roll(np.roll(V, 1, axis=0), 1, axis=1)
    assert np.abs(rotated - V).max() / np.abs(V).max() < 1e-8


def test_joint_scaling_homogeneity(disk_2k, adj16):
    mesh, layout = disk_2k
    sigma = smooth_sigma(mesh.nodes)
    V = ForwardModel(mesh, layout, adj16).measure(sigma)
    scaled = layout.with_impedances(layout.contact_impedances / 2)
    V2 = ForwardModel(mesh, scaled, adj16).measure(2 * sigma)
    assert np.abs(V2 - V / 2).max() / np.abs(V).max() < 1e-12


def test_runtime_256(disk_2k, adj16):
    mesh, layout = disk_2k
    t0 = time.perf_counter()
    solve_forward(mesh, layout, adj16, np.ones(mesh.n_nodes))
    assert time.perf_counter() - t0 < 5.0


def test_rejects_bad_conductivity(small_disk, adj16):
    mesh, layout = small_disk
    model = ForwardModel(mesh, layout, adj16)
    s = np.ones(mesh.n_nodes)
    s[3] = 0.0
    with pytest.raises(ValueError, match="positive"):
        model.solve(s)
    s[3] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        model.solve(s)
    with pytest.raises(ValueError, match="shape"):
        model.solve(np.ones(5))
    with pytest.raises(ValueError):
        check_conductivity(-np.ones(4), 4)


def test_electrode_count_mismatch(small_disk):
    mesh, layout = small_disk
    with pytest.raises(ValueError, match="electrodes"):
        ForwardModel(mesh, layout, adjacent_protocol(8))


def fd_entries(model, sigma, J, rng, count):
    V0 = model.measure(sigma)
    big = np.argwhere(np.abs(J) >= 1e-4 * np.abs(J).max())
    picks = big[rng.choice(len(big), size=count, replace=False)]
    errors = []
    for m, n in picks:
        h = 1e-6 * sigma[n]
        sp_, sm = sigma.copy(), sigma.copy()
        sp_[n] += h
        sm[n] -= h
        fd = (model.measure(sp_)[m] - model.measure(sm)[m]) / (2 * h)
        errors.append(abs(fd - J[m, n]) / abs(J[m, n]))
    assert V0.shape == (model.protocol.M,)
    return np.array(errors)


def test_jacobian_finite_differences_2d(rng):
    mesh, layout = generate_disk_mesh(n_rings=10)
    model = ForwardModel(mesh, layout, adjacent_protocol(16, skip_driven=True))
    sigma = smooth_sigma(mesh.nodes) * (1 + 0.1 * rng.random(mesh.n_nodes))
    _, J = model.solve_with_jacobian(sigma)
    assert np.all(np.isfinite(J))
    assert fd_entries(model, sigma, J, rng, 20).max() < 1e-4


def test_jacobian_finite_differences_3d(small_cylinder, rng):
    mesh, layout = small_cylinder
    model = ForwardModel(mesh, layout, adjacent_protocol(16, skip_driven=True))
    sigma = 1.0 + 0.3 * rng.random(mesh.n_nodes)
    J = model.jacobian(sigma)
    assert fd_entries(model, sigma, J, rng, 10).max() < 1e-4


def test_jacobian_row_sums_homogeneity(rng):
    # V(t sigma, z/t) = V/t  =>  J sigma = -V + sum_q z_q dV/dz_q
    mesh, layout = generate_disk_mesh(n_rings=10)
    prot = adjacent_protocol(16, skip_driven=True)
    sigma = np.full(mesh.n_nodes, 1.3)
    sol, J = ForwardModel(mesh, layout, prot).solve_with_jacobian(sigma)
    z = layout.contact_impedances
    h = 1e-5
    Vp = ForwardModel(mesh, layout.with_impedances(z * (1 + h)), prot).measure(sigma)
    Vm = ForwardModel(mesh, layout.with_impedances(z * (1 - h)), prot).measure(sigma)
    z_term = (Vp - Vm) / (2 * h)
    lhs = J @ sigma
    rhs = -sol.measurements + z_term
    assert np.abs(lhs - rhs).max() / np.abs(sol.measurements).max() < 1e-6
    # without the contact term the identity reduces to J 1 = -V / sigma0
    assert np.abs(J.sum(axis=1) + sol.measurements / 1.3 - z_term / 1.3).max() < 1e-6 * np.abs(
        sol.measurements
    ).max()


def test_zero_perturbation_predicts_zero(small_disk, adj16):
    mesh, layout = small_disk
    J = jacobian(mesh, layout, adj16, np.ones(mesh.n_nodes))
    assert J.shape == (adj16.M, mesh.n_nodes)
    np.testing.assert_array_equal(J @ np.zeros(mesh.n_nodes), 0.0)


def test_batch(small_disk, adj16):
    mesh, layout = small_disk
    s = smooth_sigma(mesh.nodes)
    single = solve_forward(mesh, layout, adj16, s)
    (one,) = solve_forward_batch(mesh, layout, adj16, [s])
    np.testing.assert_array_equal(one.measurements, single.measurements)
    a, b = solve_forward_batch(mesh, layout, adj16, [s, s.copy()])
    np.testing.assert_array_equal(a.measurements, b.measurements)
    assert solve_forward_batch(mesh, layout, adj16, []) == []


def test_mesh_refinement_converges():
    prot = adjacent_protocol(16)
    Vs = []
    for rings in (6, 12, 24, 48):
        mesh, layout = generate_disk_mesh(n_rings=rings)
        Vs.append(solve_forward(mesh, layout, prot, smooth_sigma(mesh.nodes)).measurements)
    diffs = [np.linalg.norm(Vs[i] - Vs[i + 1]) for i in range(3)]
    assert diffs[0] > diffs[1] > diffs[2]


def test_tank_protocol_solve():
    mesh, layout = generate_disk_mesh(radius=14, n_rings=8)
    prot = tank_protocol([1, 5, 9, 13])
    sol = solve_forward(mesh, layout, prot, np.full(mesh.n_nodes, 0.25))
    assert sol.measurements.shape == (54 * 16,)
    assert np.abs(sol.electrode_voltages.sum(axis=1)).max() < 1e-12


def test_measurements_csv(tmp_path, small_disk, adj16):
    mesh, layout = small_disk
    V = solve_forward(mesh, layout, adj16, np.ones(mesh.n_nodes)).measurements
    path = tmp_path / "v.csv"
    write_measurements_csv(path, adj16, V)
    lines = path.read_text().splitlines()
    assert lines[0] == "injection,pos,neg,value_mV"
    assert len(lines) == 257
    inj, pos, neg, val = lines[1].split(",")
    assert (inj, pos, neg) == ("1", "1", "2")
    assert float(val) == pytest.approx(1e3 * V[0])

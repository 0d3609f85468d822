import numpy as np
import pytest

from thmrom.config import RomConfig
from thmrom.constitutive import ConcreteParams, SteelParams
from thmrom.driver import train_reduced_model
from thmrom.fom import FomModel, LoadSchedule
from thmrom.geometry import GeometryConfig, build_constraints, build_mesh
from thmrom.reduction import orthonormalize, pod
from thmrom.rom import (ReducedModel, RomSolver, compare, error_metrics, extract_qois, gappy_reconstruct,
                        nodal_average, speedup)
from thmrom.thermo_hydric import DAY, AuxiliaryFields


def test_gappy_recovers_vectors_in_span(rng):
    Z = orthonormalize(rng.standard_normal((20, 3)))
    s = Z @ rng.standard_normal((3, 4))
    entries = np.array([0, 3, 7, 11, 19])
    out = gappy_reconstruct(Z, s[entries], entries)
    assert np.allclose(out, s, rtol=0, atol=1e-12)


def test_gappy_matches_pseudo_inverse(rng):
    Z = rng.standard_normal((15, 3))
    entries = np.sort(rng.choice(15, 6, replace=False))
    s = rng.standard_normal(6)
    ref = Z @ (np.linalg.pinv(Z[entries]) @ s)
    assert np.allclose(gappy_reconstruct(Z, s, entries), ref, rtol=0, atol=1e-8)


def test_gappy_with_all_entries_is_weighted_projection(rng):
    w = rng.uniform(0.5, 2.0, 12)
    V = rng.standard_normal((12, 5))
    b = pod(V, n_modes=3, weights=w)
    s = rng.standard_normal(12)
    out = gappy_reconstruct(b, s, np.arange(12))
    assert np.allclose(out, b.project(s), rtol=0, atol=1e-12)


def test_gappy_needs_enough_samples(rng):
    with pytest.raises(ValueError, match="sampled entries"):
        gappy_reconstruct(rng.standard_normal((10, 4)), np.ones(3), np.arange(3))


def test_error_metric_examples():
    U = np.array([[1.0, 2.0, 0.0], [0.0, 2.0, 0.0]])
    t = np.array([1.0, 2.0, 4.0])
    assert error_metrics(U, U, t)["avg"] == 0.0
    assert error_metrics(U, np.zeros_like(U), t)["avg"] == pytest.approx(1.0, rel=1e-15)
    e = error_metrics(U, 1.1 * U, t)
    assert e["avg"] == pytest.approx(0.1, rel=1e-12)
    assert np.isnan(e["per_step"][2])
    assert e["per_step"][0] == pytest.approx(0.01, rel=1e-12)
    with pytest.raises(ValueError):
        error_metrics(U, U[:, :2], t)


def test_time_weights_favour_long_steps():
    U = np.ones((1, 2))
    R = np.array([[1.0, 2.0]])  # error only in the second step
    e = error_metrics(U, R, [1.0, 10.0])
    assert e["avg"] == pytest.approx(np.sqrt(0.9 / 1.0), rel=1e-14)


def test_speedup():
    assert speedup(10.0, 2.0) == 5.0


@pytest.fixture(scope="module")
def box():
    return build_mesh(GeometryConfig(1.5, 1.6, 2.0, 3, 4, 5))


def test_nodal_average_of_constant_is_exact(box):
    vals = np.full((box.n_hex, 8, 2), 3.25)
    assert np.allclose(nodal_average(box, vals), 3.25, rtol=1e-14)


def test_free_thermal_dilation_has_zero_mechanical_strain(box):
    p = ConcreteParams()
    times = np.array([0.0, DAY])
    aux = AuxiliaryFields.uniform(box, times, T=np.array([293.15, 303.15]))
    x = box.nodes - box.nodes.min(axis=0)
    U = np.column_stack([np.zeros(box.n_dofs), (p.alpha_th_c * 10.0 * x).ravel()])
    S = np.zeros((box.n_gforce, 2))
    q = extract_qois(box, times, U, S, aux, p)
    for k, v in q.strains.items():
        assert np.max(np.abs(v)) <= 1e-15, k
    cols, data = q.table()
    assert cols[0] == "time" and data.shape == (2, len(cols))


def test_qoi_cable_forces_are_masked_before_prestress(box):
    aux = AuxiliaryFields.uniform(box, [0.0, 10 * DAY])
    S = np.ones((box.n_gforce, 2))
    q = extract_qois(box, [DAY, 10 * DAY], np.zeros((box.n_dofs, 2)), S, aux, ConcreteParams(), 5 * DAY)
    assert np.all(np.isnan(q.cable_N[0])) and np.all(q.cable_N[1] == 1.0)


def test_empty_basis_rejected(small_study):
    with pytest.raises(ValueError, match="at least one mode"):
        RomSolver(small_study.model(), np.zeros((small_study.mesh.n_dofs, 0)))
    with pytest.raises(ValueError, match="length"):
        RomSolver(small_study.model(), np.ones((5, 1)))


def test_zero_loads_keep_coordinates_zero(box, rng):
    s = LoadSchedule(dead_load=0.0, gravity=False, prestress=False)
    cons = build_constraints(box)
    model = FomModel(box, cons, ConcreteParams(), SteelParams(), s, AuxiliaryFields.uniform(box, [0.0, s.t_f]))
    Z = orthonormalize(rng.standard_normal((box.n_dofs, 2)))
    traj = RomSolver(model, Z).solve(times=[DAY, 100 * DAY, s.t_f])
    assert np.all(traj.alpha == 0.0)


def test_full_basis_reproduces_fom(small_study, small_traj):
    Z = pod(small_traj.U, 0.0).Z
    r = compare(small_traj, RomSolver(small_study.model(), Z), small_study.stepper)
    assert r["E_avg"] <= 5 * small_study.stepper.tol


def test_reduced_model_roundtrip(small_study, small_traj, tmp_path):
    rm = train_reduced_model(small_study.mesh, [small_traj], RomConfig(eps_u=1e-3, eps_S=1e-3, delta=1e-3))
    rm.save(tmp_path / "m")
    back = ReducedModel.load(tmp_path / "m")
    assert np.array_equal(back.Z_u.Z, rm.Z_u.Z)
    assert np.array_equal(back.Z_S.Z, rm.Z_S.Z)
    assert np.array_equal(back.rule.weights, rm.rule.weights)
    assert back.meta["N_u"] == rm.Z_u.N


def test_hyper_reduced_run_reconstructs_forces(small_study, small_traj):
    rm = train_reduced_model(small_study.mesh, [small_traj], RomConfig(eps_u=1e-4, eps_S=1e-4, delta=1e-4))
    solver = small_study.rom_solver(rm)
    r = compare(small_traj, solver, small_study.stepper)
    assert r["E_avg"] <= 1e-2
    S = gappy_reconstruct(rm.Z_S, r["rom"].S_sampled, solver.rmesh.gforce_entries)
    err = np.linalg.norm(S - small_traj.S) / np.linalg.norm(small_traj.S)
    assert err <= 0.1

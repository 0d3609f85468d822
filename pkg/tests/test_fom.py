import numpy as np
import pytest
import scipy.sparse as sp

from thmrom.constitutive import ConcreteParams, SteelParams, cable_force, integrate_concrete
from thmrom.fom import (FomModel, LoadSchedule, SaddleSolver, StepperConfig, newton_solve, null_space_basis,
                        run_fom)
from thmrom.geometry import GeometryConfig, build_constraints, build_mesh
from thmrom.thermo_hydric import DAY, AuxiliaryFields


def small_model(schedule=None, aux_T=293.15, **geom):
    mesh = build_mesh(GeometryConfig(1.5, 1.6, 2.0, 3, 4, 5, **geom))
    cons = build_constraints(mesh)
    schedule = schedule or LoadSchedule()
    aux = AuxiliaryFields.uniform(mesh, [0.0, schedule.t_f], T=aux_T)
    return FomModel(mesh, cons, ConcreteParams(), SteelParams(), schedule, aux)


def coupled_state(model, rng):
    """A state in the coupled phase with random grouting references."""
    st = model.initial_state()
    st.time = model.schedule.t_end_p + DAY
    st.bar_eps_ref = 1e-5 * rng.standard_normal(model.mesh.n_bar)
    st.bar_T_ref = np.full(model.mesh.n_bar, 290.0)
    return st


def test_residual_matches_element_sum(rng):
    model = small_model()
    m = model.mesh
    st = coupled_state(model, rng)
    u = 1e-4 * rng.standard_normal(m.n_dofs)
    t1 = st.time + 10 * DAY
    R, _, sig, N, _, _ = model.assemble_residual(st, u, t1, tangent=False)
    aux1 = {"T": 293.15, "C": 128.8, "h": 100.0, "xi": 1.0}
    expect = -model.external_force(t1)
    for e in range(m.n_hex):
        d = m.element_dofs(e)
        gp = slice(8 * e, 8 * e + 8)
        eps = m.hex_B[e] @ u[d]
        s, _, _ = integrate_concrete(model.concrete, st.ivars.take(np.arange(8 * e, 8 * e + 8)), None, eps,
                                     aux1, aux1, t1 - st.time, tangent=False)
        assert np.allclose(s, sig[gp], rtol=1e-11, atol=0)
        expect[d] += np.einsum("gij,gi,g->j", m.hex_B[e], s, m.hex_wdetJ[e])
    for b in range(m.n_bar):
        d = m.element_dofs(m.n_hex + b)
        eps = m.bar_B[b] @ u[d]
        Nb = model.bar_prestress[b] + cable_force(model.steel, eps - st.bar_eps_ref[b], 293.15 - 290.0)[0]
        assert Nb == pytest.approx(N[b], rel=1e-13)
        expect[d] += Nb * m.bar_length[b] * m.bar_B[b]
    assert np.max(np.abs(R - expect)) <= 1e-12 * np.max(np.abs(expect))


def test_tangent_matches_residual_derivative(rng):
    model = small_model()
    st = coupled_state(model, rng)
    u = 1e-4 * rng.standard_normal(model.mesh.n_dofs)
    v = rng.standard_normal(model.mesh.n_dofs)
    t1 = st.time + 10 * DAY
    _, K, *_ = model.assemble_residual(st, u, t1)
    h = 1e-9
    Rp = model.assemble_residual(st, u + h * v, t1, tangent=False)[0]
    Rm = model.assemble_residual(st, u - h * v, t1, tangent=False)[0]
    dd = (Rp - Rm) / (2 * h)
    assert np.linalg.norm(K @ v - dd) <= 1e-5 * np.linalg.norm(dd)


def test_rest_state_without_loads_has_zero_residual():
    s = LoadSchedule(dead_load=0.0, gravity=False, prestress=False)
    model = small_model(s)
    st = model.initial_state()
    R, *_ = model.assemble_residual(st, np.zeros(model.mesh.n_dofs), 10 * DAY)
    assert np.all(R == 0.0)


def test_null_space_basis_spans_kernel():
    model = small_model()
    B = model.B
    T = null_space_basis(B)
    assert T is not None
    assert abs(B @ T).max() == 0.0
    assert T.shape[1] == B.shape[1] - B.shape[0]
    assert np.linalg.matrix_rank(T.toarray()) == T.shape[1]


def test_null_space_basis_rejects_general_rows():
    B = sp.csr_matrix(np.array([[1.0, 2.0, 0.0]]))
    assert null_space_basis(B) is None


@pytest.mark.parametrize("general", [False, True])
def test_saddle_solver_matches_direct_solve(rng, general):
    n = 12
    A = rng.standard_normal((n, n))
    K = sp.csr_matrix(A @ A.T + n * np.eye(n))
    if general:
        B = sp.csr_matrix(rng.standard_normal((3, n)))
    else:
        B = sp.csr_matrix(([1.0, 1.0, -1.0, 1.0], ([0, 1, 1, 2], [0, 3, 5, 7])), shape=(3, n))
    f, g = rng.standard_normal(n), rng.standard_normal(3)
    du, lam = SaddleSolver(B).solve(K, f, g)
    M = np.block([[K.toarray(), B.T.toarray()], [B.toarray(), np.zeros((3, 3))]])
    ref = np.linalg.solve(M, np.concatenate([f, g]))
    assert np.allclose(du, ref[:n], rtol=0, atol=1e-10 * np.abs(ref).max())
    assert np.allclose(lam, ref[n:], rtol=0, atol=1e-10 * np.abs(ref).max())


def test_zero_loads_give_zero_displacement():
    s = LoadSchedule(dead_load=0.0, gravity=False, prestress=False)
    traj = run_fom(small_model(s), StepperConfig())
    assert np.all(traj.U == 0.0)
    assert np.all(traj.S == 0.0)


def test_load_schedule_phases():
    s = LoadSchedule()
    assert s.phase(0.0) == "concrete_only"
    assert s.phase(s.t_init_p) == "concrete_only"
    assert s.phase(0.5 * (s.t_init_p + s.t_end_p)) == "prestressing"
    assert s.phase(s.t_f) == "coupled"
    assert s.ramp(s.t_end_p) == 1.0
    with pytest.raises(ValueError):
        LoadSchedule(t_init_p=10 * DAY, t_end_p=5 * DAY)


def test_small_run_satisfies_constraints(small_study, small_traj):
    B = small_study.constraints.B
    for k in range(small_traj.n_steps):
        u = small_traj.U[:, k]
        assert np.linalg.norm(B @ u) <= 1e-10 * max(np.linalg.norm(u), 1e-300)
    s = small_study.schedule
    for t in (s.t_init_p, s.t_end_p, s.t_f):
        assert np.min(np.abs(small_traj.times - t)) <= 1e-9 * t


def test_small_run_cable_force_decreases_after_prestress(small_study, small_traj):
    m = small_study.mesh
    N = small_traj.S[m.n_gforce3d:]
    after = small_traj.times >= small_study.schedule.t_end_p * (1 - 1e-12)
    Na = N[:, after]
    assert np.all(Na[:, 0] > 0)
    assert np.all(np.diff(Na, axis=1) <= 1e-9 * Na[:, :1])


def test_replayed_times_reproduce_run(small_study, small_traj):
    again = run_fom(small_study.model(), small_study.stepper, times=small_traj.times)
    assert np.array_equal(again.times, small_traj.times)
    assert np.allclose(again.U, small_traj.U, rtol=0, atol=1e-12 * np.abs(small_traj.U).max())


def test_newton_converges_quadratically_on_first_step():
    model = small_model()
    new, it, hist = newton_solve(model, model.initial_state(), DAY, tol=1e-10)
    assert it <= 4
    assert hist[-1] <= 1e-10 * model.load_norm(DAY)

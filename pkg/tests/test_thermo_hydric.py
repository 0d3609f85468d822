import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thmrom.geometry import GeometryConfig, build_mesh
from thmrom.thermo_hydric import (DAY, HydricParams, SorptionRangeWarning, ThermalParams, ThermoHydricConfig,
                                  AuxiliaryFields, History, inverse_sorption, sample_auxiliary, solve_hydric,
                                  solve_thermal, sorption, thermal_mesh)


def rod(n, L=0.1):
    """Structured 1D-like bar of hexes along x."""
    return build_mesh(GeometryConfig(L, 0.05, 0.05, n, 1, 1, cables=[]))


def test_sorption_table_values():
    assert float(sorption(50.0)) == pytest.approx(47.82, abs=1e-12)
    assert float(sorption(75.0)) == 76.5
    assert float(sorption(0.0)) == 0.0
    assert float(inverse_sorption(sorption(84.0))) == 84.0


@given(st.floats(0.0, 128.8))
def test_sorption_roundtrip(C):
    assert float(sorption(inverse_sorption(C))) == pytest.approx(C, abs=1e-12)


def test_sorption_clamps_with_warning():
    with pytest.warns(SorptionRangeWarning):
        assert float(sorption(120.0)) == 128.8


def test_invalid_tables_rejected():
    with pytest.raises(ValueError):
        HydricParams(sorption_table=((0, 0), (50, 40), (40, 60)))
    with pytest.raises(ValueError):
        HydricParams(sorption_table=((1, 0), (50, 40)))
    with pytest.raises(ValueError):
        ThermalParams(lambda_c=0.0)


def test_thermal_equilibrium_is_preserved():
    m = rod(5)
    times = np.linspace(0, 10 * DAY, 6)
    T = solve_thermal(m, ThermalParams(), 20.0, 20.0, times, 20.0)
    assert np.allclose(T, 20.0, rtol=1e-12, atol=0)


def test_thermal_steady_state_is_linear():
    m = build_mesh(GeometryConfig(1.5, 1.6, 2.0, 3, 4, 5, cables=[]))
    times = np.concatenate([[0.0], np.geomspace(DAY, 1e12, 30)])
    T = solve_thermal(m, ThermalParams(), 30.0, 10.0, times, 20.0)[-1]
    x = m.nodes[: m.n_hex_nodes, 0]
    exact = 30.0 + (10.0 - 30.0) * x / 1.5
    assert np.max(np.abs(T - exact)) / np.max(np.abs(exact)) < 1e-8


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(-20.0, 60.0), min_size=6, max_size=6), st.floats(-20.0, 60.0))
def test_thermal_maximum_principle(values, T0):
    # face-uniform data keeps the solution one-dimensional in x
    m = thermal_mesh(GeometryConfig(1.5, 1.6, 2.0, 3, 2, 2, cables=[]), 4)
    knots_t = [0.0, 5 * DAY, 40 * DAY]
    T_int = History(list(zip(knots_t, values[:3])))
    T_ext = History(list(zip(knots_t, values[3:])))
    times = np.concatenate([[0.0], np.geomspace(0.1 * DAY, 400 * DAY, 25)])
    T = solve_thermal(m, ThermalParams(), T_int, T_ext, times, T0)
    lo, hi = min(values + [T0]), max(values + [T0])
    tol = 1e-9 * max(1.0, abs(lo), abs(hi))
    assert T.min() >= lo - tol and T.max() <= hi + tol


def test_hydric_saturated_equilibrium():
    m = rod(4)
    times = np.linspace(0, 100 * DAY, 5)
    T = np.full((len(times), m.n_hex_nodes), 293.15)
    C = solve_hydric(m, HydricParams(), T, 100.0, 100.0, times, sorption(100.0))
    assert np.allclose(C, 128.8, rtol=0, atol=1e-12)


def test_hydric_isothermal_steady_state():
    # A exp(B C) dC/dx = const  =>  exp(B C) is linear in x
    n = 300
    m = rod(n)
    p = HydricParams()
    times = np.concatenate([[0.0], np.geomspace(DAY, 1e13, 40)])
    T = np.full((len(times), m.n_hex_nodes), p.Tw0)
    C = solve_hydric(m, p, T, 50.0, 90.0, times, sorption(70.0))[-1]
    x = m.nodes[: m.n_hex_nodes, 0]
    f = np.exp(p.B * C)
    fL, fR = np.exp(p.B * sorption(50.0)), np.exp(p.B * sorption(90.0))
    lin = fL + (fR - fL) * x / 0.1
    assert np.max(np.abs(f - lin)) / np.max(np.abs(f)) < 1e-6


@settings(max_examples=5, deadline=None)
@given(st.floats(40.0, 99.0), st.floats(40.0, 99.0))
def test_hydric_monotone_decay_to_steady_state(h_int, h_ext):
    m = rod(12)
    p = HydricParams()
    # stop before the distance reaches the Newton tolerance floor
    times = np.concatenate([[0.0], np.geomspace(10 * DAY, 1e10, 15)])
    T = np.full((len(times), m.n_hex_nodes), p.Tw0)
    C = solve_hydric(m, p, T, h_int, h_ext, times, sorption(100.0))
    big = np.array([0.0, 1e15])
    C_inf = solve_hydric(m, p, T[:2], h_int, h_ext, big, sorption(100.0))[-1]
    d = np.linalg.norm(C - C_inf, axis=1)
    # below ~1e-6 d0 the distance is Newton-tolerance noise
    live = d[1:] > 1e-6 * d[0]
    assert live.sum() >= 5
    assert np.all(np.diff(d)[live] <= 1e-9 * d[0])


def test_sampling_linear_field_on_refined_grid_is_exact():
    geom = GeometryConfig(1.5, 1.6, 2.0, 3, 4, 5)
    mesh = build_mesh(geom)
    tm = thermal_mesh(geom, 2)
    X = tm.nodes[: tm.n_hex_nodes]
    lin = 290.0 + 3.0 * X[:, 0] - 2.0 * X[:, 1] + 0.5 * X[:, 2]
    times = np.array([0.0, 1.0])
    T = np.vstack([lin, lin])
    C = np.full_like(T, 100.0)
    aux = sample_auxiliary(mesh, tm, T, C, times)
    pts = np.vstack([mesh.hex_gp_coords.reshape(-1, 3), mesh.bar_gp_coords])
    exact = 290.0 + 3.0 * pts[:, 0] - 2.0 * pts[:, 1] + 0.5 * pts[:, 2]
    assert np.max(np.abs(aux.T[1] - exact)) < 1e-12 * 300
    assert np.allclose(aux.h, inverse_sorption(100.0))
    assert np.all(aux.xi == 1.0)


def test_auxiliary_rejects_times_outside_range():
    mesh = build_mesh(GeometryConfig(1, 1, 1, 1, 1, 1, cables=[]))
    aux = AuxiliaryFields.uniform(mesh, [0.0, 10.0], T=300.0)
    assert np.all(aux.at(5.0)["T"] == 300.0)
    with pytest.raises(ValueError, match="outside"):
        aux.at(11.0)


def test_config_time_grid():
    cfg = ThermoHydricConfig(n_steps=10)
    t = cfg.time_grid()
    assert t[0] == 0.0 and len(t) == 11
    assert t[-1] == pytest.approx(cfg.t_final)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ThermoHydricConfig.from_dict({"hydric": {"A": 200.0}, "thermal": {"lambda_c": 1.5}})

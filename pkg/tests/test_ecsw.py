import numpy as np
import pytest
import scipy.optimize
from hypothesis import given, settings
from hypothesis import strategies as st

from thmrom.ecsw import EQRule, build_training_system, element_forces, nnls, reduced_mesh
from thmrom.geometry import GeometryConfig, build_mesh
from thmrom.reduction import orthonormalize


def test_identity_system_keeps_every_column():
    G = np.eye(4)
    rule = nnls(G, np.ones(4), 1e-8)
    assert np.allclose(rule.weights, 1.0, rtol=1e-14)
    assert rule.converged and rule.n_elements == 4


def test_matches_scipy_nnls_when_target_is_unreachable(rng):
    G = rng.standard_normal((20, 8))
    b = rng.standard_normal(20)
    rule = nnls(G, b, 1e-12)
    ref, rnorm = scipy.optimize.nnls(G, b)
    assert not rule.converged
    assert np.allclose(rule.weights, ref, rtol=0, atol=1e-8 * max(1.0, np.abs(ref).max()))
    assert rule.residual == pytest.approx(rnorm / np.linalg.norm(b), rel=1e-8)


def test_recovers_sparse_support(rng):
    G = np.abs(rng.standard_normal((10, 6)))
    b = G[:, [1, 4]] @ np.array([2.0, 3.0])
    rule = nnls(G, b, 1e-10)
    assert list(rule.reduced_elements) == [1, 4]
    assert np.allclose(rule.weights[[1, 4]], [2.0, 3.0], rtol=1e-9)


def test_loose_tolerance_keeps_one_element(rng):
    G = np.abs(rng.standard_normal((12, 6))) + 1.0
    rule = nnls(G, G.sum(axis=1), 0.99)
    assert rule.n_elements == 1


def test_zero_target_gives_empty_rule():
    rule = nnls(np.ones((3, 2)), np.zeros(3), 1e-4)
    assert rule.n_elements == 0 and rule.converged


def test_invalid_delta_rejected():
    with pytest.raises(ValueError):
        nnls(np.eye(2), np.ones(2), 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([1e-1, 1e-2, 1e-4, 1e-6]))
def test_contract_on_random_systems(seed, delta):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((30, 15))
    b = G.sum(axis=1)  # rho = 1 is feasible, so the target is reachable
    rule = nnls(G, b, delta)
    assert np.all(rule.weights >= 0)
    assert rule.converged
    assert np.linalg.norm(G @ rule.weights - b) <= delta * np.linalg.norm(b) * (1 + 1e-12)


def test_json_roundtrip_reverifies(rng):
    G = rng.standard_normal((12, 7))
    rule = nnls(G, G.sum(axis=1), 1e-3)
    back = EQRule.from_json(rule.to_json())
    assert np.array_equal(back.weights, rule.weights)
    back.check(G, G.sum(axis=1))
    bad = rule.to_json().replace(f'"residual": {rule.residual!r}', '"residual": 0.5')
    with pytest.raises(ValueError):
        EQRule.from_json(bad)
    with pytest.raises(ValueError):
        EQRule(-np.ones(2), 1e-2, 0.0).check()


@pytest.fixture(scope="module")
def box():
    return build_mesh(GeometryConfig(1.5, 1.6, 2.0, 2, 2, 2, cables=[]))


def test_row_sums_equal_projected_assembled_forces(box, rng):
    m = box
    Z = orthonormalize(rng.standard_normal((m.n_dofs, 3)))
    S = rng.standard_normal((m.n_gforce3d, 2))
    G, b = build_training_system(m, Z, S)
    for k in range(2):
        f = np.zeros(m.n_dofs)
        np.add.at(f, m.hex_dofs, element_forces(m, S[:, k]))
        proj = Z.T @ f
        assert np.allclose(b[3 * k:3 * k + 3], proj, rtol=0, atol=1e-12 * np.abs(proj).max())


def test_training_system_shape_checks(box, rng):
    with pytest.raises(ValueError):
        build_training_system(box, np.ones((5, 1)), np.ones((box.n_gforce3d, 1)))
    with pytest.raises(ValueError):
        build_training_system(box, np.ones((box.n_dofs, 1)), np.ones((7, 1)))


def test_single_element_mesh():
    m = build_mesh(GeometryConfig(1, 1, 1, 1, 1, 1, cables=[]))
    rng = np.random.default_rng(3)
    Z = orthonormalize(rng.standard_normal((m.n_dofs, 2)))
    G, b = build_training_system(m, Z, rng.standard_normal((m.n_gforce3d, 3)))
    rule = nnls(G, b, 1e-6)
    assert np.allclose(rule.weights, [1.0], rtol=1e-12)


def test_reduced_mesh_entries(box):
    rule = EQRule(np.array([0, 2.0, 0, 0, 0.5, 0, 0, 0]), 1e-2, 0.0)
    rm = reduced_mesh(box, rule)
    assert list(rm.hexes) == [1, 4]
    assert list(rm.gp3d) == list(range(8, 16)) + list(range(32, 40))
    assert len(rm.gforce_entries) == 2 * 48
    with pytest.raises(ValueError):
        reduced_mesh(box, EQRule(np.ones(3), 1e-2, 0.0))

"""Transient heat conduction, nonlinear drying and sampling onto the mechanics.

Both problems are solved on a box of linear hexes (optionally refined through
the thickness) with backward Euler in time.  Dirichlet data is prescribed on
the intrados (x = 0) and extrados (x = Lx) faces; all other faces are
insulated/sealed.  The resulting nodal histories are interpolated to the
mechanical Gauss points by `sample_auxiliary`.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import (HEX_GAUSS_POINTS, GeometryConfig, Mesh, build_mesh,
                       hex_gradients, hex_shape)

log = logging.getLogger(__name__)

DAY = 86400.0
YEAR = 365.25 * DAY
KELVIN = 273.15

# desorption isotherm: relative humidity (%) -> water content (L/m^3)
SORPTION_TABLE = ((0.0, 0.0), (43.0, 39.0), (58.0, 57.9), (75.0, 76.5),
                  (84.0, 90.1), (92.0, 112.9), (100.0, 128.8))


class SorptionRangeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ThermalParams:
    rho_c: float = 2350.0  # kg/m^3
    cp: float = 0.88  # kJ/(kg K)
    lambda_c: float = 2.0  # W/(m K)

    def __post_init__(self):
        for name in ("rho_c", "cp", "lambda_c"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    @property
    def heat_capacity(self) -> float:
        """Volumetric heat capacity in J/(m^3 K)."""
        return self.rho_c * self.cp * 1e3


@dataclass(frozen=True)
class HydricParams:
    A: float = 380.0  # in units of 1e-15 m^2/s
    B: float = 0.05
    Uw_over_R: float = 4700.0  # K
    Tw0: float = 293.15  # K
    sorption_table: tuple = SORPTION_TABLE

    def __post_init__(self):
        if not self.A > 0:
            raise ValueError("A must be strictly positive")
        tab = np.asarray(self.sorption_table, dtype=float)
        if tab.ndim != 2 or tab.shape[1] != 2 or len(tab) < 2:
            raise ValueError("sorption_table must be a list of (h, C_w) pairs")
        if tab[0, 0] != 0 or tab[0, 1] != 0:
            raise ValueError("sorption_table must start at (0, 0)")
        if np.any(np.diff(tab[:, 0]) <= 0) or np.any(np.diff(tab[:, 1]) <= 0):
            raise ValueError("sorption_table must be strictly increasing in both columns")
        object.__setattr__(self, "sorption_table", tuple(map(tuple, tab.tolist())))

    def diffusivity(self, C, T):
        """Return ``D_w(C, T)`` in m^2/s and its derivative with respect to ``C``."""
        D = (self.A * 1e-15 * np.exp(self.B * C) * (T / self.Tw0)
             * np.exp(-self.Uw_over_R * (1.0 / T - 1.0 / self.Tw0)))
        return D, self.B * D


def _table(table) -> np.ndarray:
    return np.asarray(SORPTION_TABLE if table is None else table, dtype=float)


def _clamped(x, lo, hi, what):
    x = np.asarray(x, dtype=float)
    if np.any(x < lo - 1e-12) or np.any(x > hi + 1e-12):
        warnings.warn(f"{what} outside sorption table range [{lo}, {hi}], clamped",
                      SorptionRangeWarning, stacklevel=3)
    return np.clip(x, lo, hi)


def sorption(h, table=None):
    """Water content (L/m^3) at relative humidity ``h`` (%), piecewise linear.

    >>> float(sorption(50.0))
    47.82
    """
    tab = _table(table)
    h = _clamped(h, tab[0, 0], tab[-1, 0], "relative humidity")
    return np.interp(h, tab[:, 0], tab[:, 1])


def inverse_sorption(C, table=None):
    """Relative humidity (%) at water content ``C`` (L/m^3)."""
    tab = _table(table)
    C = _clamped(C, tab[0, 1], tab[-1, 1], "water content")
    return np.interp(C, tab[:, 1], tab[:, 0])


class History:
    """Piecewise-linear scalar history, held constant outside its knots."""

    def __init__(self, knots):
        if np.isscalar(knots):
            knots = [(0.0, float(knots))]
        k = np.asarray(knots, dtype=float).reshape(-1, 2)
        if np.any(np.diff(k[:, 0]) <= 0):
            raise ValueError("history knots must have strictly increasing times")
        self.t, self.v = k[:, 0], k[:, 1]

    def __call__(self, t):
        return np.interp(t, self.t, self.v)

    def shifted(self, offset: float) -> "History":
        return History(np.column_stack([self.t, self.v + offset]))

    def mapped(self, fn) -> "History":
        return History(np.column_stack([self.t, fn(self.v)]))

    def bounds(self):
        return float(self.v.min()), float(self.v.max())


@dataclass
class ThermoHydricConfig:
    T0: float = 20.0  # initial temperature, deg C
    h0: float = 100.0  # initial relative humidity, %
    # boundary histories as (time s, value) knots: deg C and % respectively
    T_int: list = field(default_factory=lambda: [(0.0, 20.0), (10 * DAY, 35.0)])
    T_ext: list = field(default_factory=lambda: [(0.0, 20.0), (10 * DAY, 12.0)])
    h_int: list = field(default_factory=lambda: [(0.0, 100.0), (10 * DAY, 45.0)])
    h_ext: list = field(default_factory=lambda: [(0.0, 100.0), (10 * DAY, 65.0)])
    refine_x: int = 4
    n_steps: int = 60
    t_first: float = DAY
    t_final: float = 18 * YEAR
    # optional hydration degree history as (time, xi) knots; None -> xi = 1
    xi: list | None = None
    thermal: ThermalParams = field(default_factory=ThermalParams)
    hydric: HydricParams = field(default_factory=HydricParams)

    @classmethod
    def from_dict(cls, d: dict | None) -> "ThermoHydricConfig":
        d = dict(d or {})
        if "thermal" in d and isinstance(d["thermal"], dict):
            d["thermal"] = ThermalParams(**d["thermal"])
        if "hydric" in d and isinstance(d["hydric"], dict):
            hd = dict(d["hydric"])
            if "sorption_table" in hd:
                hd["sorption_table"] = tuple(map(tuple, hd["sorption_table"]))
            d["hydric"] = HydricParams(**hd)
        return cls(**d)

    def time_grid(self) -> np.ndarray:
        """``t = 0`` followed by ``n_steps`` log-spaced times up to ``t_final``."""
        if self.n_steps < 1 or not 0 < self.t_first <= self.t_final:
            raise ValueError("invalid thermo-hydric time grid")
        return np.concatenate([[0.0], np.geomspace(self.t_first, self.t_final, self.n_steps)])


def thermal_mesh(geom: GeometryConfig | dict | None, refine_x: int = 1) -> Mesh:
    """Cable-free copy of the mechanical box, refined ``refine_x`` times in x."""
    if not isinstance(geom, GeometryConfig):
        geom = GeometryConfig.from_dict(geom)
    if refine_x < 1:
        raise ValueError("refine_x must be >= 1")
    return build_mesh(replace(geom, nx=geom.nx * refine_x, cables=[]))


class ScalarFE:
    """Scalar linear-hex operators on a mesh: lumped mass, stiffness, gradients."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        conn = mesh.hex_elements
        self.conn = conn
        self.G, self.w = hex_gradients(mesh.nodes[conn])  # (ne, g, 8, 3), (ne, g)
        self.N = hex_shape(HEX_GAUSS_POINTS)  # (g, 8)
        self.GG = np.einsum("egai,egbi->egab", self.G, self.G, optimize=True)
        n = mesh.n_hex_nodes
        self.n = n
        mass = np.zeros(n)
        np.add.at(mass, conn, np.einsum("eg,ga->ea", self.w, self.N))
        self.mass = mass
        self._rows = np.repeat(conn, 8, axis=1).ravel()
        self._cols = np.tile(conn, (1, 8)).ravel()
        fixed = np.union1d(mesh.face_sets["intrados"], mesh.face_sets["extrados"])
        self.intrados = mesh.face_sets["intrados"]
        self.extrados = mesh.face_sets["extrados"]
        self.fixed = fixed
        self.free = np.setdiff1d(np.arange(n), fixed)

    def assemble(self, Ke: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((Ke.ravel(), (self._rows, self._cols)), shape=(self.n, self.n))

    def stiffness(self, coef=1.0) -> sp.csr_matrix:
        """``int coef grad N_a . grad N_b``; ``coef`` scalar or per Gauss point (ne, g)."""
        wc = np.broadcast_to(self.w * coef, self.w.shape)
        return self.assemble(np.einsum("eg,egab->eab", wc, self.GG))

    def at_gauss(self, values: np.ndarray) -> np.ndarray:
        return np.einsum("ga,ea->eg", self.N, values[self.conn])

    def grad_at_gauss(self, values: np.ndarray) -> np.ndarray:
        return np.einsum("egai,ea->egi", self.G, values[self.conn])

    def dirichlet_values(self, v_int: float, v_ext: float) -> np.ndarray:
        v = np.empty(len(self.fixed))
        pos = np.searchsorted(self.fixed, self.intrados)
        v[pos] = v_int
        pos = np.searchsorted(self.fixed, self.extrados)
        v[pos] = v_ext
        return v


def _linear_solve(A: sp.spmatrix, b: np.ndarray, symmetric: bool) -> np.ndarray:
    """Jacobi-preconditioned Krylov solve, falling back to sparse LU."""
    A = A.tocsr()
    dinv = 1.0 / A.diagonal()
    M = spla.LinearOperator(A.shape, matvec=lambda v: dinv * v)
    if symmetric:
        x, info = spla.cg(A, b, rtol=1e-13, atol=0.0, maxiter=2000, M=M)
    else:
        x, info = spla.gmres(A, b, rtol=1e-13, atol=0.0, restart=100, maxiter=50, M=M)
    if info != 0 or not np.all(np.isfinite(x)):
        x = spla.splu(A.tocsc()).solve(b)
    return x


def _check_times(times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) < 1 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be a strictly increasing 1D sequence")
    return times


def solve_thermal(mesh: Mesh, params: ThermalParams, T_int, T_ext, times, T0) -> np.ndarray:
    """Nodal temperature history, shape ``(len(times), n_nodes)``.

    ``T_int``/``T_ext`` are `History` objects (or knots) for the intrados and
    extrados faces; ``T0`` the uniform initial value.  The units are whatever
    the inputs use, the problem being linear.
    """
    times = _check_times(times)
    if not isinstance(params, ThermalParams):
        params = ThermalParams(**params)
    T_int, T_ext = _as_history(T_int), _as_history(T_ext)
    fe = ScalarFE(mesh)
    K = fe.stiffness(params.lambda_c).tocsc()
    Cm = params.heat_capacity * fe.mass
    f, d = fe.free, fe.fixed
    K_ff = K[f][:, f]
    K_fd = K[f][:, d]
    out = np.empty((len(times), fe.n))
    T = np.full(fe.n, float(T0))
    out[0] = T
    for k in range(1, len(times)):
        dt = times[k] - times[k - 1]
        Td = fe.dirichlet_values(T_int(times[k]), T_ext(times[k]))
        A = K_ff + sp.diags(Cm[f] / dt)
        rhs = Cm[f] / dt * T[f] - K_fd @ Td
        try:
            Tf = _linear_solve(A, rhs, symmetric=True)
        except RuntimeError as exc:  # singular factor
            raise np.linalg.LinAlgError(f"singular thermal system at step {k}") from exc
        if not np.all(np.isfinite(Tf)):
            raise np.linalg.LinAlgError(f"singular thermal system at step {k}")
        T = T.copy()
        T[f] = Tf
        T[d] = Td
        out[k] = T
    return out


def _as_history(h) -> History:
    return h if isinstance(h, History) else History(h)


def solve_hydric(mesh: Mesh, params: HydricParams, T_hist: np.ndarray, h_int, h_ext,
                 times, C0, tol: float = 1e-10, max_iter: int = 30,
                 dt_min: float = 1.0) -> np.ndarray:
    """Nodal water-content history (L/m^3) of the nonlinear drying problem.

    ``T_hist`` holds nodal temperatures in kelvin at ``times`` (as returned by
    `solve_thermal`); ``h_int``/``h_ext`` are relative-humidity histories in %.
    Each step is a Newton solve; a failing step is split in halves down to
    ``dt_min`` seconds.
    """
    times = _check_times(times)
    if not isinstance(params, HydricParams):
        params = HydricParams(**params)
    T_hist = np.asarray(T_hist, dtype=float)
    if T_hist.shape[0] != len(times):
        raise ValueError("T_hist must have one row per time")
    h_int, h_ext = _as_history(h_int), _as_history(h_ext)
    tab = params.sorption_table
    fe = ScalarFE(mesh)
    out = np.empty((len(times), fe.n))
    C = np.full(fe.n, float(C0))
    out[0] = C

    def bc_at(t):
        return fe.dirichlet_values(float(sorption(h_int(t), tab)), float(sorption(h_ext(t), tab)))

    def T_at(t):
        k = np.searchsorted(times, t, side="left")
        k = min(max(k, 1), len(times) - 1)
        a = (t - times[k - 1]) / (times[k] - times[k - 1])
        return (1 - a) * T_hist[k - 1] + a * T_hist[k]

    for k in range(1, len(times)):
        C = _hydric_advance(fe, params, C, times[k - 1], times[k], T_at, bc_at, tol, max_iter, dt_min)
        out[k] = C
    return out


def _hydric_advance(fe, params, C, t0, t1, T_at, bc_at, tol, max_iter, dt_min):
    ok, C1 = _hydric_step(fe, params, C, t1 - t0, T_at(t1), bc_at(t1), tol, max_iter)
    if ok:
        return C1
    if (t1 - t0) / 2 < dt_min:
        raise RuntimeError(f"hydric Newton failed with dt below dt_min at t={t1:.6g} s")
    tm = 0.5 * (t0 + t1)
    log.debug("hydric step [%g, %g] split", t0, t1)
    C = _hydric_advance(fe, params, C, t0, tm, T_at, bc_at, tol, max_iter, dt_min)
    return _hydric_advance(fe, params, C, tm, t1, T_at, bc_at, tol, max_iter, dt_min)


def _hydric_step(fe: ScalarFE, params: HydricParams, C_old, dt, T, Cd, tol, max_iter):
    f, d = fe.free, fe.fixed
    C = C_old.copy()
    C[d] = Cd
    Tg = fe.at_gauss(T)
    m_dt = fe.mass / dt
    scale = max(np.abs(C).max(), 1.0)
    for _ in range(max_iter):
        Cg = fe.at_gauss(C)
        gC = fe.grad_at_gauss(C)
        D, dD = params.diffusivity(Cg, Tg)
        R = m_dt * (C - C_old)
        q = np.einsum("egai,egi->ega", fe.G, gC)  # grad N_a . grad C
        np.add.at(R, fe.conn, np.einsum("eg,ega->ea", fe.w * D, q))
        Je = (np.einsum("eg,egab->eab", fe.w * D, fe.GG)
              + np.einsum("ega,gb->eab", (fe.w * dD)[:, :, None] * q, fe.N))
        J = (fe.assemble(Je) + sp.diags(m_dt)).tocsr()
        try:
            dC = _linear_solve(J[f][:, f], -R[f], symmetric=False)
        except RuntimeError:
            return False, C_old
        if not np.all(np.isfinite(dC)):
            return False, C_old
        C[f] += dC
        if np.abs(dC).max() <= tol * scale:
            return True, C
    return False, C_old


@dataclass
class AuxiliaryFields:
    """Histories of T (K), C_w (L/m^3), h (%) and xi at mechanical Gauss points.

    Columns are the hex Gauss points (element-major, 8 per hex) followed by the
    bar midpoints.  Values between stored times are linear in time.
    """

    times: np.ndarray
    T: np.ndarray
    C: np.ndarray
    h: np.ndarray
    xi: np.ndarray
    n_gp3d: int

    @property
    def n_points(self) -> int:
        return self.T.shape[1]

    def _weights(self, t):
        t = float(t)
        tt = self.times
        if t < tt[0] - 1e-9 * max(1.0, abs(tt[0])) or t > tt[-1] * (1 + 1e-12) + 1e-9:
            raise ValueError(f"time {t} outside auxiliary range [{tt[0]}, {tt[-1]}]")
        if len(tt) == 1:
            return 0, 0, 0.0
        k = int(np.clip(np.searchsorted(tt, t, side="right"), 1, len(tt) - 1))
        a = float(np.clip((t - tt[k - 1]) / (tt[k] - tt[k - 1]), 0.0, 1.0))
        return k - 1, k, a

    def at(self, t) -> dict:
        """Fields at time ``t``: dict with keys T, C, h, xi (one value per point)."""
        i, j, a = self._weights(t)
        # this form keeps time-constant fields exact
        return {name: getattr(self, name)[i] + a * (getattr(self, name)[j] - getattr(self, name)[i])
                for name in ("T", "C", "h", "xi")}

    def resample(self, times) -> "AuxiliaryFields":
        times = _check_times(times)
        rows = [self.at(t) for t in times]
        return AuxiliaryFields(times, *(np.array([r[n] for r in rows]) for n in ("T", "C", "h", "xi")),
                               n_gp3d=self.n_gp3d)

    def constant_like(self, **values) -> "AuxiliaryFields":
        out = AuxiliaryFields(self.times.copy(), self.T.copy(), self.C.copy(), self.h.copy(),
                              self.xi.copy(), self.n_gp3d)
        for k, v in values.items():
            getattr(out, k)[...] = v
        return out

    @classmethod
    def uniform(cls, mesh: Mesh, times, T=293.15, C=128.8, h=100.0, xi=1.0) -> "AuxiliaryFields":
        """Space-uniform fields; scalars or per-time arrays."""
        times = _check_times(times)
        npts = mesh.n_gp3d + mesh.n_gp1d
        def col(v):
            return np.broadcast_to(np.asarray(v, dtype=float).reshape(-1, 1), (len(times), npts)).copy()
        return cls(times, col(T), col(C), col(h), col(xi), mesh.n_gp3d)


def mechanical_points(mesh: Mesh) -> np.ndarray:
    """Coordinates of the hex Gauss points followed by bar midpoints."""
    return np.vstack([mesh.hex_gp_coords.reshape(-1, 3), mesh.bar_gp_coords])


def interpolation_matrix(tmesh: Mesh, points: np.ndarray) -> sp.csr_matrix:
    """Trilinear interpolation from the structured box ``tmesh`` to ``points``."""
    nx, ny, nz = tmesh.shape
    L = np.asarray(tmesh.lengths, dtype=float)
    n = np.array([nx, ny, nz])
    s = points / L * n
    cell = np.clip(np.floor(s).astype(int), 0, n - 1)
    xi = 2.0 * (s - cell) - 1.0
    if np.any(np.abs(xi) > 1 + 1e-9):
        raise ValueError("points outside the thermal mesh")
    e = cell[:, 0] + nx * (cell[:, 1] + ny * cell[:, 2])
    Nv = hex_shape(xi)  # (npts, 8)
    rows = np.repeat(np.arange(len(points)), 8)
    cols = tmesh.hex_elements[e].ravel()
    return sp.csr_matrix((Nv.ravel(), (rows, cols)), shape=(len(points), tmesh.n_hex_nodes))


def sample_auxiliary(mesh: Mesh, tmesh: Mesh, T_hist, C_hist, times, times_mech=None,
                     xi=None, table=None) -> AuxiliaryFields:
    """Interpolate nodal T (K) and C_w histories to the mechanical Gauss points.

    ``xi`` is an optional hydration-degree history (knots); the default is 1.
    ``times_mech``, when given, resamples linearly in time onto those times.
    """
    times = _check_times(times)
    P = interpolation_matrix(tmesh, mechanical_points(mesh))
    T = np.asarray(P @ np.asarray(T_hist).T).T
    C = np.asarray(P @ np.asarray(C_hist).T).T
    h = inverse_sorption(C, table)
    xi_v = np.ones_like(T) if xi is None else np.repeat(
        _as_history(xi)(times)[:, None], T.shape[1], axis=1)
    aux = AuxiliaryFields(times, T, C, h, xi_v, mesh.n_gp3d)
    if times_mech is not None:
        aux = aux.resample(times_mech)
    return aux


def compute_auxiliary(mesh: Mesh, geom: GeometryConfig | dict | None,
                      cfg: ThermoHydricConfig | dict | None = None) -> AuxiliaryFields:
    """Run the thermal then the drying problem and sample them on ``mesh``."""
    if not isinstance(cfg, ThermoHydricConfig):
        cfg = ThermoHydricConfig.from_dict(cfg)
    tmesh = thermal_mesh(geom, cfg.refine_x)
    times = cfg.time_grid()
    T_int = History(cfg.T_int).shifted(KELVIN)
    T_ext = History(cfg.T_ext).shifted(KELVIN)
    T_hist = solve_thermal(tmesh, cfg.thermal, T_int, T_ext, times, cfg.T0 + KELVIN)
    tab = cfg.hydric.sorption_table
    C0 = float(sorption(cfg.h0, tab))
    C_hist = solve_hydric(tmesh, cfg.hydric, T_hist, cfg.h_int, cfg.h_ext, times, C0)
    return sample_auxiliary(mesh, tmesh, T_hist, C_hist, times, xi=cfg.xi, table=tab)

"""Local material laws: Burger creep model for concrete and thermo-elastic cables.

All concrete routines work on batches of Gauss points.  Strains enter in
engineering Voigt notation (xx, yy, zz, xy, yz, xz with doubled shears), the
same as the rows of the B matrices; stresses and internal strain tensors use
tensor Voigt components (no doubling).

Time integration is backward Euler on every chain.  For a fixed consolidation
norm ``m`` the coupled elastic/creep system at a Gauss point has a closed-form
solution, so the only local iteration is the scalar equation
``m = max(m_old, ||eps_i(m)||)``, solved by a bracketed regula falsi.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

_DIAG = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
# weights of the tensor inner product a:b in Voigt storage
_INNER = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])
_ENG_TO_TENSOR = np.array([1.0, 1.0, 1.0, 0.5, 0.5, 0.5])
_MAX_EXP = 700.0


class ConstitutiveError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConcreteParams:
    E_c: float = 4.2e10
    nu_c: float = 0.2
    alpha_th_c: float = 5.2e-6
    alpha_dc: float = 7.56e-6
    beta_endo: float = 66.1e-6
    nu_bc: float = 0.2
    k_rd: float = 5.98e18
    eta_rd: float = 8.12e16
    eta_id0: float = 1.38e18
    eta_is0: float = 2.76e18
    kappa0: float = 4.2e-4
    Ubc_over_R: float = 4700.0
    Tbc0: float = 293.15
    eta_dc: float = 5e9
    # also scale the irreversible viscosities by the Arrhenius factor of kappa
    arrhenius_viscosities: bool = False

    def __post_init__(self):
        if not self.E_c > 0:
            raise ValueError("E_c must be positive")
        if not 0 < self.nu_c < 0.5 or not 0 < self.nu_bc < 0.5:
            raise ValueError("Poisson ratios must lie in (0, 0.5)")
        for name in ("k_rd", "eta_rd", "eta_id0", "eta_is0", "kappa0", "eta_dc"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def creep_poisson_factor(self) -> float:
        return (1.0 + self.nu_bc) / (1.0 - 2.0 * self.nu_bc)

    @property
    def k_rs(self) -> float:
        return self.k_rd * self.creep_poisson_factor

    @property
    def eta_rs(self) -> float:
        return self.eta_rd * self.creep_poisson_factor

    @property
    def bulk(self) -> float:
        return self.E_c / (3.0 * (1.0 - 2.0 * self.nu_c))

    @property
    def shear(self) -> float:
        return self.E_c / (2.0 * (1.0 + self.nu_c))

    def kappa(self, T):
        """Arrhenius-activated consolidation parameter at temperature ``T`` (K)."""
        return self.kappa0 * self.arrhenius(T)

    def arrhenius(self, T):
        return np.exp(-self.Ubc_over_R * (1.0 / np.asarray(T, dtype=float) - 1.0 / self.Tbc0))

    def elastic_matrix(self) -> np.ndarray:
        """6x6 isotropic stiffness acting on engineering strains."""
        K, G = self.bulk, self.shear
        C = np.zeros((6, 6))
        C[:3, :3] = K - 2.0 * G / 3.0
        C[:3, :3] += 2.0 * G * np.eye(3)
        C[3:, 3:] = G * np.eye(3)
        return C

    def with_values(self, **kw) -> "ConcreteParams":
        return replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict | None) -> "ConcreteParams":
        return cls(**(d or {}))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SteelParams:
    E_s: float = 1.9e11
    S_s: float = 5400e-6
    alpha_th_s: float = 1e-5
    rho_s: float = 7850.0
    f_prg: float = 1.86e9
    nu_s: float = 0.3  # not used by the bar law

    def __post_init__(self):
        if not (self.E_s > 0 and self.S_s > 0):
            raise ValueError("E_s and S_s must be positive")

    @classmethod
    def from_dict(cls, d: dict | None) -> "SteelParams":
        return cls(**(d or {}))


def cable_force(params: SteelParams, eps_s, dT):
    """Normal force ``N = E_s S_s (eps - alpha dT)`` and an over-stress flag.

    >>> float(cable_force(SteelParams(), 1e-3, 0.0)[0])
    1026000.0
    """
    N = params.E_s * params.S_s * (np.asarray(eps_s, dtype=float) - params.alpha_th_s * np.asarray(dT))
    return N, np.abs(N) / params.S_s > params.f_prg


def split_spherical_deviatoric(tensor):
    """Return ``(tr/3, tensor - tr/3 I)`` for (..., 3, 3) arrays or tensor Voigt (..., 6)."""
    a = np.asarray(tensor, dtype=float)
    if a.shape[-2:] == (3, 3):
        s = np.trace(a, axis1=-2, axis2=-1) / 3.0
        return s, a - s[..., None, None] * np.eye(3)
    if a.shape[-1] == 6:
        s = a[..., :3].sum(axis=-1) / 3.0
        return s, a - s[..., None] * _DIAG
    raise ValueError("expected a (..., 3, 3) or (..., 6) array")


def tensor_norm(v):
    """sqrt(v:v) of tensor Voigt arrays (..., 6)."""
    return np.sqrt(np.sum(_INNER * v * v, axis=-1))


_STATE_FIELDS = ("eps_rs", "eps_is", "eps_rd", "eps_id", "eps_i_max_norm",
                 "eps_th", "eps_ds", "eps_en", "eps_dc")
_STATE_WIDTH = {"eps_rd": 6, "eps_id": 6, "eps_dc": 6}


@dataclass
class BurgerState:
    """Internal variables of a batch of Gauss points (tensor Voigt storage)."""

    eps_rs: np.ndarray
    eps_is: np.ndarray
    eps_rd: np.ndarray
    eps_id: np.ndarray
    eps_i_max_norm: np.ndarray
    eps_th: np.ndarray
    eps_ds: np.ndarray
    eps_en: np.ndarray
    eps_dc: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "BurgerState":
        return cls(**{f: np.zeros((n, _STATE_WIDTH[f]) if f in _STATE_WIDTH else n)
                      for f in _STATE_FIELDS})

    def __len__(self) -> int:
        return len(self.eps_rs)

    def copy(self) -> "BurgerState":
        return BurgerState(**{f: getattr(self, f).copy() for f in _STATE_FIELDS})

    def take(self, idx) -> "BurgerState":
        return BurgerState(**{f: getattr(self, f)[idx] for f in _STATE_FIELDS})

    def tile(self, reps: int) -> "BurgerState":
        return BurgerState(**{f: np.concatenate([getattr(self, f)] * reps) for f in _STATE_FIELDS})

    def to_array(self) -> np.ndarray:
        return np.column_stack([getattr(self, f).reshape(len(self), -1) for f in _STATE_FIELDS])

    @classmethod
    def from_array(cls, a: np.ndarray) -> "BurgerState":
        out, c = {}, 0
        for f in _STATE_FIELDS:
            w = _STATE_WIDTH.get(f, 1)
            out[f] = a[:, c:c + w].copy() if w > 1 else a[:, c].copy()
            c += w
        return cls(**out)

    @property
    def inelastic_strain(self) -> np.ndarray:
        """Sum of all non-elastic strains, tensor Voigt (n, 6)."""
        sph = self.eps_rs + self.eps_is + self.eps_th + self.eps_ds + self.eps_en
        return sph[:, None] * _DIAG + self.eps_rd + self.eps_id + self.eps_dc


# ---------------------------------------------------------------------------
# chain kernels shared by the 3D law and the single-chain integrators


def kelvin_voigt_coefficients(eps_old, k, eta, h, dt):
    """Backward-Euler Kelvin-Voigt update written as ``eps_new = a + b * sigma``."""
    c = eta / dt
    denom = k + c
    return c * eps_old / denom, h / denom


def consolidated_viscosity(eta0, m, kappa):
    return eta0 * np.exp(np.minimum(m / kappa, _MAX_EXP))


def solve_consolidation(m_old, norm_of, rtol=1e-13, max_iter=200):
    """Smallest ``m >= m_old`` with ``m = max(m_old, norm_of(m))``, vectorized.

    ``norm_of(m, idx)`` returns the irreversible-strain norm at end of step
    when the viscosities are evaluated at ``m`` for the points ``idx``.  The
    norm decreases with ``m`` (stiffer chains creep less), so the root lies
    in ``[m_old, norm_of(m_old)]``; the bracket is widened if needed.
    """
    m_old = np.asarray(m_old, dtype=float)
    n = len(m_old)
    m = m_old.copy()
    all_idx = np.arange(n)
    g0 = norm_of(m_old, all_idx)
    act = np.flatnonzero(g0 > m_old)
    if len(act) == 0:
        return m
    lo = m_old[act].copy()
    flo = g0[act] - lo
    hi = g0[act].copy()
    fhi = norm_of(hi, act) - hi
    for _ in range(60):
        bad = fhi > 0
        if not bad.any():
            break
        lo[bad], flo[bad] = hi[bad], fhi[bad]
        hi[bad] = hi[bad] + fhi[bad] * 2.0
        fhi[bad] = norm_of(hi[bad], act[bad]) - hi[bad]
    else:
        raise ConstitutiveError("consolidation bracket could not be found")
    side = np.zeros(len(act), dtype=int)
    sol = hi.copy()
    live = np.ones(len(act), dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(live)
        if len(idx) == 0:
            break
        a, b, fa, fb = lo[idx], hi[idx], flo[idx], fhi[idx]
        x = (a * fb - b * fa) / (fb - fa)
        x = np.where(np.isfinite(x) & (x > a) & (x < b), x, 0.5 * (a + b))
        fx = norm_of(x, act[idx]) - x
        sol[idx] = x
        done = (np.abs(fx) <= rtol * np.abs(x)) | (b - a <= rtol * np.abs(b))
        right = fx < 0  # root on the left: x becomes the new upper end
        # Illinois modification: halve the retained endpoint's value on repeats
        i_r = idx[right]
        hi[i_r], fhi[i_r] = x[right], fx[right]
        flo[i_r] = np.where(side[i_r] == -1, 0.5 * flo[i_r], flo[i_r])
        side[i_r] = -1
        i_l = idx[~right]
        lo[i_l], flo[i_l] = x[~right], fx[~right]
        fhi[i_l] = np.where(side[i_l] == 1, 0.5 * fhi[i_l], fhi[i_l])
        side[i_l] = 1
        live[idx[done]] = False
    else:
        raise ConstitutiveError("consolidation root search did not converge")
    m[act] = sol
    return m


# ---------------------------------------------------------------------------
# single-chain integrators (stress-controlled) and their closed forms


def kelvin_voigt_trajectory(sigma, h, k, eta, times):
    """Backward-Euler strain history of a Kelvin-Voigt chain under constant stress."""
    times = np.asarray(times, dtype=float)
    eps = np.zeros(len(times))
    for i in range(1, len(times)):
        a, b = kelvin_voigt_coefficients(eps[i - 1], k, eta, h, times[i] - times[i - 1])
        eps[i] = a + b * sigma
    return eps


def kelvin_voigt_exact(sigma, h, k, eta, t):
    return h * sigma / k * (1.0 - np.exp(-k * np.asarray(t) / eta))


def consolidation_trajectory(sigma, h, eta0, kappa, times):
    """Backward-Euler history of a Maxwell chain whose viscosity hardens with its own strain."""
    times = np.asarray(times, dtype=float)
    eps = np.zeros(len(times))
    m = np.zeros(1)
    for i in range(1, len(times)):
        dt = times[i] - times[i - 1]
        e_old = eps[i - 1]

        def norm_of(mm, idx, e_old=e_old, dt=dt):
            return np.abs(e_old + dt * h * sigma / consolidated_viscosity(eta0, mm, kappa))

        m = solve_consolidation(m, norm_of)
        eps[i] = e_old + dt * h * sigma / consolidated_viscosity(eta0, m[0], kappa)
    return eps


def consolidation_exact(sigma, h, eta0, kappa, t):
    return kappa * np.log1p(h * sigma * np.asarray(t) / (kappa * eta0))


# ---------------------------------------------------------------------------
# 3D Burger law


def _aux_arrays(aux, n):
    def get(name, default):
        v = aux.get(name, default) if isinstance(aux, dict) else getattr(aux, name, default)
        return np.broadcast_to(np.asarray(v, dtype=float), (n,))
    return get("T", 293.15), get("C", 0.0), get("h", 100.0), get("xi", 1.0)


def _burger_update(p: ConcreteParams, state: BurgerState, eps_eng, aux_k, aux_k1, dt):
    n = len(eps_eng)
    eps = eps_eng * _ENG_TO_TENSOR
    eps_s, e_dev = split_spherical_deviatoric(eps)
    T0, C0, h0, xi0 = _aux_arrays(aux_k, n)
    T1, C1, h1, xi1 = _aux_arrays(aux_k1, n)
    eps_th = state.eps_th + p.alpha_th_c * (T1 - T0)
    eps_ds = state.eps_ds + p.alpha_dc * (C1 - C0)
    eps_en = state.eps_en + p.beta_endo * (xi1 - xi0)
    eps_imp = eps_th + eps_ds + eps_en
    h = np.clip(h1 / 100.0, 0.0, 1.0)
    b_dc = np.abs(h1 - h0) / 100.0 / p.eta_dc

    a_rs, b_rs = kelvin_voigt_coefficients(state.eps_rs, p.k_rs, p.eta_rs, h, dt)
    a_rd, b_rd = kelvin_voigt_coefficients(state.eps_rd, p.k_rd, p.eta_rd, h, dt)
    kappa = p.kappa(T1)
    visc_scale = 1.0 / p.arrhenius(T1) if p.arrhenius_viscosities else np.ones(n)
    dc_s, dc_d = split_spherical_deviatoric(state.eps_dc)
    K3, G2 = 3.0 * p.bulk, 2.0 * p.shear
    num_s = K3 * (eps_s - eps_imp - a_rs - state.eps_is - dc_s)
    num_d = G2 * (e_dev - a_rd - state.eps_id - dc_d)

    def solve(m, idx):
        b_is = dt * h[idx] / consolidated_viscosity(p.eta_is0 * visc_scale[idx], m, kappa[idx])
        b_id = dt * h[idx] / consolidated_viscosity(p.eta_id0 * visc_scale[idx], m, kappa[idx])
        s_s = num_s[idx] / (1.0 + K3 * (b_rs[idx] + b_is + b_dc[idx]))
        s_d = num_d[idx] / (1.0 + G2 * (b_rd[idx] + b_id + b_dc[idx]))[:, None]
        return s_s, s_d, b_is, b_id

    def norm_of(m, idx):
        s_s, s_d, b_is, b_id = solve(m, idx)
        e_is = state.eps_is[idx] + b_is * s_s
        e_id = state.eps_id[idx] + b_id[:, None] * s_d
        return np.sqrt(3.0 * e_is ** 2 + np.sum(_INNER * e_id * e_id, axis=1))

    m = solve_consolidation(state.eps_i_max_norm, norm_of)
    s_s, s_d, b_is, b_id = solve(m, np.arange(n))
    sigma = s_s[:, None] * _DIAG + s_d
    new = BurgerState(
        eps_rs=a_rs + b_rs * s_s,
        eps_is=state.eps_is + b_is * s_s,
        eps_rd=a_rd + b_rd[:, None] * s_d,
        eps_id=state.eps_id + b_id[:, None] * s_d,
        eps_i_max_norm=m,
        eps_th=eps_th, eps_ds=eps_ds, eps_en=eps_en,
        eps_dc=state.eps_dc + b_dc[:, None] * sigma,
    )
    # keep the stored deviators exactly traceless
    for f in ("eps_rd", "eps_id"):
        v = getattr(new, f)
        v[:, :3] -= v[:, :3].mean(axis=1, keepdims=True)
    if not np.all(np.isfinite(sigma)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(sigma), axis=1))[0])
        raise ConstitutiveError(f"non-finite stress at Gauss point {bad}")
    return sigma, new


def integrate_concrete(params: ConcreteParams, state: BurgerState, eps_k, eps_k1, aux_k, aux_k1,
                       dt: float, tangent: bool = True):
    """Advance a batch of concrete Gauss points over one time step.

    Parameters
    ----------
    params : ConcreteParams
    state : BurgerState
        Internal variables at the start of the step.
    eps_k, eps_k1 : ndarray (n, 6)
        Total engineering strains at both ends of the step.  The update is
        driven by ``eps_k1``; ``eps_k`` is accepted for interface symmetry.
    aux_k, aux_k1 : dict
        Auxiliary fields ``T`` (K), ``C`` (L/m^3), ``h`` (%), ``xi`` per point.
    dt : float
        Step length in seconds.

    Returns
    -------
    sigma : ndarray (n, 6)
    state_k1 : BurgerState
    tangent : ndarray (n, 6, 6) or None
        Forward-difference derivative of ``sigma`` with respect to the
        engineering strain.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    eps_k1 = np.atleast_2d(np.asarray(eps_k1, dtype=float))
    n = len(eps_k1)
    if len(state) != n:
        raise ValueError("state and strain batch sizes differ")
    if not tangent:
        sigma, new = _burger_update(params, state, eps_k1, aux_k, aux_k1, dt)
        return sigma, new, None
    # one batched call: the base point and its six perturbations
    step = 1e-7 * np.maximum(np.linalg.norm(eps_k1, axis=1), 1.0)
    pert = np.repeat(eps_k1[None], 7, axis=0)
    for j in range(6):
        pert[j + 1, :, j] += step
    aux_k = _tile_aux(aux_k, n, 7)
    aux_k1 = _tile_aux(aux_k1, n, 7)
    sig_all, new_all = _burger_update(params, state.tile(7), pert.reshape(-1, 6), aux_k, aux_k1, dt)
    sig_all = sig_all.reshape(7, n, 6)
    D = (sig_all[1:] - sig_all[0][None]) / step[None, :, None]  # (6 strain, n, 6 stress)
    return sig_all[0], new_all.take(np.arange(n)), D.transpose(1, 2, 0)


def _tile_aux(aux, n, reps):
    T, C, h, xi = _aux_arrays(aux, n)
    return {"T": np.tile(T, reps), "C": np.tile(C, reps), "h": np.tile(h, reps), "xi": np.tile(xi, reps)}


def concrete_param_names():
    return [f.name for f in fields(ConcreteParams)]

"""Full-order quasi-static solver of the concrete box with embedded cables.

The internal forces are assembled in two loops, one over the hexes (Burger
concrete) and one over the bars (thermo-elastic steel).  Kinematic relations
``B u = 0`` are dualized, so every Newton iteration solves the saddle system

    [K  B^T] [du    ]   [-R  ]
    [B  0  ] [lambda] = [-B u]

Three phases are simulated: concrete alone, prestressing (the cables carry a
ramped tension and no stiffness, i.e. they slide in their ducts) and the
coupled life of the structure once the cables are grouted, where the bar
force is the final tension plus the elastic response to strain changes.
"""
from __future__ import annotations

import logging
import time as _time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .constitutive import BurgerState, ConcreteParams, SteelParams, cable_force, integrate_concrete
from .geometry import ConstraintMatrix, Mesh, body_load_vector, face_load_vector
from .thermo_hydric import DAY, YEAR, AuxiliaryFields

log = logging.getLogger(__name__)

PHASES = ("concrete_only", "prestressing", "coupled")


class NonConvergence(RuntimeError):
    pass


class StepTooSmall(RuntimeError):
    pass


@dataclass
class LoadSchedule:
    t_init_p: float = 90 * DAY
    t_end_p: float = 100 * DAY
    t_f: float = 18 * YEAR
    sigma_h: float = 1264.7e6  # tension of cables along y, Pa
    sigma_v: float = 990.7e6  # tension of cables along z, Pa
    dead_load: float = 1.375e6  # downward pressure on the top face, Pa
    gravity: bool = True
    g: float = 9.81
    rho_c: float = 2350.0
    prestress: bool = True

    def __post_init__(self):
        if not 0 < self.t_init_p < self.t_end_p < self.t_f:
            raise ValueError("need 0 < t_init_p < t_end_p < t_f")

    def phase(self, t: float) -> str:
        if t <= self.t_init_p:
            return "concrete_only"
        if t <= self.t_end_p:
            return "prestressing"
        return "coupled"

    def ramp(self, t: float) -> float:
        return float(np.clip((t - self.t_init_p) / (self.t_end_p - self.t_init_p), 0.0, 1.0))

    def boundaries(self) -> list:
        return [(PHASES[0], 0.0, self.t_init_p), (PHASES[1], self.t_init_p, self.t_end_p),
                (PHASES[2], self.t_end_p, self.t_f)]

    @classmethod
    def from_dict(cls, d: dict | None) -> "LoadSchedule":
        return cls(**(d or {}))


@dataclass
class StepperConfig:
    dt_init: float = DAY
    # per-phase caps: concrete_only, prestressing, coupled
    dt_max: tuple = (30 * DAY, 2.5 * DAY, YEAR)
    dt_min: float = 1.0
    grow: float = 1.5
    grow_max_iter: int = 6
    # step straight to a phase boundary when it is within stretch * dt
    stretch: float = 1.25
    tol: float = 1e-6
    max_iter: int = 25

    @classmethod
    def from_dict(cls, d: dict | None) -> "StepperConfig":
        d = dict(d or {})
        if "dt_max" in d:
            d["dt_max"] = tuple(d["dt_max"])
        return cls(**d)


@dataclass
class State:
    u: np.ndarray
    lam: np.ndarray
    sigma: np.ndarray  # (n_gp3d, 6)
    N: np.ndarray  # (n_bar,)
    ivars: BurgerState
    bar_eps_ref: np.ndarray
    bar_T_ref: np.ndarray
    time: float = 0.0
    step: int = 0

    @property
    def gforce(self) -> np.ndarray:
        return np.concatenate([self.sigma.ravel(), self.N])

    def copy(self) -> "State":
        return State(self.u.copy(), self.lam.copy(), self.sigma.copy(), self.N.copy(), self.ivars.copy(),
                     self.bar_eps_ref.copy(), self.bar_T_ref.copy(), self.time, self.step)


@dataclass
class Trajectory:
    times: np.ndarray  # accepted times (K,)
    U: np.ndarray  # (n_dofs, K)
    S: np.ndarray  # (n_gforce, K)
    iterations: list = field(default_factory=list)
    wall_time: float = 0.0
    newton_history: list = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.times)


class FomModel:
    """Discrete operators of one parameter instance (mesh, materials, loads, aux)."""

    def __init__(self, mesh: Mesh, constraints: ConstraintMatrix, concrete: ConcreteParams,
                 steel: SteelParams, schedule: LoadSchedule, aux: AuxiliaryFields):
        self.mesh = mesh
        self.constraints = constraints
        self.B = constraints.B.tocsr()
        self.concrete = concrete
        self.steel = steel
        self.schedule = schedule
        self.aux = aux
        if aux.n_gp3d != mesh.n_gp3d or aux.n_points != mesh.n_gp3d + mesh.n_gp1d:
            raise ValueError("auxiliary fields do not match the mesh quadrature")
        s = schedule
        self.F_dead = face_load_vector(mesh, "top", (0.0, 0.0, -s.dead_load)) if s.dead_load else np.zeros(mesh.n_dofs)
        self.F_grav = (body_load_vector(mesh, (0.0, 0.0, -s.rho_c * s.g)) if s.gravity
                       else np.zeros(mesh.n_dofs))
        self.F_bar_weight = np.zeros(mesh.n_dofs)
        if s.gravity and mesh.n_bar:
            w = 0.5 * steel.rho_s * s.g * steel.S_s * mesh.bar_length
            np.add.at(self.F_bar_weight, 3 * mesh.bar_elements[:, 0] + 2, -w)
            np.add.at(self.F_bar_weight, 3 * mesh.bar_elements[:, 1] + 2, -w)
        # target tension per bar
        axis = np.array([mesh.cables[c].axis for c in mesh.cable_ids]) if mesh.n_bar else np.zeros(0, str)
        sig = np.where(axis == "z", s.sigma_v, s.sigma_h) if s.prestress else np.zeros(mesh.n_bar)
        self.bar_prestress = sig * steel.S_s
        self._hex_dofs = mesh.hex_dofs
        self._bar_dofs = mesh.bar_dofs
        self._build_pattern()
        self.saddle = SaddleSolver(self.B)

    # -- sparse pattern -----------------------------------------------------
    def _build_pattern(self):
        n = self.mesh.n_dofs
        hd, bd = self._hex_dofs, self._bar_dofs
        r = np.concatenate([np.repeat(hd, 24, axis=1).ravel(), np.repeat(bd, 6, axis=1).ravel()])
        c = np.concatenate([np.tile(hd, (1, 24)).ravel(), np.tile(bd, (1, 6)).ravel()])
        keys = r.astype(np.int64) * n + c
        uniq, inv = np.unique(keys, return_inverse=True)
        self._inv = inv
        self._nnz = len(uniq)
        rows = uniq // n
        self._indices = (uniq % n).astype(np.int32)
        self._indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=n))]).astype(np.int32)
        self._n_hex_entries = hd.shape[0] * 24 * 24

    def assemble_matrix(self, Ke: np.ndarray, Kb: np.ndarray | None) -> sp.csr_matrix:
        vals = np.concatenate([Ke.ravel(), np.zeros(self._inv.size - self._n_hex_entries) if Kb is None
                               else Kb.ravel()])
        data = np.bincount(self._inv, weights=vals, minlength=self._nnz)
        n = self.mesh.n_dofs
        return sp.csr_matrix((data, self._indices, self._indptr), shape=(n, n))

    # -- loads ------------------------------------------------------------
    def external_force(self, t: float) -> np.ndarray:
        F = self.F_dead + self.F_grav
        if self.schedule.phase(t) != "concrete_only":
            F = F + self.F_bar_weight
        return F

    def initial_state(self) -> State:
        m = self.mesh
        return State(np.zeros(m.n_dofs), np.zeros(self.B.shape[0]), np.zeros((m.n_gp3d, 6)), np.zeros(m.n_bar),
                     BurgerState.zeros(m.n_gp3d), np.zeros(m.n_bar), np.zeros(m.n_bar), 0.0, 0)

    # -- element kernels ----------------------------------------------------
    def hex_response(self, hexes: np.ndarray, ue: np.ndarray, ivars: BurgerState, aux0: dict, aux1: dict,
                     dt: float, tangent: bool = True):
        """Internal forces (n, 24), tangents (n, 24, 24), stresses (n, 8, 6) and new ivars.

        ``ue`` holds the element displacement vectors (n, 24); ``ivars``,
        ``aux0`` and ``aux1`` hold the Gauss points of ``hexes`` only.
        """
        Bq = self.mesh.hex_B[hexes]
        w = self.mesh.hex_wdetJ[hexes]
        eps = np.einsum("egij,ej->egi", Bq, ue)
        n = len(hexes)
        sig, new, D = integrate_concrete(self.concrete, ivars, None, eps.reshape(-1, 6), aux0, aux1, dt, tangent)
        sig = sig.reshape(n, 8, 6)
        fe = np.einsum("egij,egi,eg->ej", Bq, sig, w)
        Ke = None
        if tangent:
            D = D.reshape(n, 8, 6, 6)
            Bw = Bq * w[:, :, None, None]
            Ke = np.einsum("egki,egkj->eij", Bw, D @ Bq)
        return fe, Ke, sig, new

    def bar_response(self, ub: np.ndarray, eps_ref: np.ndarray, T_ref: np.ndarray, t1: float, T1: np.ndarray,
                     tangent: bool = True):
        """Bar forces (nb, 6), tangents (nb, 6, 6) or None, normal forces and strains.

        ``ub`` holds the bar displacement vectors (nb, 6); ``eps_ref`` and
        ``T_ref`` the strain and temperature recorded when the cables were
        grouted.
        """
        m = self.mesh
        nb = m.n_bar
        eps = np.einsum("bj,bj->b", m.bar_B, ub) if nb else np.zeros(0)
        phase = self.schedule.phase(t1)
        if phase == "concrete_only" or nb == 0:
            N = np.zeros(nb)
            stiff = 0.0
        elif phase == "prestressing":
            N = self.schedule.ramp(t1) * self.bar_prestress
            stiff = 0.0
        else:
            N_el, flag = cable_force(self.steel, eps - eps_ref, T1 - T_ref)
            if np.any(flag):
                log.warning("cable stress above f_prg on %d bars at t=%g", int(flag.sum()), t1)
            N = self.bar_prestress + N_el
            stiff = self.steel.E_s * self.steel.S_s
        fb = (N * m.bar_length)[:, None] * m.bar_B
        Kb = None
        if tangent:
            Kb = (stiff * m.bar_length)[..., None, None] * np.einsum("bi,bj->bij", m.bar_B, m.bar_B) \
                if nb else np.zeros((0, 6, 6))
        return fb, Kb, N, eps

    def aux_pair(self, t0: float, t1: float):
        a0, a1 = self.aux.at(t0), self.aux.at(t1)
        n3 = self.mesh.n_gp3d
        hex0 = {k: v[:n3] for k, v in a0.items()}
        hex1 = {k: v[:n3] for k, v in a1.items()}
        return hex0, hex1, a1["T"][n3:]

    # -- global residual ----------------------------------------------------
    def assemble_residual(self, state_k: State, u: np.ndarray, t1: float, tangent: bool = True,
                          aux=None):
        """Residual ``f_int(u) - f_ext`` at time ``t1`` from the converged ``state_k``.

        Returns ``(R, K, sigma, N, ivars, bar_eps)``; ``K`` is None when
        ``tangent`` is False.
        """
        m = self.mesh
        dt = t1 - state_k.time
        hex0, hex1, Tbar = aux if aux is not None else self.aux_pair(state_k.time, t1)
        hexes = np.arange(m.n_hex)
        fe, Ke, sig, new = self.hex_response(hexes, u[self._hex_dofs], state_k.ivars, hex0, hex1, dt, tangent)
        fb, Kb, N, eps_b = self.bar_response(u[self._bar_dofs], state_k.bar_eps_ref, state_k.bar_T_ref, t1, Tbar,
                                             tangent)
        R = np.zeros(m.n_dofs)
        np.add.at(R, self._hex_dofs, fe)
        if m.n_bar:
            np.add.at(R, self._bar_dofs, fb)
        R -= self.external_force(t1)
        K = self.assemble_matrix(Ke, Kb) if tangent else None
        return R, K, sig.reshape(-1, 6), N, new, eps_b

    def load_norm(self, t1: float) -> float:
        pre = 0.0
        if self.mesh.n_bar and self.schedule.phase(t1) != "concrete_only":
            fb = (self.schedule.ramp(t1) * self.bar_prestress * self.mesh.bar_length)[:, None] * self.mesh.bar_B
            v = np.zeros(self.mesh.n_dofs)
            np.add.at(v, self._bar_dofs, fb)
            pre = np.linalg.norm(v)
        return float(np.linalg.norm(self.external_force(t1)) + pre)


def null_space_basis(B: sp.csr_matrix):
    """Sparse 0/1 basis ``T`` of ``ker B`` when every row is ``u_a = 0`` or ``u_a = u_b``.

    Returns None for constraint matrices of any other form.
    """
    B = B.tocsr()
    n = B.shape[1]
    parent = np.arange(n)

    def root(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    fixed_dofs = []
    for r in range(B.shape[0]):
        cols = B.indices[B.indptr[r]:B.indptr[r + 1]]
        vals = B.data[B.indptr[r]:B.indptr[r + 1]]
        if len(cols) == 1:
            fixed_dofs.append(cols[0])
        elif len(cols) == 2 and vals[0] == -vals[1]:
            ra, rb = root(cols[0]), root(cols[1])
            if ra == rb:
                return None
            parent[max(ra, rb)] = min(ra, rb)
        else:
            return None
    roots = np.array([root(i) for i in range(n)])
    fixed = np.zeros(n, dtype=bool)
    fixed[roots[fixed_dofs]] = True
    free_roots = np.unique(roots[~fixed[roots]])
    col = -np.ones(n, dtype=int)
    col[free_roots] = np.arange(len(free_roots))
    rows = np.flatnonzero(col[roots] >= 0)
    if len(free_roots) != n - B.shape[0]:
        return None
    return sp.csr_matrix((np.ones(len(rows)), (rows, col[roots[rows]])), shape=(n, len(free_roots)))


class SaddleSolver:
    """Solver of ``[K B^T; B 0] [du; lam] = [f; g]`` for a fixed ``B``.

    When ``B`` only holds Dirichlet and equal-DOF rows the system is solved by
    the null-space method (same solution, smaller factorization); otherwise
    the full indefinite matrix is factorized.
    """

    def __init__(self, B: sp.csr_matrix):
        self.B = B.tocsr()
        self.T = null_space_basis(self.B)
        nd = self.B.shape[0]
        self._BBt = spla.splu((self.B @ self.B.T).tocsc()) if nd else None

    def solve(self, K: sp.csr_matrix, f: np.ndarray, g: np.ndarray):
        B, nd = self.B, self.B.shape[0]
        if nd == 0:
            return spla.splu(K.tocsc()).solve(f), np.zeros(0)
        if self.T is None:
            sol = _saddle_factor(K, B).solve(np.concatenate([f, g]))
            return sol[:B.shape[1]], sol[B.shape[1]:]
        T = self.T
        du_p = B.T @ self._BBt.solve(g) if np.any(g) else np.zeros(B.shape[1])
        Kr = (T.T @ K @ T).tocsc()
        try:
            q = spla.splu(Kr).solve(T.T @ (f - K @ du_p))
        except RuntimeError as exc:
            raise np.linalg.LinAlgError("singular reduced stiffness") from exc
        du = du_p + T @ q
        lam = self._BBt.solve(B @ (f - K @ du))
        return du, lam


def _saddle_factor(K: sp.csr_matrix, B: sp.csr_matrix):
    A = sp.bmat([[K, B.T], [B, None]], format="csc")
    try:
        return spla.splu(A)
    except RuntimeError:
        nd = B.shape[0]
        log.warning("singular saddle matrix, regularizing the multiplier block")
        A = sp.bmat([[K, B.T], [B, -1e-14 * sp.identity(nd)]], format="csc")
        try:
            return spla.splu(A)
        except RuntimeError as exc:
            raise np.linalg.LinAlgError("singular saddle-point system") from exc


def newton_solve(model: FomModel, state_k: State, t1: float, tol: float = 1e-6, max_iter: int = 25,
                 u_init: np.ndarray | None = None):
    """Equilibrium at ``t1`` starting from the converged ``state_k``.

    Returns the new `State`, the number of linear solves and the residual
    norm history.  Raises `NonConvergence` after ``max_iter`` iterations.
    """
    B = model.B
    aux = model.aux_pair(state_k.time, t1)
    u = (state_k.u if u_init is None else u_init).copy()
    lam = state_k.lam.copy()
    R, K, sig, N, iv, eps_b = model.assemble_residual(state_k, u, t1, True, aux)
    r = R + B.T @ lam
    scale = max(np.linalg.norm(r), model.load_norm(t1), np.linalg.norm(B.T @ lam))
    history = [np.linalg.norm(r)]
    for it in range(1, max_iter + 1):
        try:
            du, lam = model.saddle.solve(K, -R, -(B @ u))
        except np.linalg.LinAlgError as exc:
            raise NonConvergence(f"singular Newton system at t={t1:g}") from exc
        if not (np.all(np.isfinite(du)) and np.all(np.isfinite(lam))):
            raise NonConvergence(f"non-finite Newton update at t={t1:g}")
        u = u + du
        R, K, sig, N, iv, eps_b = model.assemble_residual(state_k, u, t1, True, aux)
        r = R + B.T @ lam
        rn = np.linalg.norm(r)
        history.append(rn)
        scale = max(scale, np.linalg.norm(B.T @ lam))
        if rn <= tol * scale:
            new = State(u, lam, sig, N, iv, state_k.bar_eps_ref, state_k.bar_T_ref, t1, state_k.step + 1)
            return new, it, history
        if not np.isfinite(rn):
            break
    raise NonConvergence(f"Newton did not converge at t={t1:g} (|r|={history[-1]:.3e}, scale={scale:.3e})")


def _accept(model: FomModel, state: State) -> State:
    """Record the grouting reference when the prestressing phase ends."""
    s = model.schedule
    if model.mesh.n_bar and abs(state.time - s.t_end_p) <= 1e-9 * s.t_end_p:
        state.bar_eps_ref = np.einsum("bj,bj->b", model.mesh.bar_B, state.u[model.mesh.bar_dofs])
        state.bar_T_ref = model.aux.at(state.time)["T"][model.mesh.n_gp3d:].copy()
    return state


def adaptive_times(schedule: LoadSchedule, stepper: StepperConfig):
    """Generator protocol driving the adaptive stepper.

    Yields candidate end times; the caller sends back ``(converged, iters)``.
    """
    t = 0.0
    for k, (phase, t0, t_end) in enumerate(schedule.boundaries()):
        dt = min(stepper.dt_init, stepper.dt_max[k])
        while t < t_end * (1 - 1e-14):
            t1 = t + dt
            if t + stepper.stretch * dt >= t_end:
                t1 = t_end
            ok, iters = yield t1
            if ok:
                t = t1
                if iters <= stepper.grow_max_iter:
                    dt = min(dt * stepper.grow, stepper.dt_max[k])
            else:
                dt = 0.5 * (t1 - t)
                if dt < stepper.dt_min:
                    raise StepTooSmall(f"time step below dt_min={stepper.dt_min} at t={t:g} ({phase})")


def run_fom(model: FomModel, stepper: StepperConfig | None = None, times=None, keep_history: bool = False
            ) -> Trajectory:
    """Simulate the three phases and record every accepted step.

    With ``times`` given, those end times are replayed instead of the adaptive
    rule (failing steps are split into unrecorded sub-steps).
    """
    stepper = stepper or StepperConfig()
    state = model.initial_state()

    def step(st, t1):
        new, it, hist = newton_solve(model, st, t1, stepper.tol, stepper.max_iter)
        return _accept(model, new), it, hist

    t_start = _time.perf_counter()
    states, iters, hists = march(state, step, model.schedule, stepper, times)
    wall = _time.perf_counter() - t_start
    traj = Trajectory(np.array([s.time for s in states]),
                      np.column_stack([s.u for s in states]) if states else np.zeros((model.mesh.n_dofs, 0)),
                      np.column_stack([s.gforce for s in states]) if states else np.zeros((model.mesh.n_gforce, 0)),
                      iters, wall, hists if keep_history else [])
    return traj


def march(state, step, schedule: LoadSchedule, stepper: StepperConfig, times=None):
    """Advance ``state`` with ``step(state, t1) -> (state, iters, history)``.

    Returns the accepted states, iteration counts and residual histories.
    """
    states, iters, hists = [], [], []
    if times is not None:
        times = np.asarray(times, dtype=float)
        for t1 in times:
            state, it, hist = _replay_step(state, t1, step, stepper, 0)
            states.append(state)
            iters.append(it)
            hists.append(hist)
        return states, iters, hists
    gen = adaptive_times(schedule, stepper)
    try:
        t1 = next(gen)
        while True:
            try:
                new, it, hist = step(state, t1)
            except NonConvergence as exc:
                log.debug("step to %g failed: %s", t1, exc)
                t1 = gen.send((False, stepper.max_iter))
                continue
            state = new
            states.append(state)
            iters.append(it)
            hists.append(hist)
            t1 = gen.send((True, it))
    except StopIteration:
        pass
    return states, iters, hists


def _replay_step(state, t1, step, stepper, depth):
    try:
        return step(state, t1)
    except NonConvergence:
        if (t1 - state.time) / 2 < stepper.dt_min or depth > 40:
            raise StepTooSmall(f"replayed step to t={t1:g} cannot be split further")
        tm = 0.5 * (state.time + t1)
        mid, it1, _ = _replay_step(state, tm, step, stepper, depth + 1)
        out, it2, hist = _replay_step(mid, t1, step, stepper, depth + 1)
        return out, it1 + it2, hist

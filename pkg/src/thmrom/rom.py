"""Hyper-reduced Galerkin solver, gappy reconstruction, QoIs and error metrics.

The reduced residual is ``Z^T R``, with the 3D internal forces summed over
the retained elements only (times their quadrature weights) and the bar
forces summed exactly.  The displacement modes already satisfy ``B u = 0``,
so no multipliers appear.
"""
from __future__ import annotations

import logging
import time as _time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from . import io
from .constitutive import BurgerState, ConcreteParams
from .ecsw import EQRule, ReducedMesh, reduced_mesh
from .fom import FomModel, NonConvergence, StepperConfig, Trajectory, march
from .geometry import HEX_GAUSS_POINTS, Mesh, hex_shape
from .reduction import ReducedBasis

log = logging.getLogger(__name__)


@dataclass
class ReducedModel:
    """Primal basis, quadrature rule and dual basis of a trained ROM."""

    Z_u: ReducedBasis
    rule: EQRule
    Z_S: ReducedBasis | None = None
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        io.write_snap(path / "Z_u.snap", self.Z_u.Z)
        io.write_json(path / "Z_u.json", _basis_meta(self.Z_u))
        if self.Z_S is not None:
            io.write_snap(path / "Z_S.snap", self.Z_S.Z)
            io.write_json(path / "Z_S.json", _basis_meta(self.Z_S))
        (path / "eq_rule.json").write_text(self.rule.to_json() + "\n")
        io.write_json(path / "model.json", self.meta)

    @classmethod
    def load(cls, path) -> "ReducedModel":
        path = Path(path)
        Z_u = _basis_from(io.read_snap(path / "Z_u.snap"), io.read_json(path / "Z_u.json"))
        Z_S = None
        if (path / "Z_S.snap").exists():
            Z_S = _basis_from(io.read_snap(path / "Z_S.snap"), io.read_json(path / "Z_S.json"))
        rule = EQRule.from_json((path / "eq_rule.json").read_text())
        meta = io.read_json(path / "model.json") if (path / "model.json").exists() else {}
        return cls(Z_u, rule, Z_S, meta)


def _basis_meta(b: ReducedBasis) -> dict:
    return {"eigvals": b.eigvals, "product_kind": b.product_kind, "mixed_weights": b.mixed_weights,
            "weights": b.weights, "meta": b.meta}


def _basis_from(Z, d) -> ReducedBasis:
    w = None if d.get("weights") is None else np.asarray(d["weights"], dtype=float)
    mw = None if d.get("mixed_weights") is None else tuple(d["mixed_weights"])
    return ReducedBasis(Z, np.asarray(d["eigvals"], dtype=float), d["product_kind"], w, mw, None, d.get("meta", {}))


@dataclass
class RomState:
    alpha: np.ndarray
    sigma: np.ndarray  # stresses at retained Gauss points (n_gp_red, 6)
    N: np.ndarray
    ivars: BurgerState
    bar_eps_ref: np.ndarray
    bar_T_ref: np.ndarray
    time: float = 0.0
    step: int = 0

    def gforce_sampled(self) -> np.ndarray:
        return np.concatenate([self.sigma.ravel(), self.N])


@dataclass
class RomTrajectory:
    times: np.ndarray
    alpha: np.ndarray  # (N, K)
    S_sampled: np.ndarray  # (n_sampled, K): retained 3D entries then bars
    iterations: list
    wall_time: float

    @property
    def n_steps(self) -> int:
        return len(self.times)


class RomSolver:
    """Galerkin-Newton solver on ``u = Z alpha`` with an empirical quadrature rule.

    ``rule=None`` keeps every hex with unit weight (no hyper-reduction).
    """

    def __init__(self, model: FomModel, Z_u: np.ndarray, rule: EQRule | None = None):
        Z_u = np.asarray(Z_u, dtype=float)
        if Z_u.ndim != 2 or Z_u.shape[1] == 0:
            raise ValueError("the reduced basis must hold at least one mode")
        if Z_u.shape[0] != model.mesh.n_dofs:
            raise ValueError("basis length does not match the mesh")
        mesh = model.mesh
        self.model = model
        self.Z = Z_u
        if rule is None:
            rule = EQRule(np.ones(mesh.n_hex), 1e-16, 0.0, True, {"kind": "full"})
        self.rule = rule
        self.rmesh: ReducedMesh = reduced_mesh(mesh, rule)
        self.hexes = self.rmesh.hexes
        self.rho = self.rmesh.weights
        self.Zh = Z_u[mesh.hex_dofs[self.hexes]]  # (nh, 24, N)
        self.Zb = Z_u[mesh.bar_dofs]  # (nb, 6, N)
        self.ZF_base = Z_u.T @ (model.F_dead + model.F_grav)
        self.ZF_bar = Z_u.T @ model.F_bar_weight
        self.gp = self.rmesh.gp3d
        self.bar_pts = mesh.n_gp3d + np.arange(mesh.n_bar)
        # projected prestress load for the convergence scale
        fb = (model.bar_prestress * mesh.bar_length)[:, None] * mesh.bar_B
        self.Zf_pre = np.einsum("bjn,bj->n", self.Zb, fb) if mesh.n_bar else np.zeros(self.N)

    @property
    def N(self) -> int:
        return self.Z.shape[1]

    def initial_state(self) -> RomState:
        nb = self.model.mesh.n_bar
        return RomState(np.zeros(self.N), np.zeros((len(self.gp), 6)), np.zeros(nb),
                        BurgerState.zeros(len(self.gp)), np.zeros(nb), np.zeros(nb), 0.0, 0)

    def _aux(self, t0, t1):
        a0, a1 = self.model.aux.at(t0), self.model.aux.at(t1)
        return ({k: v[self.gp] for k, v in a0.items()}, {k: v[self.gp] for k, v in a1.items()},
                a1["T"][self.bar_pts])

    def external(self, t1):
        F = self.ZF_base
        if self.model.schedule.phase(t1) != "concrete_only":
            F = F + self.ZF_bar
        return F

    def residual(self, state: RomState, alpha: np.ndarray, t1: float, aux, tangent: bool = True):
        m = self.model
        dt = t1 - state.time
        hex0, hex1, Tbar = aux
        ue = self.Zh @ alpha
        fe, Ke, sig, iv = m.hex_response(self.hexes, ue, state.ivars, hex0, hex1, dt, tangent)
        ub = self.Zb @ alpha
        fb, Kb, N, eps_b = m.bar_response(ub, state.bar_eps_ref, state.bar_T_ref, t1, Tbar, tangent)
        r = np.einsum("q,qjn,qj->n", self.rho, self.Zh, fe) - self.external(t1)
        if m.mesh.n_bar:
            r += np.einsum("bjn,bj->n", self.Zb, fb)
        J = None
        if tangent:
            KZ = np.einsum("qij,qjn->qin", Ke, self.Zh)
            J = np.einsum("q,qim,qin->mn", self.rho, self.Zh, KZ)
            if m.mesh.n_bar:
                J += np.einsum("bim,bij,bjn->mn", self.Zb, Kb, self.Zb)
        return r, J, sig.reshape(-1, 6), N, iv, eps_b

    def load_norm(self, t1) -> float:
        pre = 0.0
        if self.model.schedule.phase(t1) != "concrete_only":
            pre = self.model.schedule.ramp(t1) * np.linalg.norm(self.Zf_pre)
        return float(np.linalg.norm(self.external(t1)) + pre)

    def newton(self, state: RomState, t1: float, tol: float = 1e-6, max_iter: int = 25):
        aux = self._aux(state.time, t1)
        alpha = state.alpha.copy()
        r, J, sig, N, iv, eps_b = self.residual(state, alpha, t1, aux)
        scale = max(np.linalg.norm(r), self.load_norm(t1))
        hist = [np.linalg.norm(r)]
        for it in range(1, max_iter + 1):
            try:
                d = sla.solve(J, -r)
            except (sla.LinAlgError, ValueError) as exc:
                raise NonConvergence(f"singular reduced Jacobian at t={t1:g}") from exc
            if not np.all(np.isfinite(d)):
                raise NonConvergence(f"non-finite reduced update at t={t1:g}")
            alpha = alpha + d
            r, J, sig, N, iv, eps_b = self.residual(state, alpha, t1, aux)
            rn = np.linalg.norm(r)
            hist.append(rn)
            if rn <= tol * scale:
                new = RomState(alpha, sig, N, iv, state.bar_eps_ref, state.bar_T_ref, t1, state.step + 1)
                return self._accept(new), it, hist
            if not np.isfinite(rn):
                break
        raise NonConvergence(f"reduced Newton did not converge at t={t1:g}")

    def _accept(self, state: RomState) -> RomState:
        s = self.model.schedule
        mesh = self.model.mesh
        if mesh.n_bar and abs(state.time - s.t_end_p) <= 1e-9 * s.t_end_p:
            state.bar_eps_ref = np.einsum("bj,bj->b", mesh.bar_B, self.Zb @ state.alpha)
            state.bar_T_ref = self.model.aux.at(state.time)["T"][self.bar_pts].copy()
        return state

    def solve(self, times=None, stepper: StepperConfig | None = None) -> RomTrajectory:
        """Run the reduced model; ``times`` replays a given step sequence."""
        stepper = stepper or StepperConfig()

        def step(st, t1):
            return self.newton(st, t1, stepper.tol, stepper.max_iter)

        t0 = _time.perf_counter()
        states, iters, _ = march(self.initial_state(), step, self.model.schedule, stepper, times)
        wall = _time.perf_counter() - t0
        return RomTrajectory(np.array([s.time for s in states]),
                             np.column_stack([s.alpha for s in states]) if states else np.zeros((self.N, 0)),
                             np.column_stack([s.gforce_sampled() for s in states]) if states else
                             np.zeros((len(self.rmesh.gforce_entries), 0)),
                             iters, wall)


def gappy_reconstruct(Z_S, sampled: np.ndarray, entries: np.ndarray, weights: np.ndarray | None = None):
    """Least-squares reconstruction ``Z_S beta`` from values at ``entries``.

    ``weights`` (the product's diagonal, full length) weights the fit; with
    all entries sampled this is the W-orthogonal projection.  A Tikhonov
    shift of 1e-12 times the largest normal-matrix diagonal is used only for
    rank-deficient samplings.
    """
    if isinstance(Z_S, ReducedBasis):
        weights = Z_S.weights if weights is None else weights
        Z_S = Z_S.Z
    Z_S = np.asarray(Z_S, dtype=float)
    entries = np.asarray(entries, dtype=int)
    N = Z_S.shape[1]
    if len(entries) < N:
        raise ValueError(f"{len(entries)} sampled entries for {N} dual modes: "
                         "use a larger eps_S (fewer modes) or a smaller delta (more elements)")
    A = Z_S[entries]
    sw = np.ones(len(entries)) if weights is None else np.sqrt(np.asarray(weights)[entries])
    Aw = A * sw[:, None]
    s = np.asarray(sampled, dtype=float)
    sw_b = sw.reshape((-1,) + (1,) * (s.ndim - 1))
    bw = s * sw_b
    Q, R = np.linalg.qr(Aw)
    d = np.abs(np.diag(R))
    if N and d.min() > 1e-12 * d.max():
        beta = sla.solve_triangular(R, Q.T @ bw)
    else:
        M = Aw.T @ Aw
        shift = 1e-12 * (np.max(np.diag(M)) if N else 0.0)
        log.warning("rank-deficient gappy sampling, Tikhonov shift %.3e", shift)
        beta = np.linalg.solve(M + shift * np.eye(N), Aw.T @ bw)
    return Z_S @ beta


# ---------------------------------------------------------------------------
# quantities of interest


_GP_TO_NODE = np.linalg.inv(hex_shape(HEX_GAUSS_POINTS))  # nodal = M @ gp values


@dataclass
class QoIRecord:
    times: np.ndarray
    cable_names: list
    cable_N: np.ndarray  # (K, n_cables), NaN before prestressing
    strains: dict  # "intrados_yy" -> (K,)
    speedup: float | None = None
    errors: dict = field(default_factory=dict)

    def table(self) -> tuple:
        cols = ["time"] + [f"N_{c}" for c in self.cable_names] + [f"eps_{k}" for k in sorted(self.strains)]
        data = np.column_stack([self.times, self.cable_N] + [self.strains[k] for k in sorted(self.strains)])
        return cols, data


def nodal_average(mesh: Mesh, gp_values: np.ndarray) -> np.ndarray:
    """Extrapolate per-element Gauss values (n_hex, 8, c) to nodes and average."""
    nodal = np.einsum("ag,egc->eac", _GP_TO_NODE, gp_values)
    acc = np.zeros((mesh.n_hex_nodes, gp_values.shape[-1]))
    cnt = np.zeros(mesh.n_hex_nodes)
    np.add.at(acc, mesh.hex_elements, nodal)
    np.add.at(cnt, mesh.hex_elements, 1.0)
    return acc / np.maximum(cnt, 1)[:, None]


def imposed_strain(params: ConcreteParams, aux, t: float) -> np.ndarray:
    """Thermal + drying + autogenous strain (scalar, per 3D Gauss point) since t=0."""
    a0, a1 = aux.at(aux.times[0]), aux.at(t)
    n = aux.n_gp3d
    return (params.alpha_th_c * (a1["T"][:n] - a0["T"][:n]) + params.alpha_dc * (a1["C"][:n] - a0["C"][:n])
            + params.beta_endo * (a1["xi"][:n] - a0["xi"][:n]))


def extract_qois(mesh: Mesh, times, U: np.ndarray, S: np.ndarray, aux, params: ConcreteParams,
                 t_init_p: float | None = None, faces=("intrados", "extrados")) -> QoIRecord:
    """Mean cable forces and mean mechanical strains on the sensor faces."""
    times = np.asarray(times, dtype=float)
    K = len(times)
    comps = {"yy": 1, "zz": 2}
    strains = {f"{f}_{c}": np.zeros(K) for f in faces for c in comps}
    cable_N = np.zeros((K, len(mesh.cables)))
    for k, t in enumerate(times):
        if t > aux.times[-1] * (1 + 1e-12) or t < aux.times[0]:
            raise ValueError(f"no auxiliary data at t={t}")
        eps = np.einsum("egij,ej->egi", mesh.hex_B, U[mesh.hex_dofs, k])
        imp = imposed_strain(params, aux, t).reshape(mesh.n_hex, 8)
        mech = eps[:, :, [1, 2]] - imp[:, :, None]
        nodal = nodal_average(mesh, mech)
        for f in faces:
            ids = mesh.face_sets[f]
            for c, j in comps.items():
                strains[f"{f}_{c}"][k] = nodal[ids, j - 1].mean()
        N = S[mesh.n_gforce3d:, k]
        for c, cab in enumerate(mesh.cables):
            Nb = N[cab.bars]
            node_vals = np.concatenate([[Nb[0]], 0.5 * (Nb[:-1] + Nb[1:]), [Nb[-1]]])
            cable_N[k, c] = node_vals.mean()
    if t_init_p is not None:
        cable_N[times < t_init_p] = np.nan
    return QoIRecord(times, [c.name for c in mesh.cables], cable_N, strains)


# ---------------------------------------------------------------------------
# error metrics


def error_metrics(U_hf: np.ndarray, U_rom: np.ndarray, times, t_start: float = 0.0) -> dict:
    """Per-step squared relative errors and the time-averaged error.

    ``E_k = ||u_k - u^_k||^2 / ||u_k||^2`` (NaN where ``u_k = 0``) and
    ``E_avg = sqrt(sum w_k ||u_k - u^_k||^2) / sqrt(sum w_k ||u_k||^2)`` with
    ``w_k = (t_k - t_{k-1}) / t_f``.
    """
    U_hf = np.atleast_2d(np.asarray(U_hf, dtype=float).T).T
    U_rom = np.atleast_2d(np.asarray(U_rom, dtype=float).T).T
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if U_hf.shape != U_rom.shape or U_hf.shape[1] != len(times):
        raise ValueError("trajectories must share the same time grid")
    num = np.sum((U_hf - U_rom) ** 2, axis=0)
    den = np.sum(U_hf ** 2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        per_step = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    w = np.diff(np.concatenate([[t_start], times])) / times[-1]
    tot = np.sum(w * den)
    avg = float(np.sqrt(np.sum(w * num)) / np.sqrt(tot)) if tot > 0 else float("nan")
    return {"per_step": per_step, "avg": avg}


def speedup(fom_wall: float, rom_wall: float) -> float:
    """FOM wall time over ROM wall time."""
    return float(fom_wall / rom_wall)


def reconstruct(solver: RomSolver, traj: RomTrajectory, Z_S=None):
    """Full displacements and (if a dual basis is given) full generalized forces."""
    U = solver.Z @ traj.alpha
    S = None
    if Z_S is not None:
        S = gappy_reconstruct(Z_S, traj.S_sampled, solver.rmesh.gforce_entries)
    return U, S


def compare(fom_traj: Trajectory, solver: RomSolver, stepper: StepperConfig | None = None,
            repeats: int = 1) -> dict:
    """Replay the FOM steps with the ROM; return errors, speedup and the ROM trajectory."""
    best = None
    for _ in range(max(1, repeats)):
        tr = solver.solve(times=fom_traj.times, stepper=stepper)
        if best is None or tr.wall_time < best.wall_time:
            best = tr
    U = solver.Z @ best.alpha
    err = error_metrics(fom_traj.U, U, fom_traj.times)
    return {"E_avg": err["avg"], "E_steps": err["per_step"], "speedup": speedup(fom_traj.wall_time, best.wall_time),
            "rom": best, "U": U}

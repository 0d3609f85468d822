"""Energy-conserving sampling and weighting over the 3D elements.

The projected 3D internal forces of every training snapshot are written as
a sum of element contributions, ``b = G 1``.  A sparse non-negative weight
vector ``rho`` with ``||G rho - b|| <= delta ||b||`` defines the reduced
mesh; the bars are always kept with unit weight.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .geometry import Mesh

log = logging.getLogger(__name__)


def element_forces(mesh: Mesh, sigma: np.ndarray) -> np.ndarray:
    """3D element internal-force vectors (n_hex, 24) of a stress snapshot.

    ``sigma`` is the stress part of a generalized-force vector (6 entries per
    Gauss point, element-major) or an array of shape (n_hex, 8, 6).
    """
    sig = np.asarray(sigma, dtype=float).reshape(mesh.n_hex, 8, 6)
    return np.einsum("egij,egi,eg->ej", mesh.hex_B, sig, mesh.hex_wdetJ)


def build_training_system(mesh: Mesh, Z_u: np.ndarray, S: np.ndarray):
    """Element-wise projected internal forces of the training snapshots.

    Parameters
    ----------
    mesh : Mesh
    Z_u : ndarray (n_dofs, N)
        Displacement modes.
    S : ndarray (n_gforce, K) or (n_gforce3d, K)
        Generalized-force snapshots; only the 3D stresses are used.

    Returns
    -------
    G : ndarray (K * N, n_hex)
        ``G[k * N + n, q] = zeta_n . f_q(sigma^(k))``.
    b : ndarray (K * N,)
        Row sums of ``G``.
    """
    Z_u = np.asarray(Z_u, dtype=float)
    S = np.atleast_2d(np.asarray(S, dtype=float).T).T
    if Z_u.shape[0] != mesh.n_dofs:
        raise ValueError(f"mode length {Z_u.shape[0]} does not match {mesh.n_dofs} dofs")
    if S.shape[0] not in (mesh.n_gforce, mesh.n_gforce3d):
        raise ValueError(f"snapshot length {S.shape[0]} does not match the quadrature layout")
    Zq = Z_u[mesh.hex_dofs]  # (n_hex, 24, N)
    N, K = Z_u.shape[1], S.shape[1]
    G = np.empty((K * N, mesh.n_hex))
    for k in range(K):
        f = element_forces(mesh, S[:mesh.n_gforce3d, k])
        G[k * N:(k + 1) * N] = np.einsum("qjn,qj->nq", Zq, f)
    return G, G.sum(axis=1)


@dataclass
class EQRule:
    weights: np.ndarray
    delta: float
    residual: float  # ||G rho - b|| / ||b|| on the training system
    converged: bool = True
    manifest: dict = field(default_factory=dict)

    @property
    def reduced_elements(self) -> np.ndarray:
        return np.flatnonzero(self.weights > 0)

    @property
    def n_elements(self) -> int:
        return int(np.count_nonzero(self.weights > 0))

    def check(self, G: np.ndarray | None = None, b: np.ndarray | None = None) -> None:
        if np.any(self.weights < 0):
            raise ValueError("negative quadrature weight")
        if G is not None:
            res = np.linalg.norm(G @ self.weights - b)
            if self.converged and res > self.delta * np.linalg.norm(b) * (1 + 1e-9):
                raise ValueError("rule violates its training tolerance")

    def to_json(self) -> str:
        idx = self.reduced_elements
        return json.dumps({
            "n_elements": len(self.weights),
            "indices": idx.tolist(),
            "weights": self.weights[idx].tolist(),
            "delta": self.delta,
            "residual": self.residual,
            "converged": self.converged,
            "manifest": self.manifest,
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EQRule":
        d = json.loads(text)
        w = np.zeros(d["n_elements"])
        w[np.asarray(d["indices"], dtype=int)] = d["weights"]
        rule = cls(w, d["delta"], d["residual"], d["converged"], d.get("manifest", {}))
        rule.check()
        if rule.converged and rule.residual > rule.delta * (1 + 1e-9):
            raise ValueError("stored rule violates its training tolerance")
        return rule


def training_hash(G: np.ndarray, b: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(G).tobytes())
    h.update(np.ascontiguousarray(b).tobytes())
    return h.hexdigest()[:16]


def nnls(G: np.ndarray, b: np.ndarray, delta: float, max_outer: int | None = None) -> EQRule:
    """Sparse non-negative solution of ``G rho ~ b`` (Lawson-Hanson active set).

    Columns are scaled to unit norm for the iteration.  The loop stops at the
    first iterate with ``||G rho - b|| <= delta ||b||``; the column entering
    the active set is the one with the largest gradient, lowest index first
    on ties.  When the tolerance cannot be met the best iterate is returned
    with ``converged=False``.
    """
    G = np.asarray(G, dtype=float)
    b = np.asarray(b, dtype=float)
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    m, n = G.shape
    bn = np.linalg.norm(b)
    manifest = {"rows": m, "cols": n, "training": training_hash(G, b)}
    if bn == 0:
        return EQRule(np.zeros(n), delta, 0.0, True, manifest)
    scale = np.linalg.norm(G, axis=0)
    usable = scale > 0
    A = np.zeros_like(G)
    A[:, usable] = G[:, usable] / scale[usable]
    target = delta * bn
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    r = b.copy()
    rn = bn
    max_outer = max_outer or 3 * n
    best_x, best_r = x.copy(), rn
    tiny = 1e-14
    for _ in range(max_outer):
        if rn <= target:
            break
        grad = A.T @ r
        grad[passive | ~usable] = -np.inf
        j = int(np.argmax(grad))
        if not grad[j] > tiny * np.linalg.norm(A[:, j]) * rn:
            break  # KKT point: no descent direction left
        passive[j] = True
        for _inner in range(3 * n):
            P = np.flatnonzero(passive)
            z = np.zeros(n)
            z[P] = _active_lstsq(A[:, P], b)
            if np.all(z[P] > 0):
                x = z
                break
            neg = P[z[P] <= 0]
            alpha = np.min(x[neg] / (x[neg] - z[neg]))
            x = x + alpha * (z - x)
            drop = passive & (x <= tiny * max(x.max(), 1.0))
            x[drop] = 0.0
            passive &= ~drop
            if not passive.any():
                break
        r = b - A @ x
        rn = np.linalg.norm(r)
        if rn < best_r:
            best_x, best_r = x.copy(), rn
    converged = best_r <= target
    if not converged:
        log.warning("ECSW target %.1e not reached (best relative residual %.3e)", delta, best_r / bn)
    rho = np.zeros(n)
    rho[usable] = best_x[usable] / scale[usable]
    res = float(np.linalg.norm(G @ rho - b) / bn)
    return EQRule(rho, delta, res, bool(converged), manifest)


def _active_lstsq(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense QR least squares on the active columns (SVD fallback when rank deficient)."""
    Q, R = np.linalg.qr(A)
    d = np.abs(np.diag(R))
    if d.size and d.min() > 1e-12 * d.max():
        return sla.solve_triangular(R, Q.T @ b)
    return np.linalg.lstsq(A, b, rcond=None)[0]


@dataclass
class ReducedMesh:
    """Subset of the mesh seen by the hyper-reduced solver."""

    mesh: Mesh
    hexes: np.ndarray  # retained 3D elements, ascending
    weights: np.ndarray  # their quadrature weights
    gp3d: np.ndarray  # retained 3D Gauss-point indices
    gforce_entries: np.ndarray  # sampled generalized-force entries (3D then all 1D)

    @property
    def n_hex(self) -> int:
        return len(self.hexes)

    @property
    def n_bar(self) -> int:
        return self.mesh.n_bar

    @property
    def dofs(self) -> np.ndarray:
        parts = [self.mesh.hex_dofs[self.hexes].ravel(), self.mesh.bar_dofs.ravel()]
        return np.unique(np.concatenate(parts))


def reduced_mesh(mesh: Mesh, rule: EQRule) -> ReducedMesh:
    if len(rule.weights) != mesh.n_hex:
        raise ValueError("rule and mesh sizes differ")
    hexes = rule.reduced_elements
    gp = (8 * hexes[:, None] + np.arange(8)[None, :]).ravel()
    entries = np.concatenate([mesh.gforce_entries_3d(hexes), mesh.n_gforce3d + np.arange(mesh.n_bar)])
    return ReducedMesh(mesh, hexes, rule.weights[hexes], gp, entries.astype(int))

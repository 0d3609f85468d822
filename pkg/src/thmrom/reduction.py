"""Snapshot compression by the method of snapshots.

Inner products are diagonal: plain l2, or the block-weighted product used
for generalized forces, where the stress block and the normal-force block are
each scaled by the inverse of their largest Gramian eigenvalue.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

# eigenvalues below this fraction of the largest are treated as round-off
EIG_CUTOFF = 1e-14


@dataclass
class ReducedBasis:
    """W-orthonormal basis ``Z`` with the POD data that produced it."""

    Z: np.ndarray
    eigvals: np.ndarray
    product_kind: str = "l2"
    weights: np.ndarray | None = None  # diagonal of W; None means identity
    mixed_weights: tuple | None = None
    # full non-negligible spectrum of the last POD (for tail-energy checks)
    spectrum: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.Z.shape[1]

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    def _w(self) -> np.ndarray:
        return np.ones(self.n) if self.weights is None else self.weights

    def coefficients(self, V) -> np.ndarray:
        """Generalized coordinates ``Z^T W V``."""
        V = np.asarray(V, dtype=float)
        return self.Z.T @ (self._w().reshape((-1,) + (1,) * (V.ndim - 1)) * V)

    def project(self, V) -> np.ndarray:
        return self.Z @ self.coefficients(V)

    def projection_errors(self, V) -> np.ndarray:
        """Squared W-norms of ``v - Z Z^T W v`` for each column of ``V``."""
        V = np.atleast_2d(np.asarray(V, dtype=float).T).T
        R = V - self.project(V)
        return np.sum(self._w()[:, None] * R * R, axis=0)

    def gram(self) -> np.ndarray:
        return self.Z.T @ (self._w()[:, None] * self.Z)

    def truncated(self, N: int) -> "ReducedBasis":
        N = int(min(max(N, 0), self.N))
        return ReducedBasis(self.Z[:, :N].copy(), self.eigvals[:N].copy(), self.product_kind, self.weights,
                            self.mixed_weights, self.spectrum, dict(self.meta))


def l2_product(V1, V2) -> float:
    return float(np.dot(np.ravel(V1), np.ravel(V2)))


def block_largest_eigenvalue(V: np.ndarray) -> float:
    """Largest eigenvalue of the l2 Gramian ``V^T V`` (0 for empty blocks)."""
    V = np.asarray(V, dtype=float)
    if V.size == 0:
        return 0.0
    C = V.T @ V if V.shape[0] >= V.shape[1] else V @ V.T
    return float(np.linalg.eigvalsh(C)[-1])


def mixed_weights(S: np.ndarray, n_stress: int) -> tuple:
    """Block weights ``(1/lambda_1^sigma, 1/lambda_1^N)`` from snapshot columns ``S``.

    A block without energy gets weight 0 and a warning.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float).T).T
    out = []
    for name, blk in (("stress", S[:n_stress]), ("normal force", S[n_stress:])):
        lam = block_largest_eigenvalue(blk)
        if lam <= 0.0:
            if blk.shape[0]:
                warnings.warn(f"{name} block has no energy, weight set to 0", RuntimeWarning, stacklevel=2)
            out.append(0.0)
        else:
            out.append(1.0 / lam)
    return tuple(out)


def mixed_weight_vector(n: int, n_stress: int, weights: tuple) -> np.ndarray:
    w = np.empty(n)
    w[:n_stress] = weights[0]
    w[n_stress:] = weights[1]
    return w


def mixed_product(S1, S2, weights: tuple, n_stress: int) -> float:
    """``w_sigma (sigma1, sigma2) + w_N (N1, N2)`` on stacked generalized forces."""
    S1, S2 = np.ravel(S1), np.ravel(S2)
    return float(weights[0] * S1[:n_stress] @ S2[:n_stress] + weights[1] * S1[n_stress:] @ S2[n_stress:])


def _energy_count(lam: np.ndarray, eps: float) -> int:
    total = lam.sum()
    cum = np.cumsum(lam)
    # smallest Q with cum[Q-1] >= (1 - eps^2) total; guard against round-off
    target = (1.0 - eps ** 2) * total
    return int(min(np.searchsorted(cum, target * (1 - 1e-15), side="left") + 1, len(lam)))


def orthonormalize(Z: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    """W-orthonormalize columns in order (two Gram-Schmidt passes), fixing signs."""
    Z = np.array(Z, dtype=float, copy=True)
    sw = np.ones(Z.shape[0]) if w is None else np.sqrt(w)
    Y = Z * sw[:, None]
    for _ in range(2):
        for j in range(Y.shape[1]):
            if j:
                Y[:, j] -= Y[:, :j] @ (Y[:, :j].T @ Y[:, j])
            nrm = np.linalg.norm(Y[:, j])
            if nrm == 0:
                raise ValueError("linearly dependent basis vectors")
            Y[:, j] /= nrm
    with np.errstate(divide="ignore", invalid="ignore"):
        Z = np.where(sw[:, None] > 0, Y / sw[:, None], 0.0)
    return fix_signs(Z)


def fix_signs(Z: np.ndarray) -> np.ndarray:
    """Make the first entry of largest magnitude of every column positive."""
    if Z.size == 0:
        return Z
    idx = np.argmax(np.abs(Z), axis=0)
    s = np.sign(Z[idx, np.arange(Z.shape[1])])
    s[s == 0] = 1.0
    return Z * s


def pod(snapshots, eps: float | None = None, weights=None, n_modes: int | None = None,
        product_kind: str = "l2", mixed: tuple | None = None) -> ReducedBasis:
    """Method-of-snapshots POD of the columns of ``snapshots``.

    Parameters
    ----------
    snapshots : array (n, K) or list of K vectors
    eps : float, optional
        Energy tolerance: keep the smallest N with
        ``sum_{q<=N} lambda_q >= (1 - eps^2) sum_q lambda_q``.
    weights : array (n,), optional
        Diagonal of the inner-product matrix W (identity when omitted).
    n_modes : int, optional
        Fixed number of modes instead of the energy criterion (capped by rank).

    Raises
    ------
    ValueError
        If every snapshot is zero.
    """
    V = np.asarray(snapshots, dtype=float)
    if isinstance(snapshots, (list, tuple)):
        V = np.column_stack([np.ravel(v) for v in snapshots])
    if V.ndim == 1:
        V = V[:, None]
    n, K = V.shape
    if K < 1:
        raise ValueError("need at least one snapshot")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    C = V.T @ (w[:, None] * V)
    C = 0.5 * (C + C.T)
    lam, phi = np.linalg.eigh(C)
    order = np.argsort(lam)[::-1]
    lam, phi = lam[order], phi[:, order]
    if not lam[0] > 0:
        raise ValueError("all snapshots are zero")
    keep = lam > EIG_CUTOFF * lam[0]
    lam, phi = lam[keep], phi[:, keep]
    if n_modes is not None:
        N = int(min(max(n_modes, 0), len(lam)))
    else:
        if eps is None or not 0 <= eps < 1:
            raise ValueError("eps must lie in [0, 1)")
        N = _energy_count(lam, eps)
    Z = V @ phi[:, :N] / np.sqrt(lam[:N])
    Z = orthonormalize(Z, None if weights is None else w)
    return ReducedBasis(Z, lam[:N].copy(), product_kind, None if weights is None else w, mixed,
                        spectrum=lam.copy(), meta={"eps": eps, "n_snapshots": K})


def incremental_pod(basis: ReducedBasis | None, snapshots, eps: float, weights=None,
                    product_kind: str = "l2", mixed: tuple | None = None) -> ReducedBasis:
    """Enrich ``basis`` with the POD of the new snapshots' projection residuals.

    Candidate modes are kept only if their eigenvalue exceeds
    ``eps^2 * (total new-snapshot energy) / K_new``.
    """
    V = np.asarray(snapshots, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    if basis is None or basis.N == 0:
        out = pod(V, eps, weights, product_kind=product_kind, mixed=mixed)
        out.meta["gate"] = None
        return out
    w = basis._w() if weights is None else np.asarray(weights, dtype=float)
    if basis.weights is not None or weights is not None:
        basis = ReducedBasis(basis.Z, basis.eigvals, basis.product_kind, w, basis.mixed_weights,
                             basis.spectrum, dict(basis.meta))
    energy = float(np.sum(w[:, None] * V * V))
    R = V - basis.project(V)
    res_energy = float(np.sum(w[:, None] * R * R))
    gate = eps ** 2 * energy / V.shape[1]
    meta = dict(basis.meta, gate=gate, n_snapshots=basis.meta.get("n_snapshots", 0) + V.shape[1])
    if energy == 0 or res_energy <= EIG_CUTOFF * energy:
        return ReducedBasis(basis.Z.copy(), basis.eigvals.copy(), product_kind, basis.weights, mixed,
                            basis.spectrum, meta)
    cand = pod(R, eps, None if weights is None and basis.weights is None else w)
    take = cand.eigvals > gate
    if not take.any():
        return ReducedBasis(basis.Z.copy(), basis.eigvals.copy(), product_kind, basis.weights, mixed,
                            basis.spectrum, meta)
    Z = np.column_stack([basis.Z, cand.Z[:, take]])
    Z = np.column_stack([basis.Z, orthonormalize(Z, None if basis.weights is None else w)[:, basis.N:]])
    return ReducedBasis(Z, np.concatenate([basis.eigvals, cand.eigvals[take]]), product_kind, basis.weights,
                        mixed, cand.spectrum, meta)

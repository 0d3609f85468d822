"""Box mesh of a wall section with embedded prestressing cables.

The concrete is a structured grid of trilinear hexahedra (x through the
thickness, y tangential, z vertical).  Each cable owns its own nodes, which
coincide with hex nodes; the kinematic tie between the two is expressed as
rows of the constraint matrix rather than by merging DOFs.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

FACE_NAMES = ("intrados", "extrados", "lateral_y0", "lateral_y1", "bottom", "top")

_GP = 1.0 / np.sqrt(3.0)
# reference coordinates of the 8 hex nodes, counter-clockwise bottom then top
HEX_REF_NODES = np.array(
    [[-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
     [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]], dtype=float)
HEX_GAUSS_POINTS = _GP * HEX_REF_NODES
HEX_GAUSS_WEIGHTS = np.ones(8)


def hex_shape(xi: np.ndarray) -> np.ndarray:
    """Trilinear shape functions at reference points ``xi`` (n, 3) -> (n, 8)."""
    xi = np.atleast_2d(xi)
    return 0.125 * np.prod(1.0 + xi[:, None, :] * HEX_REF_NODES[None, :, :], axis=2)


def hex_shape_grad(xi: np.ndarray) -> np.ndarray:
    """Reference gradients of the shape functions, shape (n, 8, 3)."""
    xi = np.atleast_2d(xi)
    t = 1.0 + xi[:, None, :] * HEX_REF_NODES[None, :, :]
    g = np.empty(t.shape)
    for d in range(3):
        others = [e for e in range(3) if e != d]
        g[:, :, d] = 0.125 * HEX_REF_NODES[None, :, d] * t[:, :, others[0]] * t[:, :, others[1]]
    return g


@dataclass
class GeometryConfig:
    Lx: float = 1.5
    Ly: float = 1.6
    Lz: float = 2.0
    nx: int = 6
    ny: int = 8
    nz: int = 10
    # None -> default layout; [] -> no cables; otherwise a list of dicts
    # {"name", "axis": "y"|"z", "x", "z"} (axis y) or {"name", "axis", "x", "y"}
    cables: list | None = None

    @classmethod
    def from_dict(cls, d: dict | None) -> "GeometryConfig":
        return cls(**(d or {}))


@dataclass
class Cable:
    name: str
    axis: str  # "y" (horizontal, tangential) or "z" (vertical)
    nodes: np.ndarray  # global node ids, ordered along the cable
    bars: np.ndarray  # global bar ids (0-based within the bar list)


@dataclass
class Mesh:
    """Mechanical mesh: hexahedra, bars, node sets and quadrature data.

    Element ids run over hexes first (``0 .. n_hex-1``) then bars
    (``n_hex .. n_hex+n_bar-1``).  Generalized forces are laid out as the six
    stress components of every hex Gauss point (element-major), followed by
    one normal force per bar.
    """

    nodes: np.ndarray
    hex_elements: np.ndarray
    bar_elements: np.ndarray
    cable_ids: np.ndarray
    cables: list
    face_sets: dict
    tie_pairs: np.ndarray  # (n_tie, 2): cable node, coincident hex node
    shape: tuple
    lengths: tuple
    n_hex_nodes: int
    # quadrature data, filled by _precompute
    hex_B: np.ndarray = field(default=None, repr=False)
    hex_wdetJ: np.ndarray = field(default=None, repr=False)
    hex_gp_coords: np.ndarray = field(default=None, repr=False)
    bar_B: np.ndarray = field(default=None, repr=False)
    bar_length: np.ndarray = field(default=None, repr=False)
    bar_dir: np.ndarray = field(default=None, repr=False)
    bar_gp_coords: np.ndarray = field(default=None, repr=False)

    quad_rule_3d = (HEX_GAUSS_POINTS, HEX_GAUSS_WEIGHTS)
    quad_rule_1d = (np.zeros(1), np.array([2.0]))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_dofs(self) -> int:
        return 3 * self.n_nodes

    @property
    def n_hex(self) -> int:
        return len(self.hex_elements)

    @property
    def n_bar(self) -> int:
        return len(self.bar_elements)

    @property
    def n_elements(self) -> int:
        return self.n_hex + self.n_bar

    @property
    def n_gp3d(self) -> int:
        return 8 * self.n_hex

    @property
    def n_gp1d(self) -> int:
        return self.n_bar

    @property
    def n_gforce3d(self) -> int:
        return 6 * self.n_gp3d

    @property
    def n_gforce(self) -> int:
        return self.n_gforce3d + self.n_gp1d

    @property
    def hex_dofs(self) -> np.ndarray:
        return _dofs_of(self.hex_elements)

    @property
    def bar_dofs(self) -> np.ndarray:
        return _dofs_of(self.bar_elements)

    @property
    def volume(self) -> float:
        return float(self.hex_wdetJ.sum())

    def element_dofs(self, q: int) -> np.ndarray:
        if not 0 <= q < self.n_elements:
            raise IndexError(f"element id {q} out of range [0, {self.n_elements})")
        if q < self.n_hex:
            return _dofs_of(self.hex_elements[q:q + 1])[0]
        return _dofs_of(self.bar_elements[q - self.n_hex:q - self.n_hex + 1])[0]

    def element_gforce_entries(self, q: int) -> np.ndarray:
        """Indices of element ``q``'s quadrature entries in the generalized-force vector."""
        if not 0 <= q < self.n_elements:
            raise IndexError(f"element id {q} out of range [0, {self.n_elements})")
        if q < self.n_hex:
            return np.arange(48 * q, 48 * q + 48)
        return np.array([self.n_gforce3d + q - self.n_hex])

    def gforce_entries_3d(self, hexes) -> np.ndarray:
        hexes = np.asarray(hexes, dtype=int)
        return (48 * hexes[:, None] + np.arange(48)[None, :]).ravel()

    def to_json(self) -> str:
        return json.dumps({
            "nodes": self.nodes.tolist(),
            "hex_elements": self.hex_elements.tolist(),
            "bar_elements": self.bar_elements.tolist(),
            "cable_ids": self.cable_ids.tolist(),
            "cables": [{"name": c.name, "axis": c.axis, "nodes": c.nodes.tolist()} for c in self.cables],
            "face_sets": {k: v.tolist() for k, v in self.face_sets.items()},
            "tie_pairs": self.tie_pairs.tolist(),
        })


def _dofs_of(conn: np.ndarray) -> np.ndarray:
    conn = np.asarray(conn)
    return (3 * conn[:, :, None] + np.arange(3)[None, None, :]).reshape(len(conn), -1)


def default_cable_layout(cfg: GeometryConfig) -> list:
    """Three horizontal cables and two vertical ones, on the node plane nearest mid-thickness."""
    x = cfg.Lx * (cfg.nx // 2) / cfg.nx
    layout = []
    for k in range(3):
        iz = max(1, min(cfg.nz - 1, int(round(cfg.nz * (k + 1) / 4)))) if cfg.nz > 1 else 0
        layout.append({"name": f"CABH{k + 1}", "axis": "y", "x": x, "z": cfg.Lz * iz / cfg.nz})
    for k in range(2):
        iy = max(1, min(cfg.ny - 1, int(round(cfg.ny * (k + 1) / 3)))) if cfg.ny > 1 else 0
        layout.append({"name": f"CABV{k + 1}", "axis": "z", "x": x, "y": cfg.Ly * iy / cfg.ny})
    return layout


def _grid_index(value: float, length: float, n: int, what: str) -> int:
    pos = value / length * n
    i = int(round(pos))
    if abs(pos - i) > 1e-9 * max(1, n) or not 0 <= i <= n:
        raise ValueError(f"cable path is not node-aligned: {what}={value!r}")
    return i


def build_mesh(cfg: GeometryConfig | dict | None = None) -> Mesh:
    """Build the box mesh with its cables.

    >>> m = build_mesh(GeometryConfig(1.5, 1.6, 2.0, 3, 4, 5))
    >>> m.n_hex
    60
    """
    if not isinstance(cfg, GeometryConfig):
        cfg = GeometryConfig.from_dict(cfg)
    nx, ny, nz = cfg.nx, cfg.ny, cfg.nz
    if min(nx, ny, nz) < 1:
        raise ValueError("nx, ny, nz must all be >= 1")
    xs = np.linspace(0.0, cfg.Lx, nx + 1)
    ys = np.linspace(0.0, cfg.Ly, ny + 1)
    zs = np.linspace(0.0, cfg.Lz, nz + 1)
    Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
    hex_nodes = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def nid(i, j, k):
        return i + (nx + 1) * (j + (ny + 1) * k)

    i, j, k = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    i, j, k = (a.transpose(2, 1, 0).ravel() for a in (i, j, k))
    hexes = np.column_stack([
        nid(i, j, k), nid(i + 1, j, k), nid(i + 1, j + 1, k), nid(i, j + 1, k),
        nid(i, j, k + 1), nid(i + 1, j, k + 1), nid(i + 1, j + 1, k + 1), nid(i, j + 1, k + 1),
    ])

    tol = 1e-12 * max(cfg.Lx, cfg.Ly, cfg.Lz)
    faces = {
        "intrados": np.flatnonzero(np.abs(hex_nodes[:, 0]) <= tol),
        "extrados": np.flatnonzero(np.abs(hex_nodes[:, 0] - cfg.Lx) <= tol),
        "lateral_y0": np.flatnonzero(np.abs(hex_nodes[:, 1]) <= tol),
        "lateral_y1": np.flatnonzero(np.abs(hex_nodes[:, 1] - cfg.Ly) <= tol),
        "bottom": np.flatnonzero(np.abs(hex_nodes[:, 2]) <= tol),
        "top": np.flatnonzero(np.abs(hex_nodes[:, 2] - cfg.Lz) <= tol),
    }

    layout = default_cable_layout(cfg) if cfg.cables is None else cfg.cables
    n_hex_nodes = len(hex_nodes)
    extra_nodes, bars, cable_ids, cables, ties = [], [], [], [], []
    next_node = n_hex_nodes
    for c, spec in enumerate(layout):
        axis = spec.get("axis", "y")
        ix = _grid_index(spec["x"], cfg.Lx, nx, "x")
        if axis == "y":
            iz = _grid_index(spec["z"], cfg.Lz, nz, "z")
            host = [nid(ix, jj, iz) for jj in range(ny + 1)]
        elif axis == "z":
            iy = _grid_index(spec["y"], cfg.Ly, ny, "y")
            host = [nid(ix, iy, kk) for kk in range(nz + 1)]
        else:
            raise ValueError(f"unknown cable axis {axis!r}")
        own = np.arange(next_node, next_node + len(host))
        next_node += len(host)
        extra_nodes.append(hex_nodes[host])
        ties.extend(zip(own, host))
        first_bar = len(bars)
        for a, b in zip(own[:-1], own[1:]):
            bars.append((a, b))
            cable_ids.append(c)
        cables.append(Cable(spec.get("name", f"CAB{c + 1}"), axis, own,
                            np.arange(first_bar, len(bars))))

    nodes = np.vstack([hex_nodes] + extra_nodes) if extra_nodes else hex_nodes
    mesh = Mesh(
        nodes=nodes,
        hex_elements=hexes.astype(int),
        bar_elements=np.array(bars, dtype=int).reshape(-1, 2),
        cable_ids=np.array(cable_ids, dtype=int),
        cables=cables,
        face_sets=faces,
        tie_pairs=np.array(ties, dtype=int).reshape(-1, 2),
        shape=(nx, ny, nz),
        lengths=(cfg.Lx, cfg.Ly, cfg.Lz),
        n_hex_nodes=n_hex_nodes,
    )
    _precompute(mesh)
    return mesh


def hex_gradients(coords: np.ndarray):
    """Physical shape-function gradients of hexes with nodal ``coords`` (ne, 8, 3).

    Returns ``G`` (ne, 8 gp, 8 nodes, 3) and ``wdetJ`` (ne, 8 gp).
    """
    dN = hex_shape_grad(HEX_GAUSS_POINTS)  # (8 gp, 8 nodes, 3)
    J = np.einsum("gan,eai->egni", dN, coords)  # J[n, i] = dx_i / dxi_n
    detJ = np.linalg.det(J)
    if np.any(detJ <= 0):
        raise ValueError("non-positive Jacobian determinant in hex mesh")
    invJ = np.linalg.inv(J)
    G = np.einsum("gan,egin->egai", dN, invJ)
    return G, detJ * HEX_GAUSS_WEIGHTS[None, :]


def strain_matrices(coords: np.ndarray):
    """Small-strain B matrices of hexes with nodal ``coords`` (ne, 8, 3).

    Returns ``B`` (ne, 8, 6, 24) in Voigt order xx, yy, zz, xy, yz, xz with
    engineering shears, and ``wdetJ`` (ne, 8).
    """
    G, wdetJ = hex_gradients(coords)
    ne = coords.shape[0]
    B = np.zeros((ne, 8, 6, 24))
    gx, gy, gz = G[..., 0], G[..., 1], G[..., 2]
    B[:, :, 0, 0::3] = gx
    B[:, :, 1, 1::3] = gy
    B[:, :, 2, 2::3] = gz
    B[:, :, 3, 0::3] = gy
    B[:, :, 3, 1::3] = gx
    B[:, :, 4, 1::3] = gz
    B[:, :, 4, 2::3] = gy
    B[:, :, 5, 0::3] = gz
    B[:, :, 5, 2::3] = gx
    return B, wdetJ


def _precompute(mesh: Mesh) -> None:
    coords = mesh.nodes[mesh.hex_elements]
    mesh.hex_B, mesh.hex_wdetJ = strain_matrices(coords)
    N = hex_shape(HEX_GAUSS_POINTS)
    mesh.hex_gp_coords = np.einsum("gn,eni->egi", N, coords)
    if mesh.n_bar:
        a = mesh.nodes[mesh.bar_elements[:, 0]]
        b = mesh.nodes[mesh.bar_elements[:, 1]]
        d = b - a
        L = np.linalg.norm(d, axis=1)
        t = d / L[:, None]
        mesh.bar_length = L
        mesh.bar_dir = t
        mesh.bar_B = np.hstack([-t, t]) / L[:, None]
        mesh.bar_gp_coords = 0.5 * (a + b)
    else:
        mesh.bar_length = np.zeros(0)
        mesh.bar_dir = np.zeros((0, 3))
        mesh.bar_B = np.zeros((0, 6))
        mesh.bar_gp_coords = np.zeros((0, 3))


def face_load_vector(mesh: Mesh, face: str, traction) -> np.ndarray:
    """Consistent nodal forces of a uniform ``traction`` (3,) on a box face."""
    ids = set(mesh.face_sets[face].tolist())
    F = np.zeros(mesh.n_dofs)
    traction = np.asarray(traction, dtype=float)
    # bilinear face, 2x2 Gauss; face quads come from hex faces fully on the set
    local_faces = [(0, 3, 7, 4), (1, 2, 6, 5), (0, 1, 5, 4), (3, 2, 6, 7), (0, 1, 2, 3), (4, 5, 6, 7)]
    gp = np.array([[-_GP, -_GP], [_GP, -_GP], [_GP, _GP], [-_GP, _GP]])
    ref = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
    Nq = 0.25 * np.prod(1.0 + gp[:, None, :] * ref[None, :, :], axis=2)
    dNq = np.empty((4, 4, 2))
    dNq[:, :, 0] = 0.25 * ref[None, :, 0] * (1.0 + gp[:, None, 1] * ref[None, :, 1])
    dNq[:, :, 1] = 0.25 * ref[None, :, 1] * (1.0 + gp[:, None, 0] * ref[None, :, 0])
    for conn in mesh.hex_elements:
        for lf in local_faces:
            quad = conn[list(lf)]
            if not all(int(n) in ids for n in quad):
                continue
            X = mesh.nodes[quad]
            for g in range(4):
                t1 = dNq[g, :, 0] @ X
                t2 = dNq[g, :, 1] @ X
                dA = np.linalg.norm(np.cross(t1, t2))
                for a in range(4):
                    F[3 * quad[a]:3 * quad[a] + 3] += Nq[g, a] * dA * traction
    return F


def body_load_vector(mesh: Mesh, body_force) -> np.ndarray:
    """Nodal forces of a uniform body force (N/m^3) over the hexes."""
    N = hex_shape(HEX_GAUSS_POINTS)  # (gp, 8)
    nodal = np.einsum("eg,ga->ea", mesh.hex_wdetJ, N)  # (ne, 8)
    F = np.zeros(mesh.n_dofs)
    for d in range(3):
        np.add.at(F, 3 * mesh.hex_elements + d, nodal * body_force[d])
    return F


# ---------------------------------------------------------------------------
# Kinematic constraints


@dataclass
class BCConfig:
    bottom_fixed_z: bool = True
    lateral_y0_fixed: bool = True
    # "fixed" (u_y = 0) or "uniform" (u_y equal on the whole face) or "free"
    lateral_y1: str = "uniform"
    # "uniform" (u_z equal on the whole face) or "free"
    top: str = "uniform"
    # block u_x at the intrados/bottom/y0 corner to remove the rigid x translation
    pin_x: bool = True
    ties: bool = True

    @classmethod
    def from_dict(cls, d: dict | None) -> "BCConfig":
        return cls(**(d or {}))


@dataclass
class ConstraintMatrix:
    B: sp.csr_matrix
    labels: list

    @property
    def n_rows(self) -> int:
        return self.B.shape[0]


def build_constraints(mesh: Mesh, bc: BCConfig | dict | None = None) -> ConstraintMatrix:
    """Assemble the homogeneous kinematic relations ``B u = 0``.

    Raises
    ------
    ValueError
        If the rows are linearly dependent after removal of exact duplicates.
    """
    if not isinstance(bc, BCConfig):
        bc = BCConfig.from_dict(bc)
    rows: list[dict] = []
    labels: list[str] = []

    def add(entries: dict, label: str):
        rows.append(entries)
        labels.append(label)

    if bc.bottom_fixed_z:
        for n in mesh.face_sets["bottom"]:
            add({3 * n + 2: 1.0}, "dirichlet")
    if bc.lateral_y0_fixed:
        for n in mesh.face_sets["lateral_y0"]:
            add({3 * n + 1: 1.0}, "dirichlet")
    y1 = mesh.face_sets["lateral_y1"]
    if bc.lateral_y1 == "fixed":
        for n in y1:
            add({3 * n + 1: 1.0}, "dirichlet")
    elif bc.lateral_y1 == "uniform":
        for n in y1[1:]:
            add({3 * n + 1: 1.0, 3 * y1[0] + 1: -1.0}, "tie_uniform_lateral")
    elif bc.lateral_y1 != "free":
        raise ValueError(f"unknown lateral_y1 condition {bc.lateral_y1!r}")
    top = mesh.face_sets["top"]
    if bc.top == "uniform":
        for n in top[1:]:
            add({3 * n + 2: 1.0, 3 * top[0] + 2: -1.0}, "tie_uniform_top")
    elif bc.top != "free":
        raise ValueError(f"unknown top condition {bc.top!r}")
    if bc.pin_x:
        corner = np.intersect1d(np.intersect1d(mesh.face_sets["intrados"], mesh.face_sets["bottom"]),
                                mesh.face_sets["lateral_y0"])
        add({3 * int(corner[0]): 1.0}, "dirichlet")
    if bc.ties:
        for cn, hn in mesh.tie_pairs:
            for d in range(3):
                add({3 * cn + d: 1.0, 3 * hn + d: -1.0}, "tie_cable")

    # drop exact duplicates (same entries up to sign)
    seen, keep = {}, []
    for r, entries in enumerate(rows):
        key = tuple(sorted(entries.items()))
        neg = tuple(sorted((k, -v) for k, v in entries.items()))
        if key in seen or neg in seen:
            log.warning("duplicate constraint row on dofs %s dropped", sorted(entries))
            continue
        seen[key] = r
        keep.append(r)
    rows = [rows[r] for r in keep]
    labels = [labels[r] for r in keep]

    ri, ci, vals = [], [], []
    for r, entries in enumerate(rows):
        for c, v in entries.items():
            if not 0 <= c < mesh.n_dofs:
                raise ValueError(f"constraint references missing dof {c}")
            ri.append(r)
            ci.append(c)
            vals.append(v)
    B = sp.csr_matrix((vals, (ri, ci)), shape=(len(rows), mesh.n_dofs))
    if len(rows):
        rank = np.linalg.matrix_rank((B @ B.T).toarray())
        if rank < len(rows):
            raise ValueError(f"constraint matrix is rank deficient ({rank} < {len(rows)})")
    return ConstraintMatrix(B, labels)

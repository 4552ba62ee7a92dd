"""Four-node quadrilateral plane-stress discretization.

Strains use engineering shear, (eps_xx, eps_yy, gamma_xy).  DOF ``2*i + d``
is displacement component ``d`` of node ``i``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels

GAUSS_2X2 = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]) / math.sqrt(3.0)


class MeshError(ValueError):
    pass


@dataclass
class Mesh:
    nodes: np.ndarray
    elements: np.ndarray
    node_sets: dict = field(default_factory=dict)
    element_sets: dict = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float).reshape(-1, 2)
        self.elements = np.asarray(self.elements, dtype=np.int64).reshape(-1, 4)
        self.node_sets = {k: np.asarray(v, dtype=np.int64) for k, v in self.node_sets.items()}
        self.element_sets = {k: np.asarray(v, dtype=np.int64) for k, v in self.element_sets.items()}
        n = len(self.nodes)
        if self.elements.size and (self.elements.min() < 0 or self.elements.max() >= n):
            raise MeshError("element connectivity refers to a missing node")
        for name, ids in self.node_sets.items():
            if ids.size and (ids.min() < 0 or ids.max() >= n):
                raise MeshError(f"node set {name!r} refers to a missing node")

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_elements(self):
        return len(self.elements)

    def element_dofs(self):
        e = self.elements
        return np.stack([2 * e, 2 * e + 1], axis=-1).reshape(len(e), 8)


def shape_B(xy, xi, eta, element=None):
    """Strain-displacement rows and Jacobian determinant at ``(xi, eta)``.

    Parameters
    ----------
    xy : (4, 2) array
        Corner coordinates in counter-clockwise order.
    xi, eta : float
        Parent coordinates in [-1, 1].

    Returns
    -------
    B : (3, 8) array
        Maps ``(u1x, u1y, ..., u4x, u4y)`` to ``(eps_xx, eps_yy, gamma_xy)``.
    detJ : float
    """
    xy = np.asarray(xy, dtype=float)
    dN = 0.25 * np.array([
        [-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)],
        [-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)],
    ])
    J = dN @ xy
    detJ = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
    if not detJ > 0.0:
        where = "" if element is None else f" in element {element}"
        raise MeshError(f"non-positive Jacobian determinant {detJ:.3e}{where}")
    dNx = np.linalg.solve(J, dN)
    B = np.zeros((3, 8))
    B[0, 0::2] = dNx[0]
    B[1, 1::2] = dNx[1]
    B[2, 0::2] = dNx[1]
    B[2, 1::2] = dNx[0]
    return B, detJ


# ---------------------------------------------------------------------------
# quarter plate with a circular hole
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlateGeometry:
    half_width: float = 10.0
    half_length: float = 18.0
    radius: float = 5.0
    refinement: int = 4
    grading: float = 1.0

    def validate(self):
        if not (0 < self.radius < self.half_width <= self.half_length):
            raise ValueError("plate geometry needs 0 < radius < half_width <= half_length")
        if int(self.refinement) != self.refinement or self.refinement < 1:
            raise ValueError("refinement must be a positive integer")
        if self.grading <= 0:
            raise ValueError("grading must be positive")


def _patch(inner, outer, n_a, n_b, grading):
    """Nodes of a ruled patch between two parametrized curves, shape (n_a+1, n_b+1, 2)."""
    s = np.linspace(0.0, 1.0, n_a + 1)
    t = np.linspace(0.0, 1.0, n_b + 1) ** grading
    p0 = inner(s)[:, None, :]
    p1 = outer(s)[:, None, :]
    return p0 + t[None, :, None] * (p1 - p0)


def _patch_elements(ids):
    a = ids[:-1, :-1]
    b = ids[1:, :-1]
    c = ids[1:, 1:]
    d = ids[:-1, 1:]
    return np.stack([a, b, c, d], axis=-1).reshape(-1, 4)


def build_quarter_plate_mesh(geom: PlateGeometry = PlateGeometry()):
    """Structured mapped mesh of the quarter plate ``[0, W] x [0, L]`` minus the hole.

    Two patches fill the square ``[0, W]^2`` around the hole, split along the
    diagonal, and a third fills the strip ``W <= y <= L``.  Each refinement
    level adds two elements along every patch edge, so the element count
    grows as ``refinement**2``.
    """
    geom.validate()
    W, L, R = geom.half_width, geom.half_length, geom.radius
    n = 2 * int(geom.refinement)
    quarter = math.pi / 4

    def arc(a0):
        return lambda s: R * np.stack([np.cos(a0 + quarter * s), np.sin(a0 + quarter * s)], axis=-1)

    right = lambda s: np.stack([np.full_like(s, W), W * np.tan(quarter * s)], axis=-1)
    top = lambda s: np.stack([W * np.tan(quarter * (1 - s)), np.full_like(s, W)], axis=-1)

    patches = [_patch(arc(0.0), right, n, n, geom.grading),
               _patch(arc(quarter), top, n, n, geom.grading)]
    if L > W:
        # strip columns continue the nodes of the square's top edge
        x = top(np.linspace(0.0, 1.0, n + 1))[:, 0]
        y = W + (L - W) * np.linspace(0.0, 1.0, n + 1)
        patches.append(np.stack(np.broadcast_arrays(x[:, None], y[None, :]), axis=-1))

    coords = []
    index = {}
    elements = []
    for grid in patches:
        ids = np.empty(grid.shape[:2], dtype=np.int64)
        for i in range(grid.shape[0]):
            for j in range(grid.shape[1]):
                key = (round(grid[i, j, 0], 9) + 0.0, round(grid[i, j, 1], 9) + 0.0)
                k = index.get(key)
                if k is None:
                    k = index[key] = len(coords)
                    coords.append(grid[i, j])
                ids[i, j] = k
        elements.append(_patch_elements(ids))
    nodes = np.array(coords)
    elements = np.concatenate(elements)
    elements = _orient_ccw(nodes, elements)

    tol = 1e-9 * W
    x, y = nodes[:, 0], nodes[:, 1]
    node_sets = {
        "symmetry_x": np.flatnonzero(np.abs(x) <= tol),
        "symmetry_y": np.flatnonzero(np.abs(y) <= tol),
        "top_edge": np.flatnonzero(np.abs(y - L) <= tol),
        "hole": np.flatnonzero(np.abs(np.hypot(x, y) - R) <= tol),
    }
    return Mesh(nodes, elements, node_sets, {"all": np.arange(len(elements))})


def _orient_ccw(nodes, elements):
    p = nodes[elements]
    area = 0.5 * np.sum(p[:, :, 0] * np.roll(p[:, :, 1], -1, axis=1)
                        - np.roll(p[:, :, 0], -1, axis=1) * p[:, :, 1], axis=1)
    out = elements.copy()
    flip = area < 0
    out[flip] = out[flip][:, ::-1]
    return out


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

MESH_HEADER = """\
# dualplast mesh
# nodes <count>      then lines: id x y          (ids are 0-based)
# elements <count>   then lines: id n1 n2 n3 n4  (counter-clockwise)
# nodeset <name> <count>     then ids, whitespace separated
# elementset <name> <count>  then ids, whitespace separated
"""


def write_mesh(mesh: Mesh, path):
    lines = [MESH_HEADER.rstrip("\n"), f"nodes {mesh.n_nodes}"]
    lines += [f"{i} {x!r} {y!r}" for i, (x, y) in enumerate(mesh.nodes.tolist())]
    lines.append(f"elements {mesh.n_elements}")
    lines += [f"{i} " + " ".join(map(str, e)) for i, e in enumerate(mesh.elements.tolist())]
    for kind, sets in (("nodeset", mesh.node_sets), ("elementset", mesh.element_sets)):
        for name in sorted(sets):
            ids = sets[name].tolist()
            lines.append(f"{kind} {name} {len(ids)}")
            for k in range(0, len(ids), 16):
                lines.append(" ".join(map(str, ids[k:k + 16])))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path):
    """Parse the text format written by :func:`write_mesh`."""
    with open(path) as fh:
        raw = fh.read().splitlines()
    tokens = []
    for lineno, line in enumerate(raw, 1):
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.append((lineno, line.split()))
    pos = 0

    def take_rows(count, width, lineno):
        nonlocal pos
        rows = []
        for _ in range(count):
            if pos >= len(tokens):
                raise MeshError(f"line {lineno}: block ends early")
            ln, t = tokens[pos]
            if len(t) != width:
                raise MeshError(f"line {ln}: expected {width} fields, got {len(t)}")
            rows.append(t)
            pos += 1
        return rows

    def take_ids(count, lineno):
        nonlocal pos
        ids = []
        while len(ids) < count:
            if pos >= len(tokens):
                raise MeshError(f"line {lineno}: set ends early")
            ids.extend(int(v) for v in tokens[pos][1])
            pos += 1
        if len(ids) != count:
            raise MeshError(f"line {lineno}: set has {len(ids)} ids, expected {count}")
        return ids

    nodes = elements = None
    node_sets, element_sets = {}, {}
    try:
        while pos < len(tokens):
            lineno, head = tokens[pos]
            pos += 1
            key = head[0]
            if key == "nodes":
                rows = take_rows(int(head[1]), 3, lineno)
                nodes = np.zeros((len(rows), 2))
                for ln, row in enumerate(rows):
                    nodes[int(row[0])] = float(row[1]), float(row[2])
            elif key == "elements":
                rows = take_rows(int(head[1]), 5, lineno)
                elements = np.zeros((len(rows), 4), dtype=np.int64)
                for row in rows:
                    elements[int(row[0])] = [int(v) for v in row[1:]]
            elif key in ("nodeset", "elementset"):
                ids = take_ids(int(head[2]), lineno)
                (node_sets if key == "nodeset" else element_sets)[head[1]] = ids
            else:
                raise MeshError(f"line {lineno}: unknown block {key!r}")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"{path}: malformed mesh file ({exc})") from exc
    if nodes is None or elements is None:
        raise MeshError(f"{path}: missing nodes or elements block")
    return Mesh(nodes, elements, node_sets, element_sets)


# ---------------------------------------------------------------------------
# DOF bookkeeping and assembly
# ---------------------------------------------------------------------------

class DofMap:
    """Split of the ``2 * n_nodes`` nodal DOFs into free and prescribed sets.

    ``index[d]`` is the position of DOF ``d`` in the free vector (``kind`` 0)
    or in the prescribed vector (``kind`` 1).
    """

    def __init__(self, n_nodes, prescribed):
        n = 2 * n_nodes
        prescribed = np.unique(np.asarray(prescribed, dtype=np.int64))
        if prescribed.size and (prescribed[0] < 0 or prescribed[-1] >= n):
            raise ValueError("prescribed DOF out of range")
        self.n_total = n
        self.kind = np.zeros(n, dtype=np.int8)
        self.kind[prescribed] = 1
        self.free = np.flatnonzero(self.kind == 0)
        self.prescribed = prescribed
        self.index = np.empty(n, dtype=np.int64)
        self.index[self.free] = np.arange(len(self.free))
        self.index[self.prescribed] = np.arange(len(self.prescribed))

    @property
    def n_free(self):
        return len(self.free)

    @property
    def n_prescribed(self):
        return len(self.prescribed)

    @classmethod
    def from_sets(cls, mesh, fixed):
        """``fixed`` is an iterable of ``(node_set_name, direction)`` pairs."""
        dofs = []
        for name, d in fixed:
            if name not in mesh.node_sets:
                raise MeshError(f"mesh has no node set {name!r}")
            dofs.append(2 * mesh.node_sets[name] + d)
        return cls(mesh.n_nodes, np.concatenate(dofs) if dofs else [])

    def full(self, mu, mu_prsc=None):
        u = np.zeros(self.n_total)
        u[self.free] = mu
        if mu_prsc is not None:
            u[self.prescribed] = mu_prsc
        return u


def plate_dofmap(mesh):
    """Symmetry planes plus vertical top-edge DOFs prescribed."""
    return DofMap.from_sets(mesh, [("symmetry_x", 0), ("symmetry_y", 1), ("top_edge", 1)])


def prescribed_values(mesh, dofmap, assignments):
    """Vector over prescribed DOFs from ``{(node_set, direction): value}``."""
    out = np.zeros(dofmap.n_prescribed)
    for (name, d), value in assignments.items():
        dofs = 2 * mesh.node_sets[name] + d
        if np.any(dofmap.kind[dofs] != 1):
            raise ValueError(f"node set {name!r} direction {d} is not prescribed")
        out[dofmap.index[dofs]] = value
    return out


class Discretization:
    """Integration-point data of a mesh in structure-of-arrays form.

    Integration point ``4*e + g`` is Gauss point ``g`` of element ``e``.
    """

    def __init__(self, mesh: Mesh, dofmap: DofMap, thickness=1.0):
        self.mesh = mesh
        self.dofmap = dofmap
        ne = mesh.n_elements
        self.B = np.empty((4 * ne, 3, 8))
        self.weights = np.empty(4 * ne)
        for e, conn in enumerate(mesh.elements):
            xy = mesh.nodes[conn]
            for g, (xi, eta) in enumerate(GAUSS_2X2):
                B, detJ = shape_B(xy, xi, eta, element=e)
                self.B[4 * e + g] = B
                self.weights[4 * e + g] = thickness * detJ
        self.ip_dofs = np.repeat(mesh.element_dofs(), 4, axis=0)
        self.ip_element = np.repeat(np.arange(ne), 4)
        # scatter pattern for the free-free block of the tangent
        free_pos = np.where(dofmap.kind == 0, dofmap.index, -1)[self.ip_dofs]
        rows = np.broadcast_to(free_pos[:, :, None], (4 * ne, 8, 8))
        cols = np.broadcast_to(free_pos[:, None, :], (4 * ne, 8, 8))
        self._kmask = (rows >= 0) & (cols >= 0)
        self._krows = rows[self._kmask]
        self._kcols = cols[self._kmask]

    @property
    def n_ip(self):
        return len(self.weights)

    def effective_strain_increment(self, mu, mu_prsc=None):
        """``B_m mu + B^prsc_m mu_prsc`` for every integration point, shape (n_ip, 3)."""
        u = self.dofmap.full(mu, mu_prsc)
        return np.einsum("mij,mj->mi", self.B, u[self.ip_dofs])

    def internal_force(self, sigma):
        """Full-length vector ``sum_m w_m B_m^T sigma_m`` including prescribed DOFs."""
        f = self.weights[:, None] * np.einsum("mij,mi->mj", self.B, sigma)
        return np.bincount(self.ip_dofs.ravel(), weights=f.ravel(), minlength=self.dofmap.n_total)

    def assemble_gradient(self, sigma, p=None):
        """Unbalanced force on the free DOFs."""
        g = self.internal_force(sigma)[self.dofmap.free]
        if p is not None:
            g = g - p
        return g

    def assemble_tangent(self, tangents):
        """Sparse ``sum_m w_m B_m^T K_m B_m`` restricted to the free DOFs (CSR)."""
        ke = kernels.ip_stiffness(self.B, tangents, self.weights)
        n = self.dofmap.n_free
        K = sp.coo_matrix((ke[self._kmask], (self._krows, self._kcols)), shape=(n, n)).tocsr()
        K.sum_duplicates()
        return K

    def dense_B(self):
        """Global (3 n_ip) x n_total strain matrix; for small meshes and checks."""
        out = np.zeros((3 * self.n_ip, self.dofmap.n_total))
        for m in range(self.n_ip):
            out[3 * m:3 * m + 3, self.ip_dofs[m]] += self.B[m]
        return out

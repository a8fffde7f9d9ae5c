"""Areas, body volumes, tension-weighted energy and their vertex gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from foamcluster.mesh import (
    Mesh,
    MeshError,
    NonClosedBodyBoundary,
    UnknownBody,
    check_body_closed,
    extract_interface,
)


class OpenBoundary(MeshError):
    pass


@dataclass
class TensionTable:
    entries: dict[tuple[int, int], float] = field(default_factory=dict)
    default_tension: float = 1.0

    def __post_init__(self):
        norm = {}
        for (a, b), g in self.entries.items():
            if g < 0:
                raise ValueError(f"negative tension {g} for pair {(a, b)}")
            norm[(min(a, b), max(a, b))] = float(g)
        self.entries = norm
        if self.default_tension < 0:
            raise ValueError("default tension must be nonnegative")

    def __call__(self, a: int, b: int) -> float:
        return self.entries.get((min(a, b), max(a, b)), self.default_tension)

    def facet_tensions(self, labels: np.ndarray) -> np.ndarray:
        if not self.entries:
            return np.full(len(labels), self.default_tension)
        n = int(max(labels.max(initial=0), max(max(p) for p in self.entries))) + 1
        table = np.full((n, n), self.default_tension)
        for (a, b), g in self.entries.items():
            table[a, b] = table[b, a] = g
        return table[labels[:, 0], labels[:, 1]]

    def is_uniform(self) -> bool:
        return all(g == self.default_tension for g in self.entries.values())


@dataclass
class Measures:
    total_area: float
    energy: float
    body_volumes: np.ndarray  # index b-1 holds body b


def facet_area(p0, p1, p2) -> float:
    p0, p1, p2 = (np.asarray(p, dtype=float) for p in (p0, p1, p2))
    return 0.5 * float(np.linalg.norm(np.cross(p1 - p0, p2 - p0)))


def _scatter(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Sum (k, 3) vectors into n rows; bincount keeps the order fixed."""
    out = np.empty((n, 3))
    for j in range(3):
        out[:, j] = np.bincount(index, weights=values[:, j], minlength=n)
    return out


def _triple(mesh: Mesh, vertices: np.ndarray | None = None) -> np.ndarray:
    P = mesh.vertices if vertices is None else vertices
    p = P[mesh.facets]
    return np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])) / 6.0


def body_volumes(mesh: Mesh, vertices: np.ndarray | None = None) -> np.ndarray:
    """Volumes of bodies 1..B from the divergence theorem (no closure check)."""
    t = _triple(mesh, vertices)
    B = mesh.body_count + 1
    vol = np.bincount(mesh.labels[:, 0], weights=t, minlength=B)
    vol -= np.bincount(mesh.labels[:, 1], weights=t, minlength=B)
    return vol[1:]


def body_volume(mesh: Mesh, b: int) -> float:
    if b < 1 or b > mesh.body_count:
        raise UnknownBody(f"body {b} not in 1..{mesh.body_count}")
    try:
        check_body_closed(mesh, b)
    except NonClosedBodyBoundary as exc:
        raise OpenBoundary(str(exc)) from exc
    return float(body_volumes(mesh)[b - 1])


def measures(mesh: Mesh, tensions: TensionTable) -> Measures:
    areas = mesh.facet_areas()
    gamma = tensions.facet_tensions(mesh.labels)
    return Measures(float(areas.sum()), float(np.dot(gamma, areas)), body_volumes(mesh))


def energy(mesh: Mesh, gamma: np.ndarray, vertices: np.ndarray | None = None) -> float:
    P = mesh.vertices if vertices is None else vertices
    p = P[mesh.facets]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    return 0.5 * float(np.dot(gamma, np.sqrt(np.einsum("ij,ij->i", n, n))))


def energy_by_patches(mesh: Mesh, tensions: TensionTable) -> float:
    """Energy summed patch by patch; a cross-check of :func:`measures`."""
    return sum(tensions(a, b) * extract_interface(mesh, a, b).area for a, b in mesh.interface_pairs())


def area_gradient_terms(mesh: Mesh, vertices: np.ndarray | None = None):
    """Per-facet area and the gradient of each facet area w.r.t. its corners.

    Returns ``(areas, grads)`` with ``grads`` of shape (F, 3, 3): corner, xyz.
    """
    P = mesh.vertices if vertices is None else vertices
    p = P[mesh.facets]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    nn = np.sqrt(np.einsum("ij,ij->i", n, n))
    areas = 0.5 * nn
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where(nn[:, None] > 0, n / nn[:, None], 0.0)
    grads = np.empty_like(p)
    grads[:, 0] = 0.5 * np.cross(u, p[:, 2] - p[:, 1])
    grads[:, 1] = 0.5 * np.cross(u, p[:, 0] - p[:, 2])
    grads[:, 2] = 0.5 * np.cross(u, p[:, 1] - p[:, 0])
    return areas, grads


def energy_gradient(mesh: Mesh, tensions: TensionTable) -> np.ndarray:
    gamma = tensions.facet_tensions(mesh.labels)
    return energy_and_gradient(mesh, gamma)[1]


def energy_and_gradient(mesh: Mesh, gamma: np.ndarray, vertices: np.ndarray | None = None):
    areas, grads = area_gradient_terms(mesh, vertices)
    grads *= gamma[:, None, None]
    nv = mesh.n_vertices
    g = np.zeros((nv, 3))
    for k in range(3):
        g += _scatter(mesh.facets[:, k], grads[:, k], nv)
    return float(np.dot(gamma, areas)), g


def facet_volume_grads(mesh: Mesh, vertices: np.ndarray | None = None) -> np.ndarray:
    """Gradient of p0.(p1 x p2)/6 w.r.t. the three corners, shape (F, 3, 3)."""
    P = mesh.vertices if vertices is None else vertices
    p = P[mesh.facets]
    w = np.empty_like(p)
    w[:, 0] = np.cross(p[:, 1], p[:, 2])
    w[:, 1] = np.cross(p[:, 2], p[:, 0])
    w[:, 2] = np.cross(p[:, 0], p[:, 1])
    return w / 6.0


def volume_gradient(mesh: Mesh, b: int) -> np.ndarray:
    body_volume(mesh, b)  # raises on unknown body or open boundary
    w = facet_volume_grads(mesh)
    sign = (mesh.labels[:, 0] == b).astype(float) - (mesh.labels[:, 1] == b).astype(float)
    w *= sign[:, None, None]
    g = np.zeros((mesh.n_vertices, 3))
    for k in range(3):
        g += _scatter(mesh.facets[:, k], w[:, k], mesh.n_vertices)
    return g


class VolumeGradients:
    """Sparse matrix of all body-volume gradients, columns = bodies 1..B.

    The sparsity pattern depends only on connectivity and is built once; each
    :meth:`matrix` call refills the values for new positions.
    """

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        nv = mesh.n_vertices
        B = mesh.body_count
        f = mesh.facets
        lab = mesh.labels
        vert = np.concatenate([f.ravel(), f.ravel()])
        body = np.concatenate([np.repeat(lab[:, 0], 3), np.repeat(lab[:, 1], 3)])
        sign = np.concatenate([np.ones(f.size), -np.ones(f.size)])
        keep = body > 0
        self._src = np.concatenate([np.arange(f.size), np.arange(f.size)])[keep]
        self._sign = sign[keep]
        slot_key = vert[keep] * (B + 1) + body[keep]
        uniq, self._slot = np.unique(slot_key, return_inverse=True)
        self.slot_vertex = uniq // (B + 1)
        self.slot_body = uniq % (B + 1)
        self.n_slots = len(uniq)
        rows = (3 * self.slot_vertex[:, None] + np.arange(3)).ravel()
        cols = np.repeat(self.slot_body - 1, 3)
        order = np.lexsort((rows, cols))
        self._order = order
        csc = sparse.csc_matrix((np.ones(len(rows)), (rows[order], cols[order])), shape=(3 * nv, B))
        csc.sort_indices()
        self._indices = csc.indices
        self._indptr = csc.indptr
        self.shape = (3 * nv, B)

    def slot_values(self, w: np.ndarray) -> np.ndarray:
        """Per-(vertex, body) gradient vectors from per-facet corner grads."""
        flat = w.reshape(-1, 3)[self._src] * self._sign[:, None]
        out = np.empty((self.n_slots, 3))
        for j in range(3):
            out[:, j] = np.bincount(self._slot, weights=flat[:, j], minlength=self.n_slots)
        return out

    def matrix(self, vertices: np.ndarray | None = None) -> sparse.csc_matrix:
        w = facet_volume_grads(self.mesh, vertices)
        data = self.slot_values(w).ravel()[self._order]
        return sparse.csc_matrix((data, self._indices, self._indptr), shape=self.shape)


def rigid_fields(vertices: np.ndarray) -> list[np.ndarray]:
    """Three translations and three linearized rotations about the centroid."""
    c = vertices.mean(axis=0)
    x = vertices - c
    out = []
    for k in range(3):
        t = np.zeros_like(vertices)
        t[:, k] = 1.0
        out.append(t)
    for k in range(3):
        axis = np.zeros(3)
        axis[k] = 1.0
        out.append(np.cross(axis, x))
    return out

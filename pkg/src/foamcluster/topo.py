"""Euler characteristic, genus and Plateau-border combinatorics."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from foamcluster.mesh import Mesh, MeshError, Surface, extract_body_boundary


class NonManifoldEdge(MeshError):
    pass


class Disconnected(MeshError):
    def __init__(self, components: list["SurfaceStats"]):
        self.components = components
        super().__init__(f"surface has {len(components)} connected components")


@dataclass(frozen=True)
class SurfaceStats:
    V: int
    E: int
    F: int

    @property
    def chi(self) -> int:
        return self.V - self.E + self.F

    @property
    def genus(self) -> int:
        return (2 - self.chi) // 2


def _face_edges(faces: list[tuple[int, ...]]) -> list[tuple[int, int]]:
    out = []
    for face in faces:
        n = len(face)
        for k in range(n):
            a, b = face[k], face[(k + 1) % n]
            out.append((min(a, b), max(a, b)))
    return out


def _stats(faces: list[tuple[int, ...]]) -> SurfaceStats:
    verts = {v for face in faces for v in face}
    edges = set(_face_edges(faces))
    return SurfaceStats(len(verts), len(edges), len(faces))


def _components(faces: list[tuple[int, ...]]) -> list[list[tuple[int, ...]]]:
    if not faces:
        return []
    ids = sorted({v for face in faces for v in face})
    local = {v: i for i, v in enumerate(ids)}
    rows, cols = [], []
    for face in faces:
        for k in range(len(face)):
            rows.append(local[face[k]])
            cols.append(local[face[(k + 1) % len(face)]])
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(ids), len(ids)))
    n, comp = connected_components(graph, directed=False)
    groups: list[list[tuple[int, ...]]] = [[] for _ in range(n)]
    for face in faces:
        groups[comp[local[face[0]]]].append(face)
    return groups


def euler_characteristic(surface: Surface | list) -> SurfaceStats:
    """Exact (V, E, F) counts of a closed surface.

    Every edge must be shared by exactly two faces.  A disconnected surface
    raises :class:`Disconnected`, which carries the per-component stats.
    """
    faces = surface.face_list() if isinstance(surface, Surface) else [tuple(f) for f in surface]
    counts = Counter(_face_edges(faces))
    bad = [e for e, c in counts.items() if c != 2]
    if bad:
        e = min(bad)
        raise NonManifoldEdge(f"edge {e} has {counts[e]} incident faces")
    comps = _components(faces)
    if len(comps) > 1:
        raise Disconnected([_stats(c) for c in comps])
    return _stats(faces)


def component_stats(surface: Surface) -> list[SurfaceStats]:
    try:
        return [euler_characteristic(surface)]
    except Disconnected as exc:
        return exc.components


def body_genus(mesh: Mesh, b: int) -> int:
    return euler_characteristic(extract_body_boundary(mesh, b)).genus


def body_boundary_chi(mesh: Mesh) -> list[int]:
    """Euler characteristic of every body boundary, computed with arrays."""
    out = []
    for b in range(1, mesh.body_count + 1):
        sel = (mesh.labels == b).any(axis=1)
        f = mesh.facets[sel]
        if len(f) == 0:
            out.append(0)
            continue
        V = len(np.unique(f))
        e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        E = len(np.unique(e, axis=0))
        out.append(V - E + len(f))
    return out


def all_genera(mesh: Mesh) -> dict[int, int]:
    return {b: (2 - chi) // 2 for b, chi in enumerate(body_boundary_chi(mesh), start=1)}


@dataclass
class PlateauAudit:
    valence_histogram: dict[int, int]
    n_borders: int
    n_violations: int
    angle_mean_deg: float = float("nan")
    angle_min_deg: float = float("nan")
    angle_max_deg: float = float("nan")
    max_deviation_deg: float = float("nan")
    angles_deg: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)), repr=False)


def plateau_audit(mesh: Mesh) -> PlateauAudit:
    """Edge valence histogram and the film angles along every triple edge."""
    et = mesh.edge_table
    vals, counts = np.unique(et.valence, return_counts=True)
    hist = {int(v): int(c) for v, c in zip(vals, counts)}
    triple = np.flatnonzero(et.valence == 3)
    audit = PlateauAudit(hist, len(triple), int(counts[vals >= 4].sum()))
    if len(triple) == 0:
        return audit
    offsets, inc = et.incidence
    fac = np.stack([inc[offsets[triple] + k] for k in range(3)], axis=1)
    P = mesh.vertices
    e = et.edges[triple]
    p0, p1 = P[e[:, 0]], P[e[:, 1]]
    t = p1 - p0
    t /= np.linalg.norm(t, axis=1)[:, None]
    # third vertex of each incident facet, taken perpendicular to the edge
    tri = mesh.facets[fac]  # (n, 3, 3)
    third = tri.sum(axis=2) - e.sum(axis=1)[:, None]
    w = P[third] - p0[:, None, :]
    w -= np.einsum("nkj,nj->nk", w, t)[:, :, None] * t[:, None, :]
    w /= np.linalg.norm(w, axis=2)[:, :, None]
    # angular position of each film around the edge axis
    ref = w[:, 0]
    ortho = np.cross(t, ref)
    phi = np.arctan2(np.einsum("nkj,nj->nk", w, ortho), np.einsum("nkj,nj->nk", w, ref))
    phi = np.sort(np.mod(phi, 2 * np.pi), axis=1)
    gaps = np.diff(np.concatenate([phi, phi[:, :1] + 2 * np.pi], axis=1), axis=1)
    ang = np.degrees(gaps)
    audit.angles_deg = ang
    audit.angle_mean_deg = float(ang.mean())
    audit.angle_min_deg = float(ang.min())
    audit.angle_max_deg = float(ang.max())
    audit.max_deviation_deg = float(np.abs(ang - 120.0).max())
    return audit


def excavated_template(solid_vertices: np.ndarray, solid_faces: list[tuple[int, ...]], hole: float = 0.5,
                       cavity: float = 0.4) -> Surface:
    """Polyhedral excavated solid: one hole per face into a central cavity.

    Each outer face is an annulus split into isosceles trapezoids around a
    hole polygon (the face scaled by ``hole`` about its centroid).  A tube of
    quads joins every hole polygon to the matching face of the cavity, the
    solid scaled by ``cavity``; the cavity faces themselves are open.
    """
    P = np.asarray(solid_vertices, dtype=float)
    nv = len(P)
    verts = [*P, *(cavity * P)]
    faces: list[tuple[int, ...]] = []
    for face in solid_faces:
        c = P[list(face)].mean(axis=0)
        ring = []
        for v in face:
            ring.append(len(verts))
            verts.append(c + hole * (P[v] - c))
        n = len(face)
        for k in range(n):
            a, b = face[k], face[(k + 1) % n]
            faces.append((a, b, ring[(k + 1) % n], ring[k]))
            faces.append((ring[k], ring[(k + 1) % n], nv + b, nv + a))
    return Surface(np.array(verts), faces)

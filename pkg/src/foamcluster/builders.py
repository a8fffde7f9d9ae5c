"""Initial configurations: the 5-bubble prism cluster and its Platonic assemblies.

Builders emit the coarsest valid triangulation: every planar polygon is fanned
from its centroid, and pierced faces are split into quads between the face
polygon and the hole polygon.  Refinement is left to the minimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull

from foamcluster.measure import TensionTable, body_volumes
from foamcluster.mesh import Mesh, build_mesh


class ParameterError(ValueError):
    pass


class PrismOverlap(ParameterError):
    pass


SOLIDS = ("tetrahedron", "cube", "dodecahedron")


@dataclass(frozen=True)
class PrismClusterParams:
    outer_radius: float = 0.5
    inner_radius: float = 0.25
    inner_bubble_height: float = 0.15
    middle_outer_height: float = 0.3
    cap_outer_height: float = 0.35
    shared_outer_tension: float = 0.25

    def validate(self):
        if not 0 < self.inner_radius < self.outer_radius:
            raise ParameterError("need 0 < inner_radius < outer_radius")
        for name in ("inner_bubble_height", "middle_outer_height", "cap_outer_height"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if not np.isclose(2 * self.inner_bubble_height, self.middle_outer_height, rtol=0, atol=1e-12):
            raise ParameterError("the inner double bubble must fill the hole: 2*inner_bubble_height == middle_outer_height")
        if self.shared_outer_tension < 0:
            raise ParameterError("tensions must be nonnegative")


@dataclass(frozen=True)
class AssemblySpec:
    solid: str
    s_i: float
    s_m: float
    s_e: float
    s_f: float

    def validate(self):
        if self.solid not in SOLIDS:
            raise ParameterError(f"solid must be one of {SOLIDS} (3-valent vertices), got {self.solid!r}")
        if not 0 < self.s_i:
            raise ParameterError("need 0 < s_i")
        if not self.s_i < self.s_m:
            raise ParameterError("need s_i < s_m")
        if not self.s_m < self.s_e:
            raise ParameterError("need s_m < s_e")
        if not self.s_e < 1:
            raise ParameterError("need s_e < 1")
        if not 0 < self.s_f <= 1:
            raise ParameterError("need 0 < s_f <= 1")


_DEFAULTS = {
    "tetrahedron": (0.25, 0.33, 0.47, 0.6),
    "cube": (0.23, 0.3, 0.45, 0.8),
    "dodecahedron": (0.3, 0.38, 0.52, 0.8),
}


def default_spec(solid: str) -> AssemblySpec:
    if solid not in _DEFAULTS:
        raise ParameterError(f"unknown solid {solid!r}")
    return AssemblySpec(solid, *_DEFAULTS[solid])


@dataclass
class Cluster:
    mesh: Mesh
    tensions: TensionTable
    targets: np.ndarray
    names: dict[int, str]
    special_body: int  # the bubble whose genus is of interest

    def __iter__(self):
        # unpacks as (mesh, tensions, targets)
        return iter((self.mesh, self.tensions, self.targets))


class _Builder:
    """Collects shared vertices by symbolic key and oriented polygons."""

    def __init__(self):
        self.keys: dict[object, int] = {}
        self.points: list[np.ndarray] = []
        self.records: list[tuple[int, int, int, int, int]] = []

    def vertex(self, key, point) -> int:
        if key not in self.keys:
            self.keys[key] = len(self.points)
            self.points.append(np.asarray(point, dtype=float))
        return self.keys[key]

    def polygon(self, ids: list[int], front: int, back: int, normal, key) -> None:
        """Fan a planar polygon from its centroid; ``normal`` points front -> back."""
        pts = np.array([self.points[i] for i in ids])
        newell = np.zeros(3)
        for k in range(len(ids)):
            a, b = pts[k], pts[(k + 1) % len(ids)]
            newell += np.cross(a, b)
        if np.dot(newell, normal) < 0:
            ids = ids[::-1]
        c = self.vertex(("centroid", key), pts.mean(axis=0))
        for k in range(len(ids)):
            self.records.append((ids[k], ids[(k + 1) % len(ids)], c, front, back))

    def annulus(self, outer: list[int], inner: list[int], front: int, back: int, normal, key) -> None:
        n = len(outer)
        for k in range(n):
            quad = [outer[k], outer[(k + 1) % n], inner[(k + 1) % n], inner[k]]
            self.polygon(quad, front, back, normal, (key, k))

    def mesh(self, body_count: int) -> Mesh:
        return build_mesh(np.array(self.points), np.array(self.records), body_count)


PRISM_BODIES = {1: "upper", 2: "middle", 3: "lower", 4: "inner_upper", 5: "inner_lower"}


def build_torus_immiscible(p: PrismClusterParams | None = None) -> Cluster:
    """The 5-bubble immiscible cluster with a genus-1 middle bubble.

    Three outer bubbles are stacked in a right triangular prism; the middle
    one is pierced by a triangular hole that holds a double bubble.  Only the
    two films between stacked outer bubbles have the reduced tension.
    """
    p = p or PrismClusterParams()
    p.validate()
    UP, MID, LOW, IUP, ILOW = 1, 2, 3, 4, 5
    zt = p.middle_outer_height / 2 + p.cap_outer_height
    z2 = p.middle_outer_height / 2
    levels = {"bottom": -zt, "z1": -z2, "z0": 0.0, "z2": z2, "top": zt}
    theta = 2 * np.pi * np.arange(3) / 3
    ring = np.stack([np.cos(theta), np.sin(theta), np.zeros(3)], axis=1)
    b = _Builder()

    def outer(level):
        return [b.vertex(("O", k, level), p.outer_radius * ring[k] + [0, 0, levels[level]]) for k in range(3)]

    def inner(level):
        return [b.vertex(("I", k, level), p.inner_radius * ring[k] + [0, 0, levels[level]]) for k in range(3)]

    ez = np.array([0.0, 0.0, 1.0])
    b.polygon(outer("top"), UP, 0, ez, "top")
    b.polygon(outer("bottom"), LOW, 0, -ez, "bottom")
    for lo, hi, body in (("bottom", "z1", LOW), ("z1", "z2", MID), ("z2", "top", UP)):
        O_lo, O_hi = outer(lo), outer(hi)
        for k in range(3):
            j = (k + 1) % 3
            normal = ring[k] + ring[j]
            b.polygon([O_lo[k], O_lo[j], O_hi[j], O_hi[k]], body, 0, normal, ("side", lo, k))
    b.annulus(outer("z2"), inner("z2"), UP, MID, -ez, "ann_up")
    b.polygon(inner("z2"), UP, IUP, -ez, "in_up")
    b.polygon(inner("z0"), IUP, ILOW, -ez, "in_mid")
    b.annulus(outer("z1"), inner("z1"), LOW, MID, ez, "ann_low")
    b.polygon(inner("z1"), LOW, ILOW, ez, "in_low")
    for lo, hi, body in (("z1", "z0", ILOW), ("z0", "z2", IUP)):
        I_lo, I_hi = inner(lo), inner(hi)
        for k in range(3):
            j = (k + 1) % 3
            b.polygon([I_lo[k], I_lo[j], I_hi[j], I_hi[k]], body, MID, ring[k] + ring[j], ("iside", lo, k))
    mesh = b.mesh(5)
    g = p.shared_outer_tension
    tensions = TensionTable({(UP, MID): g, (MID, LOW): g})
    return Cluster(mesh, tensions, body_volumes(mesh), dict(PRISM_BODIES), MID)


# --------------------------------------------------------------------------
# Platonic assemblies


def solid_geometry(solid: str) -> tuple[np.ndarray, list[tuple[int, ...]]]:
    """Outer solid vertices and faces ordered counter-clockwise seen from outside."""
    if solid == "tetrahedron":
        P = 0.5 * np.array([[-1, -1, -1], [-1, 1, 1], [1, -1, 1], [1, 1, -1]], dtype=float)
    elif solid == "cube":
        P = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    elif solid == "dodecahedron":
        phi = (1 + np.sqrt(5)) / 2
        pts = [[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)]
        for a in (-1 / phi, 1 / phi):
            for c in (-phi, phi):
                pts += [[0, a, c], [a, c, 0], [c, 0, a]]
        P = np.array(pts, dtype=float) / np.sqrt(3)
    else:
        raise ParameterError(f"unknown solid {solid!r}")
    return P, _hull_faces(P)


def _hull_faces(P: np.ndarray) -> list[tuple[int, ...]]:
    hull = ConvexHull(P)
    faces = []
    seen = []
    for eq in hull.equations:
        n, d = eq[:3], -eq[3]
        if any(np.allclose(n, m, atol=1e-9) for m in seen):
            continue
        seen.append(n)
        ids = np.flatnonzero(np.abs(P @ n - d) < 1e-9)
        c = P[ids].mean(axis=0)
        u = P[ids[0]] - c
        u /= np.linalg.norm(u)
        w = np.cross(n, u)
        ang = np.arctan2((P[ids] - c) @ w, (P[ids] - c) @ u)
        faces.append(tuple(int(i) for i in ids[np.argsort(ang)]))
    # deterministic order: by face centroid direction
    cents = np.array([P[list(f)].mean(axis=0) for f in faces])
    order = np.lexsort((cents[:, 2], cents[:, 1], cents[:, 0]))
    return [faces[i] for i in order]


def assembly_bodies(n_faces: int) -> dict[int, str]:
    names = {1: "center", 2: "multi_torus"}
    for k in range(n_faces):
        names[3 + k] = f"outer_{k}"
        names[3 + n_faces + k] = f"inner_upper_{k}"
        names[3 + 2 * n_faces + k] = f"inner_lower_{k}"
    return names


def build_assembly(spec: AssemblySpec) -> Cluster:
    """Copies of the 5-bubble cluster, reshaped as cones, around a Platonic solid.

    Bodies: 1 center bubble (inside the scaled solid T_i), 2 the multi-torus
    bubble between T_i and T_e, then one outer bubble per face between T_e
    and T, then the upper and lower halves of the inner double bubble of
    each face.  Each double bubble is a right prism over the face of T_i
    scaled by ``s_f``, running from T_i to T_e and split by the plane of T_m.
    """
    spec.validate()
    if spec.s_f >= 1:
        raise PrismOverlap("s_f = 1 makes neighbouring prisms touch along the edges of T_i")
    P, faces = solid_geometry(spec.solid)
    n = len(faces)
    CENTER, TORUS = 1, 2

    def outer_body(k):
        return 3 + k

    def iup(k):
        return 3 + n + k

    def ilow(k):
        return 3 + 2 * n + k

    b = _Builder()
    scales = {"T": 1.0, "e": spec.s_e, "m": spec.s_m, "i": spec.s_i}

    def solid_vertex(level, j):
        return b.vertex(("S", level, j), scales[level] * P[j])

    normals = []
    for face in faces:
        c = P[list(face)].mean(axis=0)
        normals.append(c / np.linalg.norm(c))
    depth = [float(np.dot(P[list(face)].mean(axis=0), nrm)) for face, nrm in zip(faces, normals)]

    def prism_ring(k, level):
        face = faces[k]
        c_i = spec.s_i * P[list(face)].mean(axis=0)
        shift = (scales[level] - spec.s_i) * depth[k] * normals[k]
        return [
            b.vertex(("Q", k, level, j), c_i + spec.s_f * (spec.s_i * P[j] - c_i) + shift)
            for j in face
        ]

    # outer films and lateral films between neighbouring outer bubbles
    edge_faces: dict[tuple[int, int], list[int]] = {}
    for k, face in enumerate(faces):
        b.polygon([solid_vertex("T", j) for j in face], outer_body(k), 0, normals[k], ("T", k))
        for a, c in zip(face, face[1:] + face[:1]):
            edge_faces.setdefault((min(a, c), max(a, c)), []).append(k)
    for (a, c), (k, l) in sorted(edge_faces.items()):
        quad = [solid_vertex("e", a), solid_vertex("e", c), solid_vertex("T", c), solid_vertex("T", a)]
        b.polygon(quad, outer_body(k), outer_body(l), normals[l] - normals[k], ("lat", a, c))

    for k, face in enumerate(faces):
        nrm = normals[k]
        qe, qm, qi = prism_ring(k, "e"), prism_ring(k, "m"), prism_ring(k, "i")
        b.annulus([solid_vertex("e", j) for j in face], qe, outer_body(k), TORUS, -nrm, ("Te", k))
        b.polygon(qe, outer_body(k), iup(k), -nrm, ("top", k))
        b.polygon(qm, iup(k), ilow(k), -nrm, ("mid", k))
        b.annulus([solid_vertex("i", j) for j in face], qi, CENTER, TORUS, nrm, ("Ti", k))
        b.polygon(qi, CENTER, ilow(k), nrm, ("base", k))
        m = len(face)
        axis = spec.s_i * P[list(face)].mean(axis=0)
        for part, lo, hi, body in (("low", qi, qm, ilow(k)), ("up", qm, qe, iup(k))):
            for s in range(m):
                t = (s + 1) % m
                quad = [lo[s], lo[t], hi[t], hi[s]]
                mid = 0.5 * (b.points[lo[s]] + b.points[lo[t]]) - axis
                outward = mid - np.dot(mid, nrm) * nrm
                b.polygon(quad, body, TORUS, outward, ("wall", k, part, s))
    mesh = b.mesh(2 + 3 * n)
    return Cluster(mesh, TensionTable(), body_volumes(mesh), assembly_bodies(n), TORUS)


def build_cluster(kind: str, params=None) -> Cluster:
    if kind == "prism5":
        return build_torus_immiscible(params)
    if kind in SOLIDS:
        return build_assembly(params or default_spec(kind))
    raise ParameterError(f"unknown cluster kind {kind!r}")

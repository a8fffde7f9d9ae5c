"""Multimaterial triangle meshes.

A mesh stores vertex positions and oriented triangles.  Every triangle carries
the ordered pair ``(front, back)`` of bodies it separates; its right-hand
normal points away from ``front`` and into ``back``.  Body 0 is the unbounded
exterior.  Edges are never stored: they are derived from the facets on demand,
which keeps non-manifold (Plateau border) edges trivial to represent.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse


class MeshError(ValueError):
    pass


class InvalidIndex(MeshError):
    pass


class DuplicateVertexInFacet(MeshError):
    pass


class EqualBodyLabels(MeshError):
    pass


class NonClosedBodyBoundary(MeshError):
    def __init__(self, body: int, edge: tuple[int, int], count: int, reason: str = ""):
        self.body = body
        self.edge = edge
        self.count = count
        msg = f"boundary of body {body} is not closed at edge {edge} ({count} incident facets)"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class UnknownBody(MeshError):
    pass


class EqualBodies(MeshError):
    pass


@dataclass(frozen=True)
class DiscretizationParam:
    """Longest admissible edge length of a mesh."""

    h_max: float

    def __post_init__(self):
        if not self.h_max > 0:
            raise ValueError(f"h_max must be positive, got {self.h_max}")


@dataclass(frozen=True)
class EdgeTable:
    edges: np.ndarray  # (E, 2) sorted vertex pairs, lexicographic order
    facet_edges: np.ndarray  # (F, 3) edge of local side (v0v1, v1v2, v2v0)
    valence: np.ndarray  # (E,) number of incident facets

    @cached_property
    def incidence(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR-style edge -> incident facets lists ``(offsets, facet_ids)``."""
        flat = self.facet_edges.ravel()
        order = np.argsort(flat, kind="stable")
        offsets = np.zeros(len(self.edges) + 1, dtype=np.int64)
        np.cumsum(self.valence, out=offsets[1:])
        return offsets, order // 3


def edge_table(facets: np.ndarray, n_vertices: int) -> EdgeTable:
    a = facets
    b = facets[:, [1, 2, 0]]
    lo = np.minimum(a, b).astype(np.int64)
    hi = np.maximum(a, b).astype(np.int64)
    key = lo * n_vertices + hi
    uniq, inv, counts = np.unique(key.ravel(), return_inverse=True, return_counts=True)
    edges = np.stack([uniq // n_vertices, uniq % n_vertices], axis=1)
    return EdgeTable(edges, inv.reshape(-1, 3), counts)


@dataclass(eq=False)
class Mesh:
    vertices: np.ndarray
    facets: np.ndarray
    labels: np.ndarray
    body_count: int

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_facets(self) -> int:
        return len(self.facets)

    @cached_property
    def edge_table(self) -> EdgeTable:
        return edge_table(self.facets, self.n_vertices)

    @property
    def edges(self) -> np.ndarray:
        return self.edge_table.edges

    def copy(self) -> "Mesh":
        return Mesh(self.vertices.copy(), self.facets.copy(), self.labels.copy(), self.body_count)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        """Same connectivity, new positions (topology caches are shared)."""
        out = Mesh(np.asarray(vertices, dtype=float), self.facets, self.labels, self.body_count)
        if "edge_table" in self.__dict__:
            out.__dict__["edge_table"] = self.__dict__["edge_table"]
        return out

    def as_records(self) -> np.ndarray:
        return np.hstack([self.facets, self.labels])

    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 1]] - self.vertices[e[:, 0]], axis=1)

    def max_edge_length(self) -> float:
        return float(self.edge_lengths().max()) if self.n_facets else 0.0

    def facet_areas(self) -> np.ndarray:
        p = self.vertices[self.facets]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        return 0.5 * np.linalg.norm(n, axis=1)

    def diameter(self) -> float:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    def interface_pairs(self) -> list[tuple[int, int]]:
        pairs = np.sort(self.labels, axis=1)
        return [tuple(map(int, p)) for p in np.unique(pairs, axis=0)]


def build_mesh(vertices, facets, body_count: int | None = None) -> Mesh:
    """Create a mesh from positions and ``(v0, v1, v2, front, back)`` records.

    All mesh invariants are checked; see :func:`validate`.
    """
    verts = np.asarray(vertices, dtype=float).reshape(-1, 3)
    rec = np.asarray(facets, dtype=np.int64).reshape(-1, 5)
    if body_count is None:
        body_count = int(rec[:, 3:].max()) if len(rec) else 0
    mesh = Mesh(verts, np.ascontiguousarray(rec[:, :3]), np.ascontiguousarray(rec[:, 3:]), int(body_count))
    validate(mesh)
    return mesh


def validate(mesh: Mesh) -> None:
    nv = mesh.n_vertices
    f = mesh.facets
    lab = mesh.labels
    if len(f) == 0:
        return
    bad = np.flatnonzero((f < 0).any(axis=1) | (f >= nv).any(axis=1))
    if len(bad):
        raise InvalidIndex(f"facet {bad[0]} references a vertex outside [0, {nv})")
    bad = np.flatnonzero((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2]))
    if len(bad):
        raise DuplicateVertexInFacet(f"facet {bad[0]} repeats a vertex: {f[bad[0]].tolist()}")
    bad = np.flatnonzero(lab[:, 0] == lab[:, 1])
    if len(bad):
        raise EqualBodyLabels(f"facet {bad[0]} has front == back == {lab[bad[0], 0]}")
    bad = np.flatnonzero((lab < 0).any(axis=1) | (lab > mesh.body_count).any(axis=1))
    if len(bad):
        raise InvalidIndex(f"facet {bad[0]} has a body label outside [0, {mesh.body_count}]")
    _check_closed(mesh)


def _outward_half_edges(mesh: Mesh) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Directed edges of every body boundary, oriented outward from the body."""
    f = mesh.facets
    front, back = mesh.labels[:, 0], mesh.labels[:, 1]
    tails = np.concatenate([f, f[:, [1, 2, 0]]])
    heads = np.concatenate([f[:, [1, 2, 0]], f])
    bodies = np.concatenate([np.repeat(front[:, None], 3, 1), np.repeat(back[:, None], 3, 1)])
    keep = bodies > 0
    return bodies[keep], tails[keep], heads[keep]


def _check_closed(mesh: Mesh, only: int | None = None) -> None:
    body, tail, head = _outward_half_edges(mesh)
    if only is not None:
        sel = body == only
        body, tail, head = body[sel], tail[sel], head[sel]
    if len(body) == 0:
        return
    nv = mesh.n_vertices
    lo = np.minimum(tail, head)
    hi = np.maximum(tail, head)
    key = (body * nv + lo) * nv + hi
    sign = np.where(tail < head, 1, -1)
    uniq, inv, counts = np.unique(key, return_inverse=True, return_counts=True)
    net = np.bincount(inv, weights=sign, minlength=len(uniq))
    bad = np.flatnonzero((counts != 2) | (net != 0))
    if len(bad):
        k = int(uniq[bad[0]])
        b, rest = divmod(k, nv * nv)
        i, j = divmod(rest, nv)
        reason = "" if counts[bad[0]] != 2 else "inconsistent orientation"
        raise NonClosedBodyBoundary(int(b), (int(i), int(j)), int(counts[bad[0]]), reason)


@dataclass
class InterfacePatch:
    body_pair: tuple[int, int]
    facets: np.ndarray  # indices into mesh.facets
    area: float


def extract_interface(mesh: Mesh, a: int, b: int) -> InterfacePatch:
    if a == b:
        raise EqualBodies(f"an interface needs two distinct bodies, got {a} twice")
    lab = mesh.labels
    sel = np.flatnonzero(((lab[:, 0] == a) & (lab[:, 1] == b)) | ((lab[:, 0] == b) & (lab[:, 1] == a)))
    area = float(mesh.facet_areas()[sel].sum()) if len(sel) else 0.0
    return InterfacePatch((min(a, b), max(a, b)), sel, area)


@dataclass
class Surface:
    """Closed oriented surface cut out of a mesh.

    ``faces`` holds triangles (an ``(F, 3)`` array) or polygons (a list of
    vertex tuples).  ``vertex_ids`` maps local vertex indices to the source
    mesh.
    """

    vertices: np.ndarray
    faces: object
    vertex_ids: np.ndarray | None = None

    def face_list(self) -> list[tuple[int, ...]]:
        return [tuple(int(v) for v in face) for face in self.faces]


def extract_body_boundary(mesh: Mesh, b: int) -> Surface:
    if b < 1 or b > mesh.body_count:
        raise UnknownBody(f"body {b} not in 1..{mesh.body_count}")
    front = mesh.labels[:, 0] == b
    back = mesh.labels[:, 1] == b
    tris = np.concatenate([mesh.facets[front], mesh.facets[back][:, ::-1]])
    ids, local = np.unique(tris, return_inverse=True)
    return Surface(mesh.vertices[ids], local.reshape(-1, 3), ids)


def check_body_closed(mesh: Mesh, b: int) -> None:
    if b < 1 or b > mesh.body_count:
        raise UnknownBody(f"body {b} not in 1..{mesh.body_count}")
    if not (mesh.labels == b).any():
        raise NonClosedBodyBoundary(b, (-1, -1), 0, "body has no facets")
    _check_closed(mesh, only=b)


# --------------------------------------------------------------------------
# refinement


def _longest_local_edge(mesh: Mesh, et: EdgeTable) -> tuple[np.ndarray, np.ndarray]:
    """Local index (0..2) and length of each facet's longest edge.

    Ties go to the edge with the smallest (min vertex, max vertex) key, which
    is the smallest edge index because edges are stored in key order.
    """
    lengths = mesh.edge_lengths()[et.facet_edges]
    longest = lengths.max(axis=1)
    masked = np.where(lengths == longest[:, None], et.facet_edges, np.iinfo(np.int64).max)
    return masked.argmin(axis=1), longest


def _bisect_round(mesh: Mesh, h_max: float) -> Mesh | None:
    et = mesh.edge_table
    local, longest = _longest_local_edge(mesh, et)
    rows = np.arange(mesh.n_facets)
    long_edge = et.facet_edges[rows, local]
    marked = np.zeros(len(et.edges), dtype=bool)
    marked[long_edge[longest > h_max]] = True
    if not marked.any():
        return None
    # conforming closure: a facet with any marked edge also splits its longest one
    while True:
        touched = marked[et.facet_edges].any(axis=1)
        need = touched & ~marked[long_edge]
        if not need.any():
            break
        marked[long_edge[need]] = True

    marked_ids = np.flatnonzero(marked)
    mid_index = np.full(len(et.edges), -1, dtype=np.int64)
    mid_index[marked_ids] = mesh.n_vertices + np.arange(len(marked_ids))
    e = et.edges[marked_ids]
    new_vertices = np.vstack([mesh.vertices, 0.5 * (mesh.vertices[e[:, 0]] + mesh.vertices[e[:, 1]])])

    touched = marked[et.facet_edges].any(axis=1)
    keep_f = mesh.facets[~touched]
    keep_l = mesh.labels[~touched]

    idx = np.flatnonzero(touched)
    shift = local[idx]
    # rotate so the longest edge is (a, b) and c is the opposite vertex
    perm = (shift[:, None] + np.arange(3)) % 3
    tri = mesh.facets[idx[:, None], perm]
    fe = et.facet_edges[idx[:, None], perm]
    lab = mesh.labels[idx]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    m = mid_index[fe[:, 0]]
    p = mid_index[fe[:, 1]]  # on (b, c)
    n = mid_index[fe[:, 2]]  # on (c, a)

    parts_f = [keep_f]
    parts_l = [keep_l]
    has_n = n >= 0
    has_p = p >= 0
    # child (a, m, c), possibly split at n on (c, a)
    s = ~has_n
    parts_f.append(np.stack([a[s], m[s], c[s]], 1))
    parts_l.append(lab[s])
    s = has_n
    parts_f.append(np.stack([a[s], m[s], n[s]], 1))
    parts_l.append(lab[s])
    parts_f.append(np.stack([m[s], c[s], n[s]], 1))
    parts_l.append(lab[s])
    # child (m, b, c), possibly split at p on (b, c)
    s = ~has_p
    parts_f.append(np.stack([m[s], b[s], c[s]], 1))
    parts_l.append(lab[s])
    s = has_p
    parts_f.append(np.stack([m[s], b[s], p[s]], 1))
    parts_l.append(lab[s])
    parts_f.append(np.stack([m[s], p[s], c[s]], 1))
    parts_l.append(lab[s])

    facets = _canonical_order(np.concatenate(parts_f), np.concatenate(parts_l))
    return Mesh(new_vertices, facets[0], facets[1], mesh.body_count)


def _canonical_order(facets: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.ascontiguousarray(facets, dtype=np.int64), np.ascontiguousarray(labels, dtype=np.int64)


def refine_to(mesh: Mesh, h: DiscretizationParam | float) -> Mesh:
    """Longest-edge bisection until no edge is longer than ``h``.

    Each round marks the longest edge of every too-coarse facet, closes the
    marking so that each touched facet also splits its own longest edge, and
    splits every marked edge at its midpoint.  New vertices lie on the split
    edges and new facets lie in their parents' planes, so body volumes are
    unchanged.
    """
    h_max = h.h_max if isinstance(h, DiscretizationParam) else float(h)
    DiscretizationParam(h_max)
    out = mesh
    while True:
        nxt = _bisect_round(out, h_max)
        if nxt is None:
            return out
        out = nxt


# --------------------------------------------------------------------------
# polishing


def min_angles(p0, p1, p2) -> np.ndarray:
    """Smallest interior angle of each triangle (arrays of shape (n, 3))."""

    def angle(u, v):
        cr = np.linalg.norm(np.cross(u, v), axis=-1)
        return np.arctan2(cr, np.einsum("ij,ij->i", u, v))

    a0 = angle(p1 - p0, p2 - p0)
    a1 = angle(p2 - p1, p0 - p1)
    a2 = np.pi - a0 - a1
    return np.minimum(np.minimum(a0, a1), a2)


def _flip_candidates(mesh: Mesh, coplanar_cos: float):
    et = mesh.edge_table
    offsets, inc = et.incidence
    ids = np.flatnonzero(et.valence == 2)
    if len(ids) == 0:
        return None
    f1 = inc[offsets[ids]]
    f2 = inc[offsets[ids] + 1]
    same = (mesh.labels[f1] == mesh.labels[f2]).all(axis=1)
    ids, f1, f2 = ids[same], f1[same], f2[same]
    if len(ids) == 0:
        return None
    # position of the shared edge inside f1: local side k means (t[k], t[k+1])
    k1 = np.argmax(et.facet_edges[f1] == ids[:, None], axis=1)
    k2 = np.argmax(et.facet_edges[f2] == ids[:, None], axis=1)
    r = np.arange(len(ids))
    t1 = mesh.facets[f1]
    t2 = mesh.facets[f2]
    a = t1[r, k1]
    b = t1[r, (k1 + 1) % 3]
    c = t1[r, (k1 + 2) % 3]
    # same labels and consistent orientation: f2 traverses the edge as (b, a)
    ok = t2[r, k2] == b
    d = t2[r, (k2 + 2) % 3]
    ok &= c != d
    P = mesh.vertices
    n1 = np.cross(P[b] - P[a], P[c] - P[a])
    n2 = np.cross(P[a] - P[b], P[d] - P[b])
    l1 = np.linalg.norm(n1, axis=1)
    l2 = np.linalg.norm(n2, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cosang = np.einsum("ij,ij->i", n1, n2) / (l1 * l2)
    ok &= cosang >= coplanar_cos
    before = np.minimum(min_angles(P[a], P[b], P[c]), min_angles(P[b], P[a], P[d]))
    # flipped pair: (c, a, d) and (d, b, c)
    m1 = np.cross(P[a] - P[c], P[d] - P[c])
    m2 = np.cross(P[b] - P[d], P[c] - P[d])
    navg = n1 + n2
    ok &= (np.einsum("ij,ij->i", m1, navg) > 0) & (np.einsum("ij,ij->i", m2, navg) > 0)
    after = np.minimum(min_angles(P[c], P[a], P[d]), min_angles(P[d], P[b], P[c]))
    ok &= after > before + 1e-9
    sel = np.flatnonzero(ok)
    if len(sel) == 0:
        return None
    gain = (after - before)[sel]
    return sel, gain, f1, f2, a, b, c, d, ids


def equiangulate(mesh: Mesh, max_passes: int = 100, coplanar_cos: float = 0.94) -> Mesh:
    """Flip interior film edges where the flip raises the smaller minimum angle.

    Only edges with exactly two incident facets of the same interface are
    candidates; Plateau borders are never touched.  Flips are skipped when the
    two facets are far from coplanar (creases) or when a flipped triangle
    would turn over, or when the new diagonal already exists.
    """
    out = mesh
    for _ in range(max_passes):
        cand = _flip_candidates(out, coplanar_cos)
        if cand is None:
            break
        sel, gain, f1, f2, a, b, c, d, ids = cand
        order = sel[np.lexsort((ids[sel], -gain))]
        nv = out.n_vertices
        existing = out.edges[:, 0] * nv + out.edges[:, 1]
        new_keys = np.minimum(c, d) * nv + np.maximum(c, d)
        order = order[~np.isin(new_keys[order], existing)]
        used = np.zeros(out.n_facets, dtype=bool)
        seen_keys: set[int] = set()
        facets = out.facets.copy()
        flipped = 0
        for i in order:
            g, h = f1[i], f2[i]
            key = int(new_keys[i])
            if used[g] or used[h] or key in seen_keys:
                continue
            used[g] = used[h] = True
            seen_keys.add(key)
            facets[g] = (c[i], a[i], d[i])
            facets[h] = (d[i], b[i], c[i])
            flipped += 1
        if flipped == 0:
            break
        out = Mesh(out.vertices, facets, out.labels, out.body_count)
    return out


def vertex_classes(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Classify vertices by how many films meet there.

    Returns ``(kind, border_count)`` where kind is 0 for a vertex inside one
    film, 1 for a vertex on a single border curve (two border edges), and 2
    for every other vertex (junctions, corners), which polishing keeps fixed.
    Border edges are edges whose incident facets are not exactly two facets
    of one interface.
    """
    et = mesh.edge_table
    nv = mesh.n_vertices
    offsets, inc = et.incidence
    border = et.valence != 2
    two = np.flatnonzero(et.valence == 2)
    pairs = np.sort(mesh.labels, axis=1)
    f1 = inc[offsets[two]]
    f2 = inc[offsets[two] + 1]
    border[two[(pairs[f1] != pairs[f2]).any(axis=1)]] = True
    e = et.edges[border]
    count = np.bincount(e.ravel(), minlength=nv)
    # distinct interfaces touching each vertex
    pair_key = pairs[:, 0] * (mesh.body_count + 1) + pairs[:, 1]
    vk = np.unique(np.stack([mesh.facets.ravel(), np.repeat(pair_key, 3)], 1), axis=0)
    n_patches = np.bincount(vk[:, 0], minlength=nv)
    kind = np.full(nv, 2, dtype=np.int8)
    kind[(count == 0) & (n_patches == 1)] = 0
    kind[count == 2] = 1
    return kind, count


def border_edges(mesh: Mesh) -> np.ndarray:
    et = mesh.edge_table
    offsets, inc = et.incidence
    border = et.valence != 2
    two = np.flatnonzero(et.valence == 2)
    pairs = np.sort(mesh.labels, axis=1)
    f1 = inc[offsets[two]]
    f2 = inc[offsets[two] + 1]
    border[two[(pairs[f1] != pairs[f2]).any(axis=1)]] = True
    return np.flatnonzero(border)


def curve_neighbours(mesh: Mesh, curve: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """For vertices on a single border curve, their two border neighbours.

    Returns ``(v, n1, n2)`` with ``v`` sorted.
    """
    e = mesh.edges[border_edges(mesh)]
    ends = np.concatenate([e, e[:, ::-1]])
    ends = ends[np.isin(ends[:, 0], curve)]
    ends = ends[np.lexsort((ends[:, 1], ends[:, 0]))]
    # each curve vertex has exactly two border neighbours
    return ends[0::2, 0], ends[0::2, 1], ends[1::2, 1]


def vertex_normals(mesh: Mesh) -> np.ndarray:
    """Area-weighted normals using each facet's pair-normalized orientation.

    Facets are oriented so the smaller body id of the pair is in front, which
    makes normals agree across a film regardless of how its facets were
    labeled.
    """
    p = mesh.vertices[mesh.facets]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    n[mesh.labels[:, 0] > mesh.labels[:, 1]] *= -1
    out = np.zeros_like(mesh.vertices)
    for k in range(3):
        for j in range(3):
            out[:, j] += np.bincount(mesh.facets[:, k], weights=n[:, j], minlength=mesh.n_vertices)
    return out


def vertex_average(mesh: Mesh) -> Mesh:
    """One pass of tangential vertex averaging.

    Film-interior vertices move toward the area-weighted centroid of their
    incident facets, with the normal component of that move removed so body
    volumes only change at second order.  Vertices on a single border curve
    move along the curve toward the midpoint of their two border neighbours.
    Junction vertices stay put.
    """
    nv = mesh.n_vertices
    P = mesh.vertices
    kind, _ = vertex_classes(mesh)
    areas = mesh.facet_areas()
    cent = P[mesh.facets].mean(axis=1)
    wsum = np.zeros(nv)
    csum = np.zeros((nv, 3))
    for k in range(3):
        idx = mesh.facets[:, k]
        wsum += np.bincount(idx, weights=areas, minlength=nv)
        for j in range(3):
            csum[:, j] += np.bincount(idx, weights=areas * cent[:, j], minlength=nv)
    new = P.copy()

    inner = np.flatnonzero((kind == 0) & (wsum > 0))
    if len(inner):
        normals = vertex_normals(mesh)[inner]
        nn = np.linalg.norm(normals, axis=1)
        good = nn > 0
        inner = inner[good]
        u = normals[good] / nn[good, None]
        d = csum[inner] / wsum[inner, None] - P[inner]
        d -= np.einsum("ij,ij->i", d, u)[:, None] * u
        new[inner] += d

    curve = np.flatnonzero(kind == 1)
    if len(curve):
        v, n1, n2 = curve_neighbours(mesh, curve)
        q1 = P[n1]
        q2 = P[n2]
        t = q2 - q1
        tn = np.linalg.norm(t, axis=1)
        # sharp corners of a border curve are pinned like junctions
        u1 = q1 - P[v]
        u2 = q2 - P[v]
        with np.errstate(invalid="ignore", divide="ignore"):
            cos_turn = -np.einsum("ij,ij->i", u1, u2) / (np.linalg.norm(u1, axis=1) * np.linalg.norm(u2, axis=1))
        good = (tn > 0) & (cos_turn > np.cos(np.radians(30.0)))
        t = t[good] / tn[good, None]
        v = v[good]
        d = 0.5 * (q1[good] + q2[good]) - P[v]
        new[v] += np.einsum("ij,ij->i", d, t)[:, None] * t
    return mesh.with_vertices(new)


def collapse_degenerate(mesh: Mesh, area_eps: float = 1e-14) -> Mesh:
    """Merge the closest vertex pair of facets with area below ``area_eps``.

    A collapse is rejected when the result fails validation or changes the
    Euler characteristic of any body boundary.
    """
    from foamcluster.topo import body_boundary_chi

    areas = mesh.facet_areas()
    bad = np.flatnonzero(areas < area_eps)
    if len(bad) == 0:
        return mesh
    out = mesh
    chi0 = body_boundary_chi(mesh)
    kind, _ = vertex_classes(mesh)
    for fi in bad:
        if fi >= out.n_facets:
            continue
        tri = out.facets[fi]
        p = out.vertices[tri]
        lens = [np.linalg.norm(p[(k + 1) % 3] - p[k]) for k in range(3)]
        k = int(np.argmin(lens))
        i, j = int(tri[k]), int(tri[(k + 1) % 3])
        keep, drop = (i, j) if kind[i] >= kind[j] else (j, i)
        facets = out.facets.copy()
        facets[facets == drop] = keep
        alive = (facets[:, 0] != facets[:, 1]) & (facets[:, 1] != facets[:, 2]) & (facets[:, 0] != facets[:, 2])
        cand = Mesh(out.vertices, facets[alive], out.labels[alive], out.body_count)
        try:
            validate(cand)
        except MeshError:
            continue
        if body_boundary_chi(cand) != chi0:
            continue
        out = _drop_unused_vertices(cand)
        kind, _ = vertex_classes(out)
    return out


def orient_canonically(mesh: Mesh) -> Mesh:
    """Reorient facets so the smaller body id of each pair is in front.

    Reversing a facet and swapping its labels describes the same film, so
    this changes no measure; it makes every interface consistently oriented.
    """
    swap = mesh.labels[:, 0] > mesh.labels[:, 1]
    if not swap.any():
        return mesh
    facets = mesh.facets.copy()
    labels = mesh.labels.copy()
    facets[swap] = facets[swap][:, [0, 2, 1]]
    labels[swap] = labels[swap][:, ::-1]
    return Mesh(mesh.vertices, facets, labels, mesh.body_count)


def _vertex_facets(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    flat = mesh.facets.ravel()
    order = np.argsort(flat, kind="stable")
    offsets = np.concatenate([[0], np.cumsum(np.bincount(flat, minlength=mesh.n_vertices))])
    return offsets, order // 3


def collapse_short_edges(mesh: Mesh, min_length: float, max_rounds: int = 10) -> Mesh:
    """Collapse edges shorter than ``min_length`` without changing topology.

    The surviving vertex is the more constrained endpoint (junction over
    border curve over film interior); two film-interior endpoints merge at the
    midpoint and two vertices of one border curve merge at the midpoint of
    that border edge.  A collapse is skipped when both endpoints are
    junctions, when it would pinch a film between two borders, when the link
    condition fails (the endpoints share a neighbour not opposite the edge),
    or when a surviving facet would turn over or degenerate.
    """
    from foamcluster.topo import body_boundary_chi

    out = mesh
    chi0 = body_boundary_chi(mesh)
    for _ in range(max_rounds):
        et = out.edge_table
        L = out.edge_lengths()
        short = np.flatnonzero(L < min_length)
        if len(short) == 0:
            break
        short = short[np.argsort(L[short], kind="stable")]
        kind, _ = vertex_classes(out)
        is_border = np.zeros(len(et.edges), dtype=bool)
        is_border[border_edges(out)] = True
        voff, vfac = _vertex_facets(out)
        eoff, efac = et.incidence
        P = out.vertices.copy()
        facets = out.facets.copy()
        dead = np.zeros(out.n_facets, dtype=bool)
        locked = np.zeros(out.n_vertices, dtype=bool)
        done = 0
        for e in short:
            a, b = (int(x) for x in et.edges[e])
            if locked[a] or locked[b]:
                continue
            ka, kb = kind[a], kind[b]
            if ka == 2 and kb == 2:
                continue
            if ka >= 1 and kb >= 1 and not is_border[e]:
                continue
            if ka < kb or (ka == kb and a > b):
                a, b = b, a
                ka, kb = kb, ka
            # a survives; b is removed
            if ka == kb and ka < 2:
                target = 0.5 * (P[a] + P[b])
            else:
                target = P[a]
            fa = vfac[voff[a]:voff[a + 1]]
            fb = vfac[voff[b]:voff[b + 1]]
            fe = efac[eoff[e]:eoff[e + 1]]
            opposite = set(int(x) for x in facets[fe].ravel()) - {a, b}
            na = set(int(x) for x in facets[fa].ravel()) - {a}
            nb = set(int(x) for x in facets[fb].ravel()) - {b}
            if (na & nb) != opposite or len(opposite) != len(fe):
                continue
            moved = np.setdiff1d(np.union1d(fa, fb), fe)
            old = P[facets[moved]]
            tri = facets[moved].copy()
            tri[tri == b] = a
            Pn = P.copy()
            Pn[a] = target
            new = Pn[tri]
            n_old = np.cross(old[:, 1] - old[:, 0], old[:, 2] - old[:, 0])
            n_new = np.cross(new[:, 1] - new[:, 0], new[:, 2] - new[:, 0])
            ln = np.linalg.norm(n_new, axis=1)
            lo = np.linalg.norm(n_old, axis=1)
            if (np.einsum("ij,ij->i", n_old, n_new) <= 0.2 * lo * ln).any() or (ln <= 1e-3 * lo.max()).any():
                continue
            facets[moved] = tri
            P[a] = target
            dead[fe] = True
            ring = np.unique(facets[np.union1d(fa, fb)])
            locked[ring] = True
            locked[b] = True
            done += 1
        if done == 0:
            break
        cand = _drop_unused_vertices(Mesh(P, facets[~dead], out.labels[~dead], out.body_count))
        try:
            validate(cand)
        except MeshError:
            break
        if body_boundary_chi(cand) != chi0:
            break
        out = cand
    return out


def _drop_unused_vertices(mesh: Mesh) -> Mesh:
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[mesh.facets.ravel()] = True
    if used.all():
        return mesh
    remap = np.cumsum(used) - 1
    return Mesh(mesh.vertices[used], remap[mesh.facets], mesh.labels, mesh.body_count)


def _perp_pair(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors spanning the plane orthogonal to each row of ``t``."""
    helper = np.zeros_like(t)
    helper[np.arange(len(t)), np.argmin(np.abs(t), axis=1)] = 1.0
    a = np.cross(t, helper)
    a /= np.linalg.norm(a, axis=1)[:, None]
    return a, np.cross(t, a)


class ShapeBasis:
    """Orthonormal frame of the shape-changing motions of every vertex.

    A film-interior vertex moves along its normal, a vertex on a border curve
    moves in the plane orthogonal to the curve, and junction vertices move
    freely.  Tangential slides within a film only reparametrize the surface.
    The vertex classification is computed once; :meth:`matrix` rebuilds the
    frame for new positions.
    """

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        kind, _ = vertex_classes(mesh)
        self.kind = kind
        curve = np.flatnonzero(kind == 1)
        if len(curve):
            self._curve = curve_neighbours(mesh, curve)
        else:
            e = np.zeros(0, dtype=np.int64)
            self._curve = (e, e, e)

    def matrix(self, vertices: np.ndarray | None = None) -> sparse.csr_matrix:
        mesh = self.mesh
        P = mesh.vertices if vertices is None else vertices
        nv = mesh.n_vertices
        normals = vertex_normals(mesh.with_vertices(P)) if vertices is not None else vertex_normals(mesh)
        nn = np.linalg.norm(normals, axis=1)
        tang = np.zeros((nv, 3))
        v, n1, n2 = self._curve
        tang[v] = P[n2] - P[n1]
        tn = np.linalg.norm(tang, axis=1)
        one = (self.kind == 0) & (nn > 0)
        two = (self.kind == 1) & (tn > 0)
        three = ~(one | two)
        ndof = np.where(one, 1, np.where(two, 2, 3))
        start = np.concatenate([[0], np.cumsum(ndof)[:-1]])
        rows, cols, vals = [], [], []

        def put(vs, vecs, slot):
            for j in range(3):
                rows.append(3 * vs + j)
                cols.append(start[vs] + slot)
                vals.append(vecs[:, j])

        vs = np.flatnonzero(one)
        put(vs, normals[vs] / nn[vs, None], 0)
        vs = np.flatnonzero(two)
        a, b = _perp_pair(tang[vs] / tn[vs, None])
        put(vs, a, 0)
        put(vs, b, 1)
        vs = np.flatnonzero(three)
        for j in range(3):
            e = np.zeros((len(vs), 3))
            e[:, j] = 1.0
            put(vs, e, j)
        Q = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(3 * nv, int(ndof.sum())))
        return Q.tocsr()

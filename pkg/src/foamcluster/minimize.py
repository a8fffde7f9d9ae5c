"""Volume-constrained descent of the tension-weighted film area."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from foamcluster.measure import (
    Measures,
    TensionTable,
    VolumeGradients,
    body_volumes,
    energy,
    energy_and_gradient,
    measures,
)
from foamcluster.mesh import (
    Mesh,
    ShapeBasis,
    min_angles,
    collapse_degenerate,
    collapse_short_edges,
    equiangulate,
    orient_canonically,
    refine_to,
    vertex_average,
)

log = logging.getLogger(__name__)


class MinimizeError(RuntimeError):
    pass


class SingularGram(MinimizeError):
    pass


class NoConvergence(MinimizeError):
    pass


class StallDetected(MinimizeError):
    pass


@dataclass
class OptimizerConfig:
    """Descent settings.

    ``grad_tol`` is an absolute bound on the Euclidean norm of the projected
    gradient; ``None`` means 1e-8 times the starting energy.  ``max_iters``
    applies per discretization level.  ``method`` is ``"gradient"`` (steepest
    descent on the constraint tangent space) or ``"cg"`` (Polak-Ribiere
    conjugate directions on the same space).  ``motion="normal"`` restricts
    vertex motion to shape-changing directions (see
    :class:`~foamcluster.mesh.ShapeBasis`); tangential slides, which only
    reparametrize the films, are then left to polishing.
    """

    grad_tol: float | None = None
    vol_tol: float = 1e-10
    max_iters: int = 1000
    polish_every: int = 50
    refine_schedule: tuple[float, ...] = ()
    method: str = "gradient"
    energy_tol: float = 0.0
    patch_collapse: float = 1e-6
    motion: str = "full"
    max_move: float | None = 0.5
    sliver_angle: float | None = 5.0

    def __post_init__(self):
        self.refine_schedule = tuple(float(h) for h in self.refine_schedule)
        if self.grad_tol is not None and not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if not self.vol_tol > 0:
            raise ValueError("vol_tol must be positive")
        if any(b >= a for a, b in zip(self.refine_schedule, self.refine_schedule[1:])):
            raise ValueError("refine_schedule must be strictly decreasing")
        if any(h <= 0 for h in self.refine_schedule):
            raise ValueError("refine_schedule entries must be positive")
        if self.method not in ("gradient", "cg"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.max_move is not None and not self.max_move > 0:
            raise ValueError("max_move must be positive")
        if self.motion not in ("full", "normal"):
            raise ValueError(f"unknown motion {self.motion!r}")
        if self.polish_every < 0 or self.max_iters < 0:
            raise ValueError("iteration counts must be nonnegative")


@dataclass
class TraceRow:
    iteration: int
    h_max: float
    energy: float
    total_area: float
    max_vol_err: float
    grad_norm: float
    polished: bool = False  # the mesh was polished just before this step


@dataclass
class LevelResult:
    h_max: float
    iterations: int
    converged: bool
    energy: float
    grad_norm: float
    mesh: Mesh = field(repr=False)


@dataclass
class MinimizeResult:
    mesh: Mesh
    measures: Measures
    iterations: int
    converged: bool
    h_max: float | None
    trace: list[TraceRow]
    status: str = "converged"  # converged | not_converged | topology_contact
    grad_norm: float = float("nan")
    grad_tol: float = float("nan")
    levels: list[LevelResult] = field(default_factory=list)
    targets: np.ndarray | None = None

    def write_trace(self, path) -> None:
        write_trace(self.trace, path)


def write_trace(trace: list[TraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "h_max", "energy", "total_area", "max_vol_err"])
        for r in trace:
            w.writerow([r.iteration, repr(r.h_max), repr(r.energy), repr(r.total_area), repr(r.max_vol_err)])


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _rel_vol_err(vol: np.ndarray, targets: np.ndarray) -> np.ndarray:
    return np.abs(vol - targets) / np.abs(targets)


def _solve_gram(G: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.diag(G))
    if (d <= 0).any():
        raise SingularGram("a body has a vanishing volume gradient")
    Gs = G / np.outer(d, d)
    if np.linalg.cond(Gs) > 1e12:
        raise SingularGram("volume gradients are linearly dependent")
    return np.linalg.solve(Gs, rhs / d) / d


class Descender:
    """Descent state for one mesh connectivity.

    Positions are held as a flat array and updated in place; the mesh object
    is rebuilt only when connectivity changes (refinement or polishing).
    """

    def __init__(self, mesh: Mesh, tensions: TensionTable, targets: np.ndarray, cfg: OptimizerConfig,
                 alpha: float | None = None):
        self.mesh = mesh
        self.gamma = tensions.facet_tensions(mesh.labels)
        self.targets = np.asarray(targets, dtype=float)
        if len(self.targets) != mesh.body_count:
            raise ValueError(f"expected {mesh.body_count} target volumes, got {len(self.targets)}")
        if (self.targets <= 0).any():
            raise ValueError("target volumes must be positive")
        self.cfg = cfg
        self.vg = VolumeGradients(mesh)
        self.shape = ShapeBasis(mesh) if cfg.motion == "normal" else None
        self.X = mesh.vertices.copy()
        self.alpha = alpha
        self.scale = mesh.diameter()
        self._d_prev = None
        self._g_prev = None

    def _edge_scale(self) -> np.ndarray:
        e = self.mesh.edges
        L = np.linalg.norm(self.X[e[:, 1]] - self.X[e[:, 0]], axis=1)
        nv = self.mesh.n_vertices
        tot = np.bincount(e[:, 0], weights=L, minlength=nv) + np.bincount(e[:, 1], weights=L, minlength=nv)
        cnt = np.bincount(e.ravel(), minlength=nv)
        return tot / np.maximum(cnt, 1)

    def sliver_count(self, angle_deg: float) -> int:
        p = self.X[self.mesh.facets]
        return int((min_angles(p[:, 0], p[:, 1], p[:, 2]) < np.radians(angle_deg)).sum())

    def current_mesh(self) -> Mesh:
        return self.mesh.with_vertices(self.X.copy())

    def _frame(self, X):
        """Volume gradients in motion coordinates and the map back to xyz."""
        A = self.vg.matrix(X)
        if self.shape is None:
            return A, None
        Q = self.shape.matrix(X)
        return (Q.T @ A).tocsc(), Q

    def projected_gradient(self, X=None):
        X = self.X if X is None else X
        E, g = energy_and_gradient(self.mesh, self.gamma, X)
        A, Q = self._frame(X)
        G = (A.T @ A).toarray()
        gf = g.ravel() if Q is None else Q.T @ g.ravel()
        mu = _solve_gram(G, A.T @ gf)
        gp = gf - A @ mu
        return E, gp, A, G, Q

    def project_volumes(self, max_iter: int = 20) -> np.ndarray:
        tol = self.cfg.vol_tol
        for _ in range(max_iter + 1):
            vol = body_volumes(self.mesh, self.X)
            err = _rel_vol_err(vol, self.targets)
            if err.max() <= tol:
                return vol
            A, Q = self._frame(self.X)
            G = (A.T @ A).toarray()
            mu = _solve_gram(G, self.targets - vol)
            step = A @ mu
            self.X += (step if Q is None else Q @ step).reshape(-1, 3)
        raise NoConvergence(f"volume projection still off by {err.max():.3e} after {max_iter} iterations")

    def reset_directions(self):
        self._d_prev = None
        self._g_prev = None

    def step(self):
        """One projected descent step; returns (energy, projected grad norm)."""
        E0, gp, A, G, Q = self.projected_gradient()
        gnorm = float(np.linalg.norm(gp))
        if gnorm == 0.0:
            return E0, 0.0
        d = -gp
        if self.cfg.method == "cg" and self._d_prev is not None and len(self._d_prev) == len(gp):
            y = gp - self._g_prev
            beta = max(0.0, float(gp @ y) / float(self._g_prev @ self._g_prev))
            d = -gp + beta * self._d_prev
            d -= A @ _solve_gram(G, A.T @ d)
            if d @ gp >= 0:
                d = -gp
        slope = float(d @ gp)
        if self.alpha is None:
            self.alpha = E0 / gnorm**2
        alpha = self.alpha
        D = (d if Q is None else Q @ d).reshape(-1, 3)
        dmax = float(np.abs(D).max())
        cap = np.inf
        if self.cfg.max_move is not None:
            # trust region: no vertex travels more than a fraction of its edges
            reach = self.cfg.max_move * self._edge_scale()
            dn = np.linalg.norm(D, axis=1)
            moving = dn > 0
            if moving.any():
                cap = float((reach[moving] / dn[moving]).min())
                alpha = min(alpha, cap)
        while True:
            E1 = energy(self.mesh, self.gamma, self.X + alpha * D)
            if E1 < E0:
                break
            alpha *= 0.5
            if alpha * dmax < 1e-16 * self.scale:
                raise StallDetected(f"no energy decrease down to step {alpha:.3e}")
        curv = (E1 - E0 - slope * alpha) / alpha**2
        if curv > 0:
            t = -slope / (2 * curv)
            if 0 < t < min(8 * alpha, cap) and abs(t - alpha) > 1e-3 * alpha:
                E2 = energy(self.mesh, self.gamma, self.X + t * D)
                if E2 < E1:
                    alpha, E1 = t, E2
        # the volume re-projection adds a second-order energy change; keep
        # shortening the step until the projected energy is no higher either
        X0 = self.X
        allowed = E0 + 10 * self.cfg.vol_tol * abs(E0)
        while True:
            self.X = X0 + alpha * D
            self.project_volumes()
            E1 = energy(self.mesh, self.gamma, self.X)
            if E1 <= allowed:
                break
            alpha *= 0.5
            if alpha * dmax < 1e-16 * self.scale:
                self.X = X0
                raise StallDetected(f"no decrease after volume projection down to step {alpha:.3e}")
        self.alpha = 2 * alpha
        self._d_prev = d
        self._g_prev = gp
        return E1, gnorm


def project_volumes(mesh: Mesh, targets, vol_tol: float = 1e-10) -> Mesh:
    """Newton projection of the body volumes onto ``targets``.

    Each iteration moves the vertices by a combination of the body volume
    gradients, solving the Gram system for the coefficients.
    """
    cfg = OptimizerConfig(vol_tol=vol_tol)
    if (np.asarray(targets, dtype=float) <= 0).any():
        raise NoConvergence("no embedded cluster has a body of nonpositive volume")
    d = Descender(mesh, TensionTable(), targets, cfg)
    vol = body_volumes(mesh)
    if _rel_vol_err(vol, d.targets).max() <= vol_tol:
        return mesh
    d.project_volumes()
    out = d.current_mesh()
    # signed volumes can hit any target by turning facets inside out; such a
    # "solution" is not an embedded cluster
    if (np.einsum("ij,ij->i", _facet_normals(mesh), _facet_normals(out)) <= 0).any():
        raise NoConvergence("volume targets are only reachable by inverting facets")
    return out


def _facet_normals(mesh: Mesh) -> np.ndarray:
    p = mesh.vertices[mesh.facets]
    return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])


def descent_step(mesh: Mesh, tensions: TensionTable, targets, cfg: OptimizerConfig,
                 alpha: float | None = None) -> tuple[Mesh, float]:
    d = Descender(mesh, tensions, targets, cfg, alpha=alpha)
    E, _ = d.step()
    return d.current_mesh(), E


def polish(mesh: Mesh, h_max: float | None, short_fraction: float = 0.2) -> Mesh:
    """Mesh upkeep between descent runs.

    Collapses edges shorter than ``short_fraction * h_max``, flips toward
    equiangular triangles, averages vertices tangentially and re-refines to
    ``h_max`` (the current longest edge when ``h_max`` is None).
    """
    h = h_max if h_max is not None else float(mesh.edge_lengths().max())
    out = orient_canonically(mesh)
    out = collapse_short_edges(out, short_fraction * h)
    out = equiangulate(out)
    out = vertex_average(out)
    out = collapse_degenerate(out)
    return refine_to(out, h)


def _patch_areas(mesh: Mesh, keys: np.ndarray | None = None):
    pairs = np.sort(mesh.labels, axis=1)
    key = pairs[:, 0] * (mesh.body_count + 1) + pairs[:, 1]
    uniq, inv = np.unique(key, return_inverse=True)
    return uniq, np.bincount(inv, weights=mesh.facet_areas())


def run_minimize(mesh: Mesh, tensions: TensionTable, targets=None, cfg: OptimizerConfig | None = None,
                 callback=None) -> MinimizeResult:
    """Descend level by level through ``cfg.refine_schedule``.

    Without a schedule the mesh is minimized at its current discretization.
    Polishing (equiangulation, vertex averaging, re-refinement and volume
    re-projection) runs every ``cfg.polish_every`` iterations.
    """
    cfg = cfg or OptimizerConfig()
    targets = body_volumes(mesh) if targets is None else np.asarray(targets, dtype=float)
    if (mesh.edge_table.valence >= 4).any():
        m = measures(mesh, tensions)
        return MinimizeResult(mesh, m, 0, False, None, [], status="topology_contact", targets=targets)
    grad_tol = cfg.grad_tol if cfg.grad_tol is not None else 1e-8 * measures(mesh, tensions).energy
    schedule = cfg.refine_schedule or (None,)
    pair_keys, area0 = _patch_areas(mesh)
    trace: list[TraceRow] = []
    levels: list[LevelResult] = []
    total = 0
    status = "not_converged"
    alpha = None
    gnorm = float("inf")
    current = mesh
    for h in schedule:
        if h is not None:
            current = refine_to(current, h)
        desc = Descender(current, tensions, targets, cfg, alpha=alpha)
        desc.project_volumes()
        level_conv = False
        e_mark = None
        it = 0
        for it in range(1, cfg.max_iters + 1):
            due = cfg.polish_every and it > 1 and (it - 1) % cfg.polish_every == 0
            if not due and cfg.polish_every and cfg.sliver_angle is not None and it > 1:
                due = desc.sliver_count(cfg.sliver_angle) > 2 + 1e-3 * desc.mesh.n_facets
            if due:
                current = polish(desc.current_mesh(), h)
                keys, areas = _patch_areas(current)
                if len(keys) != len(pair_keys) or (areas < cfg.patch_collapse * area0).any():
                    status = "topology_contact"
                    break
                desc = Descender(current, tensions, targets, cfg, alpha=desc.alpha)
                desc.project_volumes()
                E_now = energy(current, desc.gamma, desc.X)
                if cfg.energy_tol and e_mark is not None and (e_mark - E_now) <= cfg.energy_tol * abs(E_now):
                    break
                e_mark = E_now
            try:
                E, gnorm = desc.step()
            except StallDetected:
                E, gp, *_ = desc.projected_gradient()
                gnorm = float(np.linalg.norm(gp))
                level_conv = gnorm <= grad_tol
                break
            total += 1
            vol = body_volumes(desc.mesh, desc.X)
            area = float(desc.mesh.with_vertices(desc.X).facet_areas().sum())
            row = TraceRow(total, h if h is not None else float("nan"), E, area,
                           float(_rel_vol_err(vol, targets).max()), gnorm, bool(due))
            trace.append(row)
            if callback is not None:
                callback(row)
            if gnorm <= grad_tol:
                level_conv = True
                break
        current = desc.current_mesh()
        alpha = desc.alpha
        E_end, gp, *_ = desc.projected_gradient()
        gnorm = float(np.linalg.norm(gp))
        level_conv = level_conv or gnorm <= grad_tol
        levels.append(LevelResult(h if h is not None else float("nan"), it, level_conv, E_end, gnorm, current))
        log.info("level h=%s: %d iterations, energy %.6f, |g_proj| %.3e", h, it, E_end, gnorm)
        if status == "topology_contact":
            break
    converged = status != "topology_contact" and bool(levels) and levels[-1].converged
    if status != "topology_contact":
        status = "converged" if converged else "not_converged"
    return MinimizeResult(current, measures(current, tensions), total, converged,
                          schedule[-1], trace, status, gnorm, grad_tol, levels, targets)

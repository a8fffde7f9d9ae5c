"""Second variation of the film energy, constrained extreme eigenvalues and
perturbation probes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh, splu

from foamcluster.measure import TensionTable, VolumeGradients, energy_and_gradient, measures, rigid_fields
from foamcluster.mesh import Mesh, ShapeBasis

log = logging.getLogger(__name__)


class IterationLimit(RuntimeError):
    """Eigen-iteration stopped early; ``estimate`` holds the best values."""

    def __init__(self, msg: str, estimate: tuple[float, float]):
        super().__init__(msg)
        self.estimate = estimate


def _cross_mats(w: np.ndarray) -> np.ndarray:
    """(n, 3) -> (n, 3, 3) matrices with ``X[i] @ v == cross(w[i], v)``."""
    X = np.zeros(w.shape[:-1] + (3, 3))
    X[..., 0, 1] = -w[..., 2]
    X[..., 0, 2] = w[..., 1]
    X[..., 1, 0] = w[..., 2]
    X[..., 1, 2] = -w[..., 0]
    X[..., 2, 0] = -w[..., 1]
    X[..., 2, 1] = w[..., 0]
    return X


_PAIRS = ((0, 1, 2), (1, 2, 0), (2, 0, 1))


def facet_area_hessians(p: np.ndarray) -> np.ndarray:
    """Hessian of each triangle area w.r.t. its 9 corner coordinates.

    ``p`` has shape (F, 3, 3) (facet, corner, xyz); returns (F, 9, 9).
    With n = (p1 - p0) x (p2 - p0) and J = dn/dx the area is |n|/2 and

        d2A = (J'J + K) / (2|n|) - (J'n)(J'n)' / (2|n|^3)

    where K is the Hessian of the bilinear map x -> n(x).w at w = n.
    """
    F = len(p)
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    nn = np.linalg.norm(n, axis=1)
    J = np.concatenate([_cross_mats(p[:, 2] - p[:, 1]), _cross_mats(p[:, 0] - p[:, 2]),
                        _cross_mats(p[:, 1] - p[:, 0])], axis=2)
    K = np.zeros((F, 9, 9))
    Wx = _cross_mats(n)
    for a, b, _ in _PAIRS:
        K[:, 3 * a:3 * a + 3, 3 * b:3 * b + 3] = -Wx
        K[:, 3 * b:3 * b + 3, 3 * a:3 * a + 3] = Wx
    Jn = np.einsum("fki,fk->fi", J, n)
    with np.errstate(invalid="ignore", divide="ignore"):
        H = (np.einsum("fki,fkj->fij", J, J) + K) / (2 * nn)[:, None, None]
        H -= np.einsum("fi,fj->fij", Jn, Jn) / (2 * nn**3)[:, None, None]
    H[nn == 0] = 0.0
    return H


def facet_volume_hessians(p: np.ndarray) -> np.ndarray:
    """Hessian of p0.(p1 x p2)/6 w.r.t. the 9 corner coordinates."""
    H = np.zeros((len(p), 9, 9))
    for a, b, c in _PAIRS:
        X = _cross_mats(p[:, c]) / 6.0
        H[:, 3 * a:3 * a + 3, 3 * b:3 * b + 3] = -X
        H[:, 3 * b:3 * b + 3, 3 * a:3 * a + 3] = X
    return H


def _assemble(mesh: Mesh, blocks: np.ndarray) -> sparse.csr_matrix:
    idx = (3 * mesh.facets[:, :, None] + np.arange(3)).reshape(-1, 9)
    rows = np.repeat(idx, 9, axis=1).ravel()
    cols = np.tile(idx, (1, 9)).ravel()
    n = 3 * mesh.n_vertices
    H = sparse.coo_matrix((blocks.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    H.sum_duplicates()
    # exact symmetry regardless of accumulation order
    return ((H + H.T) * 0.5).tocsr()


def assemble_hessian(mesh: Mesh, tensions: TensionTable) -> sparse.csr_matrix:
    """Exact Hessian of the tension-weighted area, shape (3V, 3V)."""
    gamma = tensions.facet_tensions(mesh.labels)
    H = facet_area_hessians(mesh.vertices[mesh.facets])
    return _assemble(mesh, H * gamma[:, None, None])


def volume_hessian(mesh: Mesh, b: int) -> sparse.csr_matrix:
    sign = (mesh.labels[:, 0] == b).astype(float) - (mesh.labels[:, 1] == b).astype(float)
    H = facet_volume_hessians(mesh.vertices[mesh.facets])
    return _assemble(mesh, H * sign[:, None, None])


def pressures(mesh: Mesh, tensions: TensionTable) -> np.ndarray:
    """Least-squares Lagrange multipliers: grad E ~ sum_b mu_b grad V_b."""
    gamma = tensions.facet_tensions(mesh.labels)
    _, g = energy_and_gradient(mesh, gamma)
    A = VolumeGradients(mesh).matrix()
    G = (A.T @ A).toarray()
    return np.linalg.solve(G, A.T @ g.ravel())


def lagrangian_hessian(mesh: Mesh, tensions: TensionTable, mu: np.ndarray | None = None) -> sparse.csr_matrix:
    """Hessian of E - sum_b mu_b V_b, the second variation under fixed volumes."""
    if mu is None:
        mu = pressures(mesh, tensions)
    mu0 = np.concatenate([[0.0], mu])
    gamma = tensions.facet_tensions(mesh.labels)
    cv = mu0[mesh.labels[:, 0]] - mu0[mesh.labels[:, 1]]
    p = mesh.vertices[mesh.facets]
    blocks = facet_area_hessians(p) * gamma[:, None, None] - facet_volume_hessians(p) * cv[:, None, None]
    return _assemble(mesh, blocks)


def normal_basis(mesh: Mesh) -> sparse.csr_matrix:
    """Orthonormal columns spanning the shape-changing vertex motions."""
    return ShapeBasis(mesh).matrix()


def _as_columns(fields, n: int) -> np.ndarray:
    cols = [np.asarray(f, dtype=float).reshape(-1) for f in fields]
    if not cols:
        return np.zeros((n, 0))
    C = np.stack(cols, axis=1)
    if C.shape[0] != n:
        raise ValueError(f"constraint field has {C.shape[0]} entries, expected {n}")
    return C


def _independent(C: np.ndarray, rtol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Drop (nearly) dependent columns; return (kept columns, orthonormal basis)."""
    if C.shape[1] == 0:
        return C, C
    norms = np.linalg.norm(C, axis=0)
    C = C[:, norms > 0] / norms[norms > 0]
    keep = []
    basis = np.zeros((C.shape[0], 0))
    for j in range(C.shape[1]):
        r = C[:, j] - basis @ (basis.T @ C[:, j])
        r -= basis @ (basis.T @ r)
        nr = np.linalg.norm(r)
        if nr > np.sqrt(rtol):
            keep.append(j)
            basis = np.column_stack([basis, r / nr])
    return C[:, keep], basis


@dataclass
class EigenSummary:
    lambda_min: float
    lambda_max: float
    dimension: int
    constraints: int
    converged: bool = True
    low_eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # columns are the eigenvectors for ``low_eigenvalues`` (in the basis coordinates)
    low_vectors: np.ndarray | None = field(default=None, repr=False)


def _eigsh_safe(*args, **kw):
    try:
        return eigsh(*args, **kw), True
    except ArpackNoConvergence as exc:
        return (exc.eigenvalues, exc.eigenvectors), False


def constrained_spectrum(H, constraint_gradients, rigid, basis=None, tol: float = 1e-10,
                         n_low: int = 4, seed: int = 0) -> EigenSummary:
    """Extreme eigenvalues of H on the orthogonal complement of the constraints.

    ``basis`` optionally restricts the problem to a subspace first (columns
    orthonormal), in which case the constraint fields are projected into it.
    The largest eigenvalue comes from Lanczos on the projected operator; the
    smallest from shift-invert about zero, where each inverse application
    solves the bordered system [[H, C], [C', 0]] with a sparse LU factor.
    """
    H = sparse.csr_matrix(H)
    n0 = H.shape[0]
    C = _as_columns(list(constraint_gradients) + list(rigid), n0)
    if basis is not None:
        basis = sparse.csr_matrix(basis)
        H = (basis.T @ H @ basis).tocsc()
        C = basis.T @ C
    n = H.shape[0]
    C, U = _independent(C)
    k = C.shape[1]
    m = n - k
    if m < 1:
        raise ValueError("constraints leave no free directions")
    rng = np.random.default_rng(seed)

    def project(x):
        return x - U @ (U.T @ x)

    v0 = project(rng.standard_normal(n))
    bound = float(abs(H).sum(axis=1).max()) + 1.0

    if m == 1:
        u = project(v0)
        u /= np.linalg.norm(u)
        lam = float(u @ (H @ u))
        return EigenSummary(lam, lam, m, k)

    if n <= 2:
        raise ValueError("problem too small for iterative eigensolvers")

    def down(x):
        x = np.asarray(x).ravel()
        y = project(H @ project(x))
        return y - bound * (U @ (U.T @ x))

    def up(x):
        x = np.asarray(x).ravel()
        y = project(H @ project(x))
        return y + bound * (U @ (U.T @ x))

    ok = True
    (vals, _), conv = _eigsh_safe(LinearOperator((n, n), matvec=down, dtype=float), k=1, which="LA",
                                 v0=v0, tol=tol, maxiter=max(1000, 10 * n))
    ok &= conv
    lam_max = float(np.max(vals)) if len(vals) else float("nan")

    sigma = 0.0
    lu = None
    for sigma in (0.0, -1e-8 * abs(lam_max), -1e-5 * abs(lam_max)):
        K = sparse.bmat([[H - sigma * sparse.identity(n), sparse.csc_matrix(C)],
                         [sparse.csc_matrix(C.T), None]], format="csc")
        try:
            lu = splu(K, permc_spec="MMD_AT_PLUS_A")
            break
        except RuntimeError:
            continue
    if lu is None:
        raise IterationLimit("bordered system is singular for every shift", (float("nan"), lam_max))

    def inv(x):
        x = np.asarray(x).ravel()
        y = lu.solve(np.concatenate([project(x), np.zeros(k)]))[:n]
        return project(y)

    nev = min(n_low, m - 1, n - 1)
    OPinv = LinearOperator((n, n), matvec=inv, dtype=float)
    A = LinearOperator((n, n), matvec=lambda x: project(H @ project(np.asarray(x).ravel())), dtype=float)
    (vals, vecs), conv = _eigsh_safe(A, k=nev, sigma=sigma, which="LM", OPinv=OPinv, v0=v0, tol=tol,
                                    maxiter=max(1000, 10 * n))
    ok &= conv
    order = np.argsort(np.asarray(vals, dtype=float))
    low = np.asarray(vals, dtype=float)[order]
    vecs = None if vecs is None else np.asarray(vecs)[:, order]
    lam_min = float(low[0]) if len(low) else float("nan")

    # shift-invert about zero finds the eigenvalues nearest zero; a strongly
    # negative eigenvalue would sit at the low end of the spectrum instead
    if m - 1 > 1:
        (sa, _), _ = _eigsh_safe(LinearOperator((n, n), matvec=up, dtype=float), k=1, which="SA", v0=v0,
                                tol=1e-6, maxiter=200)
        if len(sa) and float(sa[0]) < lam_min:
            lam_min = float(sa[0])
    if not ok:
        raise IterationLimit("eigen-iteration did not converge", (lam_min, lam_max))
    return EigenSummary(lam_min, lam_max, m, k, True, low, vecs)


def constrained_extreme_eigenvalues(H, constraint_gradients, rigid_fields, tol: float = 1e-10) -> tuple[float, float]:
    s = constrained_spectrum(H, constraint_gradients, rigid_fields, tol=tol)
    return s.lambda_min, s.lambda_max


@dataclass
class StabilityReport:
    lambda_min: float
    lambda_max: float
    h_max: float | None
    rigid_modes_removed: int
    volume_constraints: int
    verdict: str
    dimension: int = 0
    converged: bool = True
    marginal_band: float = 1e-12

    def as_dict(self) -> dict:
        return {
            "h_max": self.h_max,
            "lambda_min": self.lambda_min,
            "lambda_max": self.lambda_max,
            "rigid_modes_removed": self.rigid_modes_removed,
            "volume_constraints": self.volume_constraints,
            "verdict": self.verdict,
            "dimension": self.dimension,
            "converged": self.converged,
        }


def verdict_for(lam_min: float, lam_max: float, band: float = 1e-12) -> str:
    tol = band * abs(lam_max)
    if lam_min > tol:
        return "stable"
    if lam_min < -tol:
        return "unstable"
    return "marginal"


def stability_report(mesh: Mesh, tensions: TensionTable, h_max: float | None = None, normal_only: bool = True,
                     band: float = 1e-12, tol: float = 1e-10) -> StabilityReport:
    """Constrained extreme eigenvalues of the second variation at ``mesh``.

    The operator is the Hessian of the Lagrangian E - sum mu_b V_b, with the
    multipliers fitted to the current gradient, restricted to shape-changing
    motions (see :func:`normal_basis`) when ``normal_only`` is set.  Volume
    gradients and the six rigid motions are deflated.
    """
    H = lagrangian_hessian(mesh, tensions)
    A = VolumeGradients(mesh).matrix().toarray()
    vol = [A[:, j] for j in range(A.shape[1])]
    rigid = rigid_fields(mesh.vertices)
    basis = normal_basis(mesh) if normal_only else None
    converged = True
    try:
        s = constrained_spectrum(H, vol, rigid, basis=basis, tol=tol)
        lmin, lmax, dim = s.lambda_min, s.lambda_max, s.dimension
    except IterationLimit as exc:
        lmin, lmax = exc.estimate
        dim, converged = 0, False
    return StabilityReport(lmin, lmax, h_max, len(rigid), len(vol), verdict_for(lmin, lmax, band), dim,
                           converged, band)


# ---- perturbation probes ----


@dataclass
class JiggleParams:
    temperature: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not self.temperature >= 0:
            raise ValueError("temperature must be nonnegative")


@dataclass
class LongJiggleParams:
    """Coherent perturbation x -> x + amplitude * sin(wavevector . x + phase).

    Fields left as ``None`` are drawn from ``seed``: a uniformly random
    wavevector direction with one wavelength across the mesh, a uniform phase,
    and an amplitude of random direction and magnitude up to 5% of the mesh
    diameter.
    """

    wavevector: tuple[float, float, float] | None = None
    phase: float | None = None
    amplitude: tuple[float, float, float] | None = None
    seed: int = 0

    def resolve(self, mesh: Mesh) -> "LongJiggleParams":
        rng = np.random.default_rng(self.seed)
        diam = mesh.diameter()
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        phase = rng.uniform(0.0, 2 * np.pi)
        adir = rng.standard_normal(3)
        adir /= np.linalg.norm(adir)
        amag = 0.05 * diam * (1.0 - rng.uniform())
        k = self.wavevector if self.wavevector is not None else tuple(2 * np.pi / diam * direction)
        out = replace(self, wavevector=tuple(float(x) for x in k),
                      phase=float(self.phase if self.phase is not None else phase),
                      amplitude=tuple(float(x) for x in (self.amplitude if self.amplitude is not None else amag * adir)))
        if not all(np.isfinite(out.wavevector)) or not np.isfinite(out.phase) or not all(np.isfinite(out.amplitude)):
            raise ValueError("long jiggle parameters must be finite")
        return out


def mean_incident_edge_length(mesh: Mesh) -> np.ndarray:
    e = mesh.edges
    L = mesh.edge_lengths()
    nv = mesh.n_vertices
    tot = np.bincount(e[:, 0], weights=L, minlength=nv) + np.bincount(e[:, 1], weights=L, minlength=nv)
    cnt = np.bincount(e.ravel(), minlength=nv)
    return np.divide(tot, cnt, out=np.zeros(nv), where=cnt > 0)


def jiggle(mesh: Mesh, p: JiggleParams) -> Mesh:
    """Independent Gaussian displacement of every vertex."""
    if p.temperature == 0:
        return mesh.with_vertices(mesh.vertices.copy())
    rng = np.random.default_rng(p.seed)
    sd = p.temperature * mean_incident_edge_length(mesh)
    return mesh.with_vertices(mesh.vertices + sd[:, None] * rng.standard_normal(mesh.vertices.shape))


def long_jiggle(mesh: Mesh, p: LongJiggleParams) -> Mesh:
    q = p.resolve(mesh)
    X = mesh.vertices
    s = np.sin(X @ np.asarray(q.wavevector) + q.phase)
    return mesh.with_vertices(X + s[:, None] * np.asarray(q.amplitude)[None, :])


@dataclass
class RecoveryResult:
    recovered: bool
    gap: float
    energy_before: float
    energy_after: float
    perturbed_energy: float
    result: object = field(default=None, repr=False)


def recovery_probe(mesh: Mesh, tensions: TensionTable, targets, cfg, perturbation,
                   threshold: float = 1e-3) -> RecoveryResult:
    """Perturb a minimized mesh, minimize again at the same h, compare energies."""
    from foamcluster.minimize import run_minimize

    before = measures(mesh, tensions).energy
    if isinstance(perturbation, JiggleParams):
        moved = jiggle(mesh, perturbation)
    elif isinstance(perturbation, LongJiggleParams):
        moved = long_jiggle(mesh, perturbation)
    else:
        raise TypeError(f"unsupported perturbation {type(perturbation).__name__}")
    perturbed = measures(moved, tensions).energy
    if np.array_equal(moved.vertices, mesh.vertices):
        return RecoveryResult(True, 0.0, before, before, perturbed)
    h = cfg.refine_schedule[-1] if cfg.refine_schedule else None
    cfg2 = replace(cfg, refine_schedule=(h,) if h is not None else ())
    res = run_minimize(moved, tensions, targets, cfg2)
    after = res.measures.energy
    gap = abs(after - before) / abs(before)
    return RecoveryResult(bool(gap <= threshold), gap, before, after, perturbed, res)

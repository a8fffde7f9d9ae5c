"""Report figures, rendered off-screen to image files."""

from __future__ import annotations

from pathlib import Path

import matplotlib as mpl

mpl.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_trace(trace: list[dict], path, title: str = "") -> Path:
    """Energy excess over its final value, one colour per discretization level."""
    it = np.array([r["iter"] for r in trace], dtype=float)
    E = np.array([r["energy"] for r in trace], dtype=float)
    h = np.array([r["h_max"] for r in trace], dtype=float)
    err = np.array([r["max_vol_err"] for r in trace], dtype=float)
    with mpl.rc_context(STYLE):
        fig, (ax, bx) = plt.subplots(2, 1, sharex=True, figsize=(5.0, 4.4))
        if len(E):
            excess = E - E.min()
            floor = max(1e-16, 1e-12 * abs(E.min()))
            for lev in dict.fromkeys(h.tolist()):
                sel = h == lev if np.isfinite(lev) else ~np.isfinite(h)
                ax.semilogy(it[sel], np.maximum(excess[sel], floor), lw=1, label=f"h = {lev:g}")
                bx.semilogy(it[sel], np.maximum(err[sel], 1e-18), lw=1)
            ax.legend(loc="upper right")
        ax.set_ylabel("E - min E")
        bx.set_ylabel("max rel. volume error")
        bx.set_xlabel("iteration")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_eigenvalues(stability: list[dict], path, title: str = "") -> Path:
    """Extreme constrained eigenvalues against the discretization length."""
    rows = [s for s in stability if s.get("h_max") is not None]
    h = np.array([s["h_max"] for s in rows], dtype=float)
    lmin = np.array([s["lambda_min"] for s in rows], dtype=float)
    lmax = np.array([s["lambda_max"] for s in rows], dtype=float)
    with mpl.rc_context(STYLE):
        fig, ax = plt.subplots()
        if len(h):
            pos = lmin > 0
            ax.loglog(h, lmax, "s-", label="lambda_max")
            ax.loglog(h[pos], lmin[pos], "o-", label="lambda_min")
            if (~pos).any():
                ax.loglog(h[~pos], np.abs(lmin[~pos]), "x", color="C3", ms=8, label="|lambda_min| (negative)")
            ax.legend()
            ax.invert_xaxis()
        ax.set_xlabel("h_max")
        ax.set_ylabel("eigenvalue")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_plateau_angles(angles_deg: np.ndarray, path, title: str = "") -> Path:
    """Histogram of the film angles around every triple edge."""
    with mpl.rc_context(STYLE):
        fig, ax = plt.subplots()
        a = np.asarray(angles_deg).ravel()
        if len(a):
            ax.hist(a, bins=60, color="C0")
            ax.axvline(120.0, color="k", lw=0.8, ls="--")
        ax.set_xlabel("angle between films at a triple edge (deg)")
        ax.set_ylabel("count")
        if title:
            ax.set_title(title)
        return _save(fig, path)

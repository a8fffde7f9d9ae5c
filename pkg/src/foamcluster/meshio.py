"""Text mesh files.

Format::

    mmesh 1
    counts <V> <F> <B>
    v <x> <y> <z>          (V lines)
    f <v0> <v1> <v2> <front> <back>   (F lines)

Indices are 0-based; body 0 is the exterior and is not counted in B.
Coordinates are written with 17 significant digits so a write/read cycle
reproduces every float exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from foamcluster.mesh import Mesh, MeshError, build_mesh


class IoError(OSError):
    pass


class FormatError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


MAGIC = "mmesh 1"


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps(mesh: Mesh) -> str:
    out = [MAGIC, f"counts {mesh.n_vertices} {mesh.n_facets} {mesh.body_count}"]
    out += [f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in mesh.vertices]
    out += [f"f {a} {b} {c} {fr} {bk}" for (a, b, c), (fr, bk) in zip(mesh.facets.tolist(), mesh.labels.tolist())]
    return "\n".join(out) + "\n"


def loads(text: str) -> Mesh:
    lines = text.splitlines()
    rows = [(i + 1, ln.split()) for i, ln in enumerate(lines) if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows:
        raise FormatError("empty mesh file", 1)
    lineno, tok = rows[0]
    if " ".join(tok) != MAGIC:
        raise FormatError(f"expected {MAGIC!r}", lineno)
    if len(rows) < 2:
        raise FormatError("missing counts line", lineno)
    lineno, tok = rows[1]
    if len(tok) != 4 or tok[0] != "counts":
        raise FormatError("expected 'counts <V> <F> <B>'", lineno)
    try:
        nv, nf, nb = (int(t) for t in tok[1:])
    except ValueError:
        raise FormatError("counts must be integers", lineno) from None
    body = rows[2:]
    if len(body) != nv + nf:
        raise FormatError(f"expected {nv} vertex and {nf} facet lines, found {len(body)} lines",
                          body[-1][0] if body else lineno)
    V = np.empty((nv, 3))
    for k, (lineno, tok) in enumerate(body[:nv]):
        if len(tok) != 4 or tok[0] != "v":
            raise FormatError("expected 'v <x> <y> <z>'", lineno)
        try:
            V[k] = [float(t) for t in tok[1:]]
        except ValueError:
            raise FormatError("bad coordinate", lineno) from None
    F = np.empty((nf, 5), dtype=np.int64)
    for k, (lineno, tok) in enumerate(body[nv:]):
        if len(tok) != 6 or tok[0] != "f":
            raise FormatError("expected 'f <v0> <v1> <v2> <front> <back>'", lineno)
        try:
            F[k] = [int(t) for t in tok[1:]]
        except ValueError:
            raise FormatError("facet fields must be integers", lineno) from None
        if F[k, 3] == F[k, 4]:
            raise FormatError(f"front and back labels are both {F[k, 3]}", lineno)
        if (F[k, :3] < 0).any() or (F[k, :3] >= nv).any():
            raise FormatError("vertex index out of range", lineno)
        if (F[k, 3:] < 0).any() or (F[k, 3:] > nb).any():
            raise FormatError(f"body label outside 0..{nb}", lineno)
    try:
        return build_mesh(V, F, body_count=nb)
    except MeshError as exc:
        raise FormatError(f"invalid mesh: {exc}") from exc


def export_mesh(mesh: Mesh, path) -> None:
    try:
        Path(path).write_text(dumps(mesh))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def import_mesh(path) -> Mesh:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return loads(text)

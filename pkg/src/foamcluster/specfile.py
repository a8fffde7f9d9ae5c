"""Cluster spec files (INI syntax).

Example::

    [cluster]
    kind = assembly
    solid = tetrahedron
    s_f = 0.6            ; unspecified factors take the solid's defaults
    seed = 0

    [minimize]
    refine_schedule = 0.05, 0.032, 0.016, 0.008
    max_iters = 400

    [tensions]
    default = 1
    2-3 = 0.25

    [perturb]
    jiggle_seeds = 0, 1, 2
    temperature = 0.05
    long_jiggle_seeds = 1

``kind = prism5`` takes the fields of :class:`PrismClusterParams` instead of
``solid`` and the scaling factors.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, fields, replace

from foamcluster.builders import SOLIDS, AssemblySpec, ParameterError, PrismClusterParams, default_spec


class SpecError(ValueError):
    def __init__(self, msg: str, line: int | None = None, key: str | None = None):
        self.line = line
        self.key = key
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(key)
        super().__init__(f"{', '.join(where)}: {msg}" if where else msg)


class ParseError(SpecError):
    pass


class ValidationError(SpecError):
    pass


DEFAULT_SCHEDULES = {
    "prism5": (0.1, 0.05, 0.032, 0.016),
    "tetrahedron": (0.05, 0.032, 0.016, 0.008),
    "cube": (0.05, 0.032, 0.016, 0.008),
    "dodecahedron": (0.1, 0.05, 0.032, 0.016),
}

_MINIMIZE_KEYS = {
    "refine_schedule": "floats",
    "max_iters": int,
    "polish_every": int,
    "grad_tol": float,
    "vol_tol": float,
    "method": str,
    "motion": str,
    "analyze_levels": int,
}

_PERTURB_KEYS = {
    "jiggle_seeds": "ints",
    "temperature": float,
    "long_jiggle_seeds": "ints",
    "threshold": float,
    "max_iters": int,
}


@dataclass
class ClusterSpecFile:
    kind: str  # prism5 | assembly
    params: PrismClusterParams | AssemblySpec
    tensions: dict = field(default_factory=dict)  # (a, b) -> gamma, plus optional "default"
    refine_schedule: tuple[float, ...] = ()
    seed: int = 0
    max_iters: int = 400
    polish_every: int = 50
    grad_tol: float | None = None
    vol_tol: float = 1e-10
    method: str = "cg"
    motion: str = "full"
    analyze_levels: int = 2
    jiggle_seeds: tuple[int, ...] = (0, 1, 2)
    temperature: float = 0.05
    long_jiggle_seeds: tuple[int, ...] = (1,)
    recovery_threshold: float = 1e-3
    perturb_max_iters: int = 400

    @property
    def name(self) -> str:
        return "prism5" if self.kind == "prism5" else self.params.solid


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    out = {}
    section = None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip().lower()
            out[(section, "")] = n
            continue
        m = re.match(r"([^=:;#\s][^=:]*?)\s*[=:]", line)
        if m and section is not None and not raw[:1].isspace():
            out[(section, m.group(1).strip().lower())] = n
    return out


def _convert(value: str, kind, line, key):
    try:
        if kind == "floats":
            out = tuple(float(x) for x in re.split(r"[,\s]+", value.strip()) if x)
            if not out:
                raise ValueError("empty list")
            return out
        if kind == "ints":
            return tuple(int(x) for x in re.split(r"[,\s]+", value.strip()) if x)
        return kind(value)
    except ValueError:
        raise ParseError(f"cannot read {value!r} as {getattr(kind, '__name__', kind)}", line, key) from None


def parse_spec(text: str) -> ClusterSpecFile:
    """Parse and validate spec text.  Errors carry the line and key concerned."""
    if not text.strip():
        raise ParseError("empty spec file", 1)
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ParseError("expected a [section] header", exc.lineno) from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ParseError(exc.message.split(":")[-1].strip() if hasattr(exc, "message") else str(exc),
                         getattr(exc, "lineno", None)) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ParseError("malformed line", line) from None
    lines = _key_lines(text)

    def loc(section, key=""):
        return lines.get((section, key))

    known = {"cluster", "minimize", "tensions", "perturb"}
    for s in cp.sections():
        if s.lower() not in known:
            raise ParseError(f"unknown section [{s}]", loc(s.lower()))
    if not cp.has_section("cluster"):
        raise ParseError("missing [cluster] section", 1)
    cl = {k.lower(): v for k, v in cp.items("cluster")}
    kind = cl.pop("kind", None)
    if kind is None:
        raise ParseError("missing 'kind'", loc("cluster"), "kind")
    seed = _convert(cl.pop("seed", "0"), int, loc("cluster", "seed"), "seed")

    if kind == "prism5":
        names = {f.name for f in fields(PrismClusterParams)}
        vals = {}
        for k, v in cl.items():
            if k not in names:
                raise ParseError(f"unknown prism5 field {k!r}", loc("cluster", k), k)
            vals[k] = _convert(v, float, loc("cluster", k), k)
        params = PrismClusterParams(**vals)
        name = "prism5"
    elif kind == "assembly":
        solid = cl.pop("solid", None)
        if solid is None:
            raise ParseError("assembly needs 'solid'", loc("cluster"), "solid")
        if solid not in SOLIDS:
            raise ValidationError(f"solid must be one of {', '.join(SOLIDS)}", loc("cluster", "solid"), "solid")
        vals = {}
        for k, v in cl.items():
            if k not in ("s_i", "s_m", "s_e", "s_f"):
                raise ParseError(f"unknown assembly field {k!r}", loc("cluster", k), k)
            vals[k] = _convert(v, float, loc("cluster", k), k)
        params = replace(default_spec(solid), **vals)
        name = solid
    else:
        raise ValidationError("kind must be prism5 or assembly", loc("cluster", "kind"), "kind")
    try:
        params.validate()
    except ParameterError as exc:
        msg = str(exc).removeprefix("need ")
        key = next((k for k in re.findall(r"\w+", msg) if (("cluster", k) in lines)), None)
        raise ValidationError(msg, loc("cluster", key) if key else loc("cluster"), key) from None

    spec = ClusterSpecFile(kind, params, seed=seed, refine_schedule=DEFAULT_SCHEDULES[name])

    if cp.has_section("minimize"):
        for k, v in cp.items("minimize"):
            if k not in _MINIMIZE_KEYS:
                raise ParseError(f"unknown minimize field {k!r}", loc("minimize", k), k)
            setattr(spec, k, _convert(v, _MINIMIZE_KEYS[k], loc("minimize", k), k))
    if cp.has_section("perturb"):
        for k, v in cp.items("perturb"):
            if k not in _PERTURB_KEYS:
                raise ParseError(f"unknown perturb field {k!r}", loc("perturb", k), k)
            val = _convert(v, _PERTURB_KEYS[k], loc("perturb", k), k)
            attr = {"threshold": "recovery_threshold", "max_iters": "perturb_max_iters"}.get(k, k)
            setattr(spec, attr, val)
    if cp.has_section("tensions"):
        for k, v in cp.items("tensions"):
            g = _convert(v, float, loc("tensions", k), k)
            if g < 0:
                raise ValidationError("tensions must be >= 0", loc("tensions", k), k)
            if k == "default":
                spec.tensions["default"] = g
                continue
            m = re.fullmatch(r"(\d+)\s*-\s*(\d+)", k)
            if not m:
                raise ParseError("tension keys look like 'a-b' or 'default'", loc("tensions", k), k)
            a, b = int(m.group(1)), int(m.group(2))
            if a == b:
                raise ValidationError("a tension pair needs two different bodies", loc("tensions", k), k)
            spec.tensions[(min(a, b), max(a, b))] = g

    sched = spec.refine_schedule
    line = loc("minimize", "refine_schedule")
    if any(h <= 0 for h in sched):
        raise ValidationError("refine_schedule entries must be > 0", line, "refine_schedule")
    if any(b >= a for a, b in zip(sched, sched[1:])):
        raise ValidationError("refine_schedule must be strictly decreasing", line, "refine_schedule")
    if spec.method not in ("gradient", "cg"):
        raise ValidationError("method must be gradient or cg", loc("minimize", "method"), "method")
    if spec.motion not in ("full", "normal"):
        raise ValidationError("motion must be full or normal", loc("minimize", "motion"), "motion")
    if spec.grad_tol is not None and not spec.grad_tol > 0:
        raise ValidationError("grad_tol must be > 0", loc("minimize", "grad_tol"), "grad_tol")
    if not spec.vol_tol > 0:
        raise ValidationError("vol_tol must be > 0", loc("minimize", "vol_tol"), "vol_tol")
    if spec.temperature < 0:
        raise ValidationError("temperature must be >= 0", loc("perturb", "temperature"), "temperature")
    for k in ("max_iters", "polish_every", "analyze_levels"):
        if getattr(spec, k) < 0:
            raise ValidationError(f"{k} must be >= 0", loc("minimize", k), k)
    return spec


def read_spec(path) -> ClusterSpecFile:
    with open(path) as fh:
        return parse_spec(fh.read())


def default_file_spec(name: str) -> ClusterSpecFile:
    """Spec for one of the four built-in clusters: prism5 or a solid name."""
    if name == "prism5":
        return parse_spec("[cluster]\nkind = prism5\n")
    return parse_spec(f"[cluster]\nkind = assembly\nsolid = {name}\n")

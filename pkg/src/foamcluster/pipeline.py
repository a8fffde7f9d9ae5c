"""Build, minimize, analyze and perturb a cluster, writing artifacts to a directory."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from foamcluster.builders import Cluster, build_cluster
from foamcluster.measure import TensionTable, body_volumes, measures
from foamcluster.mesh import Mesh
from foamcluster.meshio import export_mesh
from foamcluster.minimize import MinimizeResult, OptimizerConfig, run_minimize
from foamcluster.specfile import ClusterSpecFile
from foamcluster.stability import JiggleParams, LongJiggleParams, recovery_probe, stability_report
from foamcluster.topo import all_genera, plateau_audit

log = logging.getLogger(__name__)

STAGES = ("build", "minimize", "analyze", "perturb")


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        self.stage = stage
        self.cause = exc
        super().__init__(f"stage {stage}: {type(exc).__name__}: {exc}")


def parse_stages(text: str | None) -> tuple[str, ...]:
    if not text:
        return STAGES
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in names if s not in STAGES]
    if bad:
        raise ValueError(f"unknown stage(s) {', '.join(bad)}; choose from {', '.join(STAGES)}")
    if "build" not in names:
        names.insert(0, "build")
    if "perturb" in names and "minimize" not in names:
        raise ValueError("perturb needs the minimize stage")
    return tuple(s for s in STAGES if s in names)


def make_cluster(spec: ClusterSpecFile) -> Cluster:
    cl = build_cluster("prism5" if spec.kind == "prism5" else spec.params.solid, spec.params)
    if spec.tensions:
        entries = dict(cl.tensions.entries)
        entries.update({k: v for k, v in spec.tensions.items() if k != "default"})
        cl.tensions = TensionTable(entries, spec.tensions.get("default", cl.tensions.default_tension))
    return cl


def optimizer_config(spec: ClusterSpecFile) -> OptimizerConfig:
    return OptimizerConfig(grad_tol=spec.grad_tol, vol_tol=spec.vol_tol, max_iters=spec.max_iters,
                           polish_every=spec.polish_every, refine_schedule=spec.refine_schedule,
                           method=spec.method, motion=spec.motion)


def _seed(base: int, k: int) -> int:
    return int(np.random.SeedSequence([base, k]).generate_state(1)[0])


def analyze_mesh(mesh: Mesh, cluster: Cluster) -> dict:
    """Measures, per-body volume and genus, and the Plateau audit of ``mesh``."""
    m = measures(mesh, cluster.tensions)
    genera = all_genera(mesh)
    audit = plateau_audit(mesh)
    bodies = [{"body": b, "name": cluster.names.get(b, str(b)), "volume": float(v), "genus": genera[b]}
              for b, v in enumerate(body_volumes(mesh), start=1)]
    return {
        "energy": m.energy,
        "total_area": m.total_area,
        "n_vertices": mesh.n_vertices,
        "n_facets": mesh.n_facets,
        "max_edge": float(mesh.edge_lengths().max()),
        "bubble_count": mesh.body_count,
        "special_body": cluster.special_body,
        "special_genus": genera[cluster.special_body],
        "bodies": bodies,
        "plateau": {
            "valence_histogram": {str(k): v for k, v in audit.valence_histogram.items()},
            "n_borders": audit.n_borders,
            "n_violations": audit.n_violations,
            "angle_mean_deg": audit.angle_mean_deg,
            "angle_min_deg": audit.angle_min_deg,
            "angle_max_deg": audit.angle_max_deg,
        },
    }


@dataclass
class AnalysisReport:
    cluster: str
    stages: tuple[str, ...]
    seed: int
    analysis: dict = field(default_factory=dict)
    minimize: dict | None = None
    stability: list[dict] = field(default_factory=list)
    recovery: list[dict] = field(default_factory=list)
    files: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    result: MinimizeResult | None = field(default=None, repr=False)
    mesh: Mesh | None = field(default=None, repr=False)

    @property
    def converged(self) -> bool:
        return self.minimize is None or self.minimize["status"] == "converged"

    def to_dict(self) -> dict:
        return {
            "cluster": self.cluster,
            "stages": list(self.stages),
            "seed": self.seed,
            "analysis": self.analysis,
            "minimize": self.minimize,
            "stability": self.stability,
            "recovery": self.recovery,
            "files": self.files,
            "timings": self.timings,
        }

    def to_text(self) -> str:
        out = []

        def block(title, items):
            out.append(f"[{title}]")
            for k, v in items:
                out.append(f"{k} = {_fmt(v)}")
            out.append("")

        block("cluster", [("name", self.cluster), ("stages", ",".join(self.stages)), ("seed", self.seed)])
        a = self.analysis
        if a:
            block("measures", [(k, a[k]) for k in ("energy", "total_area", "n_vertices", "n_facets", "max_edge",
                                                   "bubble_count", "special_body", "special_genus")])
            block("bodies", [(f"body.{b['body']}", f"{b['name']} volume={_fmt(b['volume'])} genus={b['genus']}")
                             for b in a["bodies"]])
            p = a["plateau"]
            block("plateau", [("valence_histogram", " ".join(f"{k}:{v}" for k, v in p["valence_histogram"].items())),
                              *[(k, p[k]) for k in ("n_borders", "n_violations", "angle_mean_deg",
                                                    "angle_min_deg", "angle_max_deg")]])
        if self.minimize:
            block("minimize", [(k, v) for k, v in self.minimize.items() if k != "levels"])
            for lev in self.minimize["levels"]:
                block(f"level h={lev['h_max']:g}", list(lev.items()))
        for s in self.stability:
            block(f"stability h={s['h_max']:g}", list(s.items()))
        for r in self.recovery:
            block(f"recovery {r['probe']} seed={r['seed']}", [(k, v) for k, v in r.items() if k not in ("probe", "seed")])
        if self.files:
            block("files", list(self.files.items()))
        return "\n".join(out)

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        self.files.setdefault("report", "report.txt")
        self.files.setdefault("report_json", "report.json")
        (out_dir / "report.txt").write_text(self.to_text())
        (out_dir / "report.json").write_text(json.dumps(self.to_dict(), indent=2, default=_json_default) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _stage(name):
    def wrap(fn):
        def inner(*args, **kw):
            t = time.perf_counter()
            try:
                return fn(*args, **kw)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc
            finally:
                log.info("stage %s took %.1f s", name, time.perf_counter() - t)
        return inner
    return wrap


def run_pipeline(spec: ClusterSpecFile, stages=STAGES, out_dir=None, mesh: Mesh | None = None,
                 figures: bool = True, callback=None) -> AnalysisReport:
    """Run the requested stages in order and write artifacts to ``out_dir``.

    ``mesh`` replaces the built mesh (tensions, targets and body names still
    come from the cluster file's builder).  Artifacts: ``build.mmesh``, one
    ``mesh_h<h>.mmesh`` per level, ``trace.csv``, ``report.txt``,
    ``report.json`` and PNG figures under ``figures/``.
    """
    stages = parse_stages(",".join(stages)) if not isinstance(stages, str) else parse_stages(stages)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    report = AnalysisReport(spec.name, stages, spec.seed)

    def timed(key, fn, *a, **kw):
        t = time.perf_counter()
        r = fn(*a, **kw)
        report.timings[key] = round(time.perf_counter() - t, 3)
        return r

    cluster = timed("build", _stage("build")(make_cluster), spec)
    if mesh is not None:
        if mesh.body_count != cluster.mesh.body_count:
            raise StageError("build", ValueError(
                f"mesh has {mesh.body_count} bodies, spec cluster has {cluster.mesh.body_count}"))
        cluster.mesh = mesh
    current = cluster.mesh
    if out is not None:
        export_mesh(current, out / "build.mmesh")
        report.files["build_mesh"] = "build.mmesh"

    cfg = optimizer_config(spec)
    result = None
    if "minimize" in stages:
        result = timed("minimize", _stage("minimize")(run_minimize), current, cluster.tensions, cluster.targets,
                       cfg, callback)
        current = result.mesh
        report.result = result
        report.minimize = {
            "status": result.status,
            "converged": result.converged,
            "iterations": result.iterations,
            "h_max": result.h_max,
            "grad_norm": result.grad_norm,
            "grad_tol": result.grad_tol,
            "max_vol_err": float(np.max(np.abs(body_volumes(current) - cluster.targets) / cluster.targets)),
            "levels": [{"h_max": L.h_max, "iterations": L.iterations, "converged": L.converged,
                        "energy": L.energy, "grad_norm": L.grad_norm} for L in result.levels],
        }
        if out is not None:
            result.write_trace(out / "trace.csv")
            report.files["trace"] = "trace.csv"
            for L in result.levels:
                name = f"mesh_h{L.h_max:g}.mmesh"
                export_mesh(L.mesh, out / name)
                report.files[f"mesh_h{L.h_max:g}"] = name
    report.mesh = current

    # build-only runs still report bubble count and genus
    report.analysis = timed("analyze_measures", _stage("analyze")(analyze_mesh), current, cluster)

    if "analyze" in stages and result is not None and result.status != "topology_contact":
        levels = result.levels[-spec.analyze_levels:] if spec.analyze_levels else []

        def stab():
            return [stability_report(L.mesh, cluster.tensions, h_max=L.h_max).as_dict() for L in levels]

        report.stability = timed("stability", _stage("analyze")(stab))

    if "perturb" in stages and result is not None and result.status != "topology_contact":
        pcfg = replace(cfg, max_iters=spec.perturb_max_iters,
                       refine_schedule=(result.h_max,) if result.h_max is not None else ())

        def probes():
            rows = []
            todo = [("jiggle", s, JiggleParams(spec.temperature, _seed(spec.seed, s))) for s in spec.jiggle_seeds]
            todo += [("long_jiggle", s, LongJiggleParams(seed=_seed(spec.seed, 1000 + s)))
                     for s in spec.long_jiggle_seeds]
            for kind, s, p in todo:
                r = recovery_probe(current, cluster.tensions, cluster.targets, pcfg, p, spec.recovery_threshold)
                rows.append({"probe": kind, "seed": s, "recovered": r.recovered, "gap": r.gap,
                             "energy_before": r.energy_before, "perturbed_energy": r.perturbed_energy,
                             "energy_after": r.energy_after})
                log.info("%s seed %d: gap %.3e", kind, s, r.gap)
            return rows

        report.recovery = timed("perturb", _stage("perturb")(probes))

    if out is not None:
        if figures:
            from foamcluster import plotting

            figs = out / "figures"
            if result is not None and result.trace:
                rows = [{"iter": r.iteration, "h_max": r.h_max, "energy": r.energy,
                         "max_vol_err": r.max_vol_err} for r in result.trace]
                plotting.plot_trace(rows, figs / "energy_trace.png", spec.name)
                report.files["fig_trace"] = "figures/energy_trace.png"
            if report.stability:
                plotting.plot_eigenvalues(report.stability, figs / "eigenvalues.png", spec.name)
                report.files["fig_eigenvalues"] = "figures/eigenvalues.png"
            audit = plateau_audit(current)
            if audit.n_borders:
                plotting.plot_plateau_angles(audit.angles_deg, figs / "plateau_angles.png", spec.name)
                report.files["fig_plateau"] = "figures/plateau_angles.png"
        report.write(out)
    return report

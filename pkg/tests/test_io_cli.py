import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foamcluster.builders import AssemblySpec, build_torus_immiscible
from foamcluster.cli import main
from foamcluster.measure import TensionTable, measures
from foamcluster.meshio import FormatError, IoError, dumps, export_mesh, import_mesh, loads
from foamcluster.mesh import refine_to
from foamcluster.minimize import OptimizerConfig, run_minimize
from foamcluster.pipeline import analyze_mesh, make_cluster, parse_stages, run_pipeline
from foamcluster.specfile import ParseError, ValidationError, default_file_spec, parse_spec

import shapes


def same_mesh(a, b):
    return (np.array_equal(a.vertices, b.vertices) and np.array_equal(a.facets, b.facets)
            and np.array_equal(a.labels, b.labels) and a.body_count == b.body_count)


def test_round_trip_tetrahedron(tmp_path):
    m = shapes.tetrahedron()
    export_mesh(m, tmp_path / "t.mmesh")
    assert same_mesh(import_mesh(tmp_path / "t.mmesh"), m)


def test_file_layout():
    text = dumps(shapes.tetrahedron())
    lines = text.splitlines()
    assert lines[0] == "mmesh 1"
    assert lines[1] == "counts 4 4 1"
    assert lines[2].startswith("v ") and lines[6].startswith("f ")


def test_equal_labels_rejected_with_line():
    text = dumps(shapes.tetrahedron()).replace("f 1 2 3 1 0", "f 1 2 3 1 1")
    with pytest.raises(FormatError) as exc:
        loads(text)
    assert exc.value.line == 10


def test_malformed_files():
    with pytest.raises(FormatError):
        loads("")
    with pytest.raises(FormatError) as exc:
        loads("mmesh 2\n")
    assert exc.value.line == 1
    good = dumps(shapes.tetrahedron())
    with pytest.raises(FormatError):
        loads(good.replace("counts 4 4 1", "counts 4 5 1"))
    with pytest.raises(FormatError) as exc:
        loads(good.replace("f 0 2 1", "f 0 2 9"))
    assert exc.value.line == 7


def test_missing_file(tmp_path):
    with pytest.raises(IoError):
        import_mesh(tmp_path / "nope.mmesh")


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False, allow_subnormal=True), min_size=3, max_size=3))
def test_round_trip_bit_exact_random(shift):
    rng = np.random.default_rng(abs(int(shift[0])) % 1000)
    m = refine_to(shapes.two_cubes(), 0.5)
    X = m.vertices * rng.uniform(0.1, 10) + np.array(shift) + 1e-7 * rng.standard_normal(m.vertices.shape)
    m = m.with_vertices(X)
    assert same_mesh(loads(dumps(m)), m)


def test_minimized_cluster_round_trip_same_energy(tmp_path):
    cl = build_torus_immiscible()
    res = run_minimize(cl.mesh, cl.tensions, cl.targets,
                       OptimizerConfig(refine_schedule=(0.2,), max_iters=20, method="cg"))
    export_mesh(res.mesh, tmp_path / "p.mmesh")
    back = import_mesh(tmp_path / "p.mmesh")
    assert measures(back, cl.tensions).energy == res.measures.energy


def test_parse_minimal_assembly_defaults():
    spec = parse_spec("[cluster]\nkind = assembly\nsolid = tetrahedron\n")
    assert spec.params == AssemblySpec("tetrahedron", 0.25, 0.33, 0.47, 0.6)


def test_parse_validation_error_names_invariant():
    with pytest.raises(ValidationError, match="s_i < s_m") as exc:
        parse_spec("[cluster]\nkind = assembly\nsolid = cube\ns_i = 0.31\ns_m = 0.3\n")
    assert exc.value.line in (4, 5)


def test_parse_errors():
    with pytest.raises(ParseError):
        parse_spec("")
    with pytest.raises(ParseError) as exc:
        parse_spec("[cluster]\nkind = prism5\nradius = 3\n")
    assert exc.value.line == 3 and exc.value.key == "radius"
    with pytest.raises(ParseError):
        parse_spec("[cluster]\nkind = prism5\n[minimize]\nmax_iters = many\n")
    with pytest.raises(ValidationError):
        parse_spec("[cluster]\nkind = prism5\n[minimize]\nrefine_schedule = 0.1, 0.1\n")
    with pytest.raises(ValidationError):
        parse_spec("[cluster]\nkind = sphere\n")


def test_parse_full_spec():
    spec = parse_spec(
        "[cluster]\nkind = prism5\ninner_radius = 0.2\nseed = 4\n"
        "[minimize]\nrefine_schedule = 0.2, 0.1\nmax_iters = 7\nmethod = gradient\n"
        "[tensions]\n1-2 = 0.5\ndefault = 1\n"
        "[perturb]\njiggle_seeds = 3, 4\n"
    )
    assert spec.params.inner_radius == 0.2 and spec.seed == 4
    assert spec.refine_schedule == (0.2, 0.1) and spec.max_iters == 7 and spec.method == "gradient"
    assert spec.tensions[(1, 2)] == 0.5
    assert spec.jiggle_seeds == (3, 4)
    cl = make_cluster(spec)
    assert cl.tensions(2, 1) == 0.5


def test_stage_parsing():
    assert parse_stages("analyze") == ("build", "analyze")
    with pytest.raises(ValueError):
        parse_stages("build,perturb")
    with pytest.raises(ValueError):
        parse_stages("build,polish")


def test_pipeline_build_only(tmp_path):
    spec = default_file_spec("tetrahedron")
    rep = run_pipeline(spec, "build", tmp_path)
    assert rep.minimize is None and rep.stability == []
    assert rep.analysis["bubble_count"] == 14 and rep.analysis["special_genus"] == 3
    assert (tmp_path / "build.mmesh").exists()
    assert not (tmp_path / "trace.csv").exists()
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["analysis"]["special_genus"] == 3


def test_pipeline_small_run_and_reanalysis(tmp_path):
    spec = default_file_spec("tetrahedron")
    spec.refine_schedule = (0.3, 0.2)
    spec.max_iters = 15
    spec.jiggle_seeds = (0,)
    spec.long_jiggle_seeds = ()
    spec.perturb_max_iters = 15
    rep = run_pipeline(spec, ["build", "minimize", "analyze", "perturb"], tmp_path)
    assert [s["h_max"] for s in rep.stability] == [0.3, 0.2]
    assert len(rep.recovery) == 1
    for name in ("trace.csv", "mesh_h0.3.mmesh", "mesh_h0.2.mmesh", "report.txt", "report.json",
                 "figures/energy_trace.png", "figures/eigenvalues.png"):
        assert (tmp_path / name).exists(), name
    # re-analysing the written mesh reproduces the written report fields
    again = analyze_mesh(import_mesh(tmp_path / "mesh_h0.2.mmesh"), make_cluster(spec))
    written = json.loads((tmp_path / "report.json").read_text())["analysis"]
    assert json.loads(json.dumps(again)) == written


def test_pipeline_deterministic(tmp_path):
    spec = default_file_spec("prism5")
    spec.refine_schedule = (0.3,)
    spec.max_iters = 10
    a = run_pipeline(spec, "build,minimize", tmp_path / "a", figures=False)
    b = run_pipeline(spec, "build,minimize", tmp_path / "b", figures=False)
    assert (tmp_path / "a" / "trace.csv").read_text() == (tmp_path / "b" / "trace.csv").read_text()
    assert a.analysis == b.analysis


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[cluster]\nkind = assembly\nsolid = cube\ns_i = 0.4\n")
    assert main(["--spec", str(bad), "--out", str(tmp_path / "x"), "-q"]) == 1
    assert main(["--cluster", "cube", "--h", "0.1,0.2", "--out", str(tmp_path / "x"), "-q"]) == 1
    # a tolerance no short run can meet
    code = main(["--cluster", "tetrahedron", "--stages", "build,minimize", "--h", "0.3", "--max-iters", "5",
                 "--tol", "1e-14", "--out", str(tmp_path / "y"), "--no-figures", "-q"])
    assert code == 2
    # a loose tolerance is met at once
    code = main(["--cluster", "tetrahedron", "--stages", "build,minimize", "--h", "0.3", "--max-iters", "5",
                 "--tol", "1e3", "--out", str(tmp_path / "z"), "--no-figures", "-q"])
    assert code == 0
    out = capsys.readouterr().out
    assert "special_genus = 3" in out


def test_cli_mesh_input(tmp_path):
    cl = build_torus_immiscible()
    export_mesh(cl.mesh, tmp_path / "in.mmesh")
    code = main(["--cluster", "prism5", "--stages", "build,analyze", "--mesh", str(tmp_path / "in.mmesh"),
                 "--out", str(tmp_path / "o"), "--no-figures", "-q"])
    assert code == 0
    assert json.loads((tmp_path / "o" / "report.json").read_text())["analysis"]["special_genus"] == 1
    # a mesh whose body count does not match the cluster is refused
    export_mesh(shapes.tetrahedron(), tmp_path / "tet.mmesh")
    assert main(["--cluster", "prism5", "--stages", "build", "--mesh", str(tmp_path / "tet.mmesh"),
                 "--out", str(tmp_path / "o2"), "-q"]) == 1


def test_tension_override_only_touches_named_pair():
    spec = default_file_spec("prism5")
    spec.tensions = {(4, 5): 0.5}
    T = make_cluster(spec).tensions
    assert T(4, 5) == 0.5 and T(1, 2) == 0.25 and T(0, 1) == 1.0
    assert isinstance(T, TensionTable)

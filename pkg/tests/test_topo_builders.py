import numpy as np
import pytest

from foamcluster.builders import (
    AssemblySpec,
    ParameterError,
    PrismClusterParams,
    build_assembly,
    build_torus_immiscible,
    default_spec,
    solid_geometry,
)
from foamcluster.measure import measures
from foamcluster.mesh import equiangulate, extract_body_boundary, extract_interface, refine_to, vertex_average
from foamcluster.topo import (
    Disconnected,
    NonManifoldEdge,
    all_genera,
    body_boundary_chi,
    body_genus,
    euler_characteristic,
    excavated_template,
    plateau_audit,
)

import shapes

CUBE_FACES = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]


def test_cube_surface_chi():
    s = euler_characteristic(CUBE_FACES)
    assert (s.V, s.E, s.F, s.chi, s.genus) == (8, 12, 6, 2, 0)


def test_torus_grid_genus():
    s = euler_characteristic(shapes.torus_grid())
    assert s.chi == 0 and s.genus == 1


def test_excavated_tetrahedron_template():
    V, faces = solid_geometry("tetrahedron")
    s = euler_characteristic(excavated_template(V, faces))
    assert (s.V, s.E, s.F) == (20, 48, 24)
    assert s.chi == -4 and s.genus == 3


@pytest.mark.parametrize("solid,genus", [("cube", 5), ("dodecahedron", 11)])
def test_excavated_templates_other_solids(solid, genus):
    V, faces = solid_geometry(solid)
    assert euler_characteristic(excavated_template(V, faces)).genus == genus == len(faces) - 1


def test_open_and_disconnected_surfaces():
    with pytest.raises(NonManifoldEdge):
        euler_characteristic(CUBE_FACES[:5])
    shifted = [tuple(v + 8 for v in f) for f in CUBE_FACES]
    with pytest.raises(Disconnected) as exc:
        euler_characteristic(CUBE_FACES + shifted)
    assert [c.chi for c in exc.value.components] == [2, 2]


def test_chi_array_path_matches_surface_path():
    cl = build_assembly(default_spec("tetrahedron"))
    chis = body_boundary_chi(cl.mesh)
    for b in range(1, cl.mesh.body_count + 1):
        assert euler_characteristic(extract_body_boundary(cl.mesh, b)).chi == chis[b - 1]
        assert chis[b - 1] % 2 == 0


def test_plateau_audit_sphere_and_double_bubble():
    sphere = refine_to(shapes.unit_cube(), 0.5)
    a = plateau_audit(sphere)
    assert set(a.valence_histogram) == {2} and a.n_borders == 0
    db = refine_to(shapes.two_cubes(), 0.5)
    b = plateau_audit(db)
    # the ring where the shared square meets the outside
    assert b.n_borders > 0 and b.n_violations == 0
    assert np.allclose(b.angles_deg.sum(axis=1), 360.0)
    # flat box: two films at right angles to the shared wall
    assert b.angle_min_deg == pytest.approx(90.0) and b.angle_max_deg == pytest.approx(180.0)


def test_default_specs():
    assert default_spec("tetrahedron") == AssemblySpec("tetrahedron", 0.25, 0.33, 0.47, 0.6)
    assert default_spec("cube") == AssemblySpec("cube", 0.23, 0.3, 0.45, 0.8)
    assert default_spec("dodecahedron") == AssemblySpec("dodecahedron", 0.3, 0.38, 0.52, 0.8)


def test_spec_invariants_rejected():
    with pytest.raises(ParameterError, match="s_i < s_m"):
        build_assembly(AssemblySpec("cube", 0.4, 0.3, 0.45, 0.8))
    with pytest.raises(ParameterError):
        build_assembly(AssemblySpec("octahedron", 0.2, 0.3, 0.45, 0.8))
    with pytest.raises(ParameterError):
        build_assembly(AssemblySpec("cube", 0.2, 0.3, 0.45, 1.2))
    with pytest.raises(ParameterError):
        build_torus_immiscible(PrismClusterParams(inner_radius=0.6))


def test_prism5_cluster():
    cl = build_torus_immiscible()
    m, T, targets = cl
    assert m.body_count == 5
    assert body_genus(m, cl.special_body) == 1
    quarter = [p for p in m.interface_pairs() if T(*p) == 0.25]
    assert len(quarter) == 2
    names = {cl.names[b] for p in quarter for b in p}
    assert names == {"upper", "middle", "lower"}
    assert np.allclose(targets, measures(m, T).body_volumes)
    # mirror symmetry z -> -z
    X = m.vertices
    Y = X * [1, 1, -1]
    a = np.lexsort(np.round(X, 12).T)
    b = np.lexsort(np.round(Y, 12).T)
    assert np.abs(X[a] - Y[b]).max() <= 1e-12


def test_prism5_tension_quarter_patches():
    cl = build_torus_immiscible()
    up, mid, low = (k for k, v in cl.names.items() if v in ("upper", "middle", "lower"))
    assert cl.tensions(up, mid) == cl.tensions(mid, low) == 0.25
    assert len(extract_interface(cl.mesh, up, mid).facets) > 0
    assert len(extract_interface(cl.mesh, mid, low).facets) > 0


@pytest.mark.parametrize("solid,bodies,genus", [("tetrahedron", 14, 3), ("cube", 20, 5), ("dodecahedron", 38, 11)])
def test_assembly_counts_and_genus(solid, bodies, genus):
    cl = build_assembly(default_spec(solid))
    assert cl.mesh.body_count == bodies
    g = all_genera(cl.mesh)
    assert g[cl.special_body] == genus
    assert all(v == 0 for b, v in g.items() if b != cl.special_body)
    assert (cl.targets > 0).all()


def _rotation_group_maps_vertices(X, R):
    Y = X @ R.T
    key = lambda A: A[np.lexsort(np.round(A, 9).T)]  # noqa: E731
    return np.abs(key(X) - key(Y)).max()


@pytest.mark.parametrize("solid", ["tetrahedron", "cube", "dodecahedron"])
def test_assembly_symmetry(solid):
    cl = build_assembly(default_spec(solid))
    V, faces = solid_geometry(solid)
    # rotation by 2pi/k about the axis through a face centre
    f = faces[0]
    axis = V[list(f)].mean(axis=0)
    axis /= np.linalg.norm(axis)
    th = 2 * np.pi / len(f)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    R = np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * K @ K
    assert _rotation_group_maps_vertices(cl.mesh.vertices, R) <= 1e-12


def test_genus_invariant_under_mesh_passes():
    cl = build_assembly(default_spec("tetrahedron"))
    m = refine_to(cl.mesh, 0.2)
    g0 = all_genera(cl.mesh)
    assert all_genera(m) == g0
    assert all_genera(equiangulate(m)) == g0
    assert all_genera(vertex_average(m)) == g0

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tubespec.geometry import (
    Arc,
    DomainKind,
    DomainSpec,
    GeometryError,
    GradingPolicy,
    MeshBudgetError,
    MeshFormatError,
    PiecewiseBoundary,
    Segment,
    Tag,
    build_domain,
    clip_quadrature,
    generate_mesh,
    mesh_domain,
    read_mesh,
    write_mesh,
)


def test_unperturbed_boundary():
    b = build_domain(DomainSpec(DomainKind.UNPERTURBED, R0=2.0))
    seg, arc = b.pieces
    assert (seg.start, seg.end, seg.tag) == ((0.0, -2.0), (0.0, 2.0), Tag.DIRICHLET_WALL)
    assert isinstance(arc, Arc) and arc.radius == 2.0 and arc.tag is Tag.DIRICHLET_WALL


def test_perturbed_boundary_path():
    b = build_domain(DomainSpec(DomainKind.PERTURBED, R0=2.0, eps=0.1))
    segs = [p for p in b.pieces if isinstance(p, Segment)]
    path = [segs[0].start] + [s.end for s in segs]
    assert path == [(0.0, -2.0), (0.0, -0.1), (-1.0, -0.1), (-1.0, 0.1), (0.0, 0.1), (0.0, 2.0)]
    assert isinstance(b.pieces[-1], Arc)
    assert set(b.anchors) == {(0.0, -0.1), (0.0, 0.1)}


def test_exterior_boundary_outer_arc():
    b = build_domain(DomainSpec(DomainKind.EXTERIOR, R_trunc=8.0))
    arcs = [p for p in b.pieces if isinstance(p, Arc)]
    assert len(arcs) == 1 and arcs[0].radius == 8.0 and arcs[0].tag is Tag.OUTER_ARC


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(kind=DomainKind.UNPERTURBED, R0=1.0),
        dict(kind=DomainKind.PERTURBED, R0=2.0, eps=0.0),
        dict(kind=DomainKind.PERTURBED, R0=2.0, eps=1.5),
        dict(kind=DomainKind.EXTERIOR, R_trunc=0.5),
        dict(kind=DomainKind.UNPERTURBED, R0=2.0, sigma_halfwidth=2.0),
    ],
)
def test_invalid_specs_rejected(kwargs):
    with pytest.raises(GeometryError):
        DomainSpec(**kwargs)


def test_unit_right_triangle_single_element():
    tri = PiecewiseBoundary(
        (
            Segment((0.0, 0.0), (1.0, 0.0), Tag.DIRICHLET_WALL),
            Segment((1.0, 0.0), (0.0, 1.0), Tag.DIRICHLET_WALL),
            Segment((0.0, 1.0), (0.0, 0.0), Tag.DIRICHLET_WALL),
        )
    )
    mesh = generate_mesh(tri, GradingPolicy(h_far=1.0), order=1)
    assert len(mesh.triangles) == 1
    assert {tuple(v) for v in mesh.vertices} == {(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)}


def test_half_disk_element_count_estimate():
    h = 0.05
    mesh = mesh_domain(DomainSpec(DomainKind.UNPERTURBED, R0=2.0), GradingPolicy(h_far=h), order=1)
    estimate = math.pi * 2.0**2 / (2 * h**2 / math.sqrt(3))
    assert estimate / 4 <= len(mesh.triangles) <= 4 * estimate


def test_junction_grading():
    spec = DomainSpec(DomainKind.PERTURBED, R0=2.0, eps=0.05)
    mesh = mesh_domain(spec, GradingPolicy(h_far=0.1, h_junction=0.005), order=1)
    for y in (-0.05, 0.05):
        corner = np.flatnonzero(np.hypot(mesh.vertices[:, 0], mesh.vertices[:, 1] - y) < 1e-14)
        assert len(corner) == 1
        touching = np.any(mesh.triangles == corner[0], axis=1)
        assert mesh.diameters()[touching].max() <= 0.005


def _check_invariants(mesh, spec):
    assert mesh.signed_areas().min() > 0
    mesh.check_conformity()
    R = spec.outer_radius
    on_arc = [e for e, t in zip(mesh.boundary_edges, mesh.boundary_tags) if t is Tag.OUTER_ARC]
    if on_arc:
        r = np.hypot(*mesh.vertices[np.unique(on_arc)].T)
        assert np.all(np.abs(r - R) < 1e-12 * R)
    outer = [e for e, t in zip(mesh.boundary_edges, mesh.boundary_tags) if t is not Tag.JUNCTION]
    deg = np.bincount(np.ravel(outer), minlength=len(mesh.vertices))
    assert set(np.unique(deg[deg > 0])) == {2}


@pytest.mark.parametrize(
    "spec",
    [
        DomainSpec(DomainKind.UNPERTURBED, R0=2.0),
        DomainSpec(DomainKind.PERTURBED, R0=2.0, eps=0.2),
        DomainSpec(DomainKind.EXTERIOR, R_trunc=4.0),
        DomainSpec(DomainKind.HALFBALL, R_trunc=1.0, wall_breaks=(-0.3, 0.3)),
    ],
)
def test_mesh_invariants(spec):
    mesh = mesh_domain(spec, GradingPolicy(h_far=0.2, h_junction=0.05))
    _check_invariants(mesh, spec)
    assert mesh.area() == pytest.approx(spec.area(), rel=2e-2)


@settings(max_examples=10, deadline=None)
@given(eps=st.floats(0.05, 0.8), h=st.floats(0.15, 0.4))
def test_perturbed_mesh_properties(eps, h):
    spec = DomainSpec(DomainKind.PERTURBED, R0=2.0, eps=eps)
    mesh = mesh_domain(spec, GradingPolicy(h_far=h), order=1)
    _check_invariants(mesh, spec)
    tube = mesh.tube_mask()
    assert mesh.signed_areas()[tube].sum() == pytest.approx(2 * eps, rel=1e-12)


def test_p2_adds_midpoints():
    spec = DomainSpec(DomainKind.UNPERTURBED, R0=2.0)
    m1 = mesh_domain(spec, GradingPolicy(h_far=0.3), order=1)
    m2 = mesh_domain(spec, GradingPolicy(h_far=0.3), order=2)
    assert m1.n_nodes == len(m1.vertices)
    assert m2.n_nodes == len(m2.vertices) + len(m2.edges)


def test_budget_exceeded():
    with pytest.raises(MeshBudgetError):
        mesh_domain(DomainSpec(DomainKind.UNPERTURBED, R0=2.0), GradingPolicy(h_far=0.05, budget=10))


def test_clip_quadrature_half_disk_area(unit_half_ball):
    rule = clip_quadrature(unit_half_ball, 0.5)
    assert rule.area.total == pytest.approx(math.pi * 0.25 / 2, abs=1e-8)
    assert rule.arc.total == pytest.approx(math.pi * 0.5, abs=1e-10)


def test_clip_quadrature_rejects_outer_radius(unit_half_ball):
    with pytest.raises(ValueError):
        clip_quadrature(unit_half_ball, 1.0)


def test_clip_quadrature_with_tube(perturbed_01):
    rule = clip_quadrature(perturbed_01, 0.5)
    assert rule.area.total == pytest.approx(math.pi * 0.125 + 0.2, abs=1e-6)


def test_mesh_roundtrip(tmp_path, perturbed_01):
    path = tmp_path / "m.mesh"
    write_mesh(perturbed_01, path)
    back = read_mesh(path)
    assert np.array_equal(back.vertices, perturbed_01.vertices)
    assert np.array_equal(back.triangles, perturbed_01.triangles)
    assert back.boundary_tags == perturbed_01.boundary_tags
    assert back.order == perturbed_01.order


@pytest.mark.parametrize("mutate", [lambda t: "garbage\n" + t, lambda t: t[: len(t) // 2], lambda t: t.replace("DirichletWall", "Wat", 1)])
def test_corrupted_mesh_rejected(tmp_path, perturbed_01, mutate):
    path = tmp_path / "m.mesh"
    write_mesh(perturbed_01, path)
    path.write_text(mutate(path.read_text()))
    with pytest.raises(MeshFormatError):
        read_mesh(path)


def test_submesh_keeps_parent_map(perturbed_01):
    omega = perturbed_01.submesh(perturbed_01.centroids()[:, 0] > 0)
    assert omega.area() == pytest.approx(perturbed_01.area() - 0.2, rel=1e-12)
    assert np.allclose(perturbed_01.nodes[omega.parent_nodes], omega.nodes, atol=0)
    assert np.all(omega.nodes[:, 0] >= 0)

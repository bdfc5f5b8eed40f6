"""Problem geometry, graded triangular meshes and clipped quadrature.

Coordinates are ``(x1, x2)``; the unperturbed domain lives in the half-plane
``x1 > 0`` and the tube is attached on the left, ``x1 < 0``.  Polar angles are
measured from the positive ``x2``-axis, so a point of radius ``r`` and angle
``theta`` is ``(r sin(theta), r cos(theta))`` and the half-circle ``S_r^+``
corresponds to ``theta`` in ``(0, pi)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import triangle as _triangle

from .quadrature import gauss_interval, triangle_rule


class DomainKind(str, enum.Enum):
    UNPERTURBED = "Unperturbed"
    PERTURBED = "Perturbed"
    EXTERIOR = "ExteriorTruncated"
    HALFBALL = "HalfBall"


class Tag(str, enum.Enum):
    DIRICHLET_WALL = "DirichletWall"
    JUNCTION = "JunctionSigma"
    OUTER_ARC = "OuterArc"
    TUBE_END = "TubeEnd"


class GeometryError(ValueError):
    pass


class MeshBudgetError(RuntimeError):
    pass


class MeshFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    """Parametric description of one of the four domain families.

    ``tube_length`` defaults to 1 for the perturbed domain and to ``R_trunc``
    for the truncated exterior domain, whose tube is semi-infinite before
    truncation.
    """

    kind: DomainKind
    R0: float = 2.0
    eps: float | None = None
    R_trunc: float | None = None
    sigma_halfwidth: float = 1.0
    tube_length: float | None = None
    wall_breaks: tuple[float, ...] = ()
    interface_radii: tuple[float, ...] = ()

    def __post_init__(self):
        kind = DomainKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.sigma_halfwidth != 1.0:
            raise GeometryError("sigma_halfwidth is fixed to 1")
        if kind in (DomainKind.UNPERTURBED, DomainKind.PERTURBED):
            if not self.R0 > 1.0:
                raise GeometryError(f"R0 must exceed 1, got {self.R0}")
        if kind is DomainKind.PERTURBED:
            if self.eps is None or not 0.0 < self.eps <= 1.0:
                raise GeometryError(f"eps must lie in (0, 1], got {self.eps}")
            if self.eps >= self.R0:
                raise GeometryError("tube mouth wider than the flat wall")
            if self.tube_length is None:
                object.__setattr__(self, "tube_length", 1.0)
        if kind is DomainKind.EXTERIOR:
            if self.R_trunc is None or not self.R_trunc > 1.0:
                raise GeometryError(f"R_trunc must exceed 1, got {self.R_trunc}")
            if self.tube_length is None:
                object.__setattr__(self, "tube_length", float(self.R_trunc))
            for rho in self.interface_radii:
                if not 1.0 < rho < self.R_trunc:
                    raise GeometryError(f"interface radius {rho} outside (1, R_trunc)")
        elif self.interface_radii:
            raise GeometryError("interface radii apply to ExteriorTruncated domains only")
        if kind is DomainKind.HALFBALL:
            if self.R_trunc is None or not self.R_trunc > 0.0:
                raise GeometryError(f"half-ball radius must be positive, got {self.R_trunc}")
            for b in self.wall_breaks:
                if not abs(b) < self.R_trunc:
                    raise GeometryError(f"wall break {b} outside the flat wall")
        if self.tube_length is not None and not self.tube_length > 0:
            raise GeometryError("tube_length must be positive")

    @property
    def outer_radius(self) -> float:
        if self.kind in (DomainKind.EXTERIOR, DomainKind.HALFBALL):
            return float(self.R_trunc)
        return float(self.R0)

    @property
    def mouth(self) -> float:
        """Half-width of the tube mouth (0 when there is no tube)."""
        if self.kind is DomainKind.PERTURBED:
            return float(self.eps)
        if self.kind is DomainKind.EXTERIOR:
            return 1.0
        return 0.0

    def area(self) -> float:
        a = 0.5 * math.pi * self.outer_radius**2
        if self.mouth > 0:
            a += 2.0 * self.mouth * self.tube_length
        return a


@dataclass(frozen=True)
class GradingPolicy:
    """Target element sizes.

    The local size is ``min(h_cap(x), h_junction + (grading_ratio - 1) max(d(x) - h_junction, 0))``
    with ``d`` the distance to the nearest grading anchor and
    ``h_cap = h_far * max(1, far_growth |x|)``.  ``h_junction=None`` selects
    ``mouth / 20``.  ``split_radius`` meshes ``B_rho^+`` (plus tube) separately
    from the far field so that the far-field layout is shared across eps.
    """

    h_far: float
    h_junction: float | None = None
    grading_ratio: float = 1.5
    far_growth: float = 0.0
    split_radius: float | None = None
    budget: int = 2_000_000

    def __post_init__(self):
        if not self.h_far > 0:
            raise GeometryError("h_far must be positive")
        if self.h_junction is not None:
            if not self.h_junction > 0:
                raise GeometryError("h_junction must be positive")
            if self.h_junction > self.h_far:
                raise GeometryError("h_junction must not exceed h_far")
        if not 1.0 < self.grading_ratio <= 2.0:
            raise GeometryError("grading_ratio must lie in (1, 2]")

    def junction_size(self, mouth: float) -> float:
        if self.h_junction is not None:
            return self.h_junction
        if mouth > 0:
            return min(self.h_far, mouth / 20.0)
        return self.h_far


@dataclass(frozen=True)
class Segment:
    start: tuple[float, float]
    end: tuple[float, float]
    tag: Tag

    def length(self):
        return math.dist(self.start, self.end)

    def points(self, t):
        a = np.asarray(self.start, float)
        b = np.asarray(self.end, float)
        return a + np.outer(t, b - a)


def polar_point(r, theta):
    """Point of radius r and angle theta, exact at theta in {0, pi}."""
    theta = np.atleast_1d(np.asarray(theta, float))
    x1 = r * np.sin(theta)
    x2 = r * np.cos(theta)
    x1[(theta == 0.0) | (theta == math.pi)] = 0.0
    x2[theta == 0.0] = r
    x2[theta == math.pi] = -r
    return np.column_stack([x1, x2])


@dataclass(frozen=True)
class Arc:
    """Arc of the circle of given radius centred at the origin."""

    radius: float
    theta0: float
    theta1: float
    tag: Tag | None
    uniform_spacing: float | None = None

    @property
    def start(self):
        return tuple(polar_point(self.radius, self.theta0)[0])

    @property
    def end(self):
        return tuple(polar_point(self.radius, self.theta1)[0])

    def length(self):
        return self.radius * abs(self.theta1 - self.theta0)

    def points(self, t):
        return polar_point(self.radius, self.theta0 + np.asarray(t) * (self.theta1 - self.theta0))


@dataclass(frozen=True)
class PiecewiseBoundary:
    """Ordered tagged boundary pieces plus internal interface segments."""

    pieces: tuple
    anchors: tuple = ()
    interfaces: tuple = ()
    spec: DomainSpec | None = None

    def vertices(self):
        return [p.start for p in self.pieces]


def build_domain(spec: DomainSpec) -> PiecewiseBoundary:
    kind = spec.kind
    W = Tag.DIRICHLET_WALL
    if kind is DomainKind.UNPERTURBED:
        R = spec.R0
        pieces = (Segment((0.0, -R), (0.0, R), W), Arc(R, 0.0, math.pi, W))
        return PiecewiseBoundary(pieces, (), (), spec)
    if kind is DomainKind.HALFBALL:
        R = float(spec.R_trunc)
        ys = [-R] + sorted(set(float(b) for b in spec.wall_breaks)) + [R]
        pieces = tuple(Segment((0.0, a), (0.0, b), W) for a, b in zip(ys[:-1], ys[1:]))
        pieces += (Arc(R, 0.0, math.pi, Tag.OUTER_ARC),)
        anchors = tuple((0.0, float(b)) for b in sorted(set(spec.wall_breaks)))
        return PiecewiseBoundary(pieces, anchors, (), spec)
    if kind is DomainKind.PERTURBED:
        R, e, L = spec.R0, spec.eps, spec.tube_length
        outer_tag, end_tag = W, Tag.TUBE_END
    else:
        R, e, L = float(spec.R_trunc), 1.0, spec.tube_length
        outer_tag, end_tag = Tag.OUTER_ARC, W
    cuts = sorted(float(rho) for rho in spec.interface_radii)
    lower = [-R] + [-rho for rho in reversed(cuts)] + [-e]
    upper = [e] + cuts + [R]
    pieces = tuple(Segment((0.0, a), (0.0, b), W) for a, b in zip(lower[:-1], lower[1:]))
    pieces += (
        Segment((0.0, -e), (-L, -e), W),
        Segment((-L, -e), (-L, e), end_tag),
        Segment((-L, e), (0.0, e), W),
    )
    pieces += tuple(Segment((0.0, a), (0.0, b), W) for a, b in zip(upper[:-1], upper[1:]))
    pieces += (Arc(R, 0.0, math.pi, outer_tag),)
    anchors = ((0.0, -e), (0.0, e))
    interfaces = (Segment((0.0, -e), (0.0, e), Tag.JUNCTION),)
    # nested truncation arcs only constrain the mesh; they are not stored as edges
    interfaces += tuple(Arc(float(rho), 0.0, math.pi, None) for rho in sorted(spec.interface_radii))
    return PiecewiseBoundary(pieces, anchors, interfaces, spec)


# ---------------------------------------------------------------------------
# Mesh


def on_circle(a, b):
    """Edges ``(a, b)`` lying on a common origin-centred circle in ``x1 >= 0``."""
    ra, rb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    return (np.abs(ra - rb) <= 1e-12 * ra) & (ra > 0) & (a[:, 0] >= 0) & (b[:, 0] >= 0) & ((a[:, 0] > 0) | (b[:, 0] > 0))


def _as_tag(t):
    return t if isinstance(t, Tag) else Tag(t)


class Mesh:
    """Conforming triangulation with tagged boundary edges.

    ``boundary_edges`` holds vertex pairs of the domain boundary and of
    internal interfaces (tag ``JunctionSigma``).  For ``order=2`` one node is
    added at the midpoint of every edge; global node numbering is vertices
    first, then edge midpoints in edge order.  With ``curved=True`` (P2
    only) the midpoint nodes of boundary edges on origin-centred circles
    are moved onto the circle, giving isoparametric elements there.
    """

    def __init__(self, vertices, triangles, boundary_edges, boundary_tags, order=2, curved=False):
        if order not in (1, 2):
            raise ValueError("element order must be 1 or 2")
        if curved and order != 2:
            raise ValueError("curved elements need order 2")
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        self.boundary_edges = np.ascontiguousarray(boundary_edges, dtype=np.int64).reshape(-1, 2)
        self.boundary_tags = tuple(_as_tag(t) for t in boundary_tags)
        self.order = order
        if len(self.boundary_tags) != len(self.boundary_edges):
            raise ValueError("one tag per boundary edge required")
        if self.signed_areas().min() <= 0:
            raise ValueError("triangles must be counterclockwise with positive area")

        loc = self.triangles[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2)
        key = np.sort(loc, axis=1)
        edges, inverse = np.unique(key, axis=0, return_inverse=True)
        self.edges = edges
        self.tri_edges = inverse.reshape(-1, 3)
        nv = len(self.vertices)
        self._edge_index = {tuple(e): i for i, e in enumerate(edges.tolist())}
        self.curved = bool(curved)
        self.curved_mask = np.zeros(len(self.triangles), bool)
        if order == 2:
            mids = 0.5 * (self.vertices[edges[:, 0]] + self.vertices[edges[:, 1]])
            if self.curved and len(self.boundary_edges):
                a, b = self.vertices[self.boundary_edges[:, 0]], self.vertices[self.boundary_edges[:, 1]]
                ids = np.array([self._edge_index[tuple(sorted(e))] for e in self.boundary_edges.tolist()])[on_circle(a, b)]
                mids[ids] *= (np.linalg.norm(self.vertices[edges[ids, 0]], axis=1) / np.linalg.norm(mids[ids], axis=1))[:, None]
                self.curved_mask = np.isin(self.tri_edges, ids).any(axis=1)
            self.nodes = np.vstack([self.vertices, mids])
            self.elements = np.hstack([self.triangles, nv + self.tri_edges])
        else:
            self.nodes = self.vertices
            self.elements = self.triangles
        self._cache = {}
        for arr in (self.vertices, self.triangles, self.boundary_edges, self.nodes, self.elements):
            arr.setflags(write=False)

    # -- basic geometry -----------------------------------------------------
    @property
    def n_nodes(self):
        return len(self.nodes)

    def signed_areas(self):
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def diameters(self):
        p = self.vertices[self.triangles]
        return np.max([np.linalg.norm(p[:, i] - p[:, j], axis=1) for i, j in ((0, 1), (1, 2), (2, 0))], axis=0)

    def aspect_ratios(self):
        """Longest edge over twice the inradius, normalised to 1 for equilateral."""
        p = self.vertices[self.triangles]
        a = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
        b = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
        c = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
        s = 0.5 * (a + b + c)
        inr = self.signed_areas() / s
        return np.maximum(np.maximum(a, b), c) / (2.0 * math.sqrt(3.0) * inr)

    def area(self):
        return float(self.signed_areas().sum())

    def centroids(self):
        return self.vertices[self.triangles].mean(axis=1)

    def edge_id(self, i, j):
        return self._edge_index[(min(i, j), max(i, j))]

    # -- boundary helpers ---------------------------------------------------
    def has_tag(self, tag):
        return _as_tag(tag) in self.boundary_tags

    def edges_with_tag(self, tag):
        tag = _as_tag(tag)
        idx = [i for i, t in enumerate(self.boundary_tags) if t is tag]
        return self.boundary_edges[idx]

    def edge_nodes(self, edges):
        """Node triples (a, b, mid) or pairs (a, b) for vertex-pair edges."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if self.order == 1:
            return edges
        mids = np.array([len(self.vertices) + self.edge_id(a, b) for a, b in edges], dtype=np.int64)
        return np.column_stack([edges, mids]) if len(edges) else np.zeros((0, 3), np.int64)

    def nodes_on(self, tags):
        """All nodes lying on boundary edges carrying any of ``tags``."""
        tags = {_as_tag(t) for t in tags}
        idx = [i for i, t in enumerate(self.boundary_tags) if t in tags]
        if not idx:
            return np.zeros(0, np.int64)
        return np.unique(self.edge_nodes(self.boundary_edges[idx]).ravel())

    def outer_boundary_nodes(self):
        """Nodes on true boundary edges (every tag except the junction interface)."""
        return self.nodes_on([t for t in Tag if t is not Tag.JUNCTION])

    def tube_mask(self):
        return self.centroids()[:, 0] < 0.0

    # -- structural checks --------------------------------------------------
    def check_conformity(self):
        """Raise if an interior edge is not shared by exactly two triangles."""
        counts = np.bincount(self.tri_edges.ravel(), minlength=len(self.edges))
        if counts.max() > 2:
            raise ValueError("edge shared by more than two triangles")
        boundary = {tuple(sorted(e)) for e, t in zip(self.boundary_edges.tolist(), self.boundary_tags) if t is not Tag.JUNCTION}
        single = {tuple(e) for e in self.edges[counts == 1].tolist()}
        if single != boundary:
            raise ValueError("tagged boundary does not match the topological boundary")
        deg = np.bincount(np.array(sorted(boundary)).ravel(), minlength=len(self.vertices))
        if np.any((deg != 0) & (deg != 2)):
            raise ValueError("boundary edges do not form closed loops")
        return True

    # -- derived meshes -----------------------------------------------------
    def submesh(self, mask, exposed_tag=None):
        """Mesh made of the selected triangles plus a map to parent nodes.

        Edges that become boundary keep their parent tag (junction edges
        become ``DirichletWall``).  Former interior edges get
        ``exposed_tag(p, q)`` for their endpoint coordinates, or
        ``DirichletWall`` when no callable is given.
        """
        mask = np.asarray(mask, bool)
        tris = self.triangles[mask]
        used = np.unique(tris)
        newv = -np.ones(len(self.vertices), np.int64)
        newv[used] = np.arange(len(used))
        counts = np.bincount(self.tri_edges[mask].ravel(), minlength=len(self.edges))
        parent_tags = {tuple(sorted(e)): t for e, t in zip(self.boundary_edges.tolist(), self.boundary_tags)}
        bedges, btags = [], []
        for eid in np.flatnonzero(counts == 1):
            e = tuple(self.edges[eid])
            t = parent_tags.get(e)
            if t is None:
                t = exposed_tag(self.vertices[e[0]], self.vertices[e[1]]) if exposed_tag else Tag.DIRICHLET_WALL
            if t is Tag.JUNCTION:
                t = Tag.DIRICHLET_WALL
            bedges.append((newv[e[0]], newv[e[1]]))
            btags.append(t)
        for e, t in parent_tags.items():
            if t is Tag.JUNCTION and counts[self.edge_id(*e)] == 2:
                bedges.append((newv[e[0]], newv[e[1]]))
                btags.append(t)
        sub = Mesh(self.vertices[used], newv[tris], np.array(bedges).reshape(-1, 2), btags, self.order, self.curved)
        parent = np.empty(sub.n_nodes, np.int64)
        parent[: len(used)] = used
        if self.order == 2:
            for i, (a, b) in enumerate(sub.edges):
                parent[len(used) + i] = len(self.vertices) + self.edge_id(used[a], used[b])
        sub.parent_nodes = parent
        return sub

    def with_order(self, order, curved=False):
        return Mesh(self.vertices, self.triangles, self.boundary_edges, self.boundary_tags, order, curved)

    def refine_uniform(self, project_arcs=True):
        """Split every triangle into four; arc edge midpoints optionally projected."""
        nv = len(self.vertices)
        mids = 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])
        if project_arcs:
            for e in self.boundary_edges:
                a, b = self.vertices[e[0]], self.vertices[e[1]]
                if on_circle(a[None], b[None])[0]:
                    eid = self.edge_id(*e)
                    mids[eid] *= np.linalg.norm(a) / np.linalg.norm(mids[eid])
        verts = np.vstack([self.vertices, mids])
        t = self.triangles
        m = nv + self.tri_edges  # midpoints of edges (0,1), (1,2), (2,0)
        tris = np.vstack([
            np.column_stack([t[:, 0], m[:, 0], m[:, 2]]),
            np.column_stack([m[:, 0], t[:, 1], m[:, 1]]),
            np.column_stack([m[:, 2], m[:, 1], t[:, 2]]),
            np.column_stack([m[:, 0], m[:, 1], m[:, 2]]),
        ])
        bedges, btags = [], []
        for e, tag in zip(self.boundary_edges, self.boundary_tags):
            mid = nv + self.edge_id(*e)
            bedges += [(e[0], mid), (mid, e[1])]
            btags += [tag, tag]
        return Mesh(verts, tris, np.array(bedges), btags, self.order, self.curved)

    # -- point location -----------------------------------------------------
    def _finder(self):
        if "finder" not in self._cache:
            from matplotlib.tri import Triangulation
            from scipy.spatial import cKDTree

            tri = Triangulation(self.vertices[:, 0], self.vertices[:, 1], self.triangles)
            self._cache["finder"] = tri.get_trifinder()
            self._cache["ctree"] = cKDTree(self.centroids())
        return self._cache["finder"], self._cache["ctree"]

    def reference_coords(self, tri, pts):
        p = self.vertices[self.triangles[tri]]
        J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns
        return np.linalg.solve(J, (pts - p[:, 0])[..., None])[..., 0]

    def locate(self, pts, tol=1e-9):
        """Containing triangle and reference coordinates for each point.

        Points outside the mesh get triangle index -1.
        """
        pts = np.atleast_2d(np.asarray(pts, float))
        finder, ctree = self._finder()
        tri = np.asarray(finder(pts[:, 0], pts[:, 1]), dtype=np.int64)
        ref = np.zeros((len(pts), 2))
        ok = tri >= 0
        if ok.any():
            ref[ok] = self.reference_coords(tri[ok], pts[ok])
        bad = np.flatnonzero(~ok)
        if len(bad):
            k = min(24, len(self.triangles))
            _, cand = ctree.query(pts[bad], k=k)
            cand = np.atleast_2d(cand).reshape(len(bad), -1)
            for row, i in enumerate(bad):
                c = cand[row]
                rc = self.reference_coords(c, np.repeat(pts[i : i + 1], len(c), axis=0))
                bary = np.column_stack([1 - rc.sum(axis=1), rc])
                best = int(np.argmax(bary.min(axis=1)))
                if bary[best].min() >= -tol:
                    tri[i] = c[best]
                    ref[i] = rc[best]
        return tri, ref


# ---------------------------------------------------------------------------
# Mesh generation


def size_function(policy: GradingPolicy, anchors, mouth=0.0):
    anchors = np.asarray(anchors, float).reshape(-1, 2)
    hj = policy.junction_size(mouth)
    q = policy.grading_ratio

    def h(pts):
        pts = np.atleast_2d(pts)
        cap = np.full(len(pts), policy.h_far)
        if policy.far_growth > 0:
            cap = cap * np.maximum(1.0, policy.far_growth * np.linalg.norm(pts, axis=1))
        if len(anchors):
            d = np.min(np.linalg.norm(pts[:, None, :] - anchors[None], axis=2), axis=1)
            # flat plateau of width hj so edges at an anchor never exceed hj
            cap = np.minimum(cap, hj + (q - 1.0) * np.maximum(d - hj, 0.0))
        return cap

    return h


def discretize_piece(piece, h):
    """Points along a piece with spacing following the size function."""
    if isinstance(piece, Arc) and piece.uniform_spacing is not None:
        n = max(1, int(math.ceil(piece.length() / piece.uniform_spacing)))
        t = np.linspace(0.0, 1.0, n + 1)
    else:
        L = piece.length()
        probe = piece.points(np.linspace(0, 1, 201))
        hmin = float(h(probe).min())
        ns = int(min(400_000, max(400, 40 * L / hmin)))
        ts = np.linspace(0.0, 1.0, ns + 1)
        hs = h(piece.points(ts))
        dens = L / hs
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(ts))])
        # graded pieces round up so no edge exceeds the local size
        graded = hs.max() > hs.min() * (1 + 1e-12)
        n = max(1, int(math.ceil(cum[-1] - 1e-9)) if graded else int(round(cum[-1])))
        t = np.interp(np.linspace(0.0, cum[-1], n + 1), cum, ts)
        t[0], t[-1] = 0.0, 1.0
    pts = piece.points(t)
    pts[0] = piece.start
    pts[-1] = piece.end
    return pts


def _pslg(pieces, interfaces, h):
    index = {}
    verts = []
    segs, seg_tags = [], []

    def vid(p):
        key = (float(p[0]), float(p[1]))
        if key not in index:
            index[key] = len(verts)
            verts.append(key)
        return index[key]

    for piece in tuple(pieces) + tuple(interfaces):
        pts = discretize_piece(piece, h)
        ids = [vid(p) for p in pts]
        for a, b in zip(ids[:-1], ids[1:]):
            segs.append((a, b))
            seg_tags.append(piece.tag)
    return np.array(verts), np.array(segs), seg_tags


def _triangulate(verts, segs, h, budget, anchors=()):
    """Refine until every area is within 10% of ``h^2 / 2`` and anchor triangles have diameter <= h."""
    hmax = float(h(verts).max())
    opts = "pq30YYQ"
    anchors = np.asarray(anchors, float).reshape(-1, 2)
    out = _triangle.triangulate(dict(vertices=verts, segments=segs), opts + f"a{0.5 * hmax**2:.17g}")
    for _ in range(60):
        V, T = out["vertices"], out["triangles"]
        if len(T) > budget:
            raise MeshBudgetError(f"element budget {budget} exceeded ({len(T)} triangles)")
        p = V[T]
        area = 0.5 * np.abs((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
        hloc = np.minimum(h(p.mean(axis=1)), np.min([h(p[:, i]) for i in range(3)], axis=0))
        target = 0.5 * hloc**2
        estimate = float(np.sum(area / target))
        if estimate > budget:
            raise MeshBudgetError(f"element budget {budget} exceeded (estimated {estimate:.0f} triangles)")
        too_big = area > 1.1 * target
        mids = _long_anchor_edges(V, T, out["segments"], anchors, hloc)
        if len(mids):
            # split long interior edges at anchors; circumcentres there encroach segments
            out = _triangle.triangulate(dict(vertices=np.vstack([V, mids]), segments=out["segments"]), "pq30YYQ")
            continue
        if not too_big.any():
            break
        amax = np.where(too_big, target, -1.0)
        out = _triangle.triangulate(dict(vertices=V, triangles=T, segments=out["segments"], triangle_max_area=amax), "rpq30YYQa")
        if len(out["triangles"]) == len(T):
            break
    return out["vertices"], out["triangles"]


def _long_anchor_edges(V, T, segs, anchors, hloc):
    """Midpoints of interior edges longer than ``hloc`` in triangles touching an anchor."""
    if not len(anchors):
        return np.empty((0, 2))
    p = V[T]
    at_anchor = np.any(np.all(np.abs(p[:, :, None, :] - anchors[None, None]) < 1e-14, axis=3), axis=(1, 2))
    constrained = {tuple(sorted(e)) for e in np.asarray(segs).tolist()}
    mids = {}
    for t in np.flatnonzero(at_anchor):
        for i, j in ((0, 1), (1, 2), (2, 0)):
            a, b = sorted((int(T[t, i]), int(T[t, j])))
            if (a, b) not in constrained and np.linalg.norm(V[a] - V[b]) > hloc[t] * (1 + 1e-12):
                mids[(a, b)] = 0.5 * (V[a] + V[b])
    return np.array(list(mids.values())).reshape(-1, 2)


def _orient(V, T):
    T = np.array(T, dtype=np.int64)
    p = V[T]
    s = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    T[s < 0] = T[s < 0][:, [0, 2, 1]]
    return T


def _raw_mesh(pieces, interfaces, h, budget, anchors=()):
    verts, segs, tags = _pslg(pieces, interfaces, h)
    V, T = _triangulate(verts, segs, h, budget, anchors)
    return V, _orient(V, T), segs, tags


@lru_cache(maxsize=16)
def _far_field(R0, rho, h_far, budget):
    W = Tag.DIRICHLET_WALL
    pieces = (
        Segment((0.0, -R0), (0.0, -rho), W),
        Arc(rho, 0.0, math.pi, Tag.JUNCTION, uniform_spacing=h_far),
        Segment((0.0, rho), (0.0, R0), W),
        Arc(R0, 0.0, math.pi, W),
    )
    h = lambda pts: np.full(len(np.atleast_2d(pts)), h_far)
    return _raw_mesh(pieces, (), h, budget)


def _merge(parts):
    """Glue raw meshes along coincident vertices (bitwise-equal coordinates)."""
    index, verts = {}, []
    tris, edge_tags = [], {}
    for V, T, segs, tags in parts:
        ids = np.empty(len(V), np.int64)
        for i, p in enumerate(V.tolist()):
            key = (p[0], p[1])
            if key not in index:
                index[key] = len(verts)
                verts.append(key)
            ids[i] = index[key]
        tris.append(ids[T])
        for (a, b), t in zip(segs.tolist(), tags):
            e = (min(ids[a], ids[b]), max(ids[a], ids[b]))
            edge_tags.setdefault(e, []).append(t)
    return np.array(verts), np.vstack(tris), edge_tags


def generate_mesh(boundary: PiecewiseBoundary, policy: GradingPolicy, order=2, curved=False) -> Mesh:
    """Delaunay-refined conforming mesh of the region bounded by ``boundary``."""
    if isinstance(order, str):
        order = {"P1": 1, "P2": 2}[order.upper()]
    spec = boundary.spec
    mouth = spec.mouth if spec is not None else 0.0
    h = size_function(policy, boundary.anchors, mouth)
    rho = policy.split_radius
    if rho is not None and spec is not None and spec.kind in (DomainKind.UNPERTURBED, DomainKind.PERTURBED):
        if not mouth < rho < spec.R0:
            raise GeometryError("split radius must lie between the tube mouth and R0")
        far = _far_field(float(spec.R0), float(rho), float(policy.h_far), policy.budget)
        near_pieces = []
        for p in boundary.pieces:
            if isinstance(p, Arc):
                continue
            s, e = np.array(p.start), np.array(p.end)
            if p.start[0] == 0.0 and p.end[0] == 0.0:
                # flat wall pieces are clipped to |x2| <= rho
                lo, hi = sorted([s[1], e[1]])
                lo, hi = max(lo, -rho), min(hi, rho)
                if hi <= lo:
                    continue
                a, b = (lo, hi) if e[1] > s[1] else (hi, lo)
                near_pieces.append(Segment((0.0, a), (0.0, b), p.tag))
            else:
                near_pieces.append(p)
        near_pieces.append(Arc(rho, 0.0, math.pi, Tag.JUNCTION, uniform_spacing=policy.h_far))
        hn = lambda pts: np.minimum(h(pts), policy.h_far)
        near = _raw_mesh(near_pieces, boundary.interfaces, hn, policy.budget, boundary.anchors)
        V, T, edge_tags = _merge([far, near])
        if len(T) > policy.budget:
            raise MeshBudgetError(f"element budget {policy.budget} exceeded ({len(T)} triangles)")
    else:
        raw = _raw_mesh(boundary.pieces, boundary.interfaces, h, policy.budget, boundary.anchors)
        V, T, edge_tags = _merge([raw])
    T = _orient(V, T)
    # shared interface arcs appear twice after merging and are dropped
    bedges, btags = [], []
    for e, tags in edge_tags.items():
        if tags[0] is None:
            continue
        if len(tags) == 1 and not (tags[0] is Tag.JUNCTION and _is_split_arc(V, e, rho)):
            bedges.append(e)
            btags.append(tags[0])
    return Mesh(V, T, np.array(bedges), btags, order, curved)


def _is_split_arc(V, e, rho):
    if rho is None:
        return False
    r = np.linalg.norm(V[list(e)], axis=1)
    return bool(np.all(np.abs(r - rho) < 1e-12 * rho))


def mesh_domain(spec: DomainSpec, policy: GradingPolicy, order=2, curved=False) -> Mesh:
    return generate_mesh(build_domain(spec), policy, order, curved)


# ---------------------------------------------------------------------------
# Mesh text format

MESH_HEADER = "tubespec-mesh v1"


def write_mesh(mesh: Mesh, path):
    kind = f"P{mesh.order}" + ("c" if mesh.curved else "")
    lines = [MESH_HEADER, f"{len(mesh.vertices)} {len(mesh.triangles)} {len(mesh.boundary_edges)} {kind}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices.tolist()]
    lines += [f"{a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
    lines += [f"{a} {b} {t.value}" for (a, b), t in zip(mesh.boundary_edges.tolist(), mesh.boundary_tags)]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    try:
        if not lines or lines[0] != MESH_HEADER:
            raise MeshFormatError("missing 'tubespec-mesh v1' header")
        nv, nt, nb, order = lines[1].split()
        nv, nt, nb = int(nv), int(nt), int(nb)
        order, curved = {"P1": (1, False), "P2": (2, False), "P2c": (2, True)}[order]
        body = lines[2:]
        if len(body) != nv + nt + nb:
            raise MeshFormatError(f"expected {nv + nt + nb} body lines, found {len(body)}")
        V = np.array([[float(v) for v in ln.split()] for ln in body[:nv]])
        T = np.array([[int(v) for v in ln.split()] for ln in body[nv : nv + nt]], dtype=np.int64)
        B, tags = [], []
        for ln in body[nv + nt :]:
            a, b, t = ln.split()
            B.append((int(a), int(b)))
            tags.append(Tag(t))
        if V.shape != (nv, 2) or T.shape != (nt, 3):
            raise MeshFormatError("malformed vertex or triangle records")
        if T.min() < 0 or T.max() >= nv:
            raise MeshFormatError("triangle references unknown vertex")
        return Mesh(V, T, np.array(B).reshape(-1, 2), tags, order, curved)
    except MeshFormatError:
        raise
    except (ValueError, KeyError, IndexError) as exc:
        raise MeshFormatError(f"cannot parse mesh file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Quadrature on {|x| < r} (plus tube) and on the half-circle S_r^+


@dataclass
class QuadRule:
    """Points given by element index and reference coordinates."""

    elements: np.ndarray
    ref: np.ndarray
    weights: np.ndarray
    points: np.ndarray
    theta: np.ndarray | None = None

    @property
    def total(self):
        return float(self.weights.sum())


@dataclass
class ClippedRule:
    area: QuadRule
    arc: QuadRule
    radius: float


def _affine(mesh, tris):
    p = mesh.vertices[mesh.triangles[tris]]
    return p[:, 0], np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)


def _dist_to_triangle(p):
    """Distance from the origin to each triangle given as (n, 3, 2) corners."""
    d = np.full(len(p), np.inf)
    for i, j in ((0, 1), (1, 2), (2, 0)):
        a, b = p[:, i], p[:, j]
        ab = b - a
        t = np.clip(-(a * ab).sum(1) / np.maximum((ab * ab).sum(1), 1e-300), 0.0, 1.0)
        d = np.minimum(d, np.linalg.norm(a + t[:, None] * ab, axis=1))
    cross = lambda u, v: u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]
    s = [cross(p[:, j] - p[:, i], -p[:, i]) for i, j in ((0, 1), (1, 2), (2, 0))]
    inside = ((s[0] >= 0) & (s[1] >= 0) & (s[2] >= 0)) | ((s[0] <= 0) & (s[1] <= 0) & (s[2] <= 0))
    d[inside] = 0.0
    return d


def _circle_crossings(a, b, r):
    """Parameters t in [0, 1] where |a + t (b - a)| = r."""
    d = b - a
    A = d @ d
    B = 2 * a @ d
    C = a @ a - r * r
    disc = B * B - 4 * A * C
    if disc <= 0 or A == 0:
        return []
    sq = math.sqrt(disc)
    return [t for t in ((-B - sq) / (2 * A), (-B + sq) / (2 * A)) if 0.0 <= t <= 1.0]


def _segment_rule(p, q, r, n):
    """Quadrature for the circular segment between chord pq and the arc."""
    ta = math.atan2(p[1], p[0])
    tb = math.atan2(q[1], q[0])
    dt = (tb - ta + math.pi) % (2 * math.pi) - math.pi
    m = 0.5 * (p + q)
    dist = float(np.linalg.norm(m))
    if dist == 0.0:
        return np.zeros((0, 2)), np.zeros(0)
    nm = m / dist
    x, w = gauss_interval(n)
    pts, wts = [], []
    for xi, wi in zip(x, w):
        t = ta + dt * xi
        u = np.array([math.cos(t), math.sin(t)])
        cosang = float(u @ nm)
        rho0 = dist / cosang if cosang > 0 else r
        if rho0 >= r:
            continue
        for xj, wj in zip(x, w):
            rho = rho0 + (r - rho0) * xj
            pts.append(rho * u)
            wts.append(abs(dt) * wi * (r - rho0) * wj * rho)
    return np.array(pts).reshape(-1, 2), np.array(wts)


def _clip_leaf(tri, r, rule_pts, rule_w, seg_n):
    """Rule for tri ∩ {|x| < r}: chord-clipped polygon plus circular segment."""
    inside = np.linalg.norm(tri, axis=1) < r
    poly, cuts = [], []
    for i in range(3):
        a, b = tri[i], tri[(i + 1) % 3]
        if inside[i]:
            poly.append(a)
        ts = _circle_crossings(a, b, r)
        for t in sorted(ts):
            x = a + t * (b - a)
            poly.append(x)
            cuts.append(x)
    if len(cuts) != 2 or len(poly) < 3:
        c = tri.mean(axis=0)
        if np.linalg.norm(c) < r:
            return _tri_rule(tri, rule_pts, rule_w)
        return np.zeros((0, 2)), np.zeros(0)
    pts, wts = [], []
    p0 = poly[0]
    for k in range(1, len(poly) - 1):
        P, W = _tri_rule(np.array([p0, poly[k], poly[k + 1]]), rule_pts, rule_w)
        pts.append(P)
        wts.append(W)
    P, W = _segment_rule(cuts[0], cuts[1], r, seg_n)
    pts.append(P)
    wts.append(W)
    return np.vstack(pts), np.concatenate(wts)


def _tri_rule(tri, rule_pts, rule_w):
    d1, d2 = tri[1] - tri[0], tri[2] - tri[0]
    jac = abs(d1[0] * d2[1] - d1[1] * d2[0])
    return tri[0] + rule_pts[:, :1] * d1 + rule_pts[:, 1:] * d2, rule_w * jac


def clip_area_rule(mesh: Mesh, r: float, include_tube=True, degree=6, depth=4) -> QuadRule:
    """Quadrature for ``(mesh ∩ {|x| < r}) ∪ tube``.

    Triangles cut by the circle are bisected ``depth`` times (only the cut
    children recurse); leaves are clipped along the chord and the remaining
    circular segment gets a polar tensor rule.
    """
    if depth > 6:
        raise ValueError("subdivision depth must not exceed 6")
    rule_pts, rule_w = triangle_rule(degree)
    seg_n = max(2, (degree + 3) // 2)
    P = mesh.vertices[mesh.triangles]
    tube = mesh.tube_mask() if include_tube else np.zeros(len(P), bool)
    rmax = np.linalg.norm(P, axis=2).max(axis=1)
    full = tube | (rmax <= r)
    dmin = _dist_to_triangle(P)
    cut = (~full) & (dmin < r)
    elems, refs, wts = [], [], []
    nq = len(rule_w)
    fidx = np.flatnonzero(full)
    if len(fidx):
        jac = 2.0 * mesh.signed_areas()[fidx]
        elems.append(np.repeat(fidx, nq))
        refs.append(np.tile(rule_pts, (len(fidx), 1)))
        wts.append((jac[:, None] * rule_w[None]).ravel())
    # recursive bisection in physical coordinates, tracked per parent
    live = [(int(t), P[t]) for t in np.flatnonzero(cut)]
    for level in range(depth + 1):
        nxt = []
        for t, tri in live:
            norms = np.linalg.norm(tri, axis=1)
            if norms.max() <= r:
                X, W = _tri_rule(tri, rule_pts, rule_w)
            elif _dist_to_triangle(tri[None])[0] >= r:
                continue
            elif level < depth:
                m01, m12, m20 = 0.5 * (tri[0] + tri[1]), 0.5 * (tri[1] + tri[2]), 0.5 * (tri[2] + tri[0])
                for child in ((tri[0], m01, m20), (m01, tri[1], m12), (m20, m12, tri[2]), (m01, m12, m20)):
                    nxt.append((t, np.array(child)))
                continue
            else:
                X, W = _clip_leaf(tri, r, rule_pts, rule_w, seg_n)
            if len(W):
                elems.append(np.full(len(W), t))
                refs.append(X)  # physical for now
                wts.append(W)
        live = nxt
    if not elems:
        return QuadRule(np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)))
    # convert physical points of cut triangles to reference coordinates
    E = np.concatenate(elems)
    X = np.vstack(refs)
    Wt = np.concatenate(wts)
    n_full = len(fidx) * nq
    phys = np.empty_like(X)
    if n_full:
        a0, J = _affine(mesh, E[:n_full])
        phys[:n_full] = a0 + np.einsum("nij,nj->ni", J, X[:n_full])
    if len(E) > n_full:
        phys[n_full:] = X[n_full:]
        X[n_full:] = mesh.reference_coords(E[n_full:], X[n_full:])
    return QuadRule(E, X, Wt, phys)


def arc_rule(mesh: Mesh, r: float, n=4) -> QuadRule:
    """Composite Gauss rule on S_r^+ with breakpoints at mesh-edge crossings."""
    V = mesh.vertices
    a, b = V[mesh.edges[:, 0]], V[mesh.edges[:, 1]]
    d = b - a
    A = (d * d).sum(1)
    B = 2 * (a * d).sum(1)
    C = (a * a).sum(1) - r * r
    disc = B * B - 4 * A * C
    thetas = [0.0, math.pi]
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    for sgn in (-1.0, 1.0):
        t = (-B + sgn * sq) / (2 * A)
        ok = hit & (t >= 0) & (t <= 1)
        x = a[ok] + t[ok, None] * d[ok]
        keep = x[:, 0] > 0
        thetas.extend(np.arctan2(x[keep, 0], x[keep, 1]).tolist())
    th = np.unique(np.clip(np.array(thetas), 0.0, math.pi))
    th = th[np.concatenate([[True], np.diff(th) > 1e-13])]
    if th[-1] != math.pi:
        th = np.append(th, math.pi)
    lo, hi = th[:-1], th[1:]
    x, w = gauss_interval(n)
    theta = (lo[:, None] + (hi - lo)[:, None] * x[None]).ravel()
    weights = (r * (hi - lo)[:, None] * w[None]).ravel()
    mid = polar_point(r, 0.5 * (lo + hi))
    tri, _ = mesh.locate(mid)
    if np.any(tri < 0):
        # panels exactly on the outer boundary: nudge inward
        tri2, _ = mesh.locate(mid * (1 - 1e-10))
        tri = np.where(tri < 0, tri2, tri)
    if np.any(tri < 0):
        raise GeometryError(f"arc of radius {r} leaves the mesh")
    elems = np.repeat(tri, n)
    pts = polar_point(r, theta)
    ref = mesh.reference_coords(elems, pts)
    return QuadRule(elems, ref, weights, pts, theta)


def clip_quadrature(mesh: Mesh, r: float, include_tube=True, degree=6, depth=4) -> ClippedRule:
    """Area rule for ``Omega_r^eps`` and arc rule for ``S_r^+``."""
    outer = float(np.linalg.norm(mesh.vertices[mesh.vertices[:, 0] >= 0], axis=1).max())
    if not 0.0 < r < outer * (1 - 1e-12):
        raise GeometryError(f"radius {r} outside (0, {outer})")
    key = ("clip", float(r), include_tube, degree, depth)
    if key not in mesh._cache:
        mesh._cache[key] = ClippedRule(clip_area_rule(mesh, r, include_tube, degree, depth), arc_rule(mesh, r), r)
    return mesh._cache[key]

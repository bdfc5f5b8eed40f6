"""Lagrange finite elements: assembly, constraints, linear and eigen solves."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Mesh, Tag, _as_tag, on_circle
from .quadrature import gauss_interval, triangle_rule


class SolverError(RuntimeError):
    pass


class SingularMatrixError(SolverError):
    pass


class NotPositiveDefiniteError(SolverError):
    pass


class ConvergenceError(SolverError):
    pass


# ---------------------------------------------------------------------------
# Reference basis


def basis(order, ref):
    """Values (nq, nb) and reference gradients (nq, nb, 2) at ``ref`` points.

    Local P2 node order: three vertices, then midpoints of edges
    (0,1), (1,2), (2,0).
    """
    ref = np.atleast_2d(ref)
    x, y = ref[:, 0], ref[:, 1]
    L = np.stack([1.0 - x - y, x, y], axis=1)
    dL = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    if order == 1:
        return L, np.broadcast_to(dL, (len(ref), 3, 2)).copy()
    vals = np.empty((len(ref), 6))
    grads = np.empty((len(ref), 6, 2))
    for i in range(3):
        vals[:, i] = L[:, i] * (2 * L[:, i] - 1)
        grads[:, i] = (4 * L[:, i] - 1)[:, None] * dL[i]
    for m, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
        vals[:, 3 + m] = 4 * L[:, i] * L[:, j]
        grads[:, 3 + m] = 4 * (L[:, j][:, None] * dL[i] + L[:, i][:, None] * dL[j])
    return vals, grads


def _geometry(mesh, tris=None):
    """Origins, Jacobians, inverse-transpose Jacobians and |det J| per triangle."""
    t = mesh.triangles if tris is None else mesh.triangles[tris]
    p = mesh.vertices[t]
    J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    invT = np.empty_like(J)
    invT[:, 0, 0] = J[:, 1, 1] / det
    invT[:, 0, 1] = -J[:, 1, 0] / det
    invT[:, 1, 0] = -J[:, 0, 1] / det
    invT[:, 1, 1] = J[:, 0, 0] / det
    return p[:, 0], J, invT, np.abs(det)


def _point_geometry(mesh, tris, ref):
    """Isoparametric P2 Jacobian data at one reference point per entry."""
    _, dref = basis(2, ref)
    X = mesh.nodes[mesh.elements[tris]]
    J = np.einsum("nia,nib->nab", X, dref)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    invT = np.stack([np.stack([J[:, 1, 1], -J[:, 1, 0]], 1), np.stack([-J[:, 0, 1], J[:, 0, 0]], 1)], 1) / det[:, None, None]
    return J, invT, np.abs(det)


def _curved_local(mesh, kind, p=None, degree=8):
    """Local stiffness or mass matrices of the curved triangles."""
    tris = np.flatnonzero(mesh.curved_mask)
    pts, w = triangle_rule(degree)
    nq = len(w)
    T = np.repeat(tris, nq)
    R = np.tile(pts, (len(tris), 1))
    vals, dref = basis(2, pts)
    _, invT, det = _point_geometry(mesh, T, R)
    det = det.reshape(len(tris), nq)
    if kind == "stiffness":
        g = np.einsum("tab,tnb->tna", invT, np.tile(dref, (len(tris), 1, 1))).reshape(len(tris), nq, 6, 2)
        return tris, np.einsum("q,tq,tqia,tqja->tij", w, det, g, g)
    X = np.einsum("qi,tia->tqa", vals, mesh.nodes[mesh.elements[tris]])
    pw = np.ones((len(tris), nq)) if p is None or p.is_constant else p(X.reshape(-1, 2)).reshape(len(tris), nq)
    return tris, np.einsum("q,tq,qi,qj->tij", w, det * pw, vals, vals)


# ---------------------------------------------------------------------------
# Weights


class WeightKind(str, enum.Enum):
    CONSTANT_ONE = "ConstantOne"
    RADIAL_BUMP = "RadialBump"


@dataclass(frozen=True)
class WeightField:
    """Weight ``p`` of the eigenproblem.

    ``RadialBump`` is a quintic smoothstep in ``|x - center|``: 0 inside
    ``r_in``, 1 beyond ``r_out``.
    """

    kind: WeightKind = WeightKind.CONSTANT_ONE
    center: tuple[float, float] = (0.0, 0.0)
    r_in: float = 0.0
    r_out: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", WeightKind(self.kind))
        if self.kind is WeightKind.RADIAL_BUMP and not 0 <= self.r_in < self.r_out:
            raise ValueError("RadialBump needs 0 <= r_in < r_out")

    @property
    def is_constant(self):
        return self.kind is WeightKind.CONSTANT_ONE

    def __call__(self, pts):
        pts = np.atleast_2d(pts)
        if self.is_constant:
            return np.ones(len(pts))
        d = np.linalg.norm(pts - np.asarray(self.center), axis=1)
        s = np.clip((d - self.r_in) / (self.r_out - self.r_in), 0.0, 1.0)
        return s**3 * (10 - 15 * s + 6 * s * s)


# ---------------------------------------------------------------------------
# Assembly


def _scatter(mesh, local):
    el = mesh.elements
    nb = el.shape[1]
    rows = np.repeat(el, nb, axis=1).ravel()
    cols = np.tile(el, (1, nb)).ravel()
    n = mesh.n_nodes
    A = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    return A


def assemble_stiffness(mesh: Mesh) -> sp.csr_matrix:
    """``A_ij = int grad(phi_i) . grad(phi_j)``, exact on affine triangles."""
    pts, w = triangle_rule(max(0, 2 * (mesh.order - 1)))
    _, dref = basis(mesh.order, pts)
    _, _, invT, det = _geometry(mesh)
    g = np.einsum("tab,qnb->tqna", invT, dref)
    local = np.einsum("q,tqia,tqja->tij", w, g, g) * det[:, None, None]
    if mesh.curved_mask.any():
        tris, loc = _curved_local(mesh, "stiffness")
        local[tris] = loc
    return _scatter(mesh, local)


def assemble_mass(mesh: Mesh, p: WeightField | None = None) -> sp.csr_matrix:
    """``M_ij = int p phi_i phi_j`` with a rule exact for degree ``2 order + 2``."""
    p = p or WeightField()
    pts, w = triangle_rule(2 * mesh.order + 2)
    vals, _ = basis(mesh.order, pts)
    x0, J, _, det = _geometry(mesh)
    if p.is_constant:
        local = np.einsum("q,qi,qj->ij", w, vals, vals)[None] * det[:, None, None]
    else:
        X = x0[:, None, :] + np.einsum("tab,qb->tqa", J, pts)
        pw = p(X.reshape(-1, 2)).reshape(len(det), -1)
        local = np.einsum("q,tq,qi,qj->tij", w, pw, vals, vals) * det[:, None, None]
    if mesh.curved_mask.any():
        tris, loc = _curved_local(mesh, "mass", p)
        local[tris] = loc
    return _scatter(mesh, local)


def _edge_basis(order, n):
    s, w = gauss_interval(n)
    if order == 1:
        return np.column_stack([1 - s, s]), w, s
    # nodes (a, b, mid)
    return np.column_stack([(1 - s) * (1 - 2 * s), s * (2 * s - 1), 4 * s * (1 - s)]), w, s


def _edge_lengths(mesh: Mesh, edges):
    """Chord lengths, replaced by exact arc lengths for edges on origin-centred circles."""
    a = mesh.vertices[edges[:, 0]]
    b = mesh.vertices[edges[:, 1]]
    L = np.linalg.norm(b - a, axis=1)
    arc = on_circle(a, b)
    ra = np.linalg.norm(a[arc], axis=1)
    L[arc] = 2.0 * ra * np.arcsin(np.minimum(1.0, L[arc] / (2.0 * ra)))
    return L


def assemble_boundary_mass(mesh: Mesh, tag) -> sp.csr_matrix:
    """``B_ij = int phi_i phi_j ds`` over edges carrying ``tag``.

    Edges on circular arcs are weighted by their exact arc length, so the
    entries of ``B`` sum to the true length of the tagged boundary.
    """
    tag = _as_tag(tag)
    if not mesh.has_tag(tag):
        raise ValueError(f"tag {tag.value} absent from mesh")
    edges = mesh.edges_with_tag(tag)
    en = mesh.edge_nodes(edges)
    vals, w, _ = _edge_basis(mesh.order, mesh.order + 1)
    L = _edge_lengths(mesh, edges)
    local = np.einsum("q,qi,qj->ij", w, vals, vals)[None] * L[:, None, None]
    nb = en.shape[1]
    rows = np.repeat(en, nb, axis=1).ravel()
    cols = np.tile(en, (1, nb)).ravel()
    n = mesh.n_nodes
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def assemble_boundary_load(mesh: Mesh, tag, g, n_gauss=8) -> np.ndarray:
    """``b_i = int_{tag} g phi_i ds`` for a callable ``g(points)``."""
    edges = mesh.edges_with_tag(tag)
    en = mesh.edge_nodes(edges)
    vals, w, s = _edge_basis(mesh.order, n_gauss)
    a = mesh.vertices[edges[:, 0]]
    b = mesh.vertices[edges[:, 1]]
    X = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
    gv = np.asarray(g(X.reshape(-1, 2)), float).reshape(len(edges), -1)
    L = _edge_lengths(mesh, edges)
    contrib = np.einsum("q,eq,qi->ei", w, gv, vals) * L[:, None]
    out = np.zeros(mesh.n_nodes)
    np.add.at(out, en.ravel(), contrib.ravel())
    return out


def export_coo(A, path):
    """Write ``A`` as 0-based ``i j value`` lines."""
    C = sp.coo_matrix(A)
    with open(path, "w", newline="\n") as fh:
        for i, j, v in zip(C.row, C.col, C.data):
            fh.write(f"{i} {j} {v:.17g}\n")


# ---------------------------------------------------------------------------
# Constraints and solves


def apply_dirichlet(A, constrained):
    """Drop constrained rows and columns; returns ``(A_free, free_nodes)``."""
    n = A.shape[0]
    mask = np.ones(n, bool)
    mask[np.asarray(constrained, dtype=np.int64)] = False
    free = np.flatnonzero(mask)
    if len(free) == 0:
        raise ValueError("all nodes are constrained")
    A = sp.csr_matrix(A)
    return A[free][:, free].tocsr(), free


def _factor_spd(A):
    """Symmetric-mode LU; raises unless every pivot is positive."""
    A = sp.csc_matrix(A)
    try:
        lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options=dict(SymmetricMode=True))
    except RuntimeError as exc:
        raise SingularMatrixError(str(exc)) from exc
    d = lu.U.diagonal()
    scale = np.abs(d).max()
    if not np.all(np.isfinite(d)) or np.abs(d).min() <= 1e-14 * scale:
        raise SingularMatrixError("matrix is numerically singular")
    perm_ok = np.array_equal(lu.perm_r, lu.perm_c)
    if perm_ok and np.any(d < 0):
        raise NotPositiveDefiniteError("matrix is not positive definite")
    return lu


def solve_sparse(A, b, rtol=1e-12, check_spd=True):
    """Direct solve of an SPD system with a residual certificate."""
    A = sp.csr_matrix(A)
    b = np.asarray(b, float)
    lu = _factor_spd(A) if check_spd else spla.splu(sp.csc_matrix(A))
    x = lu.solve(b)
    nb = np.linalg.norm(b)
    for _ in range(3):
        r = b - A @ x
        if np.linalg.norm(r) <= rtol * max(nb, 1e-300):
            break
        x = x + lu.solve(r)
    r = np.linalg.norm(b - A @ x)
    if not np.isfinite(r) or (nb > 0 and r > max(rtol, 1e-10) * nb):
        raise SingularMatrixError(f"residual {r / nb:.3e} after refinement")
    return x


@dataclass(frozen=True)
class SolverConfig:
    shift: float = 0.0
    num_eigs: int = 6
    tol: float = 1e-10
    max_iter: int = 50

    def __post_init__(self):
        if self.num_eigs < 1:
            raise ValueError("num_eigs must be at least 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class EigenPair:
    """Eigenvalue with p-normalized nodal field (zero on constrained nodes)."""

    lam: float
    coeffs: np.ndarray
    residual: float
    norm: float = 1.0
    sign: int = 1
    degenerate: bool = False


RESIDUAL_TOL = 1e-9
DEGENERACY_TOL = 1e-6


def solve_generalized_eig(K, M, cfg: SolverConfig = SolverConfig(), free=None, n_total=None):
    """Smallest eigenpairs of ``K u = lambda M u``.

    Shift-invert Lanczos is followed by subspace iteration with
    Rayleigh-Ritz until every residual satisfies
    ``||K u - lambda M u|| <= 1e-9 ||K u||``.  When ``free`` is given the
    returned coefficient vectors are scattered to length ``n_total``.
    """
    K = sp.csr_matrix(K)
    M = sp.csr_matrix(M)
    n = K.shape[0]
    if M.nnz == 0 or not np.any(M.data != 0):
        raise ValueError("mass matrix vanishes identically")
    k = cfg.num_eigs
    if k >= n:
        raise ValueError("num_eigs must be smaller than the number of free nodes")
    if n <= 400:
        w, V = scipy.linalg.eigh(K.toarray(), M.toarray())
        lam, X = w[:k], V[:, :k]
    else:
        shifted = (K - cfg.shift * M).tocsc()
        lu = spla.splu(shifted)
        op = spla.LinearOperator((n, n), matvec=lu.solve, dtype=float)
        nev = min(n - 2, k + max(2, k // 2))
        # fixed start vector keeps repeated runs bit-identical
        v0 = np.random.default_rng(0).standard_normal(n)
        try:
            w, V = spla.eigsh(K, k=nev, M=M, sigma=cfg.shift, which="LM", OPinv=op, v0=v0, tol=cfg.tol * 1e-2, maxiter=cfg.max_iter * n)
        except spla.ArpackNoConvergence as exc:
            raise ConvergenceError(str(exc)) from exc
        order = np.argsort(w)
        lam, X = w[order], V[:, order]
        for it in range(cfg.max_iter):
            lam, X, res = _rayleigh_ritz(K, M, X)
            if np.all(res[:k] <= RESIDUAL_TOL):
                break
            X = lu.solve(M @ X)
        else:
            raise ConvergenceError(f"residual {res[:k].max():.2e} after {cfg.max_iter} iterations")
        lam, X = lam[:k], X[:, :k]
    if lam[0] <= 0:
        raise NotPositiveDefiniteError("stiffness pencil has a nonpositive eigenvalue")
    lam, X, res = _rayleigh_ritz(K, M, X)
    pairs = []
    for i in range(k):
        x = X[:, i]
        nrm = float(x @ (M @ x))
        x = x / math.sqrt(nrm)
        if free is not None:
            full = np.zeros(n_total)
            full[free] = x
            x = full
        pairs.append(EigenPair(float(lam[i]), x, float(res[i])))
    for a, b in zip(pairs[:-1], pairs[1:]):
        if abs(b.lam - a.lam) < DEGENERACY_TOL * abs(b.lam):
            a.degenerate = b.degenerate = True
    return pairs


def _rayleigh_ritz(K, M, X):
    KX, MX = K @ X, M @ X
    A = X.T @ KX
    B = X.T @ MX
    w, C = scipy.linalg.eigh(0.5 * (A + A.T), 0.5 * (B + B.T))
    X = X @ C
    KX, MX = KX @ C, MX @ C
    R = KX - MX * w
    res = np.linalg.norm(R, axis=0) / np.linalg.norm(KX, axis=0)
    return w, X, res


# ---------------------------------------------------------------------------
# Field evaluation


def interpolate(mesh: Mesh, func):
    """Nodal interpolant of ``func(points)``."""
    return np.asarray(func(mesh.nodes), float)


def evaluate(mesh: Mesh, coeffs, elems, ref, gradient=False):
    """Field values (and physical gradients) at reference points of elements."""
    elems = np.asarray(elems, dtype=np.int64)
    ref = np.atleast_2d(ref)
    vals, dref = basis(mesh.order, ref)
    c = np.asarray(coeffs)[mesh.elements[elems]]
    u = np.einsum("ni,ni->n", vals, c)
    if not gradient:
        return u
    _, _, invT, _ = _geometry(mesh, elems)
    curved = mesh.curved_mask[elems]
    if curved.any():
        invT[curved] = _point_geometry(mesh, elems[curved], ref[curved])[1]
    gref = np.einsum("ni,nia->na", c, dref)
    return u, np.einsum("nab,nb->na", invT, gref)


def evaluate_at(mesh: Mesh, coeffs, pts, gradient=False, outside=0.0):
    """Evaluate at physical points; points off the mesh get ``outside``."""
    pts = np.atleast_2d(pts)
    tri, ref = mesh.locate(pts)
    ok = tri >= 0
    u = np.full(len(pts), float(outside))
    g = np.zeros((len(pts), 2))
    if ok.any():
        if gradient:
            u[ok], g[ok] = evaluate(mesh, coeffs, tri[ok], ref[ok], True)
        else:
            u[ok] = evaluate(mesh, coeffs, tri[ok], ref[ok])
    return (u, g) if gradient else u


def energy(A, u):
    return float(u @ (A @ u))


def dirichlet_nodes(mesh: Mesh, tags=None):
    """Nodes on the given tags (default every boundary tag except the junction)."""
    if tags is None:
        return mesh.outer_boundary_nodes()
    return mesh.nodes_on(tags)


def dirichlet_eigenproblem(mesh: Mesh, p: WeightField | None = None, cfg: SolverConfig = SolverConfig()):
    """Eigenpairs of the Dirichlet Laplacian ``-Delta u = lambda p u`` on ``mesh``."""
    K = assemble_stiffness(mesh)
    M = assemble_mass(mesh, p)
    Kf, free = apply_dirichlet(K, dirichlet_nodes(mesh))
    Mf = M[free][:, free]
    return solve_generalized_eig(Kf, Mf, cfg, free=free, n_total=mesh.n_nodes)

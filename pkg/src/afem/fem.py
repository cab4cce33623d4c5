"""P1 assembly and linear solves for  -div(exp(kappa) grad u) = f,  u = 0 on the boundary.

Sparse operators are ``scipy.sparse.csr_matrix`` instances with sorted column
indices.  All element integrals use the three-point mid-edge rule, which is
exact for quadratics, so mass and load are exact for P1 data and the
coefficient ``exp(kappa)`` is sampled at the same points the gradient of the
stiffness with respect to ``kappa`` uses.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import AssemblyError, MeshError, SolverError
from .mesh import FeFunction, Mesh, build_unit_square_mesh

SparseMatrix = sp.csr_matrix

DEFAULT_TOL = 1e-10


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (n_points, 3) barycentric coordinates
    weights: np.ndarray  # sum to 1; multiply by the triangle area
    degree: int


MID_EDGE = QuadratureRule(
    points=np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]),
    weights=np.full(3, 1.0 / 3.0),
    degree=2,
)

# 7-point rule exact to degree 5, for error norms against smooth reference solutions
_a1, _b1 = 0.059715871789770, 0.470142064105115
_a2, _b2 = 0.797426985353087, 0.101286507323456
DEGREE5 = QuadratureRule(
    points=np.array([
        [1 / 3, 1 / 3, 1 / 3],
        [_a1, _b1, _b1], [_b1, _a1, _b1], [_b1, _b1, _a1],
        [_a2, _b2, _b2], [_b2, _a2, _b2], [_b2, _b2, _a2],
    ]),
    weights=np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3),
    degree=5,
)

_REF_GRADS = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


class _Element(NamedTuple):
    triangles: np.ndarray  # (E, 3)
    areas: np.ndarray  # (E,)
    grads: np.ndarray  # (E, 3, 2) gradients of the three hat functions
    indptr: np.ndarray
    indices: np.ndarray
    scatter: np.ndarray  # (E * 9,) position of each local entry in the CSR data array
    rows: np.ndarray  # row index of each stored entry


@lru_cache(maxsize=32)
def _element_data(nx: int, ny: int) -> _Element:
    mesh = build_unit_square_mesh(nx, ny)
    tri = mesh.triangles
    p = mesh.vertices[tri]
    jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns are edges
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    inv = np.linalg.inv(jac)
    grads = _REF_GRADS @ inv  # (E, 3, 2)

    n = mesh.n_vertices
    r = np.repeat(tri, 3, axis=1).ravel()
    c = np.tile(tri, (1, 3)).ravel()
    pattern = sp.csr_matrix((np.ones_like(r, dtype=np.float64), (r, c)), shape=(n, n))
    pattern.sum_duplicates()
    pattern.sort_indices()
    indptr, indices = pattern.indptr, pattern.indices
    # locate (r, c) in the CSR structure; columns are sorted within each row
    scatter = np.empty(r.size, dtype=np.int64)
    for k, (row, col) in enumerate(zip(r, c)):
        lo, hi = indptr[row], indptr[row + 1]
        scatter[k] = lo + np.searchsorted(indices[lo:hi], col)
    rows = np.repeat(np.arange(n), np.diff(indptr))
    for a in (tri, det, grads, indptr, indices, scatter, rows):
        a.setflags(write=False)
    return _Element(tri, 0.5 * det, grads, indptr, indices, scatter, rows)


def _element(mesh: Mesh) -> _Element:
    return _element_data(mesh.nx, mesh.ny)


def _assemble(mesh: Mesh, local: np.ndarray) -> SparseMatrix:
    el = _element(mesh)
    data = np.bincount(el.scatter, weights=local.reshape(-1), minlength=el.indices.size)
    n = mesh.n_vertices
    return sp.csr_matrix((data, el.indices.copy(), el.indptr.copy()), shape=(n, n))


def kappa_at_quadrature(kappa: np.ndarray, mesh: Mesh, rule: QuadratureRule = MID_EDGE) -> np.ndarray:
    """Values of the P1 interpolant of ``kappa`` at the quadrature points, shape (E, Q)."""
    return np.asarray(kappa)[_element(mesh).triangles] @ rule.points.T


def element_conductance(kappa: np.ndarray, mesh: Mesh, rule: QuadratureRule = MID_EDGE) -> np.ndarray:
    """Per-element integral of exp(kappa), i.e. the factor multiplying grad phi_a . grad phi_b."""
    el = _element(mesh)
    with np.errstate(over="ignore", invalid="ignore"):
        ek = np.exp(kappa_at_quadrature(kappa, mesh, rule))
    bad = np.flatnonzero(~np.all(np.isfinite(ek), axis=1))
    if bad.size:
        raise AssemblyError(int(bad[0]), "exp(kappa) overflow")
    return el.areas * (ek @ rule.weights)


def conductance_sensitivity(
    kappa: np.ndarray, mesh: Mesh, elementwise: np.ndarray, rule: QuadratureRule = MID_EDGE
) -> np.ndarray:
    """Nodal vector ``g[p] = sum_e  d(conductance_e)/d(kappa_p) * elementwise[e]``.

    This is the transpose of the Jacobian of :func:`element_conductance`
    applied to ``elementwise``.
    """
    el = _element(mesh)
    ek = np.exp(kappa_at_quadrature(kappa, mesh, rule))  # (E, Q)
    # d/d kappa_a of area * sum_q w_q exp(kappa_q) = area * sum_q w_q exp(kappa_q) * bary_q[a]
    local = (el.areas * elementwise)[:, None] * ((ek * rule.weights) @ rule.points)  # (E, 3)
    return np.bincount(el.triangles.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)


def _check_same_mesh(u: FeFunction, mesh: Mesh):
    if not u.mesh.compatible(mesh):
        raise MeshError("function does not live on the target mesh")


def stiffness_from_kappa(kappa: np.ndarray, mesh: Mesh) -> SparseMatrix:
    el = _element(mesh)
    k_e = element_conductance(kappa, mesh)
    local = k_e[:, None, None] * np.einsum("eak,ebk->eab", el.grads, el.grads)
    return _assemble(mesh, local)


def assemble_stiffness(kappa: FeFunction) -> SparseMatrix:
    """Stiffness matrix A[i, j] = integral of exp(kappa) grad phi_i . grad phi_j."""
    return stiffness_from_kappa(kappa.dofs, kappa.mesh)


@lru_cache(maxsize=32)
def _mass(nx: int, ny: int) -> SparseMatrix:
    mesh = build_unit_square_mesh(nx, ny)
    el = _element(mesh)
    b = MID_EDGE.points
    ref = (b.T * MID_EDGE.weights) @ b  # (3, 3): sum_q w_q phi_a(q) phi_b(q)
    local = el.areas[:, None, None] * ref[None]
    m = _assemble(mesh, local)
    m.data.setflags(write=False)
    return m


def mass_matrix(mesh: Mesh) -> SparseMatrix:
    """Cached, read-only mass matrix for ``mesh``."""
    return _mass(mesh.nx, mesh.ny)


def assemble_mass(mesh: Mesh) -> SparseMatrix:
    return mass_matrix(mesh).copy()


def load_vector(f: np.ndarray, mesh: Mesh, rule: QuadratureRule = MID_EDGE) -> np.ndarray:
    el = _element(mesh)
    fq = np.asarray(f)[el.triangles] @ rule.points.T  # (E, Q)
    local = el.areas[:, None] * ((fq * rule.weights) @ rule.points)  # (E, 3)
    return np.bincount(el.triangles.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)


def assemble_load(f: FeFunction) -> np.ndarray:
    """b[i] = integral of f phi_i."""
    return load_vector(f.dofs, f.mesh)


def apply_dirichlet(A: SparseMatrix, b: np.ndarray, boundary) -> tuple[SparseMatrix, np.ndarray]:
    """Symmetric elimination of homogeneous Dirichlet rows and columns.

    Boundary rows and columns are zeroed, the boundary diagonal set to one and
    the boundary entries of ``b`` set to zero.  Inputs are not modified.
    """
    A = sp.csr_matrix(A, copy=True)
    A.sort_indices()
    n = A.shape[0]
    bnd = np.zeros(n, dtype=bool)
    bnd[np.fromiter(boundary, dtype=np.int64)] = True
    rows = np.repeat(np.arange(n), np.diff(A.indptr))
    cols = A.indices
    A.data[bnd[rows] | bnd[cols]] = 0.0
    on_diag = (rows == cols) & bnd[rows]
    A.data[on_diag] = 1.0
    missing = np.setdiff1d(np.flatnonzero(bnd), rows[on_diag])
    if missing.size:
        fill = np.zeros(n)
        fill[missing] = 1.0
        A = (A + sp.diags(fill, format="csr")).tocsr()
        A.sort_indices()
    b = np.array(b, dtype=np.float64)
    b[bnd] = 0.0
    return A, b


class SolveInfo(NamedTuple):
    iterations: int
    residual: float


def solve_spd(
    A: SparseMatrix,
    b: np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iter: int | None = None,
    x0: np.ndarray | None = None,
    preconditioner: str | None = None,
    error_cls: type[SolverError] = SolverError,
    return_info: bool = False,
):
    """Conjugate gradients for a symmetric positive definite ``A``.

    Stops once the true relative residual ||Ax - b|| / ||b|| is at most ``tol``.
    ``preconditioner`` may be ``None`` or ``"jacobi"``.
    """
    b = np.asarray(b, dtype=np.float64)
    n = b.shape[0]
    max_iter = 10 * n if max_iter is None else max_iter
    nb = np.linalg.norm(b)
    if nb == 0.0:
        x = np.zeros(n)
        return (x, SolveInfo(0, 0.0)) if return_info else x
    if preconditioner is None:
        inv_diag = None
    elif preconditioner == "jacobi":
        inv_diag = 1.0 / A.diagonal()
    else:
        raise ValueError(f"unknown preconditioner {preconditioner!r}")

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    it = 0
    # outer loop restarts from the true residual whenever the recursive one has drifted
    while True:
        r = b - A @ x
        res = float(np.linalg.norm(r) / nb)
        if res <= tol or it >= max_iter:
            break
        z = r if inv_diag is None else inv_diag * r
        p = z.copy()
        rz = r @ z
        while it < max_iter:
            Ap = A @ p
            pAp = p @ Ap
            if not pAp > 0.0:
                raise error_cls(float(np.linalg.norm(b - A @ x) / nb), it, tol)
            alpha = rz / pAp
            x += alpha * p
            r -= alpha * Ap
            it += 1
            if np.linalg.norm(r) <= tol * nb:
                break
            z = r if inv_diag is None else inv_diag * r
            rz_new = r @ z
            p *= rz_new / rz
            p += z
            rz = rz_new
    if not res <= tol:
        raise error_cls(res, it, tol)
    return (x, SolveInfo(it, float(res))) if return_info else x


def constrained_system(kappa: np.ndarray, f: np.ndarray, mesh: Mesh) -> tuple[SparseMatrix, np.ndarray]:
    A = stiffness_from_kappa(kappa, mesh)
    b = load_vector(f, mesh)
    return apply_dirichlet(A, b, mesh.boundary_nodes)


def solve_forward(kappa: FeFunction, f: FeFunction, tol: float = DEFAULT_TOL) -> FeFunction:
    """Discrete solution u(kappa) of the heat problem with zero boundary values."""
    _check_same_mesh(f, kappa.mesh)
    mesh = kappa.mesh
    A, b = constrained_system(kappa.dofs, f.dofs, mesh)
    u = solve_spd(A, b, tol)
    u[mesh.boundary_mask] = 0.0
    return FeFunction(mesh, u)


def l2_inner(a: np.ndarray, b: np.ndarray, mesh: Mesh) -> float:
    return float(np.asarray(a) @ (mass_matrix(mesh) @ np.asarray(b)))


def l2_normsq(d: FeFunction) -> float:
    """Squared L2(Omega) norm  d^T M d."""
    return max(l2_inner(d.dofs, d.dofs, d.mesh), 0.0)


def l2_error(u: FeFunction, exact, rule: QuadratureRule = DEGREE5) -> float:
    """||u - exact||_L2 with ``exact(x, y)`` sampled at the points of ``rule``."""
    mesh = u.mesh
    el = _element(mesh)
    xy = mesh.vertices[el.triangles]  # (E, 3, 2)
    q = np.einsum("qa,eak->eqk", rule.points, xy)
    uq = u.dofs[el.triangles] @ rule.points.T
    d = uq - exact(q[..., 0], q[..., 1])
    return float(np.sqrt(np.sum(el.areas * ((d * d) @ rule.weights))))

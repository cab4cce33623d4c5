"""Tape operators coupling the FEM solver to the autodiff tape.

* :class:`PdeSolve` maps nodal conductivity ``kappa`` to the discrete
  solution ``u(kappa)``; its backward pass is the adjoint method: one solve
  with the transposed constrained operator followed by the action of
  ``-(dF/dkappa)^T`` on the adjoint state.
* :class:`L2LossQ` is ``coeff * (a - b)^T M (a - b)`` with the mass matrix
  ``M``, i.e. a squared L2(Omega) norm rather than a sum over coefficients.
* :class:`CastToGrid` / :class:`CastToDofs` reindex between DoF vectors and
  the structured-grid tensors a CNN consumes.
"""
from __future__ import annotations

import numpy as np

from .errors import AdjointSolverError, CastError, MeshMismatchError, SolverError
from .fem import (
    DEFAULT_TOL,
    _element,
    conductance_sensitivity,
    constrained_system,
    mass_matrix,
    solve_spd,
)
from .mesh import FeFunction, Mesh
from .tape import Op, Tape, Variable, _tape_of


def _dofs(x, mesh: Mesh) -> np.ndarray:
    if isinstance(x, FeFunction):
        if not x.mesh.compatible(mesh):
            raise MeshMismatchError("FeFunction lives on a different mesh")
        return x.dofs
    return np.asarray(x, dtype=np.float64)


class CastToGrid(Op):
    name = "cast_to_grid"

    def __init__(self, mesh: Mesh):
        self.mesh = mesh

    def forward(self, v):
        if v.shape != (self.mesh.n_vertices,):
            raise CastError(v.shape, (self.mesh.n_vertices,))
        return v.reshape(self.mesh.grid_shape), None

    def backward(self, ctx, w, needs):
        return (w.reshape(-1),)


class CastToDofs(Op):
    name = "cast_to_dofs"

    def __init__(self, mesh: Mesh):
        self.mesh = mesh

    def forward(self, t):
        if t.shape != self.mesh.grid_shape:
            raise CastError(t.shape, self.mesh.grid_shape)
        return t.reshape(-1), None

    def backward(self, ctx, w, needs):
        return (w.reshape(self.mesh.grid_shape),)


def adjoint_solve(A, w: np.ndarray, tol: float) -> np.ndarray:
    """Solve A^T lam = w.  The constrained heat operator is symmetric, so A^T = A."""
    return solve_spd(A.T.tocsr(), w, tol, error_cls=AdjointSolverError)


class PdeSolve(Op):
    name = "pde_solve"

    def __init__(self, mesh: Mesh, f, tol: float = DEFAULT_TOL):
        self.mesh = mesh
        self.f = _dofs(f, mesh).copy()
        self.tol = tol

    def forward(self, kappa):
        if kappa.shape != (self.mesh.n_vertices,):
            raise MeshMismatchError(f"kappa has shape {kappa.shape}, mesh has {self.mesh.n_vertices} vertices")
        A, b = constrained_system(kappa, self.f, self.mesh)
        u = solve_spd(A, b, self.tol, error_cls=SolverError)
        u[self.mesh.boundary_mask] = 0.0
        return u, (kappa.copy(), A, u)

    def backward(self, ctx, w, needs):
        kappa, A, u = ctx
        w = np.array(w, dtype=np.float64)
        # constrained unknowns carry no variation
        w[self.mesh.boundary_mask] = 0.0
        if not np.any(w):
            return (np.zeros_like(kappa),)
        lam = adjoint_solve(A, w, self.tol)
        el = _element(self.mesh)
        grad_u = np.einsum("ea,eak->ek", u[el.triangles], el.grads)
        grad_lam = np.einsum("ea,eak->ek", lam[el.triangles], el.grads)
        per_element = np.einsum("ek,ek->e", grad_u, grad_lam)
        return (-conductance_sensitivity(kappa, self.mesh, per_element),)


class L2LossQ(Op):
    name = "l2_lossq"

    def __init__(self, mesh: Mesh, coeff: float = 0.5):
        self.mesh = mesh
        self.coeff = float(coeff)

    def forward(self, a, b):
        n = self.mesh.n_vertices
        if a.shape != (n,) or b.shape != (n,):
            raise MeshMismatchError(f"operands {a.shape}, {b.shape} do not match mesh with {n} dofs")
        d = a - b
        Md = mass_matrix(self.mesh) @ d
        return self.coeff * (d @ Md), Md

    def backward(self, ctx, w, needs):
        ga = (2.0 * self.coeff * w) * ctx
        return ga, -ga


def op_cast_to_grid(v: Variable, mesh: Mesh) -> Variable:
    return v.tape.apply(CastToGrid(mesh), v)


def op_cast_to_dofs(t: Variable, mesh: Mesh) -> Variable:
    return t.tape.apply(CastToDofs(mesh), t)


def op_pde_solve(kappa: Variable, f, tol: float = DEFAULT_TOL, mesh: Mesh | None = None) -> Variable:
    """``u(kappa)`` on the tape; ``f`` is a fixed source (FeFunction or dof vector)."""
    if mesh is None:
        if not isinstance(f, FeFunction):
            raise MeshMismatchError("pass mesh= when f is a bare dof vector")
        mesh = f.mesh
    return kappa.tape.apply(PdeSolve(mesh, f, tol), kappa)


def op_l2_lossq(a, b, coeff: float = 0.5, mesh: Mesh | None = None, tape: Tape | None = None) -> Variable:
    """``coeff * ||a - b||^2_{L2}``; either operand may be a constant FeFunction or array."""
    if mesh is None:
        for x in (a, b):
            if isinstance(x, FeFunction):
                mesh = x.mesh
                break
        else:
            raise MeshMismatchError("pass mesh= when neither operand is an FeFunction")
    tape = _tape_of(tape, a, b)
    return tape.apply(L2LossQ(mesh, coeff), _dofs(a, mesh) if not isinstance(a, Variable) else a,
                      _dofs(b, mesh) if not isinstance(b, Variable) else b)

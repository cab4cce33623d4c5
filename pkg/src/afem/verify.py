"""Gradient checks and the manufactured-solution convergence study behind the CLI."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fem import l2_error, solve_forward
from .fem_ops import op_cast_to_dofs, op_cast_to_grid, op_l2_lossq, op_pde_solve
from .mesh import FeFunction, build_unit_square_mesh, interpolate
from .nn import BoundParams, ModelConfig, init_params, model_forward
from .pipeline import InverseProblem, Sample, sample_loss
from .tape import ReducedFunctional, Tape, backward, finite_difference, taylor_test, vsum

FD_TOL = 1e-5
FD_STEP = 1e-5
MIN_ORDER = 1.9


@dataclass
class Check:
    name: str
    kind: str  # "fd" or "taylor"
    value: float | str
    passed: bool

    def row(self) -> str:
        v = self.value if isinstance(self.value, str) else f"{self.value:.3e}"
        return f"{self.name:<40} {self.kind:<7} {v:>24}  {'PASS' if self.passed else 'FAIL'}"


def manufactured_convergence(levels: Sequence[int], tol: float = 1e-10):
    """L2 errors of u_h against sin(pi x) sin(pi y) for kappa = 0, and observed orders."""
    exact = lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y)
    errors = []
    for n in levels:
        mesh = build_unit_square_mesh(n, n)
        kappa = interpolate(lambda x, y: 0.0, mesh)
        f = interpolate(lambda x, y: 2 * np.pi**2 * exact(x, y), mesh)
        errors.append(l2_error(solve_forward(kappa, f, tol), exact))
    orders = [
        math.log(e1 / e2) / math.log(n2 / n1)
        for (n1, e1), (n2, e2) in zip(zip(levels, errors), zip(levels[1:], errors[1:]))
    ]
    return errors, orders


def _fd_check(name, rf, direction, seed=None, corrupt=1.0) -> Check:
    grads = backward(rf.rebuild(), seed)
    adj = corrupt * sum(float(np.vdot(g, d)) for g, d in zip(grads, direction))
    fd = finite_difference(rf, direction, FD_STEP, seed)
    err = abs(adj - fd) / max(abs(fd), 1e-300)
    return Check(name, "fd", err, bool(err < FD_TOL))


def _taylor_check(name, rf, direction, corrupt=1.0) -> Check:
    grad = None
    if corrupt != 1.0:
        grad = [corrupt * g for g in backward(rf.rebuild())]
    res = taylor_test(rf, direction=direction, gradient=grad)
    return Check(name, "taylor", "exact" if res.exact else str(res), res.passed(MIN_ORDER))


def run_gradcheck(nx: int = 8, ny: int = 8, seed: int = 0, corrupt: float = 1.0) -> list[Check]:
    """Finite-difference and Taylor checks for every FEM-coupled tape operator.

    ``corrupt`` scales every adjoint gradient before it is compared; any value
    other than 1 must make the checks fail.
    """
    rng = np.random.default_rng(seed)
    mesh = build_unit_square_mesh(nx, ny)
    n = mesh.n_vertices
    tol = 1e-12
    f = FeFunction(mesh, 1.0 + rng.random(n))
    k0 = 0.3 * rng.standard_normal(n)
    checks = []

    tape = Tape()
    kappa = tape.variable(k0)
    u = op_pde_solve(kappa, f, tol)
    w = rng.standard_normal(n)
    dk = rng.standard_normal(n)
    checks.append(_fd_check("pde_solve (seeded w)", ReducedFunctional(u, [kappa]), [dk], w, corrupt))

    tape = Tape()
    a = tape.variable(rng.standard_normal(n))
    b = tape.variable(rng.standard_normal(n))
    loss = op_l2_lossq(a, b, 0.5, mesh=mesh)
    checks.append(_fd_check("l2_lossq", ReducedFunctional(loss, [a, b]),
                            [rng.standard_normal(n), rng.standard_normal(n)], corrupt=corrupt))

    tape = Tape()
    grid = tape.variable(k0.reshape(mesh.grid_shape))
    out = op_cast_to_grid(op_pde_solve(op_cast_to_dofs(grid, mesh), f, tol), mesh)
    wg = rng.standard_normal(mesh.grid_shape)
    checks.append(_fd_check("grid -> dofs -> pde_solve -> grid", ReducedFunctional(out, [grid]),
                            [rng.standard_normal(mesh.grid_shape)], wg, corrupt))

    config = ModelConfig(grid_shape=mesh.grid_shape)
    params = init_params(config, seed)
    tape = Tape()
    bound = BoundParams(params, tape)
    x = tape.constant(rng.standard_normal(mesh.grid_shape))
    probe = vsum(model_forward(bound, x))
    pdirs = [rng.standard_normal(v.shape) for v in bound.values()]
    checks.append(_fd_check("cnn forward (sum probe)", ReducedFunctional(probe, list(bound.values())),
                            pdirs, corrupt=corrupt))

    tape = Tape()
    kappa = tape.variable(k0)
    target = FeFunction(mesh, rng.standard_normal(n) * 0.01)
    J = op_l2_lossq(op_pde_solve(kappa, f, tol), target, 0.5)
    checks.append(_taylor_check("L2 misfit of u(kappa) wrt kappa", ReducedFunctional(J, [kappa]), [dk], corrupt))

    problem = InverseProblem(mesh, f, 0.0, 1.0, tol)
    kappa_exact = FeFunction(mesh, 0.3 * rng.standard_normal(n))
    u_obs = solve_forward(kappa_exact, f, tol)
    sample = Sample(kappa_exact, u_obs, seed)
    tape = Tape()
    bound = BoundParams(params, tape)
    loss = sample_loss(bound, sample, 0.5, tape, problem)
    # unit-length direction keeps h * direction inside the quadratic regime of tanh
    scale = 1.0 / math.sqrt(sum(float(np.vdot(d, d)) for d in pdirs))
    checks.append(_taylor_check("sample loss wrt model parameters",
                                ReducedFunctional(loss, list(bound.values())),
                                [scale * d for d in pdirs], corrupt))
    return checks

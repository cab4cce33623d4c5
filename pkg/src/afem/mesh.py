"""Structured P1 meshes of the unit square and nodal finite-element functions.

Vertex ``k`` sits at grid position ``(i, j)`` with ``k = j * (nx + 1) + i`` and
coordinates ``(i / nx, j / ny)``.  Each cell is split along its lower-left to
upper-right diagonal into two counter-clockwise triangles.  With this ordering
the conversion between a DoF vector and a ``(ny + 1, nx + 1)`` grid is a plain
reshape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from .errors import CastError, InterpolationError, MeshError

_BOUNDARY_TOL = 1e-14


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    nx: int
    ny: int
    vertices: np.ndarray = field(repr=False)
    triangles: np.ndarray = field(repr=False)
    boundary_nodes: frozenset = field(repr=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return (self.ny + 1, self.nx + 1)

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[list(self.boundary_nodes)] = True
        return _frozen(mask)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return _frozen(0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]))

    def compatible(self, other: "Mesh") -> bool:
        return self is other or (self.nx == other.nx and self.ny == other.ny)


@dataclass(frozen=True, eq=False)
class FeFunction:
    """P1 function given by its nodal values on ``mesh``."""

    mesh: Mesh
    dofs: np.ndarray

    def __post_init__(self):
        dofs = np.array(self.dofs, dtype=np.float64)
        if dofs.shape != (self.mesh.n_vertices,):
            raise MeshError(
                f"expected {self.mesh.n_vertices} dofs, got array of shape {dofs.shape}"
            )
        if not np.all(np.isfinite(dofs)):
            raise MeshError("FeFunction dofs must be finite")
        object.__setattr__(self, "dofs", _frozen(dofs))

    def __sub__(self, other: "FeFunction") -> "FeFunction":
        if not self.mesh.compatible(other.mesh):
            raise MeshError("functions live on different meshes")
        return FeFunction(self.mesh, self.dofs - other.dofs)


def build_unit_square_mesh(nx: int, ny: int) -> Mesh:
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise MeshError(f"cell counts must be positive integers, got nx={nx}, ny={ny}")
    nx, ny = int(nx), int(ny)

    jj, ii = np.meshgrid(np.arange(ny + 1), np.arange(nx + 1), indexing="ij")
    vertices = np.column_stack([ii.ravel() / nx, jj.ravel() / ny])

    ci, cj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    v00 = (cj * (nx + 1) + ci).ravel()
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    # interleave so that triangles of the same cell are adjacent
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    x, y = vertices[:, 0], vertices[:, 1]
    on_bnd = (
        (np.abs(x) <= _BOUNDARY_TOL)
        | (np.abs(x - 1.0) <= _BOUNDARY_TOL)
        | (np.abs(y) <= _BOUNDARY_TOL)
        | (np.abs(y - 1.0) <= _BOUNDARY_TOL)
    )
    return Mesh(
        nx=nx,
        ny=ny,
        vertices=_frozen(vertices),
        triangles=_frozen(triangles),
        boundary_nodes=frozenset(np.flatnonzero(on_bnd).tolist()),
    )


def interpolate(g: Callable[[np.ndarray, np.ndarray], np.ndarray], mesh: Mesh) -> FeFunction:
    """Nodal interpolant of ``g``.

    ``g`` is called once with the arrays of vertex x and y coordinates and may
    return a scalar (broadcast) or one value per vertex.
    """
    x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
    with np.errstate(all="ignore"):
        values = np.broadcast_to(np.asarray(g(x, y), dtype=np.float64), x.shape).copy()
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise InterpolationError(int(bad[0]), float(values[bad[0]]))
    return FeFunction(mesh, values)


def evaluate(u: FeFunction, x, y) -> np.ndarray:
    """Evaluate the P1 function ``u`` at points of the closed unit square."""
    mesh = u.mesh
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any((x < 0) | (x > 1) | (y < 0) | (y > 1)):
        raise MeshError("evaluation point outside the unit square")
    sx, sy = x * mesh.nx, y * mesh.ny
    i = np.minimum(np.floor(sx).astype(np.int64), mesh.nx - 1)
    j = np.minimum(np.floor(sy).astype(np.int64), mesh.ny - 1)
    s, t = sx - i, sy - j
    grid = u.dofs.reshape(mesh.grid_shape)
    u00 = grid[j, i]
    u10 = grid[j, i + 1]
    u01 = grid[j + 1, i]
    u11 = grid[j + 1, i + 1]
    lower = u00 + s * (u10 - u00) + t * (u11 - u10)
    upper = u00 + t * (u01 - u00) + s * (u11 - u01)
    return np.where(s >= t, lower, upper)


def grid_view(u: FeFunction) -> np.ndarray:
    """DoF vector -> ``(ny + 1, nx + 1)`` array, row ``j`` holding ``y = j / ny``."""
    return u.dofs.reshape(u.mesh.grid_shape).copy()


def grid_unview(t: np.ndarray, mesh: Mesh) -> FeFunction:
    t = np.asarray(t, dtype=np.float64)
    if t.shape != mesh.grid_shape:
        raise CastError(t.shape, mesh.grid_shape)
    return FeFunction(mesh, t.reshape(-1))

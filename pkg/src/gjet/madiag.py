"""Finite-difference residuals of the equations on grid functions.

Diagnostics, not a PDE solver: given values of a function on the grid's
nodal lattice (the cell centers), evaluate

  * the Monge-Ampere residual   det[D^2 u - A(., u, Du)] - B(., u, Du),
  * the raw Jacobian residual   det DT - psi  with T = Y(., u, Du),
  * the ellipticity field       min eig (D^2 u - A),
  * the dual-equation residual  det[D^2 v - A*(., v, Dv)] - B*(., v, Dv).

Central differences with the grid's own spacing; a one-node margin is
excluded (two for the Jacobian residual, which differentiates the
composed map).  Nodes where the forward map has no admissible solution
are masked and counted, never silently filled.

The right-hand density psi is a caller-supplied evaluator
psi(x, u, p) -> float.  For separable data the sign convention is
psi = f/(g o Y) * sign(det E), which makes B = det E * psi nonnegative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import genfun
from .errors import GjetError
from .gconvex import SourceGrid
from .genfun import GeneratingFunction

__all__ = [
    "GridFunction",
    "ResidualField",
    "ma_residual",
    "pje_residual",
    "ellipticity_check",
    "dual_residual",
    "make_separable_psi",
    "manufactured_case",
    "MANUFACTURED_NAMES",
]


@dataclass(frozen=True)
class GridFunction:
    """Values on the grid's nodal lattice, one value per node."""

    grid: SourceGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(self.grid.res)
        if not np.all(np.isfinite(v)):
            raise ValueError("grid function has non-finite values")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_callable(cls, grid: SourceGrid, fn) -> "GridFunction":
        vals = np.apply_along_axis(fn, 1, grid.centers)
        return cls(grid, vals.reshape(grid.res))


@dataclass(frozen=True)
class ResidualField:
    """Residual values with NaN outside the evaluated interior."""

    grid: SourceGrid
    values: np.ndarray
    mask: np.ndarray          # True where a value was computed
    masked_count: int         # interior nodes lost to domain violations

    def max_abs(self) -> float:
        if not self.mask.any():
            return math.nan
        return float(np.nanmax(np.abs(self.values[self.mask])))


def _gradient(values: np.ndarray, h: np.ndarray) -> np.ndarray:
    """(n, res...) central-difference gradient (edges one-sided, unused)."""
    if values.ndim == 1:
        return np.gradient(values, *h)[None, :]
    return np.stack(np.gradient(values, *h), axis=0)


def _shifted(values: np.ndarray, shifts) -> np.ndarray:
    """View of the margin-1 interior shifted by one node per axis."""
    sl = []
    for k, s in enumerate(shifts):
        stop = values.shape[k] - 1 + s
        sl.append(slice(1 + s, stop if stop != 0 else None))
    return values[tuple(sl)]


def _hessian(values: np.ndarray, h: np.ndarray) -> np.ndarray:
    """(n, n, res...) second-order stencils on the margin-1 interior.

    Direct stencils, not composed gradients: composing first differences
    drags the one-sided edge error one ring into the interior.
    """
    n = values.ndim
    out = np.zeros((n, n) + values.shape)
    interior = tuple(slice(1, -1) for _ in range(n))
    zero = (0,) * n

    def unit(ax, s):
        e = [0] * n
        e[ax] = s
        return tuple(e)

    for i in range(n):
        out[(i, i) + interior] = (
            _shifted(values, unit(i, 1)) - 2.0 * _shifted(values, zero)
            + _shifted(values, unit(i, -1))) / h[i] ** 2
        for j in range(i + 1, n):
            pp = tuple(a + b for a, b in zip(unit(i, 1), unit(j, 1)))
            pm = tuple(a + b for a, b in zip(unit(i, 1), unit(j, -1)))
            mp = tuple(a + b for a, b in zip(unit(i, -1), unit(j, 1)))
            mm = tuple(a + b for a, b in zip(unit(i, -1), unit(j, -1)))
            cross = (_shifted(values, pp) - _shifted(values, pm)
                     - _shifted(values, mp) + _shifted(values, mm)) \
                / (4.0 * h[i] * h[j])
            out[(i, j) + interior] = cross
            out[(j, i) + interior] = cross
    return out


def _interior_mask(res, margin: int) -> np.ndarray:
    mask = np.zeros(res, dtype=bool)
    sl = tuple(slice(margin, r - margin) for r in res)
    mask[sl] = True
    return mask


def _forward_fields(gf, grid, u_flat, p_flat):
    """Y, Z and validity per node, vectorized when the instance allows."""
    m = len(u_flat)
    closed = gf.forward_yz_batch(grid.centers, u_flat, p_flat)
    if closed is not None:
        return closed
    ys = np.full((m, grid.n), np.nan)
    zs = np.full(m, np.nan)
    ok = np.zeros(m, dtype=bool)
    for k in range(m):
        try:
            ys[k], zs[k] = genfun.forward_YZ(gf, grid.centers[k],
                                             float(u_flat[k]), p_flat[k])
            ok[k] = True
        except GjetError:
            pass
    return ys, zs, ok


def _coeff_fields(gf, grid, u_flat, p_flat):
    """A, det E and validity fields along (x, u(x), Du(x))."""
    ys, zs, ok = _forward_fields(gf, grid, u_flat, p_flat)
    m = len(u_flat)
    n = grid.n
    a = np.full((m, n, n), np.nan)
    det = np.full(m, np.nan)
    idx = np.flatnonzero(ok)
    if len(idx):
        bb = gf.bundle_batch(grid.centers[idx], ys[idx], zs[idx])
        e = bb.hess_xy - np.einsum("ki,kj->kij", bb.grad_xz,
                                   bb.grad_y) / bb.dz[:, None, None]
        a[idx] = bb.hess_xx
        det[idx] = np.linalg.det(e)
        bad = ~(bb.dz < 0)
        if bad.any():
            ok = ok.copy()
            ok[idx[bad]] = False
    return a, det, ys, ok


def ma_residual(gf: GeneratingFunction, ufun: GridFunction,
                psi: Callable, exclude: np.ndarray = None) -> ResidualField:
    """det[D^2 u - A(., u, Du)] - det E * psi(., u, Du) per interior node.

    exclude masks nodes whose stencils are known to be meaningless, e.g.
    kink neighborhoods of a piecewise input; they count as masked.
    """
    grid = ufun.grid
    u = ufun.values
    du = _gradient(u, grid.h)
    d2u = _hessian(u, grid.h)
    interior = _interior_mask(grid.res, 1)
    if exclude is not None:
        interior = interior & ~np.asarray(exclude, dtype=bool).reshape(grid.res)
    u_flat = u.ravel()
    p_flat = du.reshape(grid.n, -1).T
    a, det, _ys, ok = _coeff_fields(gf, grid, u_flat, p_flat)
    ok_grid = ok.reshape(grid.res) & interior
    res = np.full(grid.res, np.nan)
    idx = np.flatnonzero(ok_grid.ravel())
    if len(idx):
        m = d2u.reshape(grid.n, grid.n, -1).transpose(2, 0, 1)[idx] - a[idx]
        psi_vals = np.array([psi(grid.centers[k], float(u_flat[k]), p_flat[k])
                             for k in idx])
        res.ravel()[idx] = np.linalg.det(m) - det[idx] * psi_vals
    masked = int(interior.sum() - ok_grid.sum())
    return ResidualField(grid, res, ok_grid, masked)


def pje_residual(gf: GeneratingFunction, ufun: GridFunction,
                 psi: Callable) -> ResidualField:
    """det DT - psi with T = Y(., u, Du) differentiated on the grid.

    Related to the Monge-Ampere residual by the factor det E pointwise
    up to O(h).
    """
    grid = ufun.grid
    u = ufun.values
    du = _gradient(u, grid.h)
    u_flat = u.ravel()
    p_flat = du.reshape(grid.n, -1).T
    ys, _zs, ok = _forward_fields(gf, grid, u_flat, p_flat)
    t_field = ys.T.reshape((grid.n,) + grid.res)
    # margin 2: the map itself already used one node of differences
    interior = _interior_mask(grid.res, 2)
    ok_grid = ok.reshape(grid.res)
    for ax in range(grid.n):
        ok_grid &= np.roll(ok_grid, 1, axis=ax) & np.roll(ok_grid, -1, axis=ax)
    valid = interior & ok_grid
    dt = np.empty((grid.n, grid.n) + grid.res)
    for i in range(grid.n):
        gi = np.gradient(t_field[i], *grid.h)
        for j in range(grid.n):
            dt[i, j] = gi[j] if grid.n > 1 else gi
    res = np.full(grid.res, np.nan)
    idx = np.flatnonzero(valid.ravel())
    if len(idx):
        mats = dt.reshape(grid.n, grid.n, -1).transpose(2, 0, 1)[idx]
        psi_vals = np.array([psi(grid.centers[k], float(u_flat[k]), p_flat[k])
                             for k in idx])
        res.ravel()[idx] = np.linalg.det(mats) - psi_vals
    masked = int(interior.sum() - valid.sum())
    return ResidualField(grid, res, valid, masked)


def ellipticity_check(gf: GeneratingFunction, ufun: GridFunction, *,
                      ellip_tol: float = 1e-8, exclude: np.ndarray = None):
    """Min eigenvalue field of D^2 u - A and the admissibility verdict.

    The matrix is symmetrized before the eigensolve (it is symmetric up
    to finite-difference noise).  Returns (field, admissible) where
    admissible means min eig >= -ellip_tol on every evaluated node.
    exclude masks nodes whose stencils straddle kinks of a piecewise
    input; the difference quotients carry no eigenvalue information
    there.
    """
    grid = ufun.grid
    u = ufun.values
    du = _gradient(u, grid.h)
    d2u = _hessian(u, grid.h)
    interior = _interior_mask(grid.res, 1)
    if exclude is not None:
        interior = interior & ~np.asarray(exclude, dtype=bool).reshape(grid.res)
    u_flat = u.ravel()
    p_flat = du.reshape(grid.n, -1).T
    a, _det, _ys, ok = _coeff_fields(gf, grid, u_flat, p_flat)
    ok_grid = ok.reshape(grid.res) & interior
    vals = np.full(grid.res, np.nan)
    idx = np.flatnonzero(ok_grid.ravel())
    if len(idx):
        m = d2u.reshape(grid.n, grid.n, -1).transpose(2, 0, 1)[idx] - a[idx]
        m = 0.5 * (m + m.transpose(0, 2, 1))
        vals.ravel()[idx] = np.linalg.eigvalsh(m)[:, 0]
    masked = int(interior.sum() - ok_grid.sum())
    field = ResidualField(grid, vals, ok_grid, masked)
    admissible = bool(ok_grid.any()
                      and np.nanmin(vals[ok_grid]) >= -ellip_tol)
    return field, admissible


def dual_residual(gf: GeneratingFunction, vfun: GridFunction,
                  f: Callable = None, g: Callable = None) -> ResidualField:
    """Residual of the dual equation for a function v on a target grid.

    Per node: z = v(y), q = Dv(y); X solves the slope inversion; then
    det[D^2 v - A*(y, z, q)] - B*(y, z, q) with the dual coefficients
    assembled from exact derivatives at (X, y, z).  Densities default
    to 1; pass g = 0 for graphs of the dual function itself.
    """
    grid = vfun.grid
    v = vfun.values
    dv = _gradient(v, grid.h)
    d2v = _hessian(v, grid.h)
    interior = _interior_mask(grid.res, 1)
    v_flat = v.ravel()
    q_flat = dv.reshape(grid.n, -1).T
    res = np.full(grid.res, np.nan)
    ok = np.zeros(grid.size, dtype=bool)
    d2_flat = d2v.reshape(grid.n, grid.n, -1).transpose(2, 0, 1)
    interior_flat = interior.ravel()
    x_warm = None
    for k in range(grid.size):
        if not interior_flat[k]:
            continue
        y = grid.centers[k]
        try:
            x_k = genfun.map_X(gf, y, float(v_flat[k]), q_flat[k],
                               initial=x_warm)
            astar, bstar = genfun.dual_Astar_Bstar(
                gf, y, float(v_flat[k]), q_flat[k], f=f, g=g, x_initial=x_k)
            x_warm = x_k
        except GjetError:
            x_warm = None
            continue
        ok[k] = True
        res.ravel()[k] = float(np.linalg.det(d2_flat[k] - astar)) - bstar
    ok_grid = ok.reshape(grid.res)
    masked = int(interior.sum() - ok_grid.sum())
    return ResidualField(grid, res, ok_grid, masked)


def make_separable_psi(gf: GeneratingFunction, f: Callable, g: Callable):
    """psi(x, u, p) = f(x) / g(Y(x, u, p)) * sign(det E at (x, Y, Z))."""

    def psi(x, u, p):
        y, z = genfun.forward_YZ(gf, x, u, p)
        b = gf.bundle(np.asarray(x, dtype=float), y, z)
        det = float(np.linalg.det(
            b.hess_xy - np.outer(b.grad_xz, b.grad_y) / b.dz))
        return float(f(x)) / float(g(y)) * math.copysign(1.0, det)

    return psi


# --------------------------------------------------------------------------
# manufactured inputs for the residual diagnostics
# --------------------------------------------------------------------------

MANUFACTURED_NAMES = ("g_affine", "quadratic_ot_identity", "quadratic_ot_cosh")


def _default_affine_piece(gf: GeneratingFunction, grid: SourceGrid):
    y0 = 0.5 * (grid.lo + grid.hi)
    lo_arr, hi_arr = gf.z_interval_batch(grid.centers, y0)
    sup_lo = float(np.max(lo_arr))
    inf_hi = float(np.min(hi_arr))
    if math.isfinite(sup_lo) and math.isfinite(inf_hi):
        z0 = 0.5 * (sup_lo + inf_hi)
    elif math.isfinite(sup_lo):
        z0 = sup_lo + 1.0
    elif math.isfinite(inf_hi):
        z0 = inf_hi - 1.0
    else:
        z0 = 0.0
    return y0, z0


def manufactured_case(name: str, gf: GeneratingFunction, grid: SourceGrid):
    """Named (GridFunction, psi) pairs with analytically known residuals.

    g_affine: one graph of G itself; the map T is constant, so psi = 0
    and the residual vanishes.  quadratic_ot_identity: u = |x|^2 under
    the quadratic instance with psi = sign(det E); the residual is
    exactly zero.  quadratic_ot_cosh: u = sum 2 cosh(x_k) with the
    matching analytic right-hand side; the discrete residual decays at
    the central-difference rate under refinement.
    """
    n = grid.n
    if name == "g_affine":
        y0, z0 = _default_affine_piece(gf, grid)
        vals = gf.value_batch(grid.centers, y0, z0)
        return GridFunction(grid, vals.reshape(grid.res)), \
            (lambda x, u, p: 0.0)
    if name == "quadratic_ot_identity":
        if gf.name != "quadratic_ot":
            raise ValueError(f"case {name!r} requires the quadratic generator")
        sign = (-1.0) ** n
        vals = np.einsum("ij,ij->i", grid.centers, grid.centers)
        return GridFunction(grid, vals.reshape(grid.res)), \
            (lambda x, u, p: sign)
    if name == "quadratic_ot_cosh":
        if gf.name != "quadratic_ot":
            raise ValueError(f"case {name!r} requires the quadratic generator")
        sign = (-1.0) ** n
        vals = 2.0 * np.cosh(grid.centers).sum(axis=1)

        def psi(x, u, p):
            return sign * float(np.prod(2.0 * np.cosh(np.asarray(x)) - 1.0))

        return GridFunction(grid, vals.reshape(grid.res)), psi
    raise ValueError(f"unknown manufactured case {name!r}; "
                     f"choose from {MANUFACTURED_NAMES}")

"""Piecewise G-affine functions on a gridded source domain.

The central object is a finite max of graphs

    u(x) = max_i G(x, y_i, z_i),

which is G-convex by construction.  This module provides evaluation
with the active-piece index, subdifferentials, support interpolation
between two active pieces, sections and their convexity diagnostic, the
G-transform and its dual (generalized Legendre transforms), and the
cell decomposition that turns the pieces into a mass partition of the
source density (generalized Laguerre cells).

Cell assignment happens at cell centers only; no partial-cell clipping
is attempted, so per-piece masses carry an O(h) rasterization error
that callers must budget for.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import genfun
from .conditions import ConditionReport, hull_ratio
from .errors import DomainViolation
from .genfun import GeneratingFunction

__all__ = [
    "GAffinePiece",
    "SourceGrid",
    "PiecewiseGSolution",
    "CellDecomposition",
    "eval_piecewise",
    "values_matrix",
    "subdifferential",
    "support_check",
    "interface_point",
    "section_set",
    "section_convexity",
    "g_transform",
    "dual_transform",
    "cell_masses",
    "validate_pieces_on_grid",
    "interface_cell_count",
    "interface_mask",
]

ACTIVE_TOL = 1e-9  # relative active-set tolerance, scaled by 1 + |u|


@dataclass(frozen=True)
class GAffinePiece:
    """One graph x -> G(x, y, z): target point y and focal parameter z."""

    y: tuple
    z: float

    def y_vec(self) -> np.ndarray:
        return np.asarray(self.y, dtype=float)


class SourceGrid:
    """Uniform cell grid over a box with a per-cell density.

    Cell centers double as the nodal lattice for finite differences.
    density has shape ``res``; the total mass is sum(density) * cell_vol.
    """

    def __init__(self, lo, hi, res, density=None):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.res = tuple(int(r) for r in np.atleast_1d(res))
        self.n = len(self.lo)
        if len(self.res) != self.n or len(self.hi) != self.n:
            raise ValueError("box and resolution dimensions disagree")
        if np.any(self.hi <= self.lo) or any(r < 2 for r in self.res):
            raise ValueError("degenerate grid box or resolution")
        self.h = (self.hi - self.lo) / np.asarray(self.res, dtype=float)
        self.cell_vol = float(np.prod(self.h))
        if density is None:
            density = np.ones(self.res)
        self.density = np.asarray(density, dtype=float).reshape(self.res)
        if np.any(~np.isfinite(self.density)) or np.any(self.density < 0):
            raise ValueError("density must be finite and nonnegative")
        axes = [self.lo[k] + (np.arange(self.res[k]) + 0.5) * self.h[k]
                for k in range(self.n)]
        mesh = np.meshgrid(*axes, indexing="ij")
        self.centers = np.stack([m.ravel() for m in mesh], axis=1)
        self.axes = axes
        self.cell_mass = (self.density * self.cell_vol).ravel()
        self.total_mass = float(self.cell_mass.sum())
        if not self.total_mass > 0:
            raise ValueError("total source mass must be positive")

    @property
    def size(self) -> int:
        return len(self.centers)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))


@dataclass(frozen=True)
class PiecewiseGSolution:
    """Finite max of G-affine pieces with a normalization anchor (x0, u0)."""

    gf: GeneratingFunction
    pieces: tuple
    anchor: tuple  # (x0, u0)

    def __init__(self, gf, pieces: Sequence, anchor):
        object.__setattr__(self, "gf", gf)
        object.__setattr__(self, "pieces", tuple(
            p if isinstance(p, GAffinePiece)
            else GAffinePiece(tuple(np.asarray(p[0], dtype=float)), float(p[1]))
            for p in pieces))
        x0 = np.asarray(anchor[0], dtype=float)
        object.__setattr__(self, "anchor", (tuple(x0), float(anchor[1])))
        if not self.pieces:
            raise ValueError("a piecewise solution needs at least one piece")


@dataclass(frozen=True)
class CellDecomposition:
    """Total single-valued cell-to-piece assignment and per-piece masses."""

    assignment: np.ndarray  # (cells,) piece index per cell
    masses: np.ndarray      # (pieces,) sums of density * cell volume
    active_tol: float


def _active_tol(u: float) -> float:
    return ACTIVE_TOL * (1.0 + abs(u))


def validate_pieces_on_grid(sol: PiecewiseGSolution, grid: SourceGrid) -> None:
    """Every piece must be admissible at every cell center: the pair
    (x, y_i) in the admissible set and z inside I(x, y_i)."""
    for i, piece in enumerate(sol.pieces):
        if not np.all(sol.gf.admissible_pair_batch(grid.centers,
                                                   piece.y_vec())):
            raise DomainViolation(
                f"piece {i}: some grid centers pair inadmissibly with its "
                f"target")
        lo, hi = sol.gf.z_interval_batch(grid.centers, piece.y_vec())
        if not np.all((lo < piece.z) & (piece.z < hi)):
            raise DomainViolation(
                f"piece {i}: focal parameter {piece.z} leaves its admissible "
                f"interval on the grid")


def values_matrix(sol: PiecewiseGSolution, grid: SourceGrid) -> np.ndarray:
    """(pieces, cells) matrix of piece values at cell centers."""
    return np.stack([sol.gf.value_batch(grid.centers, p.y_vec(), p.z)
                     for p in sol.pieces])


def eval_piecewise(sol: PiecewiseGSolution, x):
    """u(x) = max_i G(x, y_i, z_i) and the active index (ties: lowest)."""
    x = np.asarray(x, dtype=float)
    vals = np.array([sol.gf.value(x, p.y_vec(), p.z) for p in sol.pieces])
    if not np.all(np.isfinite(vals)):
        raise DomainViolation("piece value is not finite at the query point")
    idx = int(np.argmax(vals))
    return float(vals[idx]), idx


def subdifferential(sol: PiecewiseGSolution, x):
    """Slope/target pairs (G_x(x, y_i, z_i), y_i) of all active pieces."""
    x = np.asarray(x, dtype=float)
    vals = np.array([sol.gf.value(x, p.y_vec(), p.z) for p in sol.pieces])
    u = float(np.max(vals))
    tol = _active_tol(u)
    out = []
    for i, p in enumerate(sol.pieces):
        if u - vals[i] <= tol:
            b = sol.gf.bundle(x, p.y_vec(), p.z)
            out.append((b.grad_x, p.y_vec()))
    return out


def interface_point(sol: PiecewiseGSolution, i: int, j: int, x_a, x_b,
                    tol: float = 1e-13):
    """Point on the segment [x_a, x_b] where pieces i and j tie.

    Requires the sign of G_i - G_j to flip between the endpoints;
    bisection, deterministic.
    """
    gf = sol.gf
    pi, pj = sol.pieces[i], sol.pieces[j]
    x_a = np.asarray(x_a, dtype=float)
    x_b = np.asarray(x_b, dtype=float)

    def diff(s):
        x = x_a + s * (x_b - x_a)
        return gf.value(x, pi.y_vec(), pi.z) - gf.value(x, pj.y_vec(), pj.z)

    fa, fb = diff(0.0), diff(1.0)
    if fa == 0.0:
        return x_a.copy()
    if fb == 0.0:
        return x_b.copy()
    if fa * fb > 0:
        raise ValueError("pieces do not exchange along the segment")
    a, b = 0.0, 1.0
    for _ in range(200):
        m = 0.5 * (a + b)
        fm = diff(m)
        if fm == 0.0 or b - a < tol:
            return x_a + m * (x_b - x_a)
        if (fm > 0) == (fa > 0):
            a = m
        else:
            b = m
    return x_a + 0.5 * (a + b) * (x_b - x_a)


def support_check(sol: PiecewiseGSolution, grid: SourceGrid, x0, t: float, *,
                  support_tol: float = None, u_grid: np.ndarray = None):
    """Interpolated support between the two pieces active at x0.

    With p1, p2 the active slopes, sets p0 = (1-t) p1 + t p2, solves the
    forward map at (x0, u(x0), p0) for the target y0, re-snaps the focal
    parameter through the dual function so the candidate graph passes
    exactly through (x0, u(x0)), and sweeps the grid for
    G(x, y0, z0) <= u(x) + support_tol.  Returns (y0, z0, ok).
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    x0 = np.asarray(x0, dtype=float)
    pairs = subdifferential(sol, x0)
    if len(pairs) != 2:
        raise ValueError(
            f"support interpolation needs exactly two active pieces, "
            f"found {len(pairs)}")
    u0, _ = eval_piecewise(sol, x0)
    p0 = (1.0 - t) * pairs[0][0] + t * pairs[1][0]
    y0, _z = genfun.forward_YZ(sol.gf, x0, u0, p0)
    z0 = genfun.dual_H(sol.gf, x0, y0, u0).z_root
    if support_tol is None:
        support_tol = 1e-8 * (1.0 + abs(u0))
    if u_grid is None:
        u_grid = values_matrix(sol, grid).max(axis=0)
    cand = sol.gf.value_batch(grid.centers, y0, z0)
    ok = bool(np.all(cand <= u_grid + support_tol))
    return y0, float(z0), ok


def section_set(sol: PiecewiseGSolution, grid: SourceGrid, piece_index: int,
                sigma: float) -> np.ndarray:
    """Mask of cells where u < G_piece + sigma (sigma > 0) or of the
    contact set u = G_piece within the active tolerance (sigma = 0)."""
    if not 0 <= piece_index < len(sol.pieces):
        raise ValueError("piece index out of range")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    vals = values_matrix(sol, grid)
    u = vals.max(axis=0)
    gi = vals[piece_index]
    if sigma == 0.0:
        return (u - gi) <= ACTIVE_TOL * (1.0 + np.abs(u))
    return u < gi + sigma


def section_convexity(sol: PiecewiseGSolution, grid: SourceGrid,
                      piece_index: int, sigma: float, *,
                      raster_res: int = None,
                      hull_cells_tol: float = 2.0) -> ConditionReport:
    """Convexity of the section image under Q( . , y0, z0).

    This is the hull-ratio diagnostic of the section-convexity property:
    sections of a G-convex function are G-convex with respect to the
    supporting piece, i.e. their Q-images are convex sets.
    """
    mask = section_set(sol, grid, piece_index, sigma)
    pts = grid.centers[mask]
    piece = sol.pieces[piece_index]
    image = sol.gf.q_batch(pts, piece.y_vec(), piece.z)
    ratio, info = hull_ratio(image, raster_res)
    tol = hull_cells_tol * info["pixel_vol"] / info["hull_vol"] \
        if info.get("hull_vol", 0) > 0 else 0.0
    status = "pass" if ratio >= 1.0 - tol else "fail"
    return ConditionReport(
        name=f"section_convexity/piece{piece_index}/sigma{sigma}",
        status=status,
        extremal_value=ratio,
        witness={"hull_ratio": ratio, **info} if status == "fail" else None,
        samples_used=int(mask.sum()),
        details={"sigma": sigma, "hull_tol": tol, **info})


def g_transform(sol: PiecewiseGSolution, targets, grid: SourceGrid) -> np.ndarray:
    """v(y_j) = max over grid nodes of H(x, y_j, u(x)).

    Grid nodes only; accuracy is limited by the grid, which is the
    stated contract.  For a piece (y_j, z_j) present in the solution the
    supremum equals z_j.
    """
    targets = np.asarray(targets, dtype=float).reshape(-1, sol.gf.dimension)
    u = values_matrix(sol, grid).max(axis=0)
    out = np.empty(len(targets))
    for j, y in enumerate(targets):
        out[j] = float(np.max(sol.gf.h_batch(grid.centers, y[None, :], u)))
    return out


def dual_transform(gf: GeneratingFunction, targets, v_values,
                   grid: SourceGrid) -> np.ndarray:
    """v*(x) = max_j G(x, y_j, v_j) on the grid (shape = grid.res)."""
    targets = np.asarray(targets, dtype=float).reshape(-1, gf.dimension)
    v_values = np.asarray(v_values, dtype=float).reshape(-1)
    if len(targets) != len(v_values):
        raise ValueError("targets and values lengths disagree")
    vals = None
    for y, vj in zip(targets, v_values):
        lo, hi = gf.z_interval_batch(grid.centers, y)
        if not np.all((lo < vj) & (vj < hi)):
            raise DomainViolation(
                "transformed focal parameter leaves its admissible interval")
        row = gf.value_batch(grid.centers, y, vj)
        vals = row if vals is None else np.maximum(vals, row)
    return vals.reshape(grid.res)


def cell_masses(sol: PiecewiseGSolution, grid: SourceGrid) -> CellDecomposition:
    """Assign every cell to its argmax piece and sum density * volume.

    The assignment is total and single-valued (ties to the lowest piece
    index), so the masses are an exact partition of the source mass up
    to float summation order.
    """
    validate_pieces_on_grid(sol, grid)
    vals = values_matrix(sol, grid)
    assignment = np.argmax(vals, axis=0)
    masses = np.bincount(assignment, weights=grid.cell_mass,
                         minlength=len(sol.pieces))
    u0 = float(vals.max(axis=0).mean())
    return CellDecomposition(assignment=assignment, masses=masses,
                             active_tol=_active_tol(u0))


def interface_mask(grid: SourceGrid, assignment: np.ndarray,
                   widen: int = 0) -> np.ndarray:
    """Cells with an axis-neighbor owned by another piece.

    widen dilates the mask by that many nodes per axis, covering the
    reach of finite-difference stencils across the kinks.
    """
    lab = assignment.reshape(grid.res)
    boundary = np.zeros(grid.res, dtype=bool)
    for ax in range(grid.n):
        sl_a = [slice(None)] * grid.n
        sl_b = [slice(None)] * grid.n
        sl_a[ax] = slice(0, -1)
        sl_b[ax] = slice(1, None)
        diff = lab[tuple(sl_a)] != lab[tuple(sl_b)]
        boundary[tuple(sl_a)] |= diff
        boundary[tuple(sl_b)] |= diff
    for _ in range(widen):
        grown = boundary.copy()
        for ax in range(grid.n):
            sl_a = [slice(None)] * grid.n
            sl_b = [slice(None)] * grid.n
            sl_a[ax] = slice(0, -1)
            sl_b[ax] = slice(1, None)
            grown[tuple(sl_a)] |= boundary[tuple(sl_b)]
            grown[tuple(sl_b)] |= boundary[tuple(sl_a)]
        boundary = grown
    return boundary


def interface_cell_count(grid: SourceGrid, assignment: np.ndarray) -> int:
    """Number of interface cells; mass error concentrates there, so the
    count bounds the rasterization uncertainty of the decomposition."""
    return int(interface_mask(grid, assignment).sum())

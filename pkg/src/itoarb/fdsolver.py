"""Finite-difference oracle for the nonlinear pricing equation.

Solves, backward from the terminal payoff,

    dPhi/dt + (sigma^2/2) X^2 d2Phi/dx2 = rho * sqrt(Phi^2 + (X dPhi/dx)^2)

on a log-uniform grid, independently of the perturbation machinery.  The
smooth form of the source is used everywhere (it is algebraically identical
to ``rho Phi sqrt(1 + (X Phi_x / Phi)^2)`` for positive prices and extends it
continuously through zero).

Scheme: in log price ``xi`` the diffusion operator is
``a (d_xixi - d_xi)`` with ``a = sigma^2/2``; the substitution
``Phi = e^{(xi - log K)/2} V`` symmetrizes it to ``a (d_xixi - 1/4)``, which
a three-point stencil discretizes without convection dispersion.  Diffusion
is stepped implicitly (theta-weighted, tridiagonal solve) with a Rannacher
start; the nonlinear source is explicit.  The undiscounted variant adds the
convection and discounting terms in the same framework.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded

from .pricing import CallSpec

__all__ = ["PdeGrid", "solve", "solve_undiscounted", "evaluate"]

MAX_HALVINGS = 10


@dataclass(frozen=True)
class PdeGrid:
    """Log-uniform space grid, uniform time grid and the solved surface.

    The strike must be strictly interior.  Boundary policy is fixed: the
    price is pinned to zero at the lower edge and the second x-derivative is
    zero at the upper edge (the arbitrage source still acts there, so no
    growth asymptotic is assumed).  ``surface[i, j]`` is the price at
    ``(t_nodes[i], x_nodes[j])``.
    """

    x_nodes: np.ndarray
    t_nodes: np.ndarray
    surface: np.ndarray | None = None

    boundary_policy = ("zero-at-lower", "zero-gamma-at-upper")

    def __post_init__(self):
        x = np.ascontiguousarray(np.asarray(self.x_nodes, dtype=float))
        t = np.ascontiguousarray(np.asarray(self.t_nodes, dtype=float))
        x.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "x_nodes", x)
        object.__setattr__(self, "t_nodes", t)
        if self.surface is not None:
            s = np.ascontiguousarray(np.asarray(self.surface, dtype=float))
            s.flags.writeable = False
            object.__setattr__(self, "surface", s)
        if x.size < 16 or t.size < 16:
            raise ValueError("grid too coarse")
        if x[0] <= 0:
            raise ValueError("x_min must be positive")
        lx = np.log(x)
        dlx = np.diff(lx)
        if not np.allclose(dlx, dlx[0], rtol=1e-8, atol=0):
            raise ValueError("x grid must be log-uniform")
        dt = np.diff(t)
        if t[0] != 0.0 or not np.allclose(dt, dt[0], rtol=1e-8, atol=0):
            raise ValueError("t grid must be uniform starting at zero")

    @property
    def n_x(self) -> int:
        return self.x_nodes.size

    @property
    def n_t(self) -> int:
        return self.t_nodes.size

    @classmethod
    def for_call(
        cls,
        spec: CallSpec,
        n_x: int = 257,
        n_t: int = 256,
        x_min: float | None = None,
        x_max: float | None = None,
        coverage: float = 0.25,
    ) -> "PdeGrid":
        """Default domain: ``coverage`` of log-moneyness each side of the
        strike plus diffusion margins (4.2 / 3.2 standard deviations below /
        above), with the strike aligned midway between nodes."""
        st = spec.sigma * np.sqrt(spec.maturity)
        lk = np.log(spec.strike)
        lo = lk - coverage - 4.2 * st if x_min is None else np.log(x_min)
        hi = lk + coverage + 3.2 * st if x_max is None else np.log(x_max)
        if not lo < lk < hi:
            raise ValueError("strike must lie strictly inside (x_min, x_max)")
        dxi = (hi - lo) / (n_x - 1)
        # shift so the strike sits midway between two nodes: the leading
        # kink-quantization error of the payoff vanishes there
        frac = (lk - lo) / dxi
        lo += (frac - np.floor(frac) - 0.5) * dxi
        xi = lo + dxi * np.arange(n_x)
        t = np.linspace(0.0, spec.maturity, n_t + 1)
        return cls(np.exp(xi), t)


def _march(
    spec: CallSpec,
    grid: PdeGrid,
    rate: float,
    terminal: np.ndarray,
    theta: float = 0.5,
    rannacher: int = 2,
) -> np.ndarray:
    """Backward theta-scheme on the symmetrized unknown; returns (n_t, n_x).

    Solves ``Psi_t + r s Psi_s + a s^2 Psi_ss - r Psi = rho * smooth-source``
    (``rate = 0`` gives the discounted equation).  A NaN/overflow detector
    re-runs a failed step with halved substeps, up to ``MAX_HALVINGS``.
    """
    x = grid.x_nodes
    xi = np.log(x)
    lk = np.log(spec.strike)
    dxi = xi[1] - xi[0]
    half = np.exp(0.5 * (xi - lk))
    a = 0.5 * spec.sigma**2
    rho = spec.rho
    r = rate

    # In log coordinates L[Phi] = a(Phi'' - Phi') + r Phi' - r Phi; the
    # substitution Phi = half * V symmetrizes it to
    # L[V] = a V'' + r V' - (a/4 + r/2) V.
    c2 = a
    c1 = r
    c0 = -a / 4.0 - r / 2.0

    lo = c2 / dxi**2 - c1 / (2 * dxi)
    di = -2 * c2 / dxi**2 + c0
    up = c2 / dxi**2 + c1 / (2 * dxi)
    # top row: zero gamma in x kills the diffusion part; convection and
    # discounting survive, L_top[V] = r V' - (r/2) V with one-sided V'
    top_di = r / dxi - r / 2.0
    top_lo = -r / dxi

    def apply_interior(v):
        out = np.zeros_like(v)
        out[1:-1] = lo * v[:-2] + di * v[1:-1] + up * v[2:]
        out[-1] = top_lo * v[-2] + top_di * v[-1]
        return out

    def source_v(v):
        if rho == 0.0:
            return np.zeros_like(v)
        phi = half * v
        phix = np.empty_like(phi)
        phix[1:-1] = (phi[2:] - phi[:-2]) / (2 * dxi)
        phix[0] = (phi[1] - phi[0]) / dxi
        phix[-1] = (phi[-1] - phi[-2]) / dxi
        # X Phi_x = dPhi/dxi on the log grid
        return rho * np.sqrt(phi * phi + phix * phix) / half

    bands = {}

    def banded(th, dtl):
        key = (th, dtl)
        if key not in bands:
            ab = np.zeros((3, x.size))
            ab[1, :] = 1.0
            ab[0, 2:] = -th * dtl * up
            ab[1, 1:-1] = 1.0 - th * dtl * di
            ab[1, -1] = 1.0 - th * dtl * top_di
            ab[2, :-2] = -th * dtl * lo
            ab[2, -2] = -th * dtl * top_lo
            bands[key] = ab
        return bands[key]

    def one_step(v, th, dtl):
        src = source_v(v)
        rhs = v + (1.0 - th) * dtl * apply_interior(v) - dtl * src
        rhs[0] = 0.0
        out = solve_banded((1, 1), banded(th, dtl), rhs)
        return out

    def robust_step(v, th, dtl, depth=0):
        out = one_step(v, th, dtl)
        big = 10.0 * (x[-1] + spec.strike)
        if np.isfinite(out).all() and np.abs(out * half).max() < big:
            return out
        if depth >= MAX_HALVINGS:
            raise RuntimeError(
                f"time step failed to converge after {MAX_HALVINGS} halvings"
            )
        mid = robust_step(v, th, dtl / 2, depth + 1)
        return robust_step(mid, th, dtl / 2, depth + 1)

    n_t = grid.t_nodes.size
    dt = grid.t_nodes[1] - grid.t_nodes[0]
    out = np.empty((n_t, x.size))
    out[-1] = terminal
    v = terminal / half
    v[0] = 0.0
    for i in range(n_t - 2, -1, -1):
        # Rannacher start: fully implicit half steps against the payoff kink
        if n_t - 2 - i < rannacher:
            v = robust_step(v, 1.0, dt / 2)
            v = robust_step(v, 1.0, dt / 2)
        else:
            v = robust_step(v, theta, dt)
        out[i] = half * v
    return out


def _check_positivity(surface: np.ndarray, spec: CallSpec) -> None:
    floor = -1e-10 * spec.strike
    worst = surface.min()
    if worst < floor:
        raise RuntimeError(
            f"positivity violated: min surface value {worst:.3e} "
            f"below tolerance {floor:.3e}"
        )


def _check_solvable(spec: CallSpec, grid: PdeGrid, strike: float) -> None:
    if grid.n_x < 64 or grid.n_t < 64:
        raise ValueError("resolution below 64 x 64")
    if not grid.x_nodes[0] < strike < grid.x_nodes[-1]:
        raise ValueError("strike must lie strictly inside (x_min, x_max)")
    if abs(grid.t_nodes[-1] - spec.maturity) > 1e-9 * max(spec.maturity, 1.0):
        raise ValueError("time grid must end at the maturity")


def solve(spec: CallSpec, grid: PdeGrid, theta: float = 0.5, rannacher: int = 2) -> PdeGrid:
    """Discounted-price solve; terminal slice is the exact payoff ``(x - K)+``."""
    _check_solvable(spec, grid, spec.strike)
    terminal = np.maximum(grid.x_nodes - spec.strike, 0.0)
    terminal[0] = 0.0
    surf = _march(spec, grid, 0.0, terminal, theta, rannacher)
    surf[-1] = np.maximum(grid.x_nodes - spec.strike, 0.0)
    _check_positivity(surf, spec)
    return replace(grid, surface=surf)


def solve_undiscounted(
    spec: CallSpec, grid: PdeGrid, theta: float = 0.5, rannacher: int = 2
) -> PdeGrid:
    """Undiscounted-price solve with convection and discounting at ``spec.rate``.

    The strike applies to the discounted value, so the terminal payoff is
    ``(s - K e^{rT})+``; with ``rate = 0`` this coincides with :func:`solve`.
    """
    k_eff = spec.strike * np.exp(spec.rate * spec.maturity)
    _check_solvable(spec, grid, k_eff)
    terminal = np.maximum(grid.x_nodes - k_eff, 0.0)
    terminal[0] = 0.0
    surf = _march(spec, grid, spec.rate, terminal, theta, rannacher)
    surf[-1] = np.maximum(grid.x_nodes - k_eff, 0.0)
    _check_positivity(surf, spec)
    return replace(grid, surface=surf)


def evaluate(result: PdeGrid, t, x):
    """Interpolate a solved surface: cubic in log price, linear in time."""
    if result.surface is None:
        raise ValueError("grid has no solved surface")
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    t, x = np.broadcast_arrays(t, x)
    tn = result.t_nodes
    if np.any(t < tn[0] - 1e-12) or np.any(t > tn[-1] + 1e-12):
        raise ValueError("t outside solved range")
    lx = np.log(result.x_nodes)
    q = np.log(x)
    if np.any(q < lx[0]) or np.any(q > lx[-1]):
        raise ValueError("x outside solved range")
    i = np.clip(np.searchsorted(tn, t) - 1, 0, tn.size - 2)
    w = np.clip((t - tn[i]) / (tn[i + 1] - tn[i]), 0.0, 1.0)
    splines: dict[int, CubicSpline] = {}

    def row(k: int) -> CubicSpline:
        if k not in splines:
            splines[k] = CubicSpline(lx, result.surface[k])
        return splines[k]

    flat_i = np.atleast_1d(i).ravel()
    flat_w = np.atleast_1d(w).ravel()
    flat_q = np.atleast_1d(q).ravel()
    out = np.empty(flat_q.shape)
    for k in range(flat_q.size):
        lo_row = row(int(flat_i[k]))(flat_q[k])
        hi_row = row(int(flat_i[k]) + 1)(flat_q[k])
        out[k] = (1.0 - flat_w[k]) * lo_row + flat_w[k] * hi_row
    out = out.reshape(q.shape)
    return out if out.ndim else float(out)

"""Discretized Brownian polymer on a diffusive space-time grid.

The reference chain takes truncated-Gaussian steps (variance dt per
coordinate, dt = dx^2, normalized over the stencil so the free step is
an honest kernel); the ordering-above-the-wall constraint then acts by
killing, exactly as the indicator in the path measure, and each step is
tilted by exp(-a * sum_i b^(i-1) x_i dt).  One-time marginals under
zero / fixed / free boundary conditions and the stationary (large-time)
density are the comparison targets for the lattice convergence
experiments.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import _linalg as la
from . import exact_engine as ee
from .model_core import NEG_INF

STENCIL_REACH = 6  # Gaussian step truncated at 6 sigma (weight e^-18)


class NoConvergence(RuntimeError):
    """Power iteration failed to converge within the iteration budget."""


@dataclass(frozen=True)
class GridSpec:
    """Spatial step, height cap, and time half-width; dt = dx^2 exactly."""

    dx: float
    height_cap: float
    m_half: float

    def __post_init__(self):
        if self.dx <= 0.0:
            raise ValueError("dx must be positive")
        if self.height_cap < 2 * self.dx:
            raise ValueError("height_cap must exceed a couple of grid steps")
        if self.m_half <= 0.0:
            raise ValueError("m_half must be positive")

    @property
    def dt(self) -> float:
        return self.dx * self.dx

    @property
    def n_sites(self) -> int:
        return int(round(self.height_cap / self.dx))

    @property
    def n_steps(self) -> int:
        return max(int(round(2.0 * self.m_half / self.dt)), 1)

    @property
    def m_eff(self) -> float:
        """Half-width actually realized by the integer step count."""
        return 0.5 * self.n_steps * self.dt

    def space_key(self, n: int) -> tuple:
        return ("polymer_chamber", n, self.n_sites, repr(self.dx))


def default_height_cap(a: float, n: int) -> float:
    # top curve dominates; extra curves sit lower but widen the chamber
    return 30.0 / a + 5.0 + 3.0 * (n - 1) / a


# boundary modes ------------------------------------------------------------


@dataclass(frozen=True)
class ZeroBC:
    """Both endpoints at the minimal chamber state (the eps = dx wedge)."""


@dataclass(frozen=True)
class Fixed:
    """Left endpoint at u; right endpoint at v if given, free otherwise."""

    u: tuple[float, ...]
    v: tuple[float, ...] | None = None


@dataclass(frozen=True)
class FreeRight:
    """Left endpoint at the minimal chamber state, right endpoint free."""


@dataclass(frozen=True)
class FreeBoth:
    """Both endpoints integrated with uniform reference weight dx^n."""


BoundaryMode = ZeroBC | Fixed | FreeRight | FreeBoth


@dataclass(frozen=True)
class PolymerLaw:
    """One-time marginal (at t = 0) plus the diagnostics of its construction."""

    grid: GridSpec
    mode: str
    marginal: ee.Distribution
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# chamber operator


@lru_cache(maxsize=32)
def _chamber_operator(n: int, n_sites: int):
    """States and the killed free-step matrix G on the chamber.

    Per coordinate the step weights e^{-m^2/2}, |m| <= 6, are normalized
    over the stencil; moves leaving the chamber or the cap are dropped,
    so row deficits are exactly the killed (wall-hitting) mass."""
    states = ee.enumerate_states(n, n_sites)
    stencil = np.exp(-0.5 * np.arange(-STENCIL_REACH, STENCIL_REACH + 1) ** 2)
    stencil /= stencil.sum()
    moves = []
    for combo in itertools.product(range(2 * STENCIL_REACH + 1), repeat=n):
        delta = np.array(combo, dtype=np.int64) - STENCIL_REACH
        wgt = math.prod(stencil[i] for i in combo)
        moves.append((delta, wgt))
    if states.size * len(moves) > ee.state_budget():
        raise ee.TooLarge(
            f"{states.size} states x {len(moves)} stencil moves exceeds budget"
        )
    arr = states.arr
    base = n_sites + 1
    pows = base ** np.arange(n - 1, -1, -1, dtype=np.int64)
    keys = arr @ pows
    rows, cols, vals = [], [], []
    for delta, wgt in moves:
        tgt = arr + delta
        valid = (tgt[:, -1] >= 1) & (tgt[:, 0] <= n_sites)
        if n > 1:
            valid &= np.all(tgt[:, :-1] > tgt[:, 1:], axis=1)
        if not valid.any():
            continue
        tkeys = tgt @ pows
        pos = np.searchsorted(keys, tkeys).clip(0, states.size - 1)
        ok = valid & (keys[pos] == tkeys)
        idx = np.nonzero(ok)[0]
        rows.append(idx)
        cols.append(pos[idx])
        vals.append(np.full(idx.shape, wgt))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    g = sp.coo_matrix((vals, (rows, cols)), shape=(states.size, states.size)).tocsr()
    g.sum_duplicates()
    return states, g


def _tilt_log_vector(states: ee.StateSpace, a: float, b: float, dx: float) -> np.ndarray:
    w = a * b ** np.arange(states.n, dtype=float)
    x = states.arr.astype(float) * dx
    return -((x @ w) * dx * dx)  # area increment x * dt with dt = dx^2


def snap_to_chamber(u: Sequence[float], dx: float, n_sites: int) -> tuple[int, ...]:
    """Nearest strictly-decreasing grid state to the real vector u."""
    idx = [int(round(x / dx)) for x in u]
    n = len(idx)
    out = [0] * n
    prev = 0
    for i in range(n - 1, -1, -1):
        out[i] = max(idx[i], prev + 1, n - i)
        prev = out[i]
    if out[0] > n_sites:
        raise ValueError(f"boundary point {tuple(u)} does not fit under the height cap")
    return tuple(out)


def _min_state(n: int) -> tuple[int, ...]:
    return tuple(range(n, 0, -1))


def _boundary_vectors(
    n: int, grid: GridSpec, boundary: BoundaryMode, size: int, states: ee.StateSpace
) -> tuple[np.ndarray, np.ndarray, str]:
    log_free = n * math.log(grid.dx)
    f0 = np.full(size, NEG_INF)
    bT = np.full(size, NEG_INF)
    if isinstance(boundary, ZeroBC):
        f0[states.id_of(_min_state(n))] = 0.0
        bT[states.id_of(_min_state(n))] = 0.0
        return f0, bT, "zero_bc"
    if isinstance(boundary, FreeRight):
        f0[states.id_of(_min_state(n))] = 0.0
        bT[:] = log_free
        return f0, bT, "free_right"
    if isinstance(boundary, FreeBoth):
        f0[:] = log_free
        bT[:] = log_free
        return f0, bT, "free_both"
    if isinstance(boundary, Fixed):
        f0[states.id_of(snap_to_chamber(boundary.u, grid.dx, grid.n_sites))] = 0.0
        if boundary.v is None:
            bT[:] = log_free
        else:
            bT[states.id_of(snap_to_chamber(boundary.v, grid.dx, grid.n_sites))] = 0.0
        return f0, bT, "fixed"
    raise TypeError(f"unknown boundary mode {boundary!r}")


def _polymer_messages(n: int, a: float, b: float, grid: GridSpec, boundary: BoundaryMode):
    if grid.n_sites < n:
        raise ValueError("height cap too small for n ordered curves")
    states, g = _chamber_operator(n, grid.n_sites)
    log_tilt = _tilt_log_vector(states, a, b, grid.dx)
    steps = grid.n_steps
    nnz = g.size if isinstance(g, np.ndarray) else g.nnz
    if steps * nnz > 20 * ee.state_budget():
        raise ee.TooLarge("time-stepping work exceeds budget")
    f0, bT, _ = _boundary_vectors(n, grid, boundary, states.size, states)
    fwd = np.empty((steps + 1, states.size))
    fwd[0] = f0
    for t in range(1, steps + 1):
        fwd[t] = la.log_vec_mat(fwd[t - 1], g, log_tilt)
    bwd = np.empty((steps + 1, states.size))
    bwd[steps] = bT
    for t in range(steps - 1, -1, -1):
        bwd[t] = la.log_mat_vec(g, log_tilt, bwd[t + 1])
    return states, fwd, bwd


def _time_index(grid: GridSpec, t: float) -> int:
    j = int(round((t + grid.m_eff) / grid.dt))
    if not 0 <= j <= grid.n_steps:
        raise ValueError(f"time {t} outside [-{grid.m_eff}, {grid.m_eff}]")
    return j


def polymer_marginal(
    n: int, a: float, b: float, grid: GridSpec, boundary: BoundaryMode, t: float
) -> ee.Distribution:
    """One-time marginal of the discretized polymer at grid time t."""
    states, fwd, bwd = _polymer_messages(n, a, b, grid, boundary)
    j = _time_index(grid, t)
    return ee.Distribution(
        space=grid.space_key(n),
        log_weights=fwd[j] + bwd[j],
        meta={"states": states, "dx": grid.dx, "time": t},
    )


def free_marginal(n: int, a: float, b: float, grid: GridSpec, mode, t: float) -> ee.Distribution:
    """Marginal under a free boundary mode (FreeRight or FreeBoth)."""
    if not isinstance(mode, (FreeRight, FreeBoth)):
        raise TypeError("mode must be FreeRight or FreeBoth")
    return polymer_marginal(n, a, b, grid, mode, t)


def zero_bc_extrapolate(n: int, a: float, b: float, grid: GridSpec) -> PolymerLaw:
    """Zero-boundary law as the smallest-epsilon member of a contracting
    family Fixed(eps * w), with Cauchy and direction-independence
    diagnostics."""
    w_ref = np.arange(n, 0, -1, dtype=float)
    w_alt = 3.0 * np.arange(n, 0, -1, dtype=float)
    laws = {}
    for mult in (4, 2, 1):
        u = tuple(mult * grid.dx * w_ref)
        laws[mult] = polymer_marginal(n, a, b, grid, Fixed(u=u, v=u), 0.0)
    u_alt = tuple(grid.dx * w_alt)
    law_alt = polymer_marginal(n, a, b, grid, Fixed(u=u_alt, v=u_alt), 0.0)
    diags = {
        "tv_eps4_eps2": ee.tv_exact(laws[4], laws[2]),
        "tv_eps2_eps1": ee.tv_exact(laws[2], laws[1]),
        "tv_direction": ee.tv_exact(laws[1], law_alt),
    }
    return PolymerLaw(grid=grid, mode="zero_bc", marginal=laws[1], diagnostics=diags)


def stationary_density(
    n: int,
    a: float,
    b: float,
    grid: GridSpec,
    tol: float = 1e-12,
    max_iter: int = 100_000,
) -> ee.Distribution:
    """Large-time one-time marginal: the product of left and right leading
    eigenvectors of the one-step tilted chamber operator.

    The operator is e^{-a_s} G(s,s') with G symmetric, so power iteration
    runs on the symmetrized form G(s,s') e^{-(a_s + a_s')/2}, whose
    leading eigenvector v gives the stationary marginal as v^2."""
    if grid.n_sites < n:
        raise ValueError("height cap too small for n ordered curves")
    states, g = _chamber_operator(n, grid.n_sites)
    log_tilt = _tilt_log_vector(states, a, b, grid.dx)
    half = np.exp(0.5 * log_tilt)
    if isinstance(g, np.ndarray):
        sym = g * half[:, None] * half[None, :]
    else:
        d = sp.diags(half)
        sym = (d @ g @ d).tocsr()
    v = np.full(states.size, 1.0 / math.sqrt(states.size))
    for _ in range(max_iter):
        nxt = sym @ v
        norm = np.linalg.norm(nxt)
        if norm == 0.0:
            raise NoConvergence("operator annihilated the iterate")
        nxt /= norm
        delta = float(np.max(np.abs(nxt - v)))
        v = nxt
        if delta <= tol:
            break
    else:
        raise NoConvergence(f"power iteration did not reach {tol:g} in {max_iter} steps")
    if v.min() < 0.0:
        raise NoConvergence("leading eigenvector is not nonnegative")
    with np.errstate(divide="ignore"):
        log_density = 2.0 * np.log(v)
    return ee.Distribution(
        space=grid.space_key(n),
        log_weights=log_density,
        meta={"states": states, "dx": grid.dx, "stationary": True},
    )


def top_curve_pmf(dist: ee.Distribution) -> tuple[np.ndarray, np.ndarray]:
    """Marginal of the top coordinate: (site indices 1..n_sites, pmf)."""
    states = dist.meta["states"]
    n_sites = states.x_max
    pmf = np.bincount(states.arr[:, 0], weights=dist.probs, minlength=n_sites + 1)[1:]
    return np.arange(1, n_sites + 1), pmf

"""Core model objects: step kernels, confining potentials, area tilts,
ensemble windows, path configurations, and the diffusive rescaling.

All types are immutable after construction and all operations are pure,
so everything here is safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

# Dedicated sentinel for "log-weight of an impossible configuration".
NEG_INF = float("-inf")


class KernelError(ValueError):
    """Base class for step-kernel construction failures."""


class NotNormalized(KernelError):
    """Step probabilities do not sum to one."""


class NonzeroMean(KernelError):
    """Step distribution has nonzero mean."""


class NotIrreducible(KernelError):
    """Step support does not generate the full integer lattice."""


class NoRoot(ValueError):
    """The scale equation H^2 V(H) = 1 has no solution for this potential."""


class OutOfRange(ValueError):
    """Evaluation time outside the rescaled path's window."""


@dataclass(frozen=True)
class Kernel:
    """Finite-support integer step distribution with zero mean.

    ``period`` is the gcd of support differences: 1 for aperiodic kernels,
    2 for the simple walk.  ``variance`` is recorded but not constrained;
    comparisons against the Brownian oracle rescale space by ``sigma``.
    """

    offsets: tuple[int, ...]
    probs: tuple[float, ...]
    variance: float
    period: int

    @property
    def sigma(self) -> float:
        return math.sqrt(self.variance)

    @property
    def max_step(self) -> int:
        return max(abs(z) for z in self.offsets)

    def prob(self, z: int) -> float:
        try:
            return self.probs[self.offsets.index(z)]
        except ValueError:
            return 0.0


def make_kernel(offsets: Sequence[int], probs: Sequence[float]) -> Kernel:
    """Validate and build a step kernel.

    Raises NotNormalized / NonzeroMean / NotIrreducible when the usual
    random-walk requirements fail.
    """
    if len(offsets) != len(probs):
        raise ValueError("offsets and probs must have the same length")
    offsets = tuple(int(z) for z in offsets)
    probs = tuple(float(p) for p in probs)
    if len(set(offsets)) != len(offsets):
        raise ValueError("duplicate step offsets")
    if any(p <= 0.0 for p in probs):
        raise ValueError("all step probabilities must be positive")
    total = math.fsum(probs)
    if abs(total - 1.0) > 1e-12:
        raise NotNormalized(f"probabilities sum to {total!r}, not 1")
    mean = math.fsum(z * p for z, p in zip(offsets, probs))
    if abs(mean) > 1e-12:
        raise NonzeroMean(f"step mean is {mean!r}, not 0")
    if math.gcd(*(abs(z) for z in offsets)) != 1:
        raise NotIrreducible("support generates a proper sublattice of Z")
    variance = math.fsum(z * z * p for z, p in zip(offsets, probs))
    z0 = offsets[0]
    period = 0
    for z in offsets:
        period = math.gcd(period, abs(z - z0))
    return Kernel(offsets=offsets, probs=probs, variance=variance, period=max(period, 1))


def simple_walk() -> Kernel:
    """+-1 steps with equal probability (period 2, variance 1)."""
    return make_kernel((-1, 1), (0.5, 0.5))


def lazy_walk() -> Kernel:
    """Steps {-1,0,1} with probs {1/4,1/2,1/4} (aperiodic, variance 1/2)."""
    return make_kernel((-1, 0, 1), (0.25, 0.5, 0.25))


def unit_walk() -> Kernel:
    """Aperiodic kernel with variance exactly 1 (support {-2..2})."""
    return make_kernel((-2, -1, 0, 1, 2), (0.05, 0.3, 0.3, 0.3, 0.05))


KERNEL_PRESETS: dict[str, Callable[[], Kernel]] = {
    "srw": simple_walk,
    "lazy": lazy_walk,
    "unit": unit_walk,
}


@dataclass(frozen=True)
class Potential:
    """Confining potential V(x): zero at the wall, non-decreasing, unbounded.

    ``kind`` is "linear" (V(x) = lambda*x) or "table" (piecewise-linear
    through sample points, linearly extrapolated above the last point).
    Table values are the potential at the stored ``lam``; moving to a new
    lambda rescales them proportionally (``with_lambda``).
    """

    kind: str
    lam: float
    xs: tuple[float, ...] = ()
    vs: tuple[float, ...] = ()
    q0: Callable[[float], float] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.lam <= 0.0:
            raise ValueError("lambda must be positive")
        if self.kind == "linear":
            return
        if self.kind != "table":
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if len(self.xs) != len(self.vs) or len(self.xs) < 2:
            raise ValueError("table potential needs >= 2 (x, V) samples")
        if self.xs[0] != 0.0 or self.vs[0] != 0.0:
            raise ValueError("table must start at (0, 0): V(0) = 0 is required")
        if any(b < a for a, b in zip(self.xs, self.xs[1:])):
            raise ValueError("table x values must be increasing")
        if any(b < a for a, b in zip(self.vs, self.vs[1:])):
            raise ValueError("table V values must be non-decreasing")
        if not self.vs[-1] > self.vs[0]:
            raise ValueError("last table value must strictly exceed the first")
        if self.vs[-1] <= self.vs[-2]:
            raise ValueError("extrapolation slope must be increasing")

    def value(self, x):
        """Evaluate V at x (scalar or array), x >= 0."""
        if self.kind == "linear":
            return self.lam * np.asarray(x, dtype=float)
        xs = np.asarray(self.xs)
        vs = np.asarray(self.vs)
        x = np.asarray(x, dtype=float)
        out = np.interp(x, xs, vs)
        slope = (vs[-1] - vs[-2]) / (xs[-1] - xs[-2])
        above = x > xs[-1]
        out = np.where(above, vs[-1] + slope * (x - xs[-1]), out)
        return out if out.ndim else float(out)

    def with_lambda(self, lam: float) -> "Potential":
        """Same potential family at a different tilt strength."""
        if self.kind == "linear":
            return Potential(kind="linear", lam=lam, q0=self.q0)
        scale = lam / self.lam
        return Potential(
            kind="table",
            lam=lam,
            xs=self.xs,
            vs=tuple(v * scale for v in self.vs),
            q0=self.q0,
        )


def linear_potential(lam: float, q0: Callable[[float], float] | None = None) -> Potential:
    return Potential(kind="linear", lam=lam, q0=q0)


def table_potential(
    xs: Sequence[float],
    vs: Sequence[float],
    lam: float,
    q0: Callable[[float], float] | None = None,
) -> Potential:
    return Potential(kind="table", lam=lam, xs=tuple(map(float, xs)), vs=tuple(map(float, vs)), q0=q0)


@dataclass(frozen=True)
class TiltSpec:
    """Area-tilt parameters: curve i is weighted by exp(-a * b^(i-1) * sum V)."""

    a: float
    b: float
    potential: Potential

    def __post_init__(self):
        if self.a <= 0.0:
            raise ValueError("tilt prefactor a must be positive")
        if self.b <= 1.0:
            raise ValueError("geometric factor b must exceed 1")

    def curve_weights(self, n: int) -> np.ndarray:
        """Prefactors a * b^(i-1) for curves i = 1..n."""
        return self.a * self.b ** np.arange(n, dtype=float)


def _validate_chamber_point(u: Sequence[int], n: int, x_max: int, name: str) -> tuple[int, ...]:
    u = tuple(int(x) for x in u)
    if len(u) != n:
        raise ValueError(f"{name} must have {n} entries")
    if any(b >= a for a, b in zip(u, u[1:])):
        raise ValueError(f"{name} must be strictly decreasing")
    if u[-1] < 1:
        raise ValueError(f"{name} must stay strictly above the wall (entries >= 1)")
    if u[0] > x_max:
        raise ValueError(f"{name}[0] = {u[0]} exceeds the height cutoff {x_max}")
    return u


@dataclass(frozen=True)
class Walk:
    """Left endpoint pinned, right endpoint free."""

    u: tuple[int, ...]


@dataclass(frozen=True)
class Bridge:
    """Both endpoints pinned."""

    u: tuple[int, ...]
    v: tuple[int, ...]


@dataclass(frozen=True)
class EnsembleSpec:
    """Curve count, integer time window {m_left..n_right}, boundary data,
    and the height cutoff used to truncate the state space."""

    n: int
    m_left: int
    n_right: int
    boundary: Walk | Bridge
    x_max: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one curve")
        if self.m_left >= self.n_right:
            raise ValueError("window must satisfy m_left < n_right")
        if self.x_max < self.n:
            raise ValueError("x_max too small to hold n ordered curves")
        _validate_chamber_point(self.boundary.u, self.n, self.x_max, "u")
        if isinstance(self.boundary, Bridge):
            _validate_chamber_point(self.boundary.v, self.n, self.x_max, "v")

    @property
    def width(self) -> int:
        """Number of time columns, n_right - m_left + 1."""
        return self.n_right - self.m_left + 1

    @property
    def times(self) -> range:
        return range(self.m_left, self.n_right + 1)

    def col(self, t: int) -> int:
        if not self.m_left <= t <= self.n_right:
            raise ValueError(f"time {t} outside window [{self.m_left}, {self.n_right}]")
        return t - self.m_left


def default_x_max(lam: float, u_top: int) -> int:
    # e^{-lam*x} mass above 30/lam is below e^-30 per site.
    return int(math.ceil(30.0 / lam + u_top + 5))


@dataclass(frozen=True)
class PathConfig:
    """Integer height matrix (curves x times) tied to its ensemble window."""

    heights: np.ndarray
    spec: EnsembleSpec

    def __post_init__(self):
        h = np.asarray(self.heights, dtype=np.int64)
        if h.shape != (self.spec.n, self.spec.width):
            raise ValueError(f"heights shape {h.shape} != (n, width) = ({self.spec.n}, {self.spec.width})")
        if np.any(h < 0):
            raise ValueError("heights must be nonnegative")
        b = self.spec.boundary
        if tuple(h[:, 0]) != b.u:
            raise ValueError("left boundary column does not match u")
        if isinstance(b, Bridge) and tuple(h[:, -1]) != b.v:
            raise ValueError("right boundary column does not match v")
        h.flags.writeable = False
        object.__setattr__(self, "heights", h)

    def column(self, t: int) -> tuple[int, ...]:
        return tuple(self.heights[:, self.spec.col(t)])

    def with_heights(self, heights: np.ndarray) -> "PathConfig":
        return PathConfig(heights=heights, spec=self.spec)


@dataclass(frozen=True)
class ScaleInfo:
    """Diffusive scale: h_big = H solves H^2 V(H) = 1, h_small = 1/H."""

    lam: float
    h_big: float
    h_small: float

    def __post_init__(self):
        if abs(self.h_small * self.h_big - 1.0) > 1e-12:
            raise ValueError("h_small must be the reciprocal of h_big")


def h_scale(potential: Potential) -> ScaleInfo:
    """Solve H^2 V(H) = 1 for the spatial scale H.

    Linear potentials use the closed form H = lambda^(-1/3); table
    potentials are solved by bracketing bisection to 1e-12 relative
    tolerance.  Raises NoRoot for degenerate tables.
    """
    if potential.kind == "linear":
        h = potential.lam ** (-1.0 / 3.0)
        return ScaleInfo(lam=potential.lam, h_big=h, h_small=1.0 / h)

    def g(h: float) -> float:
        return h * h * float(potential.value(h)) - 1.0

    lo, hi = 0.0, 1.0
    for _ in range(200):
        if g(hi) >= 0.0:
            break
        lo = hi
        hi *= 2.0
    else:
        raise NoRoot("H^2 V(H) never reaches 1; table potential is degenerate")
    while lo > 0.0 and g(lo) > 0.0:
        hi = lo
        lo /= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) < 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * hi:
            break
    h = 0.5 * (lo + hi)
    if not h > 0.0 or not math.isfinite(h):
        raise NoRoot("bisection failed to locate a positive root")
    return ScaleInfo(lam=potential.lam, h_big=h, h_small=1.0 / h)


def _heights_of(path) -> np.ndarray:
    """Path functionals accept a PathConfig or a raw (n, width) matrix."""
    if isinstance(path, PathConfig):
        return path.heights
    h = np.asarray(path)
    if h.ndim != 2:
        raise ValueError("heights must be a 2-d (curves x times) matrix")
    return h


def area_functional(path, tilt: TiltSpec) -> float:
    """Weighted area under the curves, summed over all times except the
    right edge of the window: a * sum_i b^(i-1) * sum_{j<N} V(X_i(j))."""
    h = _heights_of(path)
    body = np.asarray(h[:, :-1], dtype=float)
    per_curve = tilt.potential.value(body).reshape(body.shape).sum(axis=1)
    return float(np.dot(tilt.curve_weights(h.shape[0]), per_curve))


def ordering_ok(path) -> bool:
    """True iff every column is strictly decreasing with bottom curve > 0."""
    h = _heights_of(path)
    if np.any(h[-1, :] <= 0):
        return False
    if h.shape[0] == 1:
        return True
    return bool(np.all(h[:-1, :] > h[1:, :]))


def log_tilt_weight(path, tilt: TiltSpec) -> float:
    """Log of the (unnormalized) tilt factor: -area if ordered, else -inf."""
    if not ordering_ok(path):
        return NEG_INF
    return -area_functional(path, tilt)


@dataclass(frozen=True)
class RescaledPath:
    """Piecewise-linear rescaled path: values h*X on times h^2 * j."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != t.shape[0]:
            raise ValueError("values must be (n_curves, len(times))")
        t.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def t_min(self) -> float:
        return float(self.times[0])

    @property
    def t_max(self) -> float:
        return float(self.times[-1])

    def evaluate(self, t) -> np.ndarray:
        """Linear interpolation at time(s) t; raises OutOfRange beyond the window."""
        t = np.asarray(t, dtype=float)
        if np.any(t < self.t_min - 1e-12) or np.any(t > self.t_max + 1e-12):
            raise OutOfRange(f"time outside [{self.t_min}, {self.t_max}]")
        t = np.clip(t, self.t_min, self.t_max)
        return np.stack([np.interp(t, self.times, row) for row in self.values])


def rescale(path: PathConfig, scale: ScaleInfo) -> RescaledPath:
    """Map heights X(j) to h*X on the diffusive time grid h^2 * j."""
    js = np.arange(path.spec.m_left, path.spec.n_right + 1, dtype=float)
    times = scale.h_small**2 * js
    values = scale.h_small * np.asarray(path.heights, dtype=float)
    return RescaledPath(times=times, values=values)

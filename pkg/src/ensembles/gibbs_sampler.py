"""Block heat-bath MCMC for the tilted ensemble.

Each block update is an exact draw from the conditional bridge (or
conditional walk) law given the block endpoints, so there is no
acceptance step to tune.  Chains are vectorized internally: a batch of
independent chains shares the block schedule while every chain consumes
its own spawned random stream.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import _linalg as la
from . import exact_engine as ee
from .model_core import (
    NEG_INF,
    Bridge,
    EnsembleSpec,
    Kernel,
    PathConfig,
    TiltSpec,
    Walk,
)


class Infeasible(ValueError):
    """No admissible configuration exists for this boundary and cutoff."""


class TooShort(ValueError):
    """Series too short (or degenerate) for an autocorrelation estimate."""


@dataclass(frozen=True)
class McmcParams:
    """Block schedule, chain length, thinning, and seeding."""

    block_len: int = 8
    overlap: int = 4
    sweeps: int = 1000
    burn_in: int = 100
    thin: int = 1
    seed: int = 0
    chains: int = 1

    def __post_init__(self):
        if self.block_len < 2:
            raise ValueError("block_len must be >= 2")
        if not 1 <= self.overlap < self.block_len:
            raise ValueError("need 1 <= overlap < block_len")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.sweeps < 0 or self.burn_in < 0:
            raise ValueError("sweeps and burn_in must be nonnegative")
        if self.chains < 1:
            raise ValueError("chains must be >= 1")


@dataclass(frozen=True)
class ChainDiagnostics:
    """Per-observable integrated autocorrelation times and bookkeeping.

    acceptance_ratio is identically 1 for heat-bath updates; it is kept
    for schema stability."""

    tau: dict
    ess: dict
    acceptance_ratio: float
    sweep_seconds: float
    sweeps: int
    chains: int
    kept: int


# ---------------------------------------------------------------------------
# cached local transfer structures


@lru_cache(maxsize=32)
def _local_transfer(n: int, x_loc: int, kernel: Kernel, tilt: TiltSpec | None):
    states = ee.enumerate_states(n, x_loc)
    mat = ee._step_probability_matrix(states, kernel)
    dense = mat if isinstance(mat, np.ndarray) else mat.toarray()
    log_tilt = np.zeros(states.size) if tilt is None else ee.tilt_log_vector(states, tilt)
    with np.errstate(divide="ignore"):
        log_step = np.log(dense) + log_tilt[:, None]
    # sparse matvec keeps the batched forward pass O(nnz), not O(S^2)
    if isinstance(mat, np.ndarray):
        mat = sp.csr_matrix(mat)
    base = x_loc + 1
    pows = base ** np.arange(n - 1, -1, -1, dtype=np.int64)
    keys = states.arr @ pows
    return states, mat, log_tilt, log_step, keys, pows


def _column_ids(keys: np.ndarray, pows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Vectorized state-id lookup for a batch of columns (R, n)."""
    ck = cols @ pows
    pos = np.searchsorted(keys, ck)
    if np.any(pos >= keys.size) or np.any(keys[pos.clip(0, keys.size - 1)] != ck):
        raise ValueError("column is not a state of the local space")
    return pos


# ---------------------------------------------------------------------------
# block schedule


def _blocks_schedule(spec: EnsembleSpec, params: McmcParams) -> list[tuple[int, int | None]]:
    m, n_r = spec.m_left, spec.n_right
    stride = params.block_len - params.overlap
    blocks: list[tuple[int, int | None]] = []
    if isinstance(spec.boundary, Walk):
        k = m
        while k + params.block_len < n_r:
            blocks.append((k, k + params.block_len))
            k += stride
        blocks.append((k, None))
        return blocks
    k = m
    while k < n_r - 1:
        l = min(k + params.block_len, n_r)
        blocks.append((k, l))
        if l == n_r:
            break
        k += stride
    return blocks


def _block_draws(spec: EnsembleSpec, block: tuple[int, int | None]) -> int:
    k, l = block
    if l is None:
        return spec.n_right - k
    return l - k - 1


def _sweep_draws(spec: EnsembleSpec, blocks) -> int:
    return sum(_block_draws(spec, b) for b in blocks)


# ---------------------------------------------------------------------------
# batched block resampling


def _apply_block_batch(
    heights: np.ndarray,
    spec: EnsembleSpec,
    kernel: Kernel,
    tilt: TiltSpec | None,
    block: tuple[int, int | None],
    us: np.ndarray,
    cursor: int,
) -> int:
    """Exact conditional redraw of one block for every chain in the batch.

    ``heights`` is (chains, n, width) and is modified in place; ``us`` is
    the per-sweep uniform buffer (chains, draws)."""
    k, l = block
    free = l is None
    m = (spec.n_right - k) if free else (l - k)
    n_draw = _block_draws(spec, block)
    if n_draw == 0:
        return cursor
    col_k = spec.col(k)
    ends_top = int(heights[:, 0, col_k].max())
    if not free:
        ends_top = max(ends_top, int(heights[:, 0, spec.col(l)].max()))
    x_loc = ends_top + m * kernel.max_step + 2
    x_loc = min(spec.x_max, int(math.ceil(x_loc / 4.0)) * 4)
    states, mat, log_tilt, log_step, keys, pows = _local_transfer(spec.n, x_loc, kernel, tilt)

    r = heights.shape[0]
    start = _column_ids(keys, pows, heights[:, :, col_k])
    fwd = np.full((m + 1, r, states.size), NEG_INF)
    fwd[0, np.arange(r), start] = 0.0
    for t in range(1, m + 1):
        fwd[t] = la.log_vec_mat(fwd[t - 1], mat, log_tilt)

    idx = np.empty((m + 1, r), dtype=np.int64)
    if free:
        idx[m] = la.categorical_from_log_batch(fwd[m], us[:, cursor])
        cursor += 1
    else:
        idx[m] = _column_ids(keys, pows, heights[:, :, spec.col(l)])
    for t in range(m - 1, 0, -1):
        w = fwd[t] + log_step[:, idx[t + 1]].T
        idx[t] = la.categorical_from_log_batch(w, us[:, cursor])
        cursor += 1
    last = m if free else m - 1
    for t in range(1, last + 1):
        heights[:, :, col_k + t] = states.arr[idx[t]]
    return cursor


def _sweep_batch(
    heights: np.ndarray,
    spec: EnsembleSpec,
    kernel: Kernel,
    tilt: TiltSpec | None,
    blocks,
    us: np.ndarray,
) -> None:
    cursor = 0
    for block in blocks:
        cursor = _apply_block_batch(heights, spec, kernel, tilt, block, us, cursor)


# ---------------------------------------------------------------------------
# initial configuration


def _ffbs_ids_fixed_ends(states, mat, log_step, i_from, i_to, m, rng) -> np.ndarray:
    fwd = np.full((m + 1, states.size), NEG_INF)
    fwd[0, i_from] = 0.0
    zeros = np.zeros(states.size)
    for t in range(1, m + 1):
        fwd[t] = la.log_vec_mat(fwd[t - 1], mat, zeros)
    ids = np.empty(m + 1, dtype=np.int64)
    ids[m] = i_to
    ids[0] = i_from
    for t in range(m - 1, 0, -1):
        ids[t] = la.categorical_from_log(fwd[t] + log_step[:, ids[t + 1]], rng.random())
    return ids


@dataclass
class _InitPlan:
    """Shared untilted message structures; drawing a sample is then cheap."""

    spec_loc: EnsembleSpec
    res: ee.TransferResult
    log_step: np.ndarray
    anchor_ts: list
    gaps: list
    powers: dict


_INIT_CHUNK = 48


def _untilted_plan(spec_loc: EnsembleSpec, kernel: Kernel) -> "_InitPlan | None":
    states = ee.enumerate_states(spec_loc.n, spec_loc.x_max)
    res = ee._compute_messages(spec_loc, kernel, states, np.zeros(states.size))
    if not np.isfinite(res.log_z):
        return None
    log_step = res.step.dense_log()
    if spec_loc.width <= _INIT_CHUNK + 1:
        return _InitPlan(spec_loc, res, log_step, [], [], {})
    anchor_ts = list(range(spec_loc.m_left, spec_loc.n_right, _INIT_CHUNK)) + [spec_loc.n_right]
    gaps = [b - a for a, b in zip(anchor_ts, anchor_ts[1:])]
    powers = ee._dense_log_power_chain(res.step, gaps)
    return _InitPlan(spec_loc, res, log_step, anchor_ts, gaps, powers)


def _draw_untilted(plan: _InitPlan, rng: np.random.Generator) -> np.ndarray:
    """One exact untilted sample, chunk by chunk for long windows: anchors
    come from the coarse (subsampled) chain, then each sub-window is
    filled as a bridge between its anchors."""
    spec_loc, res = plan.spec_loc, plan.res
    states = res.states
    if not plan.anchor_ts:
        idxs = ee._sample_path_indices(res, plan.log_step, rng)
        return states.arr[idxs].T.copy()
    n_anchor = len(plan.anchor_ts)
    anchor_ids = np.empty(n_anchor, dtype=np.int64)
    if isinstance(spec_loc.boundary, Bridge):
        anchor_ids[-1] = states.id_of(spec_loc.boundary.v)
    else:
        anchor_ids[-1] = la.categorical_from_log(res.forward[-1], rng.random())
    for i in range(n_anchor - 2, 0, -1):
        weights = res.forward[res.col(plan.anchor_ts[i])] + plan.powers[plan.gaps[i]][:, anchor_ids[i + 1]]
        anchor_ids[i] = la.categorical_from_log(weights, rng.random())
    anchor_ids[0] = states.id_of(spec_loc.boundary.u)
    heights = np.empty((spec_loc.n, spec_loc.width), dtype=np.int64)
    for i, gap in enumerate(plan.gaps):
        ids = _ffbs_ids_fixed_ends(
            states, res.step.matrix, plan.log_step, anchor_ids[i], anchor_ids[i + 1], gap, rng
        )
        c0 = res.col(plan.anchor_ts[i])
        heights[:, c0 : c0 + gap + 1] = states.arr[ids].T
    return heights


def _make_init_plan(spec: EnsembleSpec, kernel: Kernel) -> _InitPlan:
    if isinstance(spec.boundary, Bridge):
        try:
            ee._bridge_parity_check(spec, kernel)
        except ee.ParityInfeasible as exc:
            raise Infeasible(str(exc)) from None
    tops = [spec.boundary.u[0]]
    if isinstance(spec.boundary, Bridge):
        tops.append(spec.boundary.v[0])
    x_init = min(spec.x_max, max(tops) + 2 * spec.n + 8)
    while True:
        plan = _untilted_plan(replace(spec, x_max=x_init), kernel)
        if plan is not None:
            return plan
        if x_init >= spec.x_max:
            raise Infeasible(f"no admissible path within x_max={spec.x_max} for this boundary")
        x_init = min(spec.x_max, 2 * x_init)


def init_config(spec: EnsembleSpec, kernel: Kernel, rng: np.random.Generator | None = None) -> PathConfig:
    """A positive-probability starting configuration.

    Drawn exactly from the untilted wall-constrained ensemble on a
    reduced height cutoff (enlarged on demand up to spec.x_max), so the
    result is ordered and kernel-admissible by construction.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    plan = _make_init_plan(spec, kernel)
    return PathConfig(heights=_draw_untilted(plan, rng), spec=spec)


# ---------------------------------------------------------------------------
# public single-chain operations


def resample_block(
    config: PathConfig,
    K: int,
    L: int,
    tilt: TiltSpec,
    kernel: Kernel,
    rng: np.random.Generator,
) -> PathConfig:
    """Replace the columns strictly between K and L by an exact conditional
    draw.  For Walk boundaries, L = n_right + 1 resamples {K+1..n_right}
    from the conditional walk law (free right end)."""
    spec = config.spec
    free = L == spec.n_right + 1
    if free and not isinstance(spec.boundary, Walk):
        raise ValueError("free right-end block needs a Walk boundary")
    if not free and not (spec.m_left <= K < L <= spec.n_right):
        raise ValueError("need m_left <= K < L <= n_right")
    if free and not (spec.m_left <= K <= spec.n_right):
        raise ValueError("need m_left <= K <= n_right")
    block = (K, None) if free else (K, L)
    n_draw = _block_draws(spec, block)
    heights = config.heights[None, :, :].copy()
    us = rng.random(n_draw)[None, :] if n_draw else np.zeros((1, 0))
    _apply_block_batch(heights, spec, kernel, tilt, block, us, 0)
    return config.with_heights(heights[0])


def sweep(
    config: PathConfig,
    params: McmcParams,
    tilt: TiltSpec,
    kernel: Kernel,
    rng: np.random.Generator,
) -> PathConfig:
    """One left-to-right pass of overlapping block resamples."""
    spec = config.spec
    blocks = _blocks_schedule(spec, params)
    n_draw = _sweep_draws(spec, blocks)
    heights = config.heights[None, :, :].copy()
    us = rng.random(n_draw)[None, :] if n_draw else np.zeros((1, 0))
    _sweep_batch(heights, spec, kernel, tilt, blocks, us)
    return config.with_heights(heights[0])


# ---------------------------------------------------------------------------
# full sampler


def sample_paths(
    spec: EnsembleSpec,
    kernel: Kernel,
    tilt: TiltSpec,
    params: McmcParams,
) -> tuple[list[PathConfig], ChainDiagnostics]:
    """Thinned post-burn-in samples from params.chains independent chains,
    with autocorrelation diagnostics on the center height and total area."""
    blocks = _blocks_schedule(spec, params)
    n_draw = _sweep_draws(spec, blocks)
    gens = [np.random.default_rng(c) for c in np.random.SeedSequence(params.seed).spawn(params.chains)]
    r = params.chains
    plan = _make_init_plan(spec, kernel)
    heights = np.stack([_draw_untilted(plan, g) for g in gens]).astype(np.int64)

    t_center = (spec.m_left + spec.n_right) // 2
    col_c = spec.col(t_center)
    curve_w = tilt.curve_weights(spec.n)

    samples: list[PathConfig] = []
    x1_series: list[np.ndarray] = []
    area_series: list[np.ndarray] = []
    t0 = time.perf_counter()
    for s_i in range(params.burn_in + params.sweeps):
        if n_draw:
            us = np.stack([g.random(n_draw) for g in gens])
        else:
            us = np.zeros((r, 0))
        _sweep_batch(heights, spec, kernel, tilt, blocks, us)
        if s_i >= params.burn_in and (s_i - params.burn_in) % params.thin == 0:
            x1_series.append(heights[:, 0, col_c].copy())
            body = heights[:, :, :-1].astype(float)
            v = tilt.potential.value(body)
            area_series.append(np.einsum("rnt,n->r", v, curve_w))
            for c in range(r):
                samples.append(PathConfig(heights=heights[c].copy(), spec=spec))
    elapsed = time.perf_counter() - t0

    tau: dict = {"x1_center": None, "area": None}
    ess: dict = {"x1_center": None, "area": None}
    if x1_series:
        x1 = np.stack(x1_series)  # (kept_per_chain, chains)
        area = np.stack(area_series)
        for name, arr in (("x1_center", x1), ("area", area)):
            taus = []
            for c in range(r):
                try:
                    taus.append(autocorr(arr[:, c]))
                except TooShort:
                    pass
            if taus:
                t_hat = max(float(np.mean(taus)), 0.5)
                tau[name] = t_hat
                ess[name] = len(samples) / (2.0 * t_hat)
    diags = ChainDiagnostics(
        tau=tau,
        ess=ess,
        acceptance_ratio=1.0,
        sweep_seconds=elapsed,
        sweeps=params.burn_in + params.sweeps,
        chains=r,
        kept=len(samples),
    )
    return samples, diags


def autocorr(series: Sequence[float]) -> float:
    """Integrated autocorrelation time with self-consistent windowing
    (smallest window W with W >= 5 * tau(W)); tau = 0.5 for i.i.d. data."""
    x = np.asarray(series, dtype=float).ravel()
    n = x.size
    if n < 10:
        raise TooShort(f"need >= 10 points, got {n}")
    x = x - x.mean()
    var = float(np.mean(x * x))
    if var == 0.0:
        raise TooShort("series is constant")
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acf = np.fft.irfft(np.abs(f) ** 2, nfft)[:n]
    acf /= acf[0]
    tau_w = 0.5 + np.cumsum(acf[1:])
    for w in range(1, n):
        if w >= 5.0 * tau_w[w - 1]:
            return float(tau_w[w - 1])
    return float(tau_w[-1])

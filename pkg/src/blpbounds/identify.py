"""Sharp identified sets under a restricted outside-good share.

A parameter is in the identified set when, for every unit direction v and
every instrument cell, the conditional mean of the support moment

    m(W, v, theta) = sup_{s0 in S0} v' ( sigma^{-1}((s0, s_tilde (1-s0))) - (beta.x - alpha p) )

is nonnegative.  The sup is taken over a grid on the clipped outside-share
interval (optionally refined by golden section); a sup attained at an
eta-clipped endpoint with a steep outward trend is reported as +infinity,
which satisfies the inequality trivially.

Only the inversion term depends on (lambda, s0); the (alpha, beta) part is
linear.  The grid sweep therefore precomputes, per lambda, the per-market
supremum of v' sigma^{-1} together with cell-level cross moments, and reads
membership for every (alpha, beta) off closed forms.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, InversionError
from .inversion import invert_shares_batch, demand_shocks
from .model import (
    Dataset,
    MarketObservation,
    MixingSpec,
    OutsideShareSet,
    ParamTheta,
    Quadrature,
    ThetaGrid,
    build_quadrature,
)
from .results import GridResult
from .shares import ShareKernel, mean_utilities

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0

# Outward slope (per grid step, averaged over the last three steps) above
# which a supremum at a clipped endpoint is declared divergent.
DIVERGENCE_SLOPE = 1.0


# ---------------------------------------------------------------------------
# Directions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Direction:
    """A unit vector selecting one support-function inequality."""

    v: np.ndarray
    tag: str = "custom"

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.v, dtype=float))
        v.flags.writeable = False
        object.__setattr__(self, "v", v)
        if abs(np.linalg.norm(v) - 1.0) > 1e-12:
            raise DataError(f"direction {v} is not unit length")


def _canon_key(v: np.ndarray) -> tuple:
    return tuple(np.round(v, 12) + 0.0)


@dataclass(frozen=True)
class DirectionSet:
    """Ordered, duplicate-free family of directions."""

    directions: Tuple[Direction, ...]

    def __post_init__(self):
        dirs = tuple(self.directions)
        object.__setattr__(self, "directions", dirs)
        if not dirs:
            raise DataError("direction set is empty")
        seen = set()
        for d in dirs:
            key = _canon_key(d.v)
            if key in seen:
                raise DataError(f"duplicate direction {d.v}")
            seen.add(key)
        J = dirs[0].v.size
        if any(d.v.size != J for d in dirs):
            raise DataError("directions have inconsistent length")
        if J == 2:
            required = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)]
            s = 1.0 / np.sqrt(2.0)
            required += [(s, -s), (-s, s)]
            for req in required:
                if _canon_key(np.array(req)) not in seen:
                    raise DataError(
                        "J=2 direction sets must include the axis directions and +-(1,-1)/sqrt(2)"
                    )

    def __len__(self) -> int:
        return len(self.directions)

    def __iter__(self):
        return iter(self.directions)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([d.v for d in self.directions])


def default_directions(J: int, n_angular: int = 64, n_random: int = 32,
                       seed: int = 20230515) -> DirectionSet:
    """Default direction family.

    J=2: ``n_angular`` points on the circle plus the six canonical
    directions.  J>2: signed basis vectors, all normalized pairwise
    differences (the binding directions in the plain-logit case), and
    ``n_random`` seeded random unit vectors.
    """
    dirs: List[Direction] = []
    seen = set()

    def add(v, tag):
        v = np.asarray(v, dtype=float)
        v = v / np.linalg.norm(v)
        key = _canon_key(v)
        if key not in seen:
            seen.add(key)
            dirs.append(Direction(v, tag))

    if J == 2:
        s = 1.0 / np.sqrt(2.0)
        for v in ([1, 0], [-1, 0], [0, 1], [0, -1]):
            add(v, "signed-basis")
        add([s, -s], "pairwise-difference")
        add([-s, s], "pairwise-difference")
        for k in range(n_angular):
            phi = 2.0 * np.pi * k / n_angular
            add([np.cos(phi), np.sin(phi)], "angular")
    else:
        for j in range(J):
            e = np.zeros(J)
            e[j] = 1.0
            add(e, "signed-basis")
            add(-e, "signed-basis")
        for j in range(J):
            for k in range(J):
                if j != k:
                    v = np.zeros(J)
                    v[j], v[k] = 1.0, -1.0
                    add(v, "pairwise-difference")
        rng = np.random.default_rng(seed)
        made = 0
        while made < n_random:
            v = rng.standard_normal(J)
            norm = np.linalg.norm(v)
            if norm > 1e-8:
                before = len(dirs)
                add(v / norm, "custom")
                made += len(dirs) - before
    return DirectionSet(tuple(dirs))


# ---------------------------------------------------------------------------
# Residuals and support moments for a single market
# ---------------------------------------------------------------------------

def assemble_full_shares(market: MarketObservation, s0: float) -> np.ndarray:
    """Full share vector (s0, s_tilde (1-s0)) with the outside good first."""
    if not 0.0 < s0 < 1.0:
        raise DataError(f"s0={s0} outside (0,1)")
    return np.concatenate([[s0], market.inside_shares * (1.0 - s0)])


def residual(market: MarketObservation, s0: float, theta: ParamTheta,
             mixing: MixingSpec, tol: float = 1e-12) -> np.ndarray:
    """Demand shocks implied by assigning outside share ``s0`` to the market."""
    s_full = assemble_full_shares(market, s0)
    return demand_shocks(s_full, market.x, market.p, theta, mixing, tol=tol)


@dataclass(frozen=True)
class SupportMomentResult:
    """Supremum of one directional residual over the outside-share set."""

    value: float             # +inf when divergent
    argmax_s0: float
    iterations: int          # number of objective evaluations (grid + refinement)
    diverged: bool = False

    @property
    def is_finite(self) -> bool:
        return np.isfinite(self.value)


def _detect_divergence(values: np.ndarray, interval) -> Tuple[bool, int]:
    """Divergence rule: sup at a clipped endpoint with steep outward trend."""
    k = int(np.nanargmax(values))
    n = values.size
    if n < 4:
        return False, k
    if k == 0 and interval.lo_clipped:
        if (values[0] - values[3]) / 3.0 > DIVERGENCE_SLOPE:
            return True, k
    if k == n - 1 and interval.hi_clipped:
        if (values[-1] - values[-4]) / 3.0 > DIVERGENCE_SLOPE:
            return True, k
    return False, k


def support_moment(
    market: MarketObservation,
    v,
    theta: ParamTheta,
    s0set: OutsideShareSet,
    mixing: MixingSpec,
    n_s0: int = 51,
    refine_tol: Optional[float] = 1e-6,
    tol: float = 1e-12,
    max_iter: int = 5000,
) -> SupportMomentResult:
    """sup over s0 of v'(residual) for one market and direction.

    The objective is evaluated on an ``n_s0``-point grid over the clipped
    interval, warm-starting each inversion from its neighbor, then refined
    by golden section around the best point (skip by passing
    ``refine_tol=None``).  A supremum pinned to an eta-clipped endpoint with
    an outward-increasing trend is reported as +infinity.
    """
    vvec = v.v if isinstance(v, Direction) else np.asarray(v, dtype=float)
    interval = s0set.interval(market.s0_center)
    grid = interval.grid(n_s0)
    x = np.atleast_2d(market.x)
    quad = build_quadrature(mixing, theta.lam, d_x=x.shape[1])
    kernel = ShareKernel(x[None, :, :], market.p[None, :], quad)
    base = mean_utilities(theta, market.x, market.p, np.zeros_like(market.p))
    const = -float(vvec @ base)

    def objective(s0, delta0=None):
        s_in = market.inside_shares[None, :] * (1.0 - s0)
        delta = invert_shares_batch(s_in, kernel, tol=tol, max_iter=max_iter, delta0=delta0)
        return float(vvec @ delta[0]), delta

    values = np.empty(grid.size)
    delta = None
    deltas = []
    for i, s0 in enumerate(grid):
        values[i], delta = objective(s0, delta)
        deltas.append(delta)
    evals = grid.size

    if grid.size == 1:
        return SupportMomentResult(values[0] + const, float(grid[0]), evals)

    diverged, k = _detect_divergence(values, interval)
    if diverged:
        return SupportMomentResult(np.inf, float(grid[k]), evals, diverged=True)

    best_val, best_s0 = values[k], grid[k]
    if refine_tol is not None:
        lo = grid[max(k - 1, 0)]
        hi = grid[min(k + 1, grid.size - 1)]
        a, b = lo, hi
        d0 = deltas[min(k + 1, grid.size - 1)]
        x1 = b - GOLDEN * (b - a)
        x2 = a + GOLDEN * (b - a)
        f1, d0 = objective(x1, d0)
        f2, d0 = objective(x2, d0)
        evals += 2
        while b - a > refine_tol:
            if f1 >= f2:
                b, x2, f2 = x2, x1, f1
                x1 = b - GOLDEN * (b - a)
                f1, d0 = objective(x1, d0)
            else:
                a, x1, f1 = x1, x2, f2
                x2 = a + GOLDEN * (b - a)
                f2, d0 = objective(x2, d0)
            evals += 1
        for val, s in ((f1, x1), (f2, x2)):
            if val > best_val:
                best_val, best_s0 = val, s
    return SupportMomentResult(best_val + const, float(best_s0), evals)


def shock_set(
    market: MarketObservation,
    theta: ParamTheta,
    s0set: OutsideShareSet,
    mixing: MixingSpec,
    n_s0: int = 51,
    tol: float = 1e-12,
    max_iter: int = 5000,
) -> "ShockSetSample":
    """Demand-shock selections xi(s0) on an evenly spaced outside-share grid."""
    interval = s0set.interval(market.s0_center)
    grid = interval.grid(n_s0)
    x = np.atleast_2d(market.x)
    quad = build_quadrature(mixing, theta.lam, d_x=x.shape[1])
    kernel = ShareKernel(x[None, :, :], market.p[None, :], quad)
    base = mean_utilities(theta, market.x, market.p, np.zeros_like(market.p))
    s0_vals, xi_vals = [], []
    skipped = 0
    delta = None
    for s0 in grid:
        s_in = market.inside_shares[None, :] * (1.0 - s0)
        try:
            delta = invert_shares_batch(s_in, kernel, tol=tol, max_iter=max_iter, delta0=delta)
        except InversionError:
            skipped += 1
            warnings.warn(f"inversion failed at s0={s0:.6g}; point skipped")
            delta = None
            continue
        s0_vals.append(float(s0))
        xi_vals.append(delta[0] - base)
    return ShockSetSample(np.array(s0_vals), np.array(xi_vals), skipped)


@dataclass(frozen=True)
class ShockSetSample:
    """Grid sample of the shock set for one market and parameter."""

    s0_values: np.ndarray     # (K,)
    xi_values: np.ndarray     # (K, J)
    n_skipped: int = 0


# ---------------------------------------------------------------------------
# Batched support-value computation (one lambda, all markets, all directions)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetArrays:
    """Plain-array view of a dataset used by the batched engine."""

    stil: np.ndarray          # (M, J)
    x: np.ndarray             # (M, J, d_x)
    p: np.ndarray             # (M, J)
    z: np.ndarray             # (M, d_z)
    centers: Optional[np.ndarray]

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "DatasetArrays":
        return cls(dataset.shares(), dataset.characteristics(), dataset.prices(),
                   dataset.instruments(), dataset.s0_centers())


def clipped_intervals(s0set: OutsideShareSet, centers: Optional[np.ndarray],
                      n_markets: int):
    """Vectorized intervals: lo, hi (M,), clip flags (lo_clip, hi_clip) (M,)."""
    eta = s0set.eta
    if s0set.kind == "agnostic":
        lo = np.full(n_markets, eta)
        hi = np.full(n_markets, 1.0 - eta)
        return lo, hi, np.ones(n_markets, bool), np.ones(n_markets, bool)
    if s0set.center is not None:
        centers = np.full(n_markets, s0set.center)
    if centers is None:
        raise DataError(f"{s0set.kind} outside-share set needs per-market centers")
    if np.any((centers <= 0.0) | (centers >= 1.0)):
        raise DataError("outside-share centers must lie in (0,1)")
    if s0set.kind == "singleton":
        c = np.clip(centers, eta, 1.0 - eta)
        flags = np.zeros(n_markets, bool)
        return c, c.copy(), flags, flags.copy()
    lo = centers - s0set.epsilon
    hi = centers + s0set.epsilon
    lo_clip = lo < eta
    hi_clip = hi > 1.0 - eta
    return np.clip(lo, eta, None), np.clip(hi, None, 1.0 - eta), lo_clip, hi_clip


def support_value_matrix(
    arrays: DatasetArrays,
    V: np.ndarray,
    s0set: OutsideShareSet,
    mixing: MixingSpec,
    lam: np.ndarray,
    n_s0: int = 51,
    tol: float = 1e-10,
    max_iter: int = 200000,
) -> np.ndarray:
    """Per-market suprema of v' sigma^{-1} over the outside-share grid.

    Returns A (M, n_directions) with +inf where the divergence rule fires.
    The (alpha, beta) part of the support moment is linear and added by the
    caller.  Grid points whose inversion fails are skipped.
    """
    M, J = arrays.stil.shape
    lo, hi, lo_clip, hi_clip = clipped_intervals(s0set, arrays.centers, M)
    quad = build_quadrature(mixing, lam, d_x=arrays.x.shape[2])
    kernel = ShareKernel(arrays.x, arrays.p, quad)
    nv = V.shape[0]
    A = np.full((M, nv), -np.inf)
    argmax = np.zeros((M, nv), dtype=np.int32)
    edge_vals = {}
    K = n_s0 if np.any(hi > lo) else 1
    delta = None
    for k in range(K):
        s0k = lo if K == 1 else lo + (hi - lo) * (k / (K - 1))
        s_in = arrays.stil * (1.0 - s0k)[:, None]
        delta = invert_shares_batch(s_in, kernel, tol=tol, max_iter=max_iter,
                                    delta0=delta, on_failure="nan")
        vals = delta @ V.T
        failed = np.isnan(delta[:, 0])
        if failed.any():
            vals[failed] = -np.inf
            delta[failed] = np.log(s_in[failed]) - np.log(s0k[failed])[:, None]
        if k in (0, 3) or k in (K - 4, K - 1):
            edge_vals[k] = vals
        better = vals > A
        argmax[better] = k
        np.maximum(A, vals, out=A)
    if K >= 4:
        lo_slope = (edge_vals[0] - edge_vals[3]) / 3.0
        diverge_lo = lo_clip[:, None] & (argmax == 0) & (lo_slope > DIVERGENCE_SLOPE)
        hi_slope = (edge_vals[K - 1] - edge_vals[K - 4]) / 3.0
        diverge_hi = hi_clip[:, None] & (argmax == K - 1) & (hi_slope > DIVERGENCE_SLOPE)
        A[diverge_lo | diverge_hi] = np.inf
    return A


# ---------------------------------------------------------------------------
# Conditioning cells and cell-level statistics
# ---------------------------------------------------------------------------

def instrument_cells(z: np.ndarray, grouping="discrete") -> Tuple[List[np.ndarray], List[object]]:
    """Partition markets by instrument value.

    ``grouping`` is "discrete" (exact unique z rows) or an explicit length-M
    label array.  Labels with no markets are dropped with a warning.
    """
    M = z.shape[0]
    if isinstance(grouping, str):
        if grouping != "discrete":
            raise DataError(f"unknown grouping {grouping!r}")
        labels, inverse = np.unique(z, axis=0, return_inverse=True)
        cells = [np.where(inverse == i)[0] for i in range(labels.shape[0])]
        names = [tuple(row) for row in labels]
        return cells, names
    labels = np.asarray(grouping)
    if labels.shape[0] != M:
        raise DataError("grouping labels must have one entry per market")
    uniq = list(dict.fromkeys(labels.tolist()))
    cells, names = [], []
    for u in uniq:
        ix = np.where(labels == u)[0]
        if ix.size == 0:
            warnings.warn(f"empty conditioning cell {u!r} dropped")
            continue
        cells.append(ix)
        names.append(u)
    return cells, names


@dataclass
class MomentTable:
    """Per-(direction, cell) sample means of the support moment."""

    cell_labels: List[object]
    cell_counts: np.ndarray          # (C,)
    means: np.ndarray                # (C, nv), +inf allowed
    directions: DirectionSet


@dataclass
class LambdaStats:
    """Cell-level sufficient statistics of the support values at one lambda.

    With m_i = A_i + alpha q_i - beta . r_i, cell means and variances for
    any (alpha, beta) follow from these cross moments.  Markets whose A is
    +inf are excluded from the sums and counted in ``n_inf``.
    """

    n_cell: np.ndarray        # (C,)
    n_inf: np.ndarray         # (C, nv)
    s_A: np.ndarray           # (C, nv)
    s_A2: np.ndarray          # (C, nv)
    s_Aq: np.ndarray          # (C, nv)
    s_Ar: np.ndarray          # (C, nv, d_x)
    s_q: np.ndarray           # (C, nv)
    s_q2: np.ndarray          # (C, nv)
    s_r: np.ndarray           # (C, nv, d_x)
    s_qr: np.ndarray          # (C, nv, d_x)
    s_rr: np.ndarray          # (C, nv, d_x, d_x)

    def moment_mean_var(self, alpha: float, beta: np.ndarray):
        """Cell means/variances of m for one (alpha, beta); +inf where flagged."""
        n = self.n_cell[:, None] - self.n_inf
        valid = n > 0
        safe_n = np.where(valid, n, 1)
        lin_q = self.s_A + alpha * self.s_q
        lin_r = self.s_Ar + alpha * self.s_qr
        s_m = lin_q - self.s_r @ beta
        mean = s_m / safe_n
        s_m2 = (self.s_A2 + alpha * alpha * self.s_q2 + 2.0 * alpha * self.s_Aq
                - 2.0 * (lin_r @ beta)
                + np.einsum("cvde,d,e->cv", self.s_rr, beta, beta))
        var = np.maximum(s_m2 / safe_n - mean ** 2, 0.0)
        mean = np.where(self.n_inf > 0, np.inf, mean)
        return mean, var, np.where(valid, n, 0)


class SupportEngine:
    """Factorized support-moment machinery over a dataset.

    Heavy work (share inversions on the s0 grid) happens once per lambda in
    :meth:`lambda_stats`; membership for any (alpha, beta) is then closed
    form.  Instances are immutable after construction and safe to fork into
    worker processes.
    """

    def __init__(
        self,
        dataset: Dataset,
        directions: DirectionSet,
        s0set: OutsideShareSet,
        mixing: MixingSpec,
        n_s0: int = 51,
        grouping="discrete",
        tol: float = 1e-10,
        max_iter: int = 200000,
    ):
        self.arrays = DatasetArrays.from_dataset(dataset)
        self.directions = directions
        self.s0set = s0set
        self.mixing = mixing
        self.n_s0 = n_s0
        self.tol = tol
        self.max_iter = max_iter
        self.V = directions.matrix
        self.cells, self.cell_labels = instrument_cells(self.arrays.z, grouping)
        self.q = self.arrays.p @ self.V.T                          # (M, nv)
        self.r = np.einsum("mjd,vj->mvd", self.arrays.x, self.V)   # (M, nv, d_x)
        self._cache: Dict[tuple, LambdaStats] = {}

    @property
    def n_markets(self) -> int:
        return self.arrays.stil.shape[0]

    def support_values(self, lam) -> np.ndarray:
        return support_value_matrix(self.arrays, self.V, self.s0set, self.mixing,
                                    np.atleast_1d(lam), n_s0=self.n_s0,
                                    tol=self.tol, max_iter=self.max_iter)

    def lambda_stats(self, lam) -> LambdaStats:
        key = tuple(np.atleast_1d(np.asarray(lam, dtype=float)))
        if key in self._cache:
            return self._cache[key]
        A = self.support_values(lam)
        C, nv, d_x = len(self.cells), self.V.shape[0], self.r.shape[2]
        stats = LambdaStats(
            n_cell=np.array([ix.size for ix in self.cells], dtype=float),
            n_inf=np.zeros((C, nv)),
            s_A=np.zeros((C, nv)), s_A2=np.zeros((C, nv)), s_Aq=np.zeros((C, nv)),
            s_Ar=np.zeros((C, nv, d_x)),
            s_q=np.zeros((C, nv)), s_q2=np.zeros((C, nv)),
            s_r=np.zeros((C, nv, d_x)), s_qr=np.zeros((C, nv, d_x)),
            s_rr=np.zeros((C, nv, d_x, d_x)),
        )
        inf_mask = np.isinf(A)
        Af = np.where(inf_mask, 0.0, A)
        fin = ~inf_mask
        for c, ix in enumerate(self.cells):
            a, f = Af[ix], fin[ix]
            q, r = self.q[ix], self.r[ix]
            qf, rf = q * f, r * f[:, :, None]
            stats.n_inf[c] = inf_mask[ix].sum(axis=0)
            stats.s_A[c] = a.sum(axis=0)
            stats.s_A2[c] = (a * a).sum(axis=0)
            stats.s_Aq[c] = (a * q).sum(axis=0)
            stats.s_Ar[c] = np.einsum("mv,mvd->vd", a, r)
            stats.s_q[c] = qf.sum(axis=0)
            stats.s_q2[c] = (qf * q).sum(axis=0)
            stats.s_r[c] = rf.sum(axis=0)
            stats.s_qr[c] = np.einsum("mv,mvd->vd", qf, r)
            stats.s_rr[c] = np.einsum("mvd,mve->vde", rf, r)
        self._cache[key] = stats
        return stats

    def min_moment(self, theta: ParamTheta, slack="auto", slack_multiplier: float = 2.0):
        """Worst finite (cell, direction) mean and the membership margin.

        Returns (is_member, min_mean, worst) where ``worst`` is
        (direction index, cell label, mean).  ``slack="auto"`` allows each
        cell mean to dip ``slack_multiplier`` standard errors below zero.
        """
        stats = self.lambda_stats(theta.lam)
        mean, var, n = stats.moment_mean_var(theta.alpha, theta.beta)
        finite = np.isfinite(mean) & (n > 0)
        if not finite.any():
            return True, np.inf, None
        if slack == "auto":
            margin = mean + slack_multiplier * np.sqrt(var / np.maximum(n, 1))
        else:
            margin = mean + float(slack)
        margin = np.where(finite, margin, np.inf)
        mmin = np.where(finite, mean, np.inf)
        flat = int(np.argmin(margin))
        c, v = np.unravel_index(flat, mean.shape)
        worst = (int(v), self.cell_labels[c], float(mean[c, v]))
        return bool(margin[c, v] >= 0.0), float(mmin.min()), worst

    def membership_slab(self, lam, alphas: np.ndarray, betas: np.ndarray,
                        slack="auto", slack_multiplier: float = 2.0):
        """Vectorized membership over an (alpha, beta-combination) grid.

        ``betas`` has shape (n_beta_points, d_x).  Returns (member flags
        (n_alpha, n_beta_points), min finite mean with the same shape).
        """
        stats = self.lambda_stats(lam)
        na, nb = alphas.size, betas.shape[0]
        member = np.ones((na, nb), dtype=bool)
        min_mean = np.full((na, nb), np.inf)
        n = stats.n_cell[:, None] - stats.n_inf
        valid = n > 0
        safe_n = np.where(valid, n, 1.0)
        rb = np.einsum("cvd,bd->bcv", stats.s_r, betas)
        rAb = np.einsum("cvd,bd->bcv", stats.s_Ar, betas)
        rqb = np.einsum("cvd,bd->bcv", stats.s_qr, betas)
        rrb = np.einsum("cvde,bd,be->bcv", stats.s_rr, betas, betas)
        for ia, alpha in enumerate(alphas):
            s_m = (stats.s_A + alpha * stats.s_q)[None] - rb           # (nb, C, nv)
            mean = s_m / safe_n[None]
            s_m2 = ((stats.s_A2 + alpha ** 2 * stats.s_q2 + 2 * alpha * stats.s_Aq)[None]
                    - 2.0 * (rAb + alpha * rqb) + rrb)
            var = np.maximum(s_m2 / safe_n[None] - mean ** 2, 0.0)
            if slack == "auto":
                margin = mean + slack_multiplier * np.sqrt(var / safe_n[None])
            else:
                margin = mean + float(slack)
            mask = (stats.n_inf > 0.0) | ~valid
            margin = np.where(mask[None], np.inf, margin)
            means = np.where(mask[None], np.inf, mean)
            member[ia] = (margin >= 0.0).all(axis=(1, 2))
            min_mean[ia] = means.min(axis=(1, 2))
        return member, min_mean


def conditional_moment_table(
    dataset: Dataset,
    directions: DirectionSet,
    theta: ParamTheta,
    s0set: OutsideShareSet,
    mixing: MixingSpec,
    grouping="discrete",
    n_s0: int = 51,
    tol: float = 1e-10,
) -> MomentTable:
    """Per-(direction, z-cell) sample means of the support moment."""
    engine = SupportEngine(dataset, directions, s0set, mixing,
                           n_s0=n_s0, grouping=grouping, tol=tol)
    stats = engine.lambda_stats(theta.lam)
    mean, _, _ = stats.moment_mean_var(theta.alpha, theta.beta)
    return MomentTable(engine.cell_labels, stats.n_cell.astype(int),
                       mean.astype(float), directions)


@dataclass(frozen=True)
class MembershipResult:
    is_member: bool
    min_moment: float
    worst: Optional[tuple]    # (direction index, cell label, mean)


def membership(
    theta: ParamTheta,
    dataset: Dataset,
    directions: DirectionSet,
    s0set: OutsideShareSet,
    mixing: MixingSpec,
    grouping="discrete",
    slack="auto",
    slack_multiplier: float = 2.0,
    n_s0: int = 51,
) -> MembershipResult:
    """Identified-set membership check for a single parameter."""
    if not isinstance(slack, str) and slack < 0:
        raise DataError("slack must be nonnegative")
    engine = SupportEngine(dataset, directions, s0set, mixing,
                           n_s0=n_s0, grouping=grouping)
    ok, mmin, worst = engine.min_moment(theta, slack=slack, slack_multiplier=slack_multiplier)
    return MembershipResult(ok, mmin, worst)


# ---------------------------------------------------------------------------
# Grid sweeps
# ---------------------------------------------------------------------------

_WORKER_ENGINE: Optional[SupportEngine] = None
_WORKER_ARGS: Optional[dict] = None


def _init_worker(dataset, directions, s0set, mixing, n_s0, grouping, tol, args):
    global _WORKER_ENGINE, _WORKER_ARGS
    _WORKER_ENGINE = SupportEngine(dataset, directions, s0set, mixing,
                                   n_s0=n_s0, grouping=grouping, tol=tol)
    _WORKER_ARGS = args


def _lambda_task(lam):
    a = _WORKER_ARGS
    return _WORKER_ENGINE.membership_slab(
        lam, a["alphas"], a["betas"], slack=a["slack"],
        slack_multiplier=a["slack_multiplier"])


def compute_identified_set(
    grid: ThetaGrid,
    dataset: Dataset,
    directions: DirectionSet,
    s0set: OutsideShareSet,
    mixing: MixingSpec,
    grouping="discrete",
    slack="auto",
    slack_multiplier: float = 2.0,
    n_s0: int = 51,
    tol: float = 1e-10,
    n_jobs: int = 1,
) -> GridResult:
    """Exhaustive grid search for the identified set.

    Work is organized per lambda grid point (the only coordinate the share
    inversion depends on); lambda points are independent and can run in
    parallel processes.  Results are merged in grid order, so parallel and
    serial runs agree exactly.
    """
    beta_axes = [ax.values for ax in grid.beta]
    lam_axes = [ax.values for ax in grid.lam]
    alphas = grid.alpha.values
    beta_mesh = np.meshgrid(*beta_axes, indexing="ij") if beta_axes else [np.zeros(1)]
    betas = np.column_stack([m.ravel() for m in beta_mesh])
    lam_mesh = np.meshgrid(*lam_axes, indexing="ij") if lam_axes else [np.zeros(1)]
    lams = np.column_stack([m.ravel() for m in lam_mesh])

    args = dict(alphas=alphas, betas=betas, slack=slack, slack_multiplier=slack_multiplier)
    slabs: List[tuple] = []
    if n_jobs > 1 and lams.shape[0] > 1:
        with ProcessPoolExecutor(
            max_workers=n_jobs,
            initializer=_init_worker,
            initargs=(dataset, directions, s0set, mixing, n_s0, grouping, tol, args),
        ) as pool:
            slabs = list(pool.map(_lambda_task, list(lams)))
    else:
        engine = SupportEngine(dataset, directions, s0set, mixing,
                               n_s0=n_s0, grouping=grouping, tol=tol)
        for lam in lams:
            slabs.append(engine.membership_slab(
                lam, alphas, betas, slack=slack, slack_multiplier=slack_multiplier))

    n_lam = lams.shape[0]
    member = np.empty((alphas.size, betas.shape[0], n_lam), dtype=bool)
    min_mean = np.empty((alphas.size, betas.shape[0], n_lam))
    for il, (mem, mm) in enumerate(slabs):
        member[:, :, il] = mem
        min_mean[:, :, il] = mm
    # (alpha, beta..., lambda...) row-major == points() order
    member = member.reshape(grid.shape)
    min_mean = min_mean.reshape(grid.shape)
    return GridResult(grid=grid, member=member.ravel(),
                      stats={"min_moment": min_mean.ravel()},
                      meta={"slack": slack if isinstance(slack, str) else float(slack),
                            "slack_multiplier": slack_multiplier, "n_s0": n_s0})


# ---------------------------------------------------------------------------
# Equilibrium-object bounds
# ---------------------------------------------------------------------------

def _parse_object(name: str, J: int) -> tuple:
    raw = name.replace("_", "")
    kind = raw[0]
    idx = raw[1:]
    if kind in ("e", "d") and len(idx) == 2:
        j, k = int(idx[0]), int(idx[1])
    elif kind in ("m", "s") and len(idx) == 1:
        j, k = int(idx[0]), 0
    else:
        raise DataError(f"cannot parse equilibrium object {name!r}")
    if not (1 <= j <= J and 0 <= k <= J):
        raise DataError(f"object {name!r}: product index out of range")
    return kind, j, k


def default_objects(J: int) -> List[str]:
    names = [f"e_{j}{j}" for j in range(1, J + 1)]
    names += [f"e_{j}{k}" for j in range(1, J + 1) for k in range(1, J + 1) if j != k]
    names += [f"m_{j}" for j in range(1, J + 1)]
    names += [f"d_{j}{k}" for j in range(1, J + 1) for k in range(1, J + 1) if j != k]
    names += [f"s_{j}" for j in range(1, J + 1)]
    return names


def equilibrium_bounds(
    market: MarketObservation,
    theta_members: Sequence[ParamTheta],
    s0set: OutsideShareSet,
    mixing: MixingSpec,
    n_s0: int = 51,
    objects: Optional[Sequence[str]] = None,
    tol: float = 1e-12,
    max_iter: int = 200000,
) -> Dict[str, Tuple[float, float]]:
    """Min/max of equilibrium objects over (member, s0-grid) configurations.

    For each member theta and outside share s0, the implied demand shock is
    the inversion residual, so the node probabilities depend on theta only
    through lambda; alpha enters the integrands linearly.  The sweep
    therefore groups members by lambda and reuses one inversion per
    (lambda, s0).
    """
    members = list(theta_members)
    if not members:
        raise DataError("theta_members must be nonempty")
    J = market.n_products
    names = list(objects) if objects is not None else default_objects(J)
    parsed = [(_parse_object(nm, J), nm) for nm in names]

    interval = s0set.interval(market.s0_center)
    grid = interval.grid(n_s0)
    K = grid.size
    x = np.atleast_2d(market.x)
    p = market.p

    lo = {nm: np.inf for nm in names}
    hi = {nm: -np.inf for nm in names}
    skipped = {nm: 0 for nm in names}

    groups: Dict[tuple, List[ParamTheta]] = {}
    for th in members:
        groups.setdefault(tuple(th.lam), []).append(th)

    for lam_key, group in groups.items():
        lam = np.array(lam_key)
        quad = build_quadrature(mixing, lam, d_x=x.shape[1])
        kernel = ShareKernel(x[None, :, :], p[None, :], quad)
        s_in = market.inside_shares[None, :] * (1.0 - grid[:, None])
        try:
            delta = invert_shares_batch(
                s_in, kernel, tol=tol, max_iter=max_iter, on_failure="nan")
        except InversionError:
            warnings.warn(f"inversion failed for lambda={lam}; group skipped")
            continue
        ok = ~np.isnan(delta[:, 0])
        if not ok.all():
            warnings.warn(f"{(~ok).sum()} s0 grid points skipped for lambda={lam}")
        delta = delta[ok]
        probs, _ = kernel.node_probs(delta)          # (K', Q, J)
        w = quad.weights
        nu = quad.nu
        sj = probs.transpose(0, 2, 1) @ w                        # (K', J)
        own0 = (probs * (1 - probs)).transpose(0, 2, 1) @ w      # sum w P(1-P)
        own1 = (probs * (1 - probs)).transpose(0, 2, 1) @ (w * nu)
        cross0 = np.einsum("kqj,kqb,q->kjb", probs, probs, w)
        cross1 = np.einsum("kqj,kqb,q->kjb", probs, probs, w * nu)

        for th in group:
            a = th.alpha
            own = a * own0 + own1                                 # (K', J)
            cross = a * cross0 + cross1                           # (K', J, J)
            for (kind, j, k), nm in parsed:
                jj, kk = j - 1, k - 1
                if kind == "s":
                    vals = sj[:, jj]
                elif kind == "e" and j == k:
                    den = sj[:, jj]
                    good = den > 1e-300
                    vals = np.where(good, -p[jj] * own[:, jj] / np.where(good, den, 1.0), np.nan)
                elif kind == "e":
                    den = sj[:, jj]
                    good = den > 1e-300
                    vals = np.where(good, p[kk] * cross[:, jj, kk] / np.where(good, den, 1.0), np.nan)
                elif kind == "m":
                    # M_j = -p_j / e_jj = s_j / sum w (alpha+nu) P_j (1-P_j)
                    den = own[:, jj]
                    good = den != 0.0
                    vals = np.where(good, sj[:, jj] / np.where(good, den, 1.0), np.nan)
                else:  # diversion
                    den = own[:, kk]
                    good = den != 0.0
                    vals = np.where(good, cross[:, jj, kk] / np.where(good, den, 1.0), np.nan)
                bad = np.isnan(vals)
                if bad.any():
                    skipped[nm] += int(bad.sum())
                    vals = vals[~bad]
                if vals.size:
                    lo[nm] = min(lo[nm], float(vals.min()))
                    hi[nm] = max(hi[nm], float(vals.max()))

    out = {}
    for nm in names:
        if not np.isfinite(lo[nm]):
            warnings.warn(f"object {nm}: every configuration was singular")
            out[nm] = (np.nan, np.nan)
        else:
            out[nm] = (lo[nm], hi[nm])
        if skipped[nm]:
            warnings.warn(f"object {nm}: {skipped[nm]} singular configurations skipped")
    return out

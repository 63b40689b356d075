"""Finite-sample confidence sets from many unconditional moment inequalities.

Conditional inequalities E[m(W,v,theta)|z] >= 0 are converted to
unconditional ones with nonnegative instrument functions g(z) in {0,1}
(hypercube indicators after a componentwise normal-CDF transform, or
explicit low-dimensional combinations).  Inference then uses the max
statistic over standardized moments with self-normalized or multiplier
bootstrap critical values.

Sign convention: the test statistic is T_n = max_j sqrt(n) (-mu_j) / sigma_j,
so large values signal violated inequalities and the confidence set keeps
theta with T_n <= c.  Set ``negate_moments=False`` to reproduce the raw
max of sqrt(n) mu_j / sigma_j instead (which would treat strictly satisfied
inequalities as rejections; offered for comparison only).
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import ConfigError, DataError, InfeasibleSampleError
from .identify import (
    DatasetArrays,
    DirectionSet,
    SupportEngine,
    default_objects,
    equilibrium_bounds,
)
from .model import Dataset, MarketObservation, MixingSpec, OutsideShareSet, ParamTheta, ThetaGrid
from .results import GridResult

MIN_SIGMA = 1e-10
DEFAULT_CAP = 1e6


# ---------------------------------------------------------------------------
# Instrument functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CubeCell:
    """Indicator of a left-open/right-closed box in transformed instrument space."""

    dims: Tuple[int, ...]
    lows: Tuple[float, ...]
    highs: Tuple[float, ...]
    label: str

    def evaluate(self, z_tilde: np.ndarray) -> np.ndarray:
        out = np.ones(z_tilde.shape[0], dtype=bool)
        for d, lo, hi in zip(self.dims, self.lows, self.highs):
            col = z_tilde[:, d]
            out &= (col > lo) & (col <= hi)
        return out


@dataclass(frozen=True)
class ConstantCell:
    """The constant instrument function g(z) = 1."""

    label: str = "const"

    def evaluate(self, z_tilde: np.ndarray) -> np.ndarray:
        return np.ones(z_tilde.shape[0], dtype=bool)


@dataclass(frozen=True)
class HypercubeSpec:
    """Regular hypercubes of side 1/(2r) for r = r0..r_max over a subset of instruments."""

    r0: int = 1
    r_max: int = 2
    instruments: Optional[Tuple[int, ...]] = None
    standardize: bool = True
    min_count: int = 5

    def __post_init__(self):
        if self.r_max < self.r0 or self.r0 < 1:
            raise ConfigError("hypercube spec needs 1 <= r0 <= r_max")


@dataclass(frozen=True)
class Combo:
    """One low-dimensional cube family: dims with per-dimension cell counts.

    ``quadrants`` optionally keeps only the listed cells (1-based index
    tuples); by default every product cell is used.
    """

    dims: Tuple[int, ...]
    cells: Tuple[int, ...]
    quadrants: Optional[Tuple[Tuple[int, ...], ...]] = None

    def __post_init__(self):
        if len(self.dims) != len(self.cells):
            raise ConfigError("combo dims and cell counts must align")
        if any(c < 1 for c in self.cells):
            raise ConfigError("cell counts must be positive")


@dataclass(frozen=True)
class PairwiseComboSpec:
    """Explicit list of one- and two-dimensional cube combinations."""

    combos: Tuple[Combo, ...]
    include_constant: bool = False
    standardize: bool = True
    min_count: int = 5


def nevo_style_combos(d_z: int = 10) -> PairwiseComboSpec:
    """One- and two-dimensional combination family of size 1 + 2 d_z + 2 (d_z - 1).

    Documented cell counts: the constant function, the two half-cells of
    every single instrument, and for each adjacent instrument pair the two
    concordant (both-low, both-high) quadrant cells.  For d_z = 10 this is
    an instrument vector of dimension 39.
    """
    combos = [Combo((d,), (2,)) for d in range(d_z)]
    combos += [Combo((d, d + 1), (2, 2), quadrants=((1, 1), (2, 2)))
               for d in range(d_z - 1)]
    return PairwiseComboSpec(tuple(combos), include_constant=True)


@dataclass
class InstrumentFunctionSet:
    """Realized, deterministically ordered instrument functions.

    ``low_mass`` flags functions whose empirical mass fell below the spec's
    ``min_count``; they stay in the family but are excluded from
    ``active_indices``.
    """

    functions: List[object]
    kind: str
    standardize: bool
    z_mean: np.ndarray
    z_sd: np.ndarray
    low_mass: np.ndarray

    @property
    def n_functions(self) -> int:
        return len(self.functions)

    @property
    def active_indices(self) -> np.ndarray:
        return np.where(~self.low_mass)[0]

    @property
    def n_active(self) -> int:
        return int((~self.low_mass).sum())

    def transform(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if self.standardize:
            z = (z - self.z_mean) / self.z_sd
        return ndtr(z)

    def matrix(self, z: np.ndarray, active_only: bool = True) -> np.ndarray:
        """(M, n) 0/1 matrix of instrument-function values."""
        zt = self.transform(z)
        cols = [f.evaluate(zt) for f in self.functions]
        G = np.column_stack(cols).astype(float)
        if active_only:
            G = G[:, self.active_indices]
        return G


def hypercube_count(d_z: int, r0: int, r_max: int) -> int:
    """Number of cube cells: sum over r of (2r)^d_z."""
    return int(sum((2 * r) ** d_z for r in range(r0, r_max + 1)))


def build_instruments(dataset: Dataset, spec) -> InstrumentFunctionSet:
    """Realize an instrument-function family on a dataset.

    Instruments are standardized by sample mean/sd (unless disabled) and
    mapped through the standard normal CDF, so cube cells partition
    (0,1]^d.  Cells with fewer than ``min_count`` active observations are
    flagged.
    """
    z = dataset.instruments()
    M, d_z = z.shape
    if isinstance(spec, HypercubeSpec):
        dims = spec.instruments if spec.instruments is not None else tuple(range(d_z))
        if any(d >= d_z for d in dims):
            raise ConfigError("instrument subset index out of range")
        functions: List[object] = []
        for r in range(spec.r0, spec.r_max + 1):
            side = 1.0 / (2 * r)
            for a in itertools.product(range(1, 2 * r + 1), repeat=len(dims)):
                lows = tuple((ai - 1) * side for ai in a)
                highs = tuple(ai * side for ai in a)
                functions.append(CubeCell(tuple(dims), lows, highs,
                                          label=f"cube[r={r},a={a}]"))
        kind = "hypercube"
        standardize, min_count = spec.standardize, spec.min_count
    elif isinstance(spec, PairwiseComboSpec):
        functions = []
        if spec.include_constant:
            functions.append(ConstantCell())
        for combo in spec.combos:
            if any(d >= d_z for d in combo.dims):
                raise ConfigError("combo instrument index out of range")
            all_cells = itertools.product(*(range(1, c + 1) for c in combo.cells))
            keep = set(combo.quadrants) if combo.quadrants is not None else None
            for a in all_cells:
                if keep is not None and a not in keep:
                    continue
                lows = tuple((ai - 1) / c for ai, c in zip(a, combo.cells))
                highs = tuple(ai / c for ai, c in zip(a, combo.cells))
                functions.append(CubeCell(combo.dims, lows, highs,
                                          label=f"combo[dims={combo.dims},a={a}]"))
        kind = "pairwise-combos"
        standardize, min_count = spec.standardize, spec.min_count
    else:
        raise ConfigError(f"unknown instrument spec {type(spec).__name__}")

    if not functions:
        raise ConfigError("instrument spec produced no functions")
    mean = z.mean(axis=0)
    sd = z.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    out = InstrumentFunctionSet(functions, kind, standardize, mean, sd,
                                low_mass=np.zeros(len(functions), dtype=bool))
    G = out.matrix(z, active_only=False)
    out.low_mass = G.sum(axis=0) < min_count
    if out.n_active == 0:
        raise ConfigError("every instrument function fell below min_count")
    return out


# ---------------------------------------------------------------------------
# Moment system and statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MomentSystem:
    """Ordered (direction, instrument-function) pairs."""

    directions: DirectionSet
    instruments: InstrumentFunctionSet

    @property
    def p_n(self) -> int:
        return len(self.directions) * self.instruments.n_active

    def pair_labels(self) -> List[str]:
        g_ix = self.instruments.active_indices
        labels = []
        for iv in range(len(self.directions)):
            for ig in g_ix:
                labels.append(f"v{iv}:{self.instruments.functions[ig].label}")
        return labels


@dataclass
class MomentStats:
    """Sample means/sds of m_ij g_ij, with drop bookkeeping."""

    mu: np.ndarray
    sigma: np.ndarray
    dropped: np.ndarray        # bool: sigma too small or (drop policy) infinite m
    n: int
    n_capped: int = 0

    @property
    def kept(self) -> np.ndarray:
        return ~self.dropped


def _moment_matrix(engine: SupportEngine, theta: ParamTheta, G: np.ndarray,
                   cap: float, infinite_policy: str):
    """Per-market m(W_i, v, theta) matrix (M, nv) and pair drop flags (nv, n_g)."""
    A = engine.support_values(theta.lam)
    m = A + theta.alpha * engine.q - engine.r @ theta.beta
    inf_mask = np.isinf(A)
    n_capped = int(inf_mask.sum())
    pair_drop = np.zeros((m.shape[1], G.shape[1]), dtype=bool)
    if n_capped:
        if infinite_policy == "cap":
            m = np.where(inf_mask, cap, m)
        elif infinite_policy == "drop":
            # drop any (v, g) pair with an infinite contribution where g = 1
            pair_drop = (inf_mask.astype(float).T @ G) > 0
            m = np.where(inf_mask, 0.0, m)
        else:
            raise ConfigError(f"unknown infinite-moment policy {infinite_policy!r}")
    return m, pair_drop, n_capped


def moment_stats(
    dataset: Dataset,
    theta: ParamTheta,
    system: MomentSystem,
    s0set: OutsideShareSet,
    mixing: MixingSpec,
    n_s0: int = 51,
    cap: float = DEFAULT_CAP,
    infinite_policy: str = "cap",
    engine: Optional[SupportEngine] = None,
) -> MomentStats:
    """mu_j and sigma_j (1/n normalization) for every (direction, g) pair.

    Support moments of +infinity are capped at ``cap`` before averaging
    (default), or the affected (v, g) pairs are dropped under
    ``infinite_policy="drop"``.  Pairs with sigma below 1e-10 are dropped
    with a warning.
    """
    if engine is None:
        engine = SupportEngine(dataset, system.directions, s0set, mixing, n_s0=n_s0)
    G = system.instruments.matrix(engine.arrays.z)
    n = G.shape[0]
    m, pair_drop, n_capped = _moment_matrix(engine, theta, G, cap, infinite_policy)
    mu = (m.T @ G) / n                        # (nv, n_g)
    second = ((m * m).T @ G) / n              # g is 0/1 so g^2 = g
    var = np.maximum(second - mu ** 2, 0.0)
    sigma = np.sqrt(var)
    dropped = pair_drop | (sigma < MIN_SIGMA)
    if dropped.any() and not pair_drop.any():
        warnings.warn(f"{int(dropped.sum())} moments dropped (near-zero variance)")
    return MomentStats(mu.ravel(), sigma.ravel(), dropped.ravel(), n, n_capped)


def test_statistic(mu: np.ndarray, sigma: np.ndarray, n: int,
                   dropped: Optional[np.ndarray] = None,
                   negate_moments: bool = True) -> float:
    """Max standardized moment violation over retained moments."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    keep = np.ones(mu.shape, dtype=bool) if dropped is None else ~np.asarray(dropped, bool)
    if not keep.any():
        return -np.inf
    signed = -mu if negate_moments else mu
    return float(np.max(np.sqrt(n) * signed[keep] / sigma[keep]))


def critical_value_sn(pi: float, p_n: int, n: int) -> float:
    """Self-normalized critical value Phi^{-1}(1-pi/p_n) / sqrt(1 - q^2/n)."""
    if not 0.0 < pi < 1.0:
        raise ConfigError("pi must lie in (0,1)")
    if p_n < 1 or n < 1:
        raise ConfigError("p_n and n must be positive")
    q = float(ndtri(1.0 - pi / p_n))
    if q * q >= n:
        raise InfeasibleSampleError(
            f"normal quantile {q:.4f} squared exceeds the sample size {n}")
    return q / math.sqrt(1.0 - q * q / n)


def multiplier_bootstrap_quantile(
    mg: np.ndarray,
    pi: float,
    B: int,
    seed: int,
    multiplier: str = "gaussian",
    sigma: Optional[np.ndarray] = None,
) -> float:
    """(1-pi) quantile of the multiplier-bootstrap max statistic.

    ``mg`` is the (n, p) matrix of m_ij g_ij values.  Replicate b draws
    i.i.d. multipliers from a stream derived from (seed, b), perturbs the
    centered columns, and takes the max standardized mean; the critical
    value is the ceil((1-pi) B)-th order statistic.
    """
    if B < 100:
        raise ConfigError("bootstrap needs B >= 100")
    if not 0.0 < pi < 1.0:
        raise ConfigError("pi must lie in (0,1)")
    if multiplier not in ("gaussian", "rademacher"):
        raise ConfigError(f"unknown multiplier law {multiplier!r}")
    mg = np.asarray(mg, dtype=float)
    n, p = mg.shape
    if p == 0:
        raise ConfigError("no moments to bootstrap")
    centered = mg - mg.mean(axis=0)
    if sigma is None:
        sigma = np.sqrt(np.maximum((centered ** 2).mean(axis=0), MIN_SIGMA ** 2))
    children = np.random.SeedSequence(seed).spawn(B)
    W = np.empty(B)
    chunk = max(1, min(B, int(2e7 // max(n, 1))))
    for start in range(0, B, chunk):
        stop = min(start + chunk, B)
        E = np.empty((stop - start, n))
        for b in range(start, stop):
            rng = np.random.default_rng(children[b])
            if multiplier == "gaussian":
                E[b - start] = rng.standard_normal(n)
            else:
                E[b - start] = rng.integers(0, 2, size=n) * 2.0 - 1.0
        stats = (E @ centered) / n                       # (chunk, p)
        W[start:stop] = np.max(np.sqrt(n) * stats / sigma, axis=1)
    order = np.sort(W)
    k = int(np.ceil((1.0 - pi) * B))
    return float(order[min(max(k, 1), B) - 1])


def critical_value_bootstrap(
    dataset: Dataset,
    theta: ParamTheta,
    system: MomentSystem,
    s0set: OutsideShareSet,
    mixing: MixingSpec,
    pi: float,
    B: int = 500,
    seed: int = 0,
    multiplier: str = "gaussian",
    n_s0: int = 51,
    cap: float = DEFAULT_CAP,
    infinite_policy: str = "cap",
    engine: Optional[SupportEngine] = None,
) -> float:
    """Multiplier-bootstrap critical value at one parameter."""
    if engine is None:
        engine = SupportEngine(dataset, system.directions, s0set, mixing, n_s0=n_s0)
    G = system.instruments.matrix(engine.arrays.z)
    m, pair_drop, _ = _moment_matrix(engine, theta, G, cap, infinite_policy)
    n = G.shape[0]
    mg = m[:, :, None] * G[:, None, :]
    mg = mg.reshape(n, -1)
    stats = moment_stats(dataset, theta, system, s0set, mixing, n_s0=n_s0,
                         cap=cap, infinite_policy=infinite_policy, engine=engine)
    kept = stats.kept
    return multiplier_bootstrap_quantile(mg[:, kept], pi, B, seed,
                                         multiplier=multiplier,
                                         sigma=stats.sigma[kept])


@dataclass(frozen=True)
class TestOutcome:
    """One parameter's test statistic, critical value, and verdict."""

    t_stat: float
    critical_value: float
    method: str
    mu: np.ndarray
    sigma: np.ndarray
    reject: bool


def evaluate_theta(
    dataset: Dataset,
    theta: ParamTheta,
    system: MomentSystem,
    s0set: OutsideShareSet,
    mixing: MixingSpec,
    pi: float,
    method: str = "self-normalized",
    B: int = 500,
    seed: int = 0,
    multiplier: str = "gaussian",
    n_s0: int = 51,
    cap: float = DEFAULT_CAP,
    infinite_policy: str = "cap",
    negate_moments: bool = True,
    engine: Optional[SupportEngine] = None,
) -> TestOutcome:
    """Full test of one parameter against the moment system."""
    if method == "two-step-hybrid":
        raise ConfigError("two-step-hybrid critical values are reserved but not implemented")
    if method not in ("self-normalized", "multiplier-bootstrap"):
        raise ConfigError(f"unknown method {method!r}")
    if engine is None:
        engine = SupportEngine(dataset, system.directions, s0set, mixing, n_s0=n_s0)
    stats = moment_stats(dataset, theta, system, s0set, mixing, n_s0=n_s0,
                         cap=cap, infinite_policy=infinite_policy, engine=engine)
    t = test_statistic(stats.mu, stats.sigma, stats.n, stats.dropped,
                       negate_moments=negate_moments)
    if method == "self-normalized":
        # declared system size: theta-free and conservative under drops
        c = critical_value_sn(pi, system.p_n, stats.n)
    else:
        c = critical_value_bootstrap(dataset, theta, system, s0set, mixing, pi,
                                     B=B, seed=seed, multiplier=multiplier,
                                     n_s0=n_s0, cap=cap,
                                     infinite_policy=infinite_policy, engine=engine)
    return TestOutcome(t, c, method, stats.mu, stats.sigma, reject=bool(t > c))


def confidence_set(
    grid: ThetaGrid,
    dataset: Dataset,
    system: MomentSystem,
    s0set: OutsideShareSet,
    mixing: MixingSpec,
    pi: float,
    method: str = "self-normalized",
    B: int = 500,
    seed: int = 0,
    multiplier: str = "gaussian",
    n_s0: int = 51,
    cap: float = DEFAULT_CAP,
    infinite_policy: str = "cap",
    negate_moments: bool = True,
) -> GridResult:
    """Grid confidence set: keep theta with T_n(theta) <= c_n(theta, pi)."""
    engine = SupportEngine(dataset, system.directions, s0set, mixing, n_s0=n_s0)
    size = grid.size
    t_arr = np.empty(size)
    c_arr = np.empty(size)
    member = np.empty(size, dtype=bool)
    for i, theta in enumerate(grid.points()):
        out = evaluate_theta(dataset, theta, system, s0set, mixing, pi,
                             method=method, B=B, seed=seed, multiplier=multiplier,
                             n_s0=n_s0, cap=cap, infinite_policy=infinite_policy,
                             negate_moments=negate_moments, engine=engine)
        t_arr[i] = out.t_stat
        c_arr[i] = out.critical_value
        member[i] = not out.reject
    return GridResult(grid=grid, member=member,
                      stats={"t_stat": t_arr, "critical_value": c_arr},
                      meta={"pi": pi, "method": method, "p_n": system.p_n,
                            "B": B if method == "multiplier-bootstrap" else None,
                            "seed": seed, "n_s0": n_s0})


def project_confidence_set(
    market: MarketObservation,
    cs_members: Sequence[ParamTheta],
    s0set: OutsideShareSet,
    mixing: MixingSpec,
    objects: Optional[Sequence[str]] = None,
    n_s0: int = 51,
) -> Dict[str, Tuple[float, float]]:
    """Equilibrium-object confidence intervals by projecting a parameter set."""
    return equilibrium_bounds(market, cs_members, s0set, mixing,
                              n_s0=n_s0, objects=objects)

"""Synthetic two-good demand designs for identification and coverage studies.

The benchmark design has two inside goods, a single discrete instrument
z ~ U{1..5} shifting prices through g(z) = (z, ln z) plus standard normal
noise, demand shocks equal to the price noise plus a common market shock
(so cov(xi_j, p_j) = 1), a constant characteristic x_j = 1, and a random
price coefficient nu ~ N(0, lambda^2).

The module also evaluates the fixed-outside-share diagnostic function
F(s0): the squared sum of the two stacked conditional-moment expectations
in a two-design experiment (x2 = 0 versus x2 = 10 with a unit-variance
taste mixing).  F staying strictly positive shows that no single
instrument-measurable outside-share assignment can rationalize the data
even when the model (with theta fixed) is correctly specified.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, InversionError
from .inversion import invert_shares_batch
from .model import (
    Dataset,
    MarketObservation,
    MixingSpec,
    ParamTheta,
    Quadrature,
    build_quadrature,
)
from .shares import ShareKernel

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class SimulationDesign:
    """Two-good benchmark data-generating process."""

    n_markets: int
    alpha: float = 1.0
    beta: float = 1.0
    lam: float = 1.0
    seed: int = 0
    n_instrument_values: int = 5
    nodes: int = 15               # quadrature nodes for the nu integral

    def __post_init__(self):
        if self.n_markets < 1:
            raise DataError("need at least one market")
        if self.lam < 0:
            raise DataError("lambda must be nonnegative")

    @property
    def theta(self) -> ParamTheta:
        return ParamTheta(self.alpha, np.array([self.beta]), np.array([self.lam]))

    def mixing(self) -> MixingSpec:
        """Gaussian price-coefficient mixing; lambda[0] is its standard deviation."""
        return MixingSpec(family="gaussian-independent", zeta_sd_index=(None,),
                          nu_sd_index=0, nodes=self.nodes)


@dataclass
class HiddenTruths:
    """Per-market latent values kept aside for validation runs."""

    s0: np.ndarray         # (M,)
    xi: np.ndarray         # (M, 2)
    design: dict

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump({"design": self.design,
                       "s0": self.s0.tolist(),
                       "xi": self.xi.tolist()}, f)
            f.write("\n")

    @classmethod
    def from_json(cls, path) -> "HiddenTruths":
        with open(path) as f:
            payload = json.load(f)
        return cls(np.array(payload["s0"]), np.array(payload["xi"]), payload["design"])


def simulate_dataset(design: SimulationDesign) -> Tuple[Dataset, HiddenTruths]:
    """Draw a dataset from the design; identical seeds give identical data.

    Each market has its own substream derived from (seed, market index), so
    draws are reproducible regardless of how markets are generated.
    """
    M = design.n_markets
    children = np.random.SeedSequence(design.seed).spawn(M)
    z = np.empty(M)
    varpi = np.empty((M, 2))
    common = np.empty(M)
    for m in range(M):
        rng = np.random.default_rng(children[m])
        z[m] = rng.integers(1, design.n_instrument_values + 1)
        varpi[m] = rng.standard_normal(2)
        common[m] = rng.standard_normal()
    p = np.column_stack([z, np.log(z)]) + varpi
    xi = varpi + common[:, None]

    x = np.ones((M, 2, 1))
    quad = build_quadrature(design.mixing(), np.array([design.lam]), d_x=1)
    kernel = ShareKernel(x, p, quad)
    delta = design.beta - design.alpha * p + xi
    s = kernel.sigma(delta)
    s0 = 1.0 - s.sum(axis=1)
    stil = s / (1.0 - s0)[:, None]

    markets = []
    for m in range(M):
        markets.append(MarketObservation(
            market_id=m + 1,
            inside_shares=stil[m] / stil[m].sum(),
            x=x[m],
            p=p[m],
            z=np.array([z[m]]),
            s0_center=float(s0[m]),
        ))
    truths = HiddenTruths(s0, xi, design=dict(
        n_markets=M, alpha=design.alpha, beta=design.beta, lam=design.lam,
        seed=design.seed, nodes=design.nodes))
    return Dataset(tuple(markets)), truths


def median_market(dataset: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    """Componentwise sample medians of (conditional shares, prices)."""
    return (np.median(dataset.shares(), axis=0), np.median(dataset.prices(), axis=0))


def synthetic_median_market(dataset: Dataset) -> MarketObservation:
    """Benchmark market at the median (shares, prices), anchored at the median s0."""
    stil, p = median_market(dataset)
    centers = dataset.s0_centers()
    center = float(np.median(centers)) if centers is not None else None
    z = np.median(dataset.instruments(), axis=0)
    return MarketObservation(
        market_id="median",
        inside_shares=stil / stil.sum(),
        x=dataset.markets[0].x,
        p=p,
        z=z,
        s0_center=center,
    )


# ---------------------------------------------------------------------------
# Fixed-outside-share diagnostic F(s0)
# ---------------------------------------------------------------------------

class CounterexampleEvaluator:
    """Monte-Carlo evaluator of F(s0) with common random numbers.

    Draws xi ~ N(0, I_2) once.  The first design has x = (0, 0), where the
    share map is plain logit and inverts in closed form; the second has
    x = (0, 10) with a unit-normal taste coefficient, inverted by the
    contraction.  Draws whose inversion fails are rejected and counted.
    """

    def __init__(self, n_draws: int = 100_000, seed: int = 0, nodes: int = 40,
                 tol: float = 1e-9, max_iter: int = 200_000):
        rng = np.random.default_rng(seed)
        self.xi = rng.standard_normal((n_draws, 2))
        self.tol = tol
        self.max_iter = max_iter
        self.n_draws = n_draws
        mixing = MixingSpec(family="gaussian-independent", zeta_sd_index=(0,),
                            nu_sd_index=None, nodes=nodes)
        quad = build_quadrature(mixing, np.array([1.0]), d_x=1)
        x_mixed = np.array([[0.0], [10.0]])
        self._kernel = ShareKernel(x_mixed[None, :, :], np.zeros((1, 2)), quad)
        # E[ln conditional share] in the plain-logit design
        lse = np.logaddexp(self.xi[:, 0], self.xi[:, 1])
        self._plain_base = (self.xi - lse[:, None]).mean(axis=0)
        # conditional shares in the mixed design, one per draw
        s = self._kernel.sigma(self.xi)
        self._stil_mixed = s / s.sum(axis=1)[:, None]
        self._warm: Optional[np.ndarray] = None
        self.n_rejected = 0

    def value(self, s0: float) -> float:
        """F(s0) >= 0; zero would mean a constant outside share rationalizes both designs."""
        if not 0.0 < s0 < 1.0:
            raise DataError(f"s0={s0} outside (0,1)")
        plain = self._plain_base + np.log((1.0 - s0) / s0)
        s_in = self._stil_mixed * (1.0 - s0)
        delta = invert_shares_batch(s_in, self._kernel, tol=self.tol,
                                    max_iter=self.max_iter, delta0=self._warm,
                                    on_failure="nan")
        ok = ~np.isnan(delta[:, 0])
        self.n_rejected = int((~ok).sum())
        if self.n_rejected:
            warnings.warn(f"{self.n_rejected} draws rejected at s0={s0:.4f}")
            delta = delta.copy()
            delta[~ok] = np.log(s_in[~ok]) - np.log(s0)
        self._warm = delta
        mixed = delta[ok].mean(axis=0)
        return float(((plain + mixed) ** 2).sum())


def counterexample_value(s0: float, n_draws: int = 100_000, seed: int = 0,
                         nodes: int = 40) -> float:
    """One-off evaluation of F(s0)."""
    return CounterexampleEvaluator(n_draws, seed, nodes).value(s0)


def counterexample_curve(s0_values: Sequence[float], n_draws: int = 100_000,
                         seed: int = 0, nodes: int = 40) -> np.ndarray:
    """F evaluated on a grid with common draws."""
    ev = CounterexampleEvaluator(n_draws, seed, nodes)
    return np.array([ev.value(s0) for s0 in np.asarray(s0_values, dtype=float)])


def counterexample_minimum(
    n_draws: int = 100_000,
    seed: int = 0,
    nodes: int = 40,
    lo: float = 0.05,
    hi: float = 0.6,
    n_grid: int = 23,
    refine_tol: float = 1e-3,
) -> Tuple[float, float]:
    """(argmin, min) of F over [lo, hi]: coarse grid then golden section."""
    ev = CounterexampleEvaluator(n_draws, seed, nodes)
    grid = np.linspace(lo, hi, n_grid)
    vals = np.array([ev.value(s0) for s0 in grid])
    k = int(np.argmin(vals))
    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, n_grid - 1)]
    x1 = b - GOLDEN * (b - a)
    x2 = a + GOLDEN * (b - a)
    f1, f2 = ev.value(x1), ev.value(x2)
    best_s0, best_val = grid[k], vals[k]
    while b - a > refine_tol:
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - GOLDEN * (b - a)
            f1 = ev.value(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + GOLDEN * (b - a)
            f2 = ev.value(x2)
    for val, s in ((f1, x1), (f2, x2)):
        if val < best_val:
            best_val, best_s0 = val, s
    return float(best_s0), float(best_val)

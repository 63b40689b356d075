"""Choice probabilities, share maps, and per-market equilibrium objects.

All integrals over the random coefficients use one shared node set per
(mixing, lambda) pair, so ratio formulas (elasticities, markups, diversion
ratios) are internally consistent.  Every logit kernel is evaluated in a
shifted form that keeps all intermediate terms in [0, J+1]; mean utilities
as large as +-700 are safe.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .errors import DataError, DegenerateShareError, SingularityError
from .model import MixingSpec, ParamTheta, Quadrature, build_quadrature


class ShareKernel:
    """Precomputed utility offsets for a batch of markets under one quadrature.

    Offsets are ``zeta_q . x_j - nu_q * p_j``; mean utilities ``delta`` are
    added per call.  Shapes: x (M,J,d_x), p (M,J).
    """

    def __init__(self, x: np.ndarray, p: np.ndarray, quad: Quadrature):
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        if x.ndim == 2:
            x = x[None, :, :]
        if p.ndim == 1:
            p = p[None, :]
        if x.shape[:2] != p.shape:
            raise DataError("x and p have inconsistent market/product dimensions")
        # offsets (M,Q,J)
        off = np.einsum("qd,mjd->mqj", quad.zeta[:, : x.shape[2]], x)
        off -= quad.nu[None, :, None] * p[:, None, :]
        self._moff = off.max(axis=2)
        self._eoff = np.exp(off - self._moff[:, :, None])
        self.weights = quad.weights
        self.nu = quad.nu
        self.n_markets, self.n_products = p.shape
        self.is_plain_logit = bool(quad.n_nodes == 1 and not off.any())

    def _node_pieces(self, delta: np.ndarray):
        """Stable per-node numerators/denominators for probabilities."""
        ms = delta.max(axis=1)
        e = np.exp(delta - ms[:, None])                     # (M,J), in (0,1]
        t = np.einsum("mqj,mj->mq", self._eoff, e)          # sum_b e_b eoff_b
        top = ms[:, None] + self._moff                      # (M,Q)
        c = np.maximum(top, 0.0)
        sq = np.exp(top - c)                                # in (0,1]
        denom = np.exp(-c) + sq * t                         # (M,Q)
        return e, sq, denom, c

    def sigma(self, delta: np.ndarray) -> np.ndarray:
        """Inside-share map for a (M,J) batch of mean utilities."""
        e, sq, denom, _ = self._node_pieces(delta)
        scale = self.weights[None, :] * sq / denom          # (M,Q)
        return e * np.einsum("mqj,mq->mj", self._eoff, scale)

    def outside_share(self, delta: np.ndarray) -> np.ndarray:
        _, _, denom, c = self._node_pieces(delta)
        return (np.exp(-c) / denom) @ self.weights

    def node_probs(self, delta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Per-node inside probabilities (M,Q,J) and outside probability (M,Q)."""
        e, sq, denom, c = self._node_pieces(delta)
        probs = self._eoff * (e[:, None, :] * (sq / denom)[:, :, None])
        return probs, np.exp(-c) / denom


def _single_kernel(x, p, mixing: MixingSpec, lam) -> ShareKernel:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    quad = build_quadrature(mixing, np.atleast_1d(lam), d_x=x.shape[1])
    return ShareKernel(x, p, quad)


def mean_utilities(theta: ParamTheta, x, p, xi) -> np.ndarray:
    """delta_j = beta.x_j - alpha p_j + xi_j."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return x @ theta.beta - theta.alpha * np.asarray(p, dtype=float) + np.asarray(xi, dtype=float)


def choice_probabilities(theta: ParamTheta, mixing: MixingSpec, x, p, xi) -> np.ndarray:
    """Full probability vector (outside good first), length J+1."""
    kern = _single_kernel(x, p, mixing, theta.lam)
    delta = mean_utilities(theta, x, p, xi)[None, :]
    inside = kern.sigma(delta)[0]
    outside = kern.outside_share(delta)[0]
    return np.concatenate([[outside], inside])


def sigma(delta, x, p, lam, mixing: MixingSpec) -> np.ndarray:
    """Inside-share map at mean utilities ``delta``; entries in (0,1), sum < 1."""
    kern = _single_kernel(x, p, mixing, lam)
    return kern.sigma(np.atleast_1d(np.asarray(delta, dtype=float))[None, :])[0]


def sigma_tilde(delta, x, p, theta: ParamTheta, mixing: MixingSpec) -> np.ndarray:
    """Conditional inside shares: the ratio of share integrals, summing to 1."""
    s = sigma(delta, x, p, theta.lam, mixing)
    return s / s.sum()


def _equilibrium_integrals(theta: ParamTheta, mixing: MixingSpec, x, p, xi):
    """Node integrals shared by the elasticity/markup/diversion formulas."""
    kern = _single_kernel(x, p, mixing, theta.lam)
    delta = mean_utilities(theta, x, p, xi)[None, :]
    probs, _ = kern.node_probs(delta)
    probs = probs[0]                                   # (Q,J)
    w_anu = kern.weights * (theta.alpha + kern.nu)     # (Q,)
    shares = kern.weights @ probs                      # s_j
    own = w_anu @ (probs * (1.0 - probs))              # sum w (a+nu) P_j (1-P_j)
    return probs, w_anu, shares, own


def _check_index(j: int, J: int) -> int:
    if not 1 <= j <= J:
        raise DataError(f"product index {j} outside 1..{J}")
    return j - 1


def elasticity_own(theta: ParamTheta, mixing: MixingSpec, x, p, xi, j: int) -> float:
    """Own-price elasticity of product j (1-based), ratio form."""
    J = np.atleast_1d(p).size
    jj = _check_index(j, J)
    _, _, shares, own = _equilibrium_integrals(theta, mixing, x, p, xi)
    if shares[jj] < 1e-300:
        raise DegenerateShareError(f"share integral for product {j} underflowed")
    return float(-np.asarray(p, dtype=float)[jj] * own[jj] / shares[jj])


def elasticity_cross(theta: ParamTheta, mixing: MixingSpec, x, p, xi, j: int, k: int) -> float:
    """Cross-price elasticity of product j w.r.t. the price of product k != j."""
    J = np.atleast_1d(p).size
    jj, kk = _check_index(j, J), _check_index(k, J)
    if jj == kk:
        raise DataError("cross elasticity needs j != k")
    probs, w_anu, shares, _ = _equilibrium_integrals(theta, mixing, x, p, xi)
    if shares[jj] < 1e-300:
        raise DegenerateShareError(f"share integral for product {j} underflowed")
    cross = w_anu @ (probs[:, jj] * probs[:, kk])
    return float(np.asarray(p, dtype=float)[kk] * cross / shares[jj])


def markup(theta: ParamTheta, mixing: MixingSpec, x, p, xi, j: int) -> float:
    """Markup of product j: -p_j / e_jj."""
    e_jj = elasticity_own(theta, mixing, x, p, xi, j)
    if e_jj == 0.0:
        raise SingularityError(f"own elasticity of product {j} is zero")
    return float(-np.asarray(p, dtype=float)[j - 1] / e_jj)


def diversion_ratio(theta: ParamTheta, mixing: MixingSpec, x, p, xi, j: int, k: int) -> float:
    """Diversion from product k to product j after a price increase in k."""
    J = np.atleast_1d(p).size
    jj, kk = _check_index(j, J), _check_index(k, J)
    if jj == kk:
        raise DataError("diversion ratio needs j != k")
    probs, w_anu, _, own = _equilibrium_integrals(theta, mixing, x, p, xi)
    if own[kk] == 0.0:
        raise SingularityError(f"demand derivative of product {k} is zero")
    cross = w_anu @ (probs[:, jj] * probs[:, kk])
    return float(cross / own[kk])


def implied_share(theta: ParamTheta, mixing: MixingSpec, x, p, xi, j: int) -> float:
    """Unconditional share of product j implied by (theta, xi)."""
    J = np.atleast_1d(p).size
    jj = _check_index(j, J)
    _, _, shares, _ = _equilibrium_integrals(theta, mixing, x, p, xi)
    return float(shares[jj])

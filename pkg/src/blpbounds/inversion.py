"""Share inversion via the Berry contraction.

The fixed-point update is ``delta <- delta + ln s - ln sigma(delta)``,
iterated in the sup-norm until the log-share residual drops below ``tol``.
The residual equals the step size of a sup-norm contraction, so it must be
nonincreasing; the loop asserts this each iteration.  A closed-form fast
path handles the plain-logit case.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import DataError, InversionError
from .model import MixingSpec, ParamTheta, build_quadrature
from .shares import ShareKernel, mean_utilities

DEFAULT_TOL = 1e-12
DEFAULT_MAX_ITER = 5000

# Straggler rows are split off the main batch only this often; per-iteration
# fancy indexing would dominate the runtime otherwise.
_COMPACT_EVERY = 16
_MONOTONE_SLACK = 1e-13


def _validate_full_shares(s_full: np.ndarray) -> None:
    if np.any(s_full <= 0.0):
        raise InversionError("share vector has nonpositive entries")
    sums = s_full.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-10):
        raise InversionError("share vector does not sum to 1 within 1e-10")


def invert_shares_batch(
    s_inside: np.ndarray,
    kernel: ShareKernel,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    delta0: Optional[np.ndarray] = None,
    check_monotone: bool = True,
    on_failure: str = "raise",
) -> np.ndarray:
    """Invert a (M,J) batch of inside-share targets against one kernel.

    ``on_failure="nan"`` marks non-convergent rows with NaN instead of
    raising, for callers that skip failed grid points.
    """
    s_inside = np.asarray(s_inside, dtype=float)
    ln_s = np.log(s_inside)
    s0 = 1.0 - s_inside.sum(axis=1)
    delta = (ln_s - np.log(s0)[:, None]) if delta0 is None else np.array(delta0, dtype=float)

    if kernel.is_plain_logit:
        return ln_s - np.log(s0)[:, None]

    out = np.empty_like(delta)
    rows = np.arange(delta.shape[0])
    kern = kernel
    last_res = np.full(delta.shape[0], np.inf)
    it = 0
    while True:
        step = ln_s - np.log(kern.sigma(delta))
        delta += step
        res = np.abs(step).max(axis=1)
        if check_monotone and np.any(res > last_res + _MONOTONE_SLACK):
            bad = int(np.argmax(res - last_res))
            raise InversionError(
                f"contraction residual increased on row {rows[bad]} "
                f"({last_res[bad]:.3e} -> {res[bad]:.3e})",
                residual=float(res[bad]), iterations=it,
            )
        last_res = res
        it += 1
        done = res < tol
        if done.all():
            out[rows] = delta
            return out
        if it >= max_iter:
            if on_failure == "nan":
                delta[~done] = np.nan
                out[rows] = delta
                return out
            worst = int(np.argmax(res))
            raise InversionError(
                f"no convergence after {max_iter} iterations "
                f"(worst residual {res[worst]:.3e} on row {rows[worst]})",
                residual=float(res.max()), iterations=it,
            )
        if it % _COMPACT_EVERY == 0 and done.any():
            out[rows[done]] = delta[done]
            keep = ~done
            rows = rows[keep]
            delta = delta[keep]
            ln_s = ln_s[keep]
            last_res = last_res[keep]
            kern = _subset_kernel(kernel, rows)


def _subset_kernel(kernel: ShareKernel, rows: np.ndarray) -> ShareKernel:
    sub = object.__new__(ShareKernel)
    sub._moff = kernel._moff[rows] if kernel._moff.shape[0] > 1 else kernel._moff
    sub._eoff = kernel._eoff[rows] if kernel._eoff.shape[0] > 1 else kernel._eoff
    sub.weights = kernel.weights
    sub.nu = kernel.nu
    sub.n_markets = rows.size
    sub.n_products = kernel.n_products
    sub.is_plain_logit = kernel.is_plain_logit
    return sub


def invert_sigma(
    s_full,
    x,
    p,
    lam,
    mixing: MixingSpec,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    delta0: Optional[np.ndarray] = None,
    method: str = "auto",
) -> np.ndarray:
    """Mean utilities solving ``sigma(delta) = s_full[1:]``.

    ``s_full`` is the full share vector with the outside share first.
    ``method`` is "auto" (closed form when the mixing is degenerate),
    "contraction", or "closed-form".
    """
    s_full = np.atleast_1d(np.asarray(s_full, dtype=float))
    _validate_full_shares(s_full)
    s_inside = s_full[1:]
    if method not in ("auto", "contraction", "closed-form"):
        raise DataError(f"unknown inversion method {method!r}")

    x = np.atleast_2d(np.asarray(x, dtype=float))
    quad = build_quadrature(mixing, np.atleast_1d(lam), d_x=x.shape[1])
    kernel = ShareKernel(x, np.asarray(p, dtype=float), quad)

    if method == "closed-form" or (method == "auto" and kernel.is_plain_logit):
        if not kernel.is_plain_logit:
            raise DataError("closed-form inversion requires degenerate mixing")
        return np.log(s_inside) - np.log(s_full[0])

    d0 = None if delta0 is None else np.atleast_2d(np.asarray(delta0, dtype=float))
    return invert_shares_batch(s_inside[None, :], kernel, tol=tol, max_iter=max_iter, delta0=d0)[0]


def demand_shocks(
    s_full,
    x,
    p,
    theta: ParamTheta,
    mixing: MixingSpec,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> np.ndarray:
    """Recover xi_j = sigma^{-1}_j(s_full) - beta.x_j + alpha p_j."""
    delta = invert_sigma(s_full, x, p, theta.lam, mixing, tol=tol, max_iter=max_iter)
    return delta - mean_utilities(theta, x, p, np.zeros_like(delta))

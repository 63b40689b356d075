"""Domain types shared across the package.

A market observation carries the conditional inside shares ``s_tilde``
(shares among inside purchases only, summing to one), product
characteristics ``x``, prices ``p``, and a market-level instrument vector
``z``.  The outside-good share is never part of the data; callers restrict
it through an :class:`OutsideShareSet`.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, QuadratureError

SHARE_SUM_TOL = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(a, dtype=float))
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class MarketObservation:
    """One market: conditional inside shares, characteristics, prices, instruments."""

    market_id: object
    inside_shares: np.ndarray        # (J,), strictly inside (0,1), sums to 1
    x: np.ndarray                    # (J, d_x) non-price characteristics
    p: np.ndarray                    # (J,) prices
    z: np.ndarray                    # (d_z,) market-level instruments
    s0_center: Optional[float] = None   # optional anchor for band-type outside-share sets
    share_scale: float = 1.0            # pre-normalization share sum, when renormalized

    def __post_init__(self):
        object.__setattr__(self, "inside_shares", _readonly(self.inside_shares))
        object.__setattr__(self, "x", _readonly(np.atleast_2d(self.x)))
        object.__setattr__(self, "p", _readonly(self.p))
        object.__setattr__(self, "z", _readonly(np.atleast_1d(self.z)))
        s = self.inside_shares
        if s.ndim != 1 or s.size < 2:
            raise DataError(f"market {self.market_id!r}: need J >= 2 inside shares")
        if not np.all((s > 0.0) & (s < 1.0)):
            raise DataError(f"market {self.market_id!r}: inside shares must lie strictly in (0,1)")
        if abs(s.sum() - 1.0) > SHARE_SUM_TOL:
            raise DataError(
                f"market {self.market_id!r}: inside shares sum to {s.sum()!r}, expected 1"
            )
        if self.x.shape[0] != s.size or self.p.shape != s.shape:
            raise DataError(f"market {self.market_id!r}: inconsistent J across shares/x/p")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.z))):
            raise DataError(f"market {self.market_id!r}: non-finite entries")

    @property
    def n_products(self) -> int:
        return self.inside_shares.size


@dataclass(frozen=True)
class Dataset:
    """Ordered collection of markets with common (J, d_x, d_z)."""

    markets: Tuple[MarketObservation, ...]

    def __post_init__(self):
        markets = tuple(self.markets)
        object.__setattr__(self, "markets", markets)
        if not markets:
            raise DataError("dataset is empty")
        J, d_x, d_z = markets[0].n_products, markets[0].x.shape[1], markets[0].z.size
        for m in markets:
            if (m.n_products, m.x.shape[1], m.z.size) != (J, d_x, d_z):
                raise DataError(f"market {m.market_id!r}: dimensions differ from the first market")

    def __len__(self) -> int:
        return len(self.markets)

    def __iter__(self) -> Iterator[MarketObservation]:
        return iter(self.markets)

    @property
    def n_markets(self) -> int:
        return len(self.markets)

    @property
    def n_products(self) -> int:
        return self.markets[0].n_products

    @property
    def d_x(self) -> int:
        return self.markets[0].x.shape[1]

    @property
    def d_z(self) -> int:
        return self.markets[0].z.size

    def shares(self) -> np.ndarray:
        return np.array([m.inside_shares for m in self.markets])

    def prices(self) -> np.ndarray:
        return np.array([m.p for m in self.markets])

    def characteristics(self) -> np.ndarray:
        return np.array([m.x for m in self.markets])

    def instruments(self) -> np.ndarray:
        return np.array([m.z for m in self.markets])

    def s0_centers(self) -> Optional[np.ndarray]:
        vals = [m.s0_center for m in self.markets]
        if any(v is None for v in vals):
            return None
        return np.array(vals, dtype=float)


@dataclass(frozen=True)
class ParamTheta:
    """Structural parameter (alpha, beta, lambda)."""

    alpha: float
    beta: np.ndarray    # (d_x,)
    lam: np.ndarray     # (d_lambda,) mixing parameters

    def __post_init__(self):
        object.__setattr__(self, "beta", _readonly(np.atleast_1d(self.beta)))
        object.__setattr__(self, "lam", _readonly(np.atleast_1d(self.lam)))
        if not (np.isfinite(self.alpha) and np.all(np.isfinite(self.beta)) and np.all(np.isfinite(self.lam))):
            raise DataError("theta has non-finite entries")

    def as_array(self) -> np.ndarray:
        return np.concatenate([[self.alpha], self.beta, self.lam])


@dataclass(frozen=True)
class MixingSpec:
    """Random-coefficient specification and integration rule.

    ``zeta_sd_index`` maps each characteristic column to the index of the
    lambda entry holding its standard deviation, or ``None`` for a fixed
    (degenerate) coefficient.  ``nu_sd_index`` does the same for the price
    coefficient.  Coordinates are independent Gaussians.
    """

    family: str = "degenerate"                     # "degenerate" | "gaussian-independent"
    zeta_sd_index: Tuple[Optional[int], ...] = ()
    nu_sd_index: Optional[int] = None
    rule: str = "gauss-hermite"                    # "gauss-hermite" | "monte-carlo"
    nodes: int = 15                                # per random dimension
    seed: int = 0                                  # monte-carlo draws only

    def __post_init__(self):
        if self.family not in ("degenerate", "gaussian-independent"):
            raise QuadratureError(f"unknown mixing family {self.family!r}")
        if self.rule not in ("gauss-hermite", "monte-carlo"):
            raise QuadratureError(f"unknown quadrature rule {self.rule!r}")
        if self.nodes < 1:
            raise QuadratureError("node count must be at least 1")

    @property
    def random_dims(self) -> Tuple[Tuple[str, int, int], ...]:
        """(kind, coordinate, lambda-index) triples for the random coordinates."""
        dims = []
        for coord, idx in enumerate(self.zeta_sd_index):
            if idx is not None:
                dims.append(("zeta", coord, idx))
        if self.nu_sd_index is not None:
            dims.append(("nu", 0, self.nu_sd_index))
        return tuple(dims)


def plain_logit_mixing() -> MixingSpec:
    """Mixing that collapses to the plain logit model."""
    return MixingSpec(family="degenerate")


@dataclass(frozen=True)
class Quadrature:
    """Realized integration nodes for one (mixing, lambda) pair."""

    zeta: np.ndarray      # (Q, d_x) taste-coefficient nodes, zeros where degenerate
    nu: np.ndarray        # (Q,) price-coefficient nodes
    weights: np.ndarray   # (Q,), positive, sums to 1

    def __post_init__(self):
        object.__setattr__(self, "zeta", _readonly(np.atleast_2d(self.zeta)))
        object.__setattr__(self, "nu", _readonly(np.atleast_1d(self.nu)))
        object.__setattr__(self, "weights", _readonly(np.atleast_1d(self.weights)))

    @property
    def n_nodes(self) -> int:
        return self.weights.size

    @property
    def is_degenerate(self) -> bool:
        return self.n_nodes == 1 and not self.zeta.any() and not self.nu.any()


def gauss_hermite_nodes(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Probabilists' Gauss-Hermite rule for a standard normal, weights normalized."""
    x, w = np.polynomial.hermite_e.hermegauss(n)
    return x, w / w.sum()


def build_quadrature(mixing: MixingSpec, lam: np.ndarray, d_x: Optional[int] = None) -> Quadrature:
    """Realize the mixing distribution as weighted (zeta, nu) nodes.

    For the gaussian-independent family a tensor-product rule is built over
    the random coordinates, each scaled by its standard deviation from
    ``lam``.  The degenerate family always yields a single zero node.
    """
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    n_x = len(mixing.zeta_sd_index) if d_x is None else d_x
    if mixing.family == "degenerate":
        return Quadrature(np.zeros((1, max(n_x, 1))), np.zeros(1), np.ones(1))

    dims = mixing.random_dims
    sds = []
    for kind, coord, idx in dims:
        if idx >= lam.size:
            raise QuadratureError(f"lambda index {idx} out of range for lambda of length {lam.size}")
        sd = lam[idx]
        if sd < 0:
            raise QuadratureError(f"negative standard deviation {sd} for {kind}[{coord}]")
        sds.append(sd)

    if not dims:
        return Quadrature(np.zeros((1, max(n_x, 1))), np.zeros(1), np.ones(1))

    if mixing.rule == "gauss-hermite":
        base = [gauss_hermite_nodes(mixing.nodes)] * len(dims)
        node_grids = [sd * b[0] for sd, b in zip(sds, base)]
        weight_grids = [b[1] for b in base]
        mesh = np.meshgrid(*node_grids, indexing="ij")
        wmesh = np.meshgrid(*weight_grids, indexing="ij")
        nodes = np.column_stack([m.ravel() for m in mesh])
        weights = np.prod(np.stack([w.ravel() for w in wmesh]), axis=0)
    else:
        rng = np.random.default_rng(mixing.seed)
        draws = rng.standard_normal((mixing.nodes, len(dims)))
        nodes = draws * np.array(sds)[None, :]
        weights = np.full(mixing.nodes, 1.0 / mixing.nodes)

    weights = weights / weights.sum()
    Q = weights.size
    zeta = np.zeros((Q, max(n_x, 1)))
    nu = np.zeros(Q)
    for col, (kind, coord, _idx) in enumerate(dims):
        if kind == "zeta":
            zeta[:, coord] = nodes[:, col]
        else:
            nu = nodes[:, col].copy()
    return Quadrature(zeta, nu, weights)


@dataclass(frozen=True)
class ShareInterval:
    """Clipped realization of an outside-share set for one market."""

    lo: float
    hi: float
    lo_clipped: bool    # endpoint produced by the eta clip (candidate for divergence)
    hi_clipped: bool

    def grid(self, n: int) -> np.ndarray:
        if self.lo == self.hi:
            return np.array([self.lo])
        return np.linspace(self.lo, self.hi, n)


@dataclass(frozen=True)
class OutsideShareSet:
    """Restriction on the unobserved outside-good share.

    ``agnostic`` means the full interval (0,1); ``band`` is a half-width
    ``epsilon`` interval around a per-market (or global) center; ``singleton``
    pins the share exactly.  Every interval is intersected with
    [eta, 1-eta] because the share inversion needs both shares bounded away
    from zero.
    """

    kind: str                      # "agnostic" | "band" | "singleton"
    epsilon: Optional[float] = None
    center: Optional[float] = None
    eta: float = 1e-4

    def __post_init__(self):
        if self.kind not in ("agnostic", "band", "singleton"):
            raise DataError(f"unknown outside-share set kind {self.kind!r}")
        if not 0.0 < self.eta <= 0.01:
            raise DataError("eta must lie in (0, 0.01]")
        if self.kind == "band":
            if self.epsilon is None or self.epsilon <= 0:
                raise DataError("band requires a positive epsilon")

    def interval(self, center: Optional[float] = None) -> ShareInterval:
        """Realized [lo, hi] for one market, flagging eta-clipped endpoints."""
        c = self.center if center is None else center
        if self.kind == "agnostic":
            return ShareInterval(self.eta, 1.0 - self.eta, True, True)
        if c is None:
            raise DataError(f"{self.kind} outside-share set needs a center value")
        if not 0.0 < c < 1.0:
            raise DataError(f"outside-share center {c} outside (0,1)")
        if self.kind == "singleton":
            c = min(max(c, self.eta), 1.0 - self.eta)
            return ShareInterval(c, c, False, False)
        lo, hi = c - self.epsilon, c + self.epsilon
        lo_clip, hi_clip = lo < self.eta, hi > 1.0 - self.eta
        lo, hi = max(lo, self.eta), min(hi, 1.0 - self.eta)
        if not lo < hi:
            raise DataError("clipped band is empty; reduce eta or epsilon")
        return ShareInterval(lo, hi, lo_clip, hi_clip)


@dataclass(frozen=True)
class GridAxis:
    """One coordinate range of a parameter grid."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _readonly(np.atleast_1d(self.values)))
        if not np.all(np.isfinite(self.values)):
            raise DataError("grid axis has non-finite values")

    @classmethod
    def linspace(cls, lo: float, hi: float, n: int) -> "GridAxis":
        if n < 2:
            raise DataError("free grid axes need at least 2 points")
        return cls(np.linspace(lo, hi, n))

    @classmethod
    def step(cls, lo: float, hi: float, step: float) -> "GridAxis":
        n = int(round((hi - lo) / step)) + 1
        if n < 2:
            raise DataError("free grid axes need at least 2 points")
        return cls(lo + step * np.arange(n))

    @classmethod
    def fixed(cls, value: float) -> "GridAxis":
        return cls(np.array([value]))

    @property
    def n(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class ThetaGrid:
    """Cartesian grid over (alpha, beta entries, lambda entries)."""

    alpha: GridAxis
    beta: Tuple[GridAxis, ...]
    lam: Tuple[GridAxis, ...]

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(self.beta))
        object.__setattr__(self, "lam", tuple(self.lam))

    @property
    def axes(self) -> Tuple[GridAxis, ...]:
        return (self.alpha,) + self.beta + self.lam

    @property
    def axis_names(self) -> Tuple[str, ...]:
        names = ["alpha"]
        names += [f"beta_{i + 1}" for i in range(len(self.beta))]
        names += [f"lambda_{i + 1}" for i in range(len(self.lam))]
        return tuple(names)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(ax.n for ax in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def points(self) -> Iterator[ParamTheta]:
        """Lazily enumerate grid points in row-major order."""
        n_beta = len(self.beta)
        for combo in itertools.product(*(ax.values for ax in self.axes)):
            yield ParamTheta(combo[0], np.array(combo[1:1 + n_beta]), np.array(combo[1 + n_beta:]))

    def coords(self) -> np.ndarray:
        """(size, n_axes) array of coordinates in points() order."""
        mesh = np.meshgrid(*(ax.values for ax in self.axes), indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])


# ---------------------------------------------------------------------------
# CSV ingestion (long format: one row per market x product)
# ---------------------------------------------------------------------------

_BASE_COLUMNS = ("market_id", "product_id", "share", "price")


def _detect_indexed(fieldnames: Sequence[str], prefix: str) -> Tuple[str, ...]:
    cols = []
    for i in itertools.count(1):
        name = f"{prefix}{i}"
        if name not in fieldnames:
            break
        cols.append(name)
    return tuple(cols)


def load_dataset(path, schema: Optional[dict] = None) -> Dataset:
    """Load a long-format CSV into a :class:`Dataset`.

    Expected columns: market_id, product_id, share, price, x_1..x_{d_x},
    z_1..z_{d_z}, and optionally s0_center.  ``schema`` maps these canonical
    names to actual file columns.  Raw inside shares are renormalized to sum
    to one per market; the pre-normalization sum is recorded as
    ``share_scale``.
    """
    schema = schema or {}

    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        names = [schema.get(c, c) for c in _BASE_COLUMNS]
        missing = [c for c in names if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        x_cols = _detect_indexed(reader.fieldnames, schema.get("x_prefix", "x_"))
        z_cols = _detect_indexed(reader.fieldnames, schema.get("z_prefix", "z_"))
        if not x_cols:
            raise DataError(f"{path}: no characteristic columns (x_1, ...)")
        if not z_cols:
            raise DataError(f"{path}: no instrument columns (z_1, ...)")
        center_col = schema.get("s0_center", "s0_center")
        has_center = center_col in reader.fieldnames
        rows = list(reader)

    col_mkt, col_prod, col_share, col_price = names
    by_market: dict = {}
    order = []
    for row in rows:
        mid = row[col_mkt]
        if mid not in by_market:
            by_market[mid] = []
            order.append(mid)
        by_market[mid].append(row)

    markets = []
    for mid in order:
        entries = by_market[mid]
        seen = set()
        for r in entries:
            pid = r[col_prod]
            if pid in seen:
                raise DataError(f"market {mid!r}: duplicated product_id {pid!r}")
            seen.add(pid)
        entries.sort(key=lambda r: r[col_prod])
        shares = np.array([float(r[col_share]) for r in entries])
        if np.any(shares <= 0):
            raise DataError(f"market {mid!r}: nonpositive share")
        total = shares.sum()
        if not 0.0 < total <= 1.0 + 1e-9:
            raise DataError(f"market {mid!r}: share sum {total} outside (0, 1+1e-9]")
        prices = np.array([float(r[col_price]) for r in entries])
        x = np.array([[float(r[c]) for c in x_cols] for r in entries])
        z_rows = np.array([[float(r[c]) for c in z_cols] for r in entries])
        if not np.all(z_rows == z_rows[0]):
            raise DataError(f"market {mid!r}: instrument values differ across product rows")
        center = None
        if has_center and entries[0][center_col] not in ("", None):
            center = float(entries[0][center_col])
        markets.append(MarketObservation(
            market_id=mid,
            inside_shares=shares / total,
            x=x,
            p=prices,
            z=z_rows[0],
            s0_center=center,
            share_scale=float(total),
        ))
    return Dataset(tuple(markets))


def save_dataset(dataset: Dataset, path) -> None:
    """Write a dataset in the long CSV format read by :func:`load_dataset`.

    Floats are written with ``repr`` so a save/load cycle is bit-identical.
    """
    d_x, d_z = dataset.d_x, dataset.d_z
    header = list(_BASE_COLUMNS) + [f"x_{i + 1}" for i in range(d_x)] + [f"z_{i + 1}" for i in range(d_z)]
    has_center = dataset.s0_centers() is not None
    if has_center:
        header.append("s0_center")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for m in dataset:
            for j in range(m.n_products):
                row = [m.market_id, j + 1,
                       repr(m.inside_shares[j] * m.share_scale), repr(m.p[j])]
                row += [repr(v) for v in m.x[j]]
                row += [repr(v) for v in m.z]
                if has_center:
                    row.append(repr(m.s0_center))
                writer.writerow(row)

"""Grid results and their CSV/JSON serialization."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .model import ParamTheta, ThetaGrid


@dataclass
class GridResult:
    """Membership flags and per-point statistics over a parameter grid.

    ``member`` and every array in ``stats`` are flat, in ``grid.points()``
    (row-major) order.
    """

    grid: ThetaGrid
    member: np.ndarray
    stats: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.member = np.asarray(self.member, dtype=bool).ravel()
        if self.member.size != self.grid.size:
            raise ValueError("member flags do not match grid size")

    @property
    def is_empty(self) -> bool:
        return not bool(self.member.any())

    @property
    def n_members(self) -> int:
        return int(self.member.sum())

    def members(self) -> List[ParamTheta]:
        coords = self.grid.coords()[self.member]
        n_beta = len(self.grid.beta)
        return [ParamTheta(c[0], c[1:1 + n_beta], c[1 + n_beta:]) for c in coords]

    def projections(self) -> Dict[str, Optional[Tuple[float, float]]]:
        """Per-coordinate [min, max] over members; None when the set is empty."""
        names = self.grid.axis_names
        if self.is_empty:
            return {name: None for name in names}
        coords = self.grid.coords()[self.member]
        return {name: (float(coords[:, i].min()), float(coords[:, i].max()))
                for i, name in enumerate(names)}

    def write_csv(self, path) -> None:
        names = self.grid.axis_names
        coords = self.grid.coords()
        stat_names = list(self.stats)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(list(names) + ["member"] + stat_names)
            for i in range(self.grid.size):
                row = [repr(v) for v in coords[i]]
                row.append(int(self.member[i]))
                row += [repr(float(self.stats[s][i])) for s in stat_names]
                writer.writerow(row)

    def summary(self) -> dict:
        return {
            "n_grid_points": int(self.grid.size),
            "n_members": self.n_members,
            "empty": self.is_empty,
            "projections": {k: (list(v) if v is not None else None)
                            for k, v in self.projections().items()},
            "meta": self.meta,
        }

    def write_json(self, path, extra: Optional[dict] = None) -> None:
        payload = self.summary()
        if extra:
            payload.update(extra)
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")

"""Designs and datasets.

A :class:`DesignGrid` is either a Cartesian product of per-factor location
sets, or an explicit ``n x p`` location table whose columns are partitioned
into factor groups.  Responses on a product grid are stored in lexicographic
order with the last factor varying fastest.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from functools import cached_property, reduce

import numpy as np

from .correlation import CorrelationFamily, _as_points, distance_matrix


@dataclass(frozen=True)
class DesignGrid:
    factors: tuple[np.ndarray, ...] | None = None
    locations: np.ndarray | None = None
    groups: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        if (self.factors is None) == (self.locations is None):
            raise ValueError("give either per-factor locations or a dense location table")
        if self.factors is not None:
            facs = tuple(_as_points(f) for f in self.factors)
            for k, f in enumerate(facs):
                if f.shape[0] < 2:
                    raise ValueError(f"factor {k} has {f.shape[0]} location(s); at least 2 are required")
                if len({tuple(row) for row in f}) != f.shape[0]:
                    raise ValueError(f"factor {k} locations must be pairwise distinct")
            object.__setattr__(self, "factors", facs)
        else:
            locs = _as_points(self.locations)
            object.__setattr__(self, "locations", locs)
            groups = self.groups
            if groups is None:
                groups = tuple((j,) for j in range(locs.shape[1]))
            groups = tuple(tuple(int(c) for c in g) for g in groups)
            cols = sorted(c for g in groups for c in g)
            if cols != list(range(locs.shape[1])):
                raise ValueError("factor groups must partition the location columns")
            object.__setattr__(self, "groups", groups)

    @classmethod
    def grid(cls, *factors) -> "DesignGrid":
        return cls(factors=tuple(factors))

    @classmethod
    def dense(cls, locations, groups=None) -> "DesignGrid":
        return cls(locations=locations, groups=groups)

    @property
    def is_grid(self) -> bool:
        return self.factors is not None

    @property
    def r(self) -> int:
        return len(self.factors) if self.is_grid else len(self.groups)

    @property
    def dims(self) -> tuple[int, ...]:
        if not self.is_grid:
            raise AttributeError("a dense design has no factor dimensions")
        return tuple(f.shape[0] for f in self.factors)

    @property
    def n(self) -> int:
        return int(np.prod(self.dims)) if self.is_grid else self.locations.shape[0]

    def expanded(self) -> tuple[np.ndarray, tuple[tuple[int, ...], ...]]:
        """Explicit location table (rows in layout order) and its column groups."""
        if not self.is_grid:
            return self.locations, self.groups
        rows = [np.concatenate(combo) for combo in itertools.product(*self.factors)]
        groups, start = [], 0
        for f in self.factors:
            groups.append(tuple(range(start, start + f.shape[1])))
            start += f.shape[1]
        return np.array(rows), tuple(groups)

    @cached_property
    def factor_distances(self) -> tuple[np.ndarray, ...]:
        """Pairwise distance matrix within each factor (grid designs)."""
        return tuple(distance_matrix(f) for f in self.factors)

    @cached_property
    def group_distances(self) -> tuple[np.ndarray, ...]:
        """Pairwise distances between rows of the expanded table, per factor group."""
        locs, groups = self.expanded()
        return tuple(distance_matrix(locs[:, list(g)]) for g in groups)

    def factor_points(self, k: int) -> np.ndarray:
        """Locations of factor ``k`` for every row of the expanded table."""
        locs, groups = self.expanded()
        return locs[:, list(groups[k])]


@dataclass(frozen=True)
class GpDataset:
    """Responses, regression design and correlation families.

    ``x`` is either a tuple of per-factor vectors (Kronecker mean structure,
    ``q = 1``) or a dense ``n x q`` matrix.
    """

    y: np.ndarray
    x: tuple[np.ndarray, ...] | np.ndarray
    grid: DesignGrid
    families: tuple[CorrelationFamily, ...]
    force_dense: bool = field(default=False, compare=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        object.__setattr__(self, "y", y)
        fams = tuple(self.families)
        if len(fams) == 1 and self.grid.r > 1:
            fams = fams * self.grid.r
        if len(fams) != self.grid.r:
            raise ValueError(f"{len(fams)} families given for {self.grid.r} factors")
        object.__setattr__(self, "families", fams)
        if y.shape[0] != self.grid.n:
            raise ValueError(f"response has length {y.shape[0]}, design has {self.grid.n} points")
        if isinstance(self.x, (tuple, list)):
            if not self.grid.is_grid:
                raise ValueError("Kronecker regression factors need a grid design")
            xs = tuple(np.asarray(v, dtype=float).reshape(-1) for v in self.x)
            if tuple(len(v) for v in xs) != self.grid.dims:
                raise ValueError("regression factor lengths do not match the grid")
            for k, v in enumerate(xs):
                if not np.any(v):
                    raise ValueError(f"regression factor {k} is identically zero")
            object.__setattr__(self, "x", xs)
        else:
            xd = np.asarray(self.x, dtype=float)
            if xd.ndim == 1:
                xd = xd[:, None]
            if xd.shape[0] != y.shape[0]:
                raise ValueError("design matrix rows do not match the response length")
            if xd.shape[1] >= xd.shape[0] or np.linalg.matrix_rank(xd) < xd.shape[1]:
                raise ValueError("design matrix must have full column rank q < n")
            object.__setattr__(self, "x", xd)

    @property
    def kron_x(self) -> tuple[np.ndarray, ...] | None:
        return self.x if isinstance(self.x, tuple) else None

    @property
    def dense_x(self) -> np.ndarray:
        if isinstance(self.x, tuple):
            return reduce(np.kron, self.x)[:, None]
        return self.x

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def q(self) -> int:
        return 1 if isinstance(self.x, tuple) else self.x.shape[1]

    @property
    def r(self) -> int:
        return self.grid.r

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.n, self.q, self.r

    @property
    def structured(self) -> bool:
        return self.grid.is_grid and self.kron_x is not None and not self.force_dense

    def as_dense(self) -> "GpDataset":
        return replace(self, force_dense=True)

    def with_y(self, y) -> "GpDataset":
        return replace(self, y=np.asarray(y, dtype=float))

    def permuted(self, order) -> "GpDataset":
        """Same data with the factors relabelled in ``order`` (grid designs only)."""
        order = list(order)
        dims = self.grid.dims
        y = self.y.reshape(dims).transpose(order).reshape(-1)
        grid = DesignGrid.grid(*[self.grid.factors[k] for k in order])
        fams = tuple(self.families[k] for k in order)
        if self.kron_x is not None:
            x = tuple(self.kron_x[k] for k in order)
        else:
            x = self.x.reshape(*dims, -1).transpose(order + [len(order)]).reshape(self.n, -1)
        return GpDataset(y=y, x=x, grid=grid, families=fams, force_dense=self.force_dense)


def constant_mean(grid: DesignGrid):
    """Regression design of an unknown constant level."""
    if grid.is_grid:
        return tuple(np.ones(nk) for nk in grid.dims)
    return np.ones((grid.n, 1))

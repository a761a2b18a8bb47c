"""Cell lattice and sample swarm substrate.

A quantum particle of mass M and charge Q is represented by an ensemble
(a "swarm") of n classical point samples, each of mass M/n and charge
Q/n. A sample is either at rest or moves with one fixed speed c along a
single coordinate axis. Space is split into cubic cells of side dx; the
per-cell sample count gives the swarm density, and the per-cell net
mover counts give the swarm momentum in exact integer units of (M/n)*c.

Samples never exert classical forces on each other. Their only mutual
interaction is the pairwise exchange reaction: two samples moving in
opposite directions both stop, or two resting samples start moving in
opposite directions along one random axis. Both branches conserve the
pair's momentum exactly, so all momentum bookkeeping stays in integer
counts and total swarm momentum is bit-exact under any number of
exchanges.
"""

from dataclasses import dataclass, replace

import numpy as np

REST = -1

_BOUNDARIES = ("periodic", "reflecting")


class EmptyCellError(ValueError):
    """An operation needed samples in a cell that contains none."""


class ExchangeError(ValueError):
    """An exchange was requested on a pair that does not qualify."""


@dataclass(frozen=True)
class SimUnits:
    """Physical constants of one simulated particle.

    limit_speed is the one speed magnitude samples may move at; it is
    also the scale the grid's dx >= 10*c*dt separation is checked against.
    """

    hbar: float = 1.0
    particle_mass: float = 1.0
    particle_charge: float = 1.0
    limit_speed: float = 1.0

    def __post_init__(self):
        for name in ("hbar", "particle_mass", "particle_charge", "limit_speed"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class CellGrid:
    """Cubic cell lattice over the centered domain [-L/2, L/2) per axis."""

    dimension: int
    cells_per_axis: int
    dx: float
    dt: float
    boundary: str = "periodic"

    def __post_init__(self):
        if self.dimension not in (1, 2, 3):
            raise ValueError("dimension must be 1, 2 or 3")
        if self.cells_per_axis < 4:
            raise ValueError("cells_per_axis must be at least 4")
        if not (self.dx > 0 and self.dt > 0):
            raise ValueError("dx and dt must be strictly positive")
        if self.boundary not in _BOUNDARIES:
            raise ValueError(f"boundary must be one of {_BOUNDARIES}")

    @property
    def extent(self):
        return self.cells_per_axis * self.dx

    @property
    def n_cells(self):
        return self.cells_per_axis ** self.dimension

    @property
    def shape(self):
        return (self.cells_per_axis,) * self.dimension

    @property
    def cell_volume(self):
        return self.dx ** self.dimension

    def require_scale_separation(self, units):
        # dx >= 10*c*dt keeps per-step cell transfer a small perturbation.
        if self.dx < 10.0 * units.limit_speed * self.dt:
            raise ValueError(
                "scale separation violated: need dx >= 10*c*dt, got "
                f"dx={self.dx}, c*dt={units.limit_speed * self.dt}"
            )

    def centers(self):
        """Cell center coordinates along one axis."""
        return (np.arange(self.cells_per_axis) + 0.5) * self.dx - self.extent / 2.0

    def meshgrid(self):
        """Center coordinate arrays, one per axis, each of shape grid.shape."""
        axes = [self.centers()] * self.dimension
        return np.meshgrid(*axes, indexing="ij")

    def cell_coords(self, positions):
        """Per-axis integer cell coordinates for (n, dimension) positions."""
        c = np.floor((positions + self.extent / 2.0) / self.dx).astype(np.int64)
        # Float edge cases (x == L/2 after wrap rounding) must not index out.
        return np.clip(c, 0, self.cells_per_axis - 1)

    def flat_index(self, positions):
        """Flat (row-major) cell index for (n, dimension) positions."""
        coords = self.cell_coords(positions)
        flat = coords[:, 0]
        for u in range(1, self.dimension):
            flat = flat * self.cells_per_axis + coords[:, u]
        return flat

    def flat_from_coords(self, coords):
        coords = np.asarray(coords, dtype=np.int64)
        flat = coords[..., 0]
        for u in range(1, self.dimension):
            flat = flat * self.cells_per_axis + coords[..., u]
        return flat

    def positions_in_cells(self, coords, rng):
        """Uniform random positions inside the given (n, dimension) cells."""
        coords = np.asarray(coords, dtype=np.int64)
        u = rng.random(coords.shape)
        return (coords + u) * self.dx - self.extent / 2.0


def fold_positions(x, extent, boundary):
    """Map one coordinate array back into [-L/2, L/2).

    Returns (folded, flipped) where flipped marks entries whose direction
    of travel must reverse (odd number of wall reflections). For periodic
    boundaries flipped is all False.
    """
    half = extent / 2.0
    if boundary == "periodic":
        return (x + half) % extent - half, np.zeros(x.shape, dtype=bool)
    t = (x + half) % (2.0 * extent)
    flipped = t > extent
    t = np.where(flipped, 2.0 * extent - t, t)
    return t - half, flipped


@dataclass(frozen=True)
class Sample:
    """Read-only view of one swarm member."""

    id: int
    position: np.ndarray
    axis: int
    sign: int
    sample_mass: float
    sample_charge: float

    @property
    def speed_state(self):
        """REST, or the (axis, sign) of the single allowed moving state."""
        if self.axis == REST:
            return REST
        return (int(self.axis), int(self.sign))


class Swarm:
    """Structure-of-arrays ensemble of samples on a grid.

    Row i of every array belongs to sample id i for the whole run; rows
    are never permuted, inserted or deleted, which is what makes the ids
    stable ("each sample keeps its own history").

    Attributes
    ----------
    ids : (n,) int64, fixed at construction
    pos : (n, dimension) float64 positions
    axes : (n,) int8, REST or axis index of the moving direction
    signs : (n,) int8, +-1 for movers, 0 at rest
    """

    __slots__ = ("ids", "pos", "axes", "signs", "grid", "units")

    def __init__(self, positions, grid, units, axes=None, signs=None, ids=None):
        pos = np.array(positions, dtype=np.float64)
        if pos.ndim == 1:
            pos = pos[:, None]
        if pos.ndim != 2 or pos.shape[1] != grid.dimension:
            raise ValueError("positions must have shape (n, dimension)")
        n = pos.shape[0]
        if n == 0:
            raise ValueError("swarm must contain at least one sample")
        grid.require_scale_separation(units)
        half = grid.extent / 2.0
        if np.any(pos < -half) or np.any(pos >= half):
            raise ValueError("positions must lie inside [-L/2, L/2) per axis")
        self.pos = pos
        self.axes = (
            np.full(n, REST, dtype=np.int8) if axes is None else np.array(axes, dtype=np.int8)
        )
        self.signs = (
            np.zeros(n, dtype=np.int8) if signs is None else np.array(signs, dtype=np.int8)
        )
        if self.axes.shape != (n,) or self.signs.shape != (n,):
            raise ValueError("axes and signs must have shape (n,)")
        self.ids = np.arange(n, dtype=np.int64) if ids is None else np.array(ids, dtype=np.int64)
        self.grid = grid
        self.units = units
        self._check_speed_closure()

    def _check_speed_closure(self):
        moving = self.axes != REST
        if np.any(self.axes[moving] >= self.grid.dimension) or np.any(self.axes[moving] < 0):
            raise ValueError("moving axis out of range")
        if np.any(np.abs(self.signs[moving]) != 1) or np.any(self.signs[~moving] != 0):
            raise ValueError("signs must be +-1 for movers and 0 at rest")

    @property
    def n(self):
        return self.pos.shape[0]

    @property
    def dimension(self):
        return self.grid.dimension

    @property
    def sample_mass(self):
        return self.units.particle_mass / self.n

    @property
    def sample_charge(self):
        return self.units.particle_charge / self.n

    def copy(self):
        out = Swarm.__new__(Swarm)
        out.ids = self.ids
        out.pos = self.pos.copy()
        out.axes = self.axes.copy()
        out.signs = self.signs.copy()
        out.grid = self.grid
        out.units = self.units
        return out

    def sample(self, i):
        return Sample(
            id=int(self.ids[i]),
            position=self.pos[i].copy(),
            axis=int(self.axes[i]),
            sign=int(self.signs[i]),
            sample_mass=self.sample_mass,
            sample_charge=self.sample_charge,
        )

    def flat_cells(self):
        return self.grid.flat_index(self.pos)

    def momentum_counts(self):
        """Net mover count per axis, summed over the whole swarm (exact)."""
        out = np.zeros(self.dimension, dtype=np.int64)
        for u in range(self.dimension):
            sel = self.axes == u
            out[u] = int(self.signs[sel].astype(np.int64).sum())
        return out

    def total_momentum(self):
        """Physical total momentum vector, momentum_counts times (M/n)*c."""
        return self.momentum_counts() * (self.sample_mass * self.units.limit_speed)

    def exchange_pair(self, i, j, rng, check_distance=True):
        """Perform one exchange reaction between rows i and j in place.

        The pair must be mutually opposite: both at rest, or moving along
        the same axis with opposite signs. Distance must not exceed dx
        (chessboard metric, the same closeness notion cells use).
        """
        if i == j:
            raise ExchangeError("a sample cannot exchange with itself")
        if check_distance:
            dist = np.max(np.abs(self.pos[i] - self.pos[j]))
            if dist > self.grid.dx:
                raise ExchangeError(f"pair distance {dist} exceeds dx={self.grid.dx}")
        ai, aj = int(self.axes[i]), int(self.axes[j])
        si, sj = int(self.signs[i]), int(self.signs[j])
        if ai == REST and aj == REST:
            axis = int(rng.integers(self.dimension))
            s = 1 if rng.random() < 0.5 else -1
            self.axes[i] = axis
            self.axes[j] = axis
            self.signs[i] = s
            self.signs[j] = -s
        elif ai == aj and ai != REST and si == -sj:
            self.axes[i] = REST
            self.axes[j] = REST
            self.signs[i] = 0
            self.signs[j] = 0
        else:
            raise ExchangeError("pair speeds are not mutually opposite")


def exchange(sample_a, sample_b, rng, dx=None):
    """Exchange reaction on two sample views; returns the updated pair.

    Opposite movers both stop; a resting pair starts along one uniformly
    random axis with opposite signs. Pair momentum is unchanged exactly.
    dx, when given, enforces the closeness precondition (chessboard
    metric).
    """
    if dx is not None:
        dist = np.max(np.abs(np.asarray(sample_a.position) - np.asarray(sample_b.position)))
        if dist > dx:
            raise ExchangeError(f"pair distance {dist} exceeds dx={dx}")
    dim = len(sample_a.position)
    a_rest = sample_a.axis == REST
    b_rest = sample_b.axis == REST
    if a_rest and b_rest:
        axis = int(rng.integers(dim))
        s = 1 if rng.random() < 0.5 else -1
        return (
            replace(sample_a, axis=axis, sign=s),
            replace(sample_b, axis=axis, sign=-s),
        )
    if (
        not a_rest
        and sample_a.axis == sample_b.axis
        and sample_a.sign == -sample_b.sign
    ):
        return (replace(sample_a, axis=REST, sign=0), replace(sample_b, axis=REST, sign=0))
    raise ExchangeError("pair speeds are not mutually opposite")


@dataclass
class DensityField:
    """Per-cell swarm density. counts are exact integers; values = counts/dx^dim."""

    counts: np.ndarray
    grid: CellGrid

    @property
    def values(self):
        return self.counts / self.grid.cell_volume

    def total(self):
        """Total sample count recovered from the field (exact)."""
        return int(self.counts.sum())


@dataclass
class MomentumField:
    """Per-cell momentum as exact integer net mover counts per axis.

    The physical per-cell momentum is net_counts * quantum where the
    quantum (M/n)*c is the one momentum unit a single mover carries.
    """

    net_counts: np.ndarray
    quantum: float
    grid: CellGrid

    @property
    def values(self):
        return self.net_counts * self.quantum


def density(swarm):
    """Aggregate the swarm into its per-cell DensityField."""
    flat = swarm.flat_cells()
    counts = np.bincount(flat, minlength=swarm.grid.n_cells)
    return DensityField(counts=counts.reshape(swarm.grid.shape), grid=swarm.grid)


def momentum_field(swarm):
    """Aggregate net mover counts per cell and axis into a MomentumField."""
    grid = swarm.grid
    flat = swarm.flat_cells()
    net = np.zeros((grid.n_cells, grid.dimension), dtype=np.int64)
    for u in range(grid.dimension):
        up = (swarm.axes == u) & (swarm.signs > 0)
        dn = (swarm.axes == u) & (swarm.signs < 0)
        net[:, u] = np.bincount(flat[up], minlength=grid.n_cells) - np.bincount(
            flat[dn], minlength=grid.n_cells
        )
    quantum = swarm.sample_mass * swarm.units.limit_speed
    return MomentumField(
        net_counts=net.reshape(grid.shape + (grid.dimension,)), quantum=quantum, grid=grid
    )


def grid_gradient(values, grid):
    """Central-difference gradient of a per-cell field.

    Periodic grids difference across the wrap; reflecting grids fall back
    to one-sided differences at the walls. A constant field maps to an
    exactly zero gradient in both modes. Works for real and complex data.
    Returns shape grid.shape + (dimension,).
    """
    values = np.asarray(values).reshape(grid.shape)
    out = np.empty(grid.shape + (grid.dimension,), dtype=values.dtype)
    for u in range(grid.dimension):
        if grid.boundary == "periodic":
            out[..., u] = (np.roll(values, -1, axis=u) - np.roll(values, 1, axis=u)) / (
                2.0 * grid.dx
            )
        else:
            out[..., u] = np.gradient(values, grid.dx, axis=u, edge_order=1)
    return out


@dataclass
class PotentialField:
    """External scalar potential on the cell lattice, with its gradient."""

    values: np.ndarray
    grid: CellGrid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(self.grid.shape)
        self._grad = None

    @classmethod
    def from_function(cls, fn, grid):
        """Evaluate fn on the cell-center mesh; fn takes one array per axis."""
        return cls(values=np.asarray(fn(*grid.meshgrid()), dtype=np.float64), grid=grid)

    def gradient(self):
        if self._grad is None:
            self._grad = grid_gradient(self.values, self.grid)
        return self._grad


def stationary_fraction(swarm, cell):
    """Count the balanced movers and resting samples of one cell.

    Returns (s, n_s, n_cell): s is the size of a maximal zero-momentum
    subset of the cell's moving samples (per axis, min(n+, n-) pairs),
    n_s the number of resting samples and n_cell the cell total.
    """
    grid = swarm.grid
    if np.isscalar(cell) or isinstance(cell, (int, np.integer)):
        target = int(cell)
    else:
        target = int(grid.flat_from_coords(np.asarray(cell)))
    flat = swarm.flat_cells()
    mask = flat == target
    total = int(mask.sum())
    if total == 0:
        raise EmptyCellError(f"cell {cell} holds no samples")
    axes = swarm.axes[mask]
    signs = swarm.signs[mask]
    rest = int((axes == REST).sum())
    s = 0
    for u in range(grid.dimension):
        plus = int(((axes == u) & (signs > 0)).sum())
        minus = int(((axes == u) & (signs < 0)).sum())
        s += 2 * min(plus, minus)
    return s, rest, total

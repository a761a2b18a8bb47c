"""Dynamical diffusion swarm engine.

One evolution step applies four phases to the swarm, in order:

1. Exchanges. In every cell, balanced mover pairs are annihilated or
   resting pairs are created until the balanced-mover count s and the
   resting count n_s satisfy s / n_s = d as closely as integers allow.
   Created pairs pick a uniformly random axis and split signs randomly,
   so the diffusion stays isotropic.
2. Speed grants. Resting samples are pushed along each axis so the
   momentum injected per cell matches the potential drive: the granted
   mover count per axis is round(kappa * N_cell * |dV/du| * dt / (M*c)),
   every grant sharing the sign of -dV/du. Demand beyond the available
   resting samples is clamped and counted as saturation.
3. Ballistic move. Movers translate by c*dt along their axis; positions
   wrap (periodic) or reflect with a sign flip (reflecting walls).
4. Potential refresh. A hook for self-consistent potentials; identity
   for the external fixed fields used here.

Exchanges rearrange integer direction counts in zero-sum pairs, so the
step changes total momentum exactly by the summed grants and by wall
reflections, nothing else.

The grain-scaled coefficients (diffusion intensity I, potential coupling
kappa) and the residual diagnostics of the density and momentum laws the
mechanism targets live here too. The stationary density of the mechanism
matches the oscillator ground state when the sample speed follows
calibrated_speed(); the calibration is empirical and grain-tied, which
is the deliberate price of a fixed spatial resolution.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .lattice import (
    REST,
    PotentialField,
    Swarm,
    density,
    fold_positions,
    grid_gradient,
    momentum_field,
)
from .seeding import substream


def coefficients(units, grid):
    """Grain-scaled mechanism coefficients (I, kappa).

    I = hbar^2 / (2 M^2 dx^3) and kappa = hbar / (M dx). Doubling the
    grain divides I by 8 and kappa by 2.
    """
    i_coef = units.hbar**2 / (2.0 * units.particle_mass**2 * grid.dx**3)
    kappa = units.hbar / (units.particle_mass * grid.dx)
    return i_coef, kappa


def calibrated_speed(omega, dimension, stationary_ratio, dx, hbar=1.0, mass=1.0):
    """Sample speed whose stationary swarm density matches the oscillator
    ground state |psi_0|^2 at angular frequency omega on grain dx.

    The value scales with sqrt(dimension), which keeps joint-lattice runs
    (several particles sharing one configuration space) marginally
    indistinguishable from independent single-particle runs.
    """
    return (hbar / mass) * np.sqrt(
        omega * dimension * (1.0 + stationary_ratio) / (2.0 * stationary_ratio * dx)
    )


@dataclass
class DDSConfig:
    """Mechanism parameters. Build with for_grid() to fill the derived
    coefficients from the units and grain."""

    stationary_ratio: float = 0.2
    ramp_steps: int = 0
    seed: int = 0
    diffusion_intensity: float = 0.0
    potential_coupling: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.stationary_ratio < 1.0):
            raise ValueError("stationary_ratio must lie in [0, 1)")
        if self.ramp_steps < 0:
            raise ValueError("ramp_steps must be non-negative")

    @classmethod
    def for_grid(cls, units, grid, *, stationary_ratio=0.2, ramp_steps=0, seed=0):
        i_coef, kappa = coefficients(units, grid)
        return cls(
            stationary_ratio=stationary_ratio,
            ramp_steps=ramp_steps,
            seed=seed,
            diffusion_intensity=i_coef,
            potential_coupling=kappa,
        )


def _split_hypergeometric(totals, pools, rng):
    """Distribute per-cell totals over axes without replacement.

    pools is (n_cells, dim) of available units per axis; totals must not
    exceed pools.sum(axis=1). Returns the per-axis draw counts.
    """
    n_cells, dim = pools.shape
    out = np.zeros_like(pools)
    remaining = totals.astype(np.int64).copy()
    pool_left = pools.sum(axis=1)
    for u in range(dim - 1):
        good = pools[:, u]
        rest = pool_left - good
        take = np.zeros(n_cells, dtype=np.int64)
        m = (remaining > 0) & (good + rest > 0)
        if np.any(m):
            take[m] = rng.hypergeometric(good[m], rest[m], remaining[m])
        out[:, u] = take
        remaining -= take
        pool_left = rest
    out[:, dim - 1] = remaining
    return out


def _split_uniform(totals, dim, rng):
    """Distribute per-cell totals over axes with equal probability."""
    n_cells = totals.shape[0]
    out = np.zeros((n_cells, dim), dtype=np.int64)
    remaining = totals.astype(np.int64).copy()
    for u in range(dim - 1):
        take = np.zeros(n_cells, dtype=np.int64)
        m = remaining > 0
        if np.any(m):
            take[m] = rng.binomial(remaining[m], 1.0 / (dim - u))
        out[:, u] = take
        remaining -= take
    out[:, dim - 1] = remaining
    return out


def mechanism_step(
    pos,
    axes,
    signs,
    cells_per_axis,
    dx,
    dim,
    grad_flat,
    *,
    d,
    c,
    dt,
    kappa,
    mass,
    boundary,
    rng,
    stats=None,
):
    """Raw-array four-phase step; mutates pos/axes/signs in place.

    grad_flat holds the potential gradient per flat cell, shape
    (cells_per_axis**dim, dim). Returns the number of saturated cells.
    The optional stats dict receives 'saturated_cells', 'min_rest_ratio'
    and 'granted' entries for run reporting.
    """
    n = pos.shape[0]
    k = cells_per_axis
    extent = k * dx
    n_cells = k**dim
    n_class = 1 + 2 * dim

    cells = np.clip(np.floor((pos[:, 0] + extent / 2.0) / dx).astype(np.int64), 0, k - 1)
    for u in range(1, dim):
        cu = np.clip(np.floor((pos[:, u] + extent / 2.0) / dx).astype(np.int64), 0, k - 1)
        cells = cells * k + cu

    # Class 0 = rest, classes 1+2u and 2+2u = +/- movers along axis u.
    cls = np.zeros(n, dtype=np.int64)
    moving = axes >= 0
    cls[moving] = 1 + 2 * axes[moving].astype(np.int64) + (signs[moving] < 0)

    cc = np.bincount(cells * n_class + cls, minlength=n_cells * n_class).reshape(
        n_cells, n_class
    )
    n_cell = cc.sum(axis=1)
    n_rest = cc[:, 0]
    n_plus = cc[:, 1::2]
    n_minus = cc[:, 2::2]

    if stats is not None:
        occupied = n_cell > 0
        ratios = n_rest[occupied] / n_cell[occupied]
        stats["min_rest_ratio"] = float(ratios.min()) if ratios.size else 1.0

    # Phase 1 targets: balanced pairs P with 2P/(rest after exchange) = d.
    pairs = np.minimum(n_plus, n_minus)
    p_have = pairs.sum(axis=1)
    carriers = np.abs(n_plus - n_minus).sum(axis=1)
    p_target = np.rint(d * (n_cell - carriers) / (2.0 * (1.0 + d))).astype(np.int64)
    annihilate = np.clip(p_have - p_target, 0, None)
    create = np.clip(p_target - p_have, 0, None)

    ann_u = _split_hypergeometric(annihilate, pairs, rng)
    create_eff = np.minimum(create, n_rest // 2)
    cre_u = _split_uniform(create_eff, dim, rng)

    # Phase 2 demand: integer grant counts per axis, sign of -dV/du.
    grant_signed = np.rint(kappa * n_cell[:, None] * (-grad_flat) * dt / (mass * c)).astype(
        np.int64
    )
    need = np.abs(grant_signed)
    rest_left = n_rest - 2 * create_eff
    total_need = need.sum(axis=1)
    saturated = total_need > rest_left
    grant_eff = need
    if np.any(saturated):
        grant_eff = need.copy()
        scale = rest_left[saturated] / total_need[saturated]
        grant_eff[saturated] = np.floor(need[saturated] * scale[:, None]).astype(np.int64)

    # One random rank per sample inside its (cell, class) segment decides
    # who annihilates, who starts moving and who receives a grant.
    seg_id = cells * n_class + cls
    rand24 = rng.integers(0, 1 << 24, size=n, dtype=np.int64)
    order = np.argsort((seg_id << 24) | rand24)
    seg_sorted = seg_id[order]
    seg_start = np.searchsorted(seg_sorted, np.arange(n_cells * n_class))
    rank = np.arange(n, dtype=np.int64) - seg_start[seg_sorted]
    ocell = cells[order]
    oclass = cls[order]

    for u in range(dim):
        lim = ann_u[ocell, u]
        for s in (1 + 2 * u, 2 + 2 * u):
            chosen = order[(oclass == s) & (rank < lim)]
            axes[chosen] = REST
            signs[chosen] = 0

    at_rest = oclass == 0
    offset = np.zeros(n_cells, dtype=np.int64)
    for u in range(dim):
        lo = offset[ocell]
        hi = lo + 2 * cre_u[ocell, u]
        sel = at_rest & (rank >= lo) & (rank < hi)
        chosen = order[sel]
        axes[chosen] = u
        signs[chosen] = np.where((rank[sel] & 1) == 0, 1, -1).astype(np.int8)
        offset = offset + 2 * cre_u[:, u]

    for u in range(dim):
        lo = offset[ocell]
        hi = lo + grant_eff[ocell, u]
        sel = at_rest & (rank >= lo) & (rank < hi)
        chosen = order[sel]
        axes[chosen] = u
        signs[chosen] = np.sign(grant_signed[ocell[sel], u]).astype(np.int8)
        offset = offset + grant_eff[:, u]

    # Phase 3: ballistic move of every mover, then boundary handling.
    moving = np.flatnonzero(axes >= 0)
    if moving.size:
        ax = axes[moving].astype(np.int64)
        coord = pos[moving, ax] + signs[moving] * (c * dt)
        folded, flipped = fold_positions(coord, extent, boundary)
        pos[moving, ax] = folded
        if np.any(flipped):
            signs[moving[flipped]] = -signs[moving[flipped]]

    sat_count = int(saturated.sum())
    if stats is not None:
        stats["saturated_cells"] = sat_count
        stats["granted"] = int(grant_eff.sum())
    return sat_count


def dds_step(swarm, potential, config, rng, stats=None):
    """One four-phase step on a Swarm; arrays update in place.

    The swarm object is returned for chaining. Cells where resting
    samples fall below 90 percent trigger a relativistic-regime warning
    (the mechanism's derivation assumes most samples rest); the run
    continues.
    """
    grid = swarm.grid
    grad_flat = potential.gradient().reshape(grid.n_cells, grid.dimension)
    local = {} if stats is None else stats
    mechanism_step(
        swarm.pos,
        swarm.axes,
        swarm.signs,
        grid.cells_per_axis,
        grid.dx,
        grid.dimension,
        grad_flat,
        d=config.stationary_ratio,
        c=swarm.units.limit_speed,
        dt=grid.dt,
        kappa=config.potential_coupling,
        mass=swarm.units.particle_mass,
        boundary=grid.boundary,
        rng=rng,
        stats=local,
    )
    if local.get("min_rest_ratio", 1.0) < 0.9:
        warnings.warn(
            "swarm left the near-rest regime: a cell has under 90% resting samples",
            RuntimeWarning,
            stacklevel=2,
        )
    return swarm


@dataclass
class StepStats:
    """Per-step run record emitted by DDSEngine."""

    step: int
    time: float
    momentum_counts: tuple
    min_rest_ratio: float
    saturated_cells: int


class DDSEngine:
    """Drives a swarm with the four-phase mechanism step by step.

    The potential switches on linearly over config.ramp_steps (a sudden
    quench launches an undamped breathing mode in the swarm). Randomness
    comes from per-step substreams of config.seed, so any prefix of a run
    is reproducible on its own.
    """

    def __init__(self, swarm, potential, config, potential_refresh=None):
        self.swarm = swarm
        self.potential = potential
        self.config = config
        self.potential_refresh = potential_refresh
        self.step_index = 0
        self.history = []

    def _ramp(self):
        if self.config.ramp_steps <= 0:
            return 1.0
        return min(1.0, (self.step_index + 1) / self.config.ramp_steps)

    def step(self):
        grid = self.swarm.grid
        scale = self._ramp()
        grad_flat = self.potential.gradient().reshape(grid.n_cells, grid.dimension) * scale
        rng = substream(self.config.seed, self.step_index)
        stats = {}
        mechanism_step(
            self.swarm.pos,
            self.swarm.axes,
            self.swarm.signs,
            grid.cells_per_axis,
            grid.dx,
            grid.dimension,
            grad_flat,
            d=self.config.stationary_ratio,
            c=self.swarm.units.limit_speed,
            dt=grid.dt,
            kappa=self.config.potential_coupling,
            mass=self.swarm.units.particle_mass,
            boundary=grid.boundary,
            rng=rng,
            stats=stats,
        )
        self.step_index += 1
        record = StepStats(
            step=self.step_index,
            time=self.step_index * grid.dt,
            momentum_counts=tuple(int(v) for v in self.swarm.momentum_counts()),
            min_rest_ratio=stats["min_rest_ratio"],
            saturated_cells=stats["saturated_cells"],
        )
        self.history.append(record)
        if self.potential_refresh is not None:
            self.potential = self.potential_refresh(self.potential, self.swarm)
        return record

    def run(self, steps, callback=None, callback_every=0):
        for _ in range(int(steps)):
            self.step()
            if callback is not None and callback_every and self.step_index % callback_every == 0:
                callback(self)
        return self.history


def _normalized_fields(swarm):
    grid = swarm.grid
    rho = density(swarm).counts / (swarm.n * grid.cell_volume)
    mom = momentum_field(swarm)
    # Momentum density normalized per sample, matching rho's 1/n scale.
    p_norm = mom.net_counts * (mom.quantum / grid.cell_volume)
    return rho, p_norm


def momentum_law_residual(swarm_history, potential, config):
    """Residual of the per-cell momentum balance over the last two states.

    Returns dp/dt + I grad(rho) + kappa rho grad(V) per cell and axis,
    with rho the per-sample normalized density. For a resting swarm in a
    constant potential the residual vanishes identically; in general it
    is sampling noise that shrinks as the swarm grows.
    """
    if len(swarm_history) < 2:
        raise ValueError("need at least two consecutive swarm states")
    s0, s1 = swarm_history[-2], swarm_history[-1]
    grid = s0.grid
    dt = grid.dt
    rho0, p0 = _normalized_fields(s0)
    _, p1 = _normalized_fields(s1)
    grad_rho = grid_gradient(rho0, grid)
    grad_v = potential.gradient()
    i_coef = config.diffusion_intensity
    kappa = config.potential_coupling
    return (p1 - p0) / dt + i_coef * grad_rho + kappa * rho0[..., None] * grad_v


def density_wave_residual(swarm_history, potential, config):
    """Residual of the second-order density law over the last three states.

    Returns rho_tt - div(I grad rho + kappa rho grad V)/M per cell, the
    divergence taken as the face-flux sum of each cell. Static swarms
    give zero; driven swarms give noise that shrinks with n.
    """
    if len(swarm_history) < 3:
        raise ValueError("need at least three consecutive swarm states")
    s0, s1, s2 = swarm_history[-3], swarm_history[-2], swarm_history[-1]
    grid = s1.grid
    dt = grid.dt
    rho0, _ = _normalized_fields(s0)
    rho1, _ = _normalized_fields(s1)
    rho2, _ = _normalized_fields(s2)
    rho_tt = (rho2 - 2.0 * rho1 + rho0) / dt**2
    flux = config.diffusion_intensity * grid_gradient(rho1, grid) + (
        config.potential_coupling * rho1[..., None] * potential.gradient()
    )
    divergence = np.zeros(grid.shape)
    for u in range(grid.dimension):
        divergence += grid_gradient(flux[..., u], grid)[..., u]
    mass = s1.units.particle_mass
    return rho_tt - divergence / mass


def sho_potential(grid, omega=1.0, mass=1.0):
    """Isotropic oscillator potential field on the grid."""
    return PotentialField.from_function(
        lambda *axes: 0.5 * mass * omega**2 * sum(a**2 for a in axes), grid
    )


def born_start(grid, units, n, sigma, rng):
    """All-rest swarm with positions drawn from a centered Gaussian."""
    half = grid.extent / 2.0
    pos = rng.normal(0.0, sigma, size=(int(n), grid.dimension))
    pos = np.clip(pos, -half, np.nextafter(half, -np.inf))
    return Swarm(pos, grid, units)

"""Static diffusion ground-state engine (diffusion Monte Carlo).

Walkers carry positions only. Each step every walker jumps one fixed
length along a random axis with a small probability per direction, then
branches against the potential: where V lies below the running reference
energy the walker spawns a copy, where V lies above it the walker kills
one other walker within jump range. The walker density converges to the
magnitude of the ground state (the amplitude itself, not its square),
and the adaptive reference energy converges to the ground energy.

Defaults tie the jump kinematics to the quantum diffusion constant,
p * jump_length^2 / imaginary_step = hbar / (2 M), and the branching
coupling to 1/hbar, so the stationary law is the physical one. Death
resolution runs as a deterministic post-pass in walker index order, so
runs reproduce exactly for a fixed seed.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .seeding import substream


class ExtinctionError(RuntimeError):
    """The walker population died out; the run cannot continue."""


@dataclass
class DMCConfig:
    """Static diffusion parameters.

    reference_energy adapts in place during stepping (gain * log of the
    population ratio), so the config object is deliberately mutable.
    domain_extent of None means unbounded space; "absorbing" walls pin
    the state to zero at the domain edge (hard box), "periodic" wraps.
    """

    jump_probability: float = 0.25
    jump_length: float = 0.1
    coupling: float = 1.0
    reference_energy: float = 0.0
    target_population: int = 10_000
    imaginary_step: float = 0.005
    gain: float = 0.1
    domain_extent: float | None = None
    boundary: str = "periodic"

    @classmethod
    def physical(cls, units, jump_probability, jump_length, **kwargs):
        """Fill imaginary_step and coupling from the diffusion matching
        D = p dx^2 / dtau = hbar/(2M) and lambda = 1/hbar."""
        dtau = (
            2.0
            * units.particle_mass
            * jump_probability
            * jump_length**2
            / units.hbar
        )
        return cls(
            jump_probability=jump_probability,
            jump_length=jump_length,
            coupling=1.0 / units.hbar,
            imaginary_step=dtau,
            **kwargs,
        )


def _check(config, dim):
    if not 0 < config.jump_probability <= 1.0 / (2 * dim):
        raise ValueError("jump_probability must lie in (0, 1/(2*dimension)]")


def _apply_walls(pos, config):
    """Returns the survivor mask after boundary handling (mutates pos)."""
    if config.domain_extent is None:
        return None
    half = config.domain_extent / 2.0
    if config.boundary == "periodic":
        pos += half
        pos %= config.domain_extent
        pos -= half
        return None
    if config.boundary == "reflecting":
        span = 2.0 * config.domain_extent
        t = (pos + half) % span
        np.copyto(pos, np.where(t > config.domain_extent, span - t, t) - half)
        return None
    if config.boundary == "absorbing":
        return np.all(np.abs(pos) < half, axis=1)
    raise ValueError(f"unknown boundary {config.boundary}")


def dmc_step(walkers, potential, config, rng):
    """One jump-and-branch step; returns the new walker array.

    potential maps an (m, dim) position array to (m,) energies. Births
    append copies after the surviving originals; deaths remove, for each
    killer in index order, one uniformly chosen other walker within
    jump_length (chessboard metric), or the killer itself when isolated.
    """
    pop, dim = walkers.shape
    if pop == 0:
        raise ExtinctionError("walker population is empty")
    _check(config, dim)
    p, dx = config.jump_probability, config.jump_length

    pos = walkers.copy()
    r = rng.random(pop)
    hops = r < 2 * dim * p
    if np.any(hops):
        slot = np.minimum(np.floor(r[hops] / p).astype(np.int64), 2 * dim - 1)
        axis = slot >> 1
        sign = np.where(slot & 1 == 0, 1.0, -1.0)
        pos[hops, axis] += sign * dx

    alive = np.ones(pop, dtype=bool)
    wall_alive = _apply_walls(pos, config)
    if wall_alive is not None:
        alive &= wall_alive

    v = np.asarray(potential(pos), dtype=np.float64)
    diff = v - config.reference_energy
    prob = np.clip(config.coupling * np.abs(diff) * config.imaginary_step, 0.0, 1.0)
    event = (rng.random(pop) < prob) & alive
    births = event & (diff < 0)
    killers = np.flatnonzero(event & (diff > 0))

    if killers.size:
        # Victims resolve in killer index order; a killer already dead
        # (eaten by an earlier killer or a wall) no longer acts.
        for i in killers:
            if not alive[i]:
                continue
            near = np.max(np.abs(pos - pos[i]), axis=1) <= dx
            near[i] = False
            near &= alive
            candidates = np.flatnonzero(near)
            if candidates.size == 0:
                alive[i] = False
            else:
                alive[candidates[int(rng.integers(candidates.size))]] = False

    births &= alive
    new = np.concatenate([pos[alive], pos[births]], axis=0)
    if new.shape[0] == 0:
        raise ExtinctionError("walker population went extinct")
    config.reference_energy += config.gain * np.log(
        config.target_population / new.shape[0]
    )
    return new


def dmc_step_nparticle(walker_corteges, joint_potential, config, rng):
    """The same step in the joint configuration space of several particles.

    walker_corteges has shape (m, particles, dim); joint_potential maps
    that shape to (m,) energies.
    """
    m, particles, dim = walker_corteges.shape
    flat = walker_corteges.reshape(m, particles * dim)

    def wrapped(x):
        return joint_potential(x.reshape(x.shape[0], particles, dim))

    out = dmc_step(flat, wrapped, config, rng)
    return out.reshape(out.shape[0], particles, dim)


@dataclass
class DMCRecord:
    step: int
    population: int
    reference_energy: float


class DMCEngine:
    """Runs the static diffusion process and accumulates its outputs."""

    def __init__(self, walkers, potential, config, seed=0):
        self.walkers = np.array(walkers, dtype=np.float64)
        if self.walkers.ndim == 1:
            self.walkers = self.walkers[:, None]
        self.potential = potential
        self.config = config
        self.seed = seed
        self.step_index = 0
        self.history = []
        self._hist_edges = None
        self._hist_accum = None
        self._hist_steps = 0

    def track_histogram(self, edges):
        """Start accumulating a time-averaged position histogram (axis 0)."""
        self._hist_edges = np.asarray(edges, dtype=np.float64)
        self._hist_accum = np.zeros(self._hist_edges.size - 1)
        self._hist_steps = 0

    def step(self):
        rng = substream(self.seed, self.step_index)
        self.walkers = dmc_step(self.walkers, self.potential, self.config, rng)
        self.step_index += 1
        self.history.append(
            DMCRecord(
                step=self.step_index,
                population=self.walkers.shape[0],
                reference_energy=float(self.config.reference_energy),
            )
        )
        if self._hist_edges is not None:
            counts, _ = np.histogram(self.walkers[:, 0], bins=self._hist_edges)
            self._hist_accum += counts
            self._hist_steps += 1

    def run(self, steps):
        for _ in range(int(steps)):
            self.step()
        return self.history

    def histogram_density(self):
        """Time-averaged walker density over the tracked window."""
        if self._hist_edges is None or self._hist_steps == 0:
            raise RuntimeError("histogram tracking was never started")
        widths = np.diff(self._hist_edges)
        total = self._hist_accum.sum()
        if total == 0:
            raise RuntimeError("histogram is empty")
        return self._hist_accum / (total * widths)


def ground_energy_estimate(run_history, tail_fraction=0.5):
    """Time-averaged reference energy over the stationary tail of a run.

    Warns when the tail still trends (reference energy drift larger than
    its standard error times 4, or a persistent population slope), since
    the average is then not a stationary estimate.
    """
    if len(run_history) < 4:
        raise ValueError("run history too short")
    records = run_history[int(len(run_history) * (1.0 - tail_fraction)) :]
    e = np.array([r.reference_energy for r in records])
    pop = np.array([r.population for r in records], dtype=np.float64)
    t = np.arange(e.size, dtype=np.float64)
    slope = np.polyfit(t, e, 1)[0]
    drift = abs(slope) * e.size
    stderr = e.std(ddof=1) / np.sqrt(e.size)
    if drift > 4.0 * max(stderr, 1e-12) and drift > 1e-6:
        warnings.warn("reference energy still trends over the averaging tail",
                      RuntimeWarning, stacklevel=2)
    pop_slope = np.polyfit(t, pop, 1)[0]
    if abs(pop_slope) * e.size > 0.5 * pop.mean():
        warnings.warn("population still trends over the averaging tail",
                      RuntimeWarning, stacklevel=2)
    return float(e.mean())

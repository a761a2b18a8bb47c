"""Path-integral tools: free kernel, wave swarm propagation, classicality.

The wave swarm is the short-history sibling of the diffusion swarm: its
samples carry complex amplitudes instead of discrete speeds, live for a
single flight, and their per-cell amplitude sum reconstructs the wave.
One step runs three phases:

  (a) deposit: sum sample amplitudes per cell into a wave grid;
  (b) resample: create per cell a sample count proportional to |psi|
      (the swarm density tracks the modulus, not the probability), each
      sample carrying the same amplitude modulus with its cell's phase
      and a velocity drawn uniformly from a cube;
  (c) flight: straight free motion for the slice duration, the amplitude
      multiplied by exp(i dS / hbar) with dS the straight-segment action
      (kinetic minus the potential at the segment midpoint).

The velocity cube half-width defaults to pi*hbar/(M dx), the largest
speed the grid can represent without aliasing. Oscillatory Gaussian
slice integrals are evaluated both in closed form and by regularized
oscillatory quadrature so the propagator's normalization is testable to
tight tolerance.
"""

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .lattice import fold_positions
from .oracle import WaveField


class AmplitudeUnderflowError(RuntimeError):
    """The deposited wave vanished; the swarm cannot be resampled."""


@dataclass(frozen=True)
class KernelSpec:
    """One propagation slice: mass, hbar and slice duration."""

    mass: float
    hbar: float
    eps: float

    @property
    def normalization(self):
        """A = sqrt(2*pi*i*hbar*eps/m), principal branch; |A|^2 = 2*pi*hbar*eps/m."""
        return np.sqrt(2j * np.pi * self.hbar * self.eps / self.mass)


def free_kernel(x, t, units):
    """Free-particle propagator (2*pi*i*hbar*t/m)^(-1/2) exp(i m x^2 / (2 hbar t)).

    The modulus is x-independent and the x = 0 phase is -pi/4 from the
    principal branch of the prefactor. x may be a scalar or an array of
    displacements; вector displacements use their squared length.
    """
    if not t > 0:
        raise ValueError("kernel time must be strictly positive")
    m, hbar = units.particle_mass, units.hbar
    x = np.asarray(x, dtype=np.float64)
    x2 = np.sum(x**2, axis=-1) if x.ndim > 1 else x**2
    pref = 1.0 / np.sqrt(2j * np.pi * hbar * t / m)
    return pref * np.exp(1j * m * x2 / (2.0 * hbar * t))


def slice_normalization(mass, hbar, eps):
    """Closed form of the slice Gaussian integral: sqrt(2*pi*i*hbar*eps/m)."""
    return np.sqrt(2j * np.pi * hbar * eps / mass)


def slice_second_moment(mass, hbar, eps):
    """Closed form of the normalized squared-displacement integral: i*hbar*eps/m."""
    return 1j * hbar * eps / mass


def _oscillatory_moment(a, power, reg):
    """Integral of u^power * exp(i a u) over (0, inf) with decay exp(-reg*a*u).

    Evaluated by weighted quadrature at two regulator strengths and
    Richardson-extrapolated to zero regularization.
    """

    def value(b):
        re = quad(lambda u: u**power * np.exp(-b * u), 0, np.inf, weight="cos", wvar=a,
                  limit=400)[0]
        im = quad(lambda u: u**power * np.exp(-b * u), 0, np.inf, weight="sin", wvar=a,
                  limit=400)[0]
        return re + 1j * im

    b1 = reg * a
    return 2.0 * value(b1 / 2.0) - value(b1)


def slice_normalization_numeric(mass, hbar, eps, reg=1e-6):
    """The slice Gaussian integral by direct oscillatory quadrature.

    Substituting u = displacement^2 turns the integral into an
    oscillatory moment with an integrable endpoint singularity.
    """
    a = mass / (2.0 * hbar * eps)
    return _oscillatory_moment(a, -0.5, reg)


def slice_second_moment_numeric(mass, hbar, eps, reg=1e-6):
    """The normalized squared-displacement slice integral, numerically."""
    a = mass / (2.0 * hbar * eps)
    num = _oscillatory_moment(a, 0.5, reg)
    den = _oscillatory_moment(a, -0.5, reg)
    return num / den


def classicality(mass, length, time, units):
    """Dynamics regime for a particle of the given typical scales.

    Compares the typical action mass*length^2/time with hbar; below it
    the particle needs quantum treatment. The boundary counts as
    classical.
    """
    action = mass * length**2 / time
    return "quantum" if action < units.hbar else "classical"


def slit_widening(b, mass, t, units):
    """Spread gained by a wave leaving a slit of half-width b after time t.

    Returns (extra width hbar*t/(m*b), momentum spread hbar/b); their
    defining product delta_p * 2b is 2*hbar regardless of the slit.
    """
    if not (b > 0 and t > 0):
        raise ValueError("slit half-width and time must be positive")
    return units.hbar * t / (mass * b), units.hbar / b


@dataclass
class AmplitudeEnsemble:
    """Short-lived amplitude-carrying samples (structure of arrays)."""

    positions: np.ndarray
    velocities: np.ndarray
    amplitudes: np.ndarray

    @property
    def n(self):
        return self.positions.shape[0]


def default_velocity_halfwidth(units, grid):
    """Largest representable speed on the grid, pi*hbar/(M dx)."""
    return np.pi * units.hbar / (units.particle_mass * grid.dx)


def deposit(ensemble, grid):
    """Per-cell amplitude sums of the ensemble, shape grid.shape.

    Positions outside the domain are folded back by the grid's boundary
    rule before binning.
    """
    pos = ensemble.positions.copy()
    for u in range(grid.dimension):
        pos[:, u], _ = fold_positions(pos[:, u], grid.extent, grid.boundary)
    flat = grid.flat_index(pos)
    re = np.bincount(flat, weights=ensemble.amplitudes.real, minlength=grid.n_cells)
    im = np.bincount(flat, weights=ensemble.amplitudes.imag, minlength=grid.n_cells)
    return (re + 1j * im).reshape(grid.shape)


def resample(wave, n_samples, rng, v_max=None):
    """Create a fresh ensemble from a wave field.

    Cell counts follow |psi| by largest-remainder apportionment (exactly
    n_samples in total), every sample carries the same amplitude modulus
    with its cell's phase, positions are uniform inside the cell and
    velocities uniform in the cube [-v_max, v_max]^dim.
    """
    grid, units = wave.grid, wave.units
    if v_max is None:
        v_max = default_velocity_halfwidth(units, grid)
    mod = np.abs(wave.psi).reshape(-1)
    total = mod.sum()
    if not total > 0:
        raise AmplitudeUnderflowError("wave modulus sum is zero")
    weights = mod / total
    ideal = weights * n_samples
    counts = np.floor(ideal).astype(np.int64)
    short = int(n_samples - counts.sum())
    if short > 0:
        frac = ideal - counts
        # Ties resolve to the lower flat index: argsort is stable on the
        # negated fractions.
        counts[np.argsort(-frac, kind="stable")[:short]] += 1
    occupied = np.flatnonzero(counts)
    flat = np.repeat(occupied, counts[occupied])
    coords = np.empty((flat.size, grid.dimension), dtype=np.int64)
    rem = flat
    for u in range(grid.dimension - 1, -1, -1):
        coords[:, u] = rem % grid.cells_per_axis
        rem = rem // grid.cells_per_axis
    positions = grid.positions_in_cells(coords, rng)
    velocities = rng.uniform(-v_max, v_max, size=(flat.size, grid.dimension))
    phase = np.angle(wave.psi.reshape(-1)[flat])
    amplitudes = (total / n_samples) * np.exp(1j * phase)
    return AmplitudeEnsemble(positions, velocities, amplitudes)


def fly(ensemble, potential, eps, units):
    """Straight flight for one slice; amplitudes pick up exp(i dS/hbar).

    The action of the segment is (m |v|^2 / 2 - V(midpoint)) * eps, with
    the potential read at the segment midpoint. potential may be None
    (free flight), a callable on positions, or a PotentialField.
    """
    mid = ensemble.positions + 0.5 * eps * ensemble.velocities
    if potential is None:
        v_mid = 0.0
    elif callable(potential):
        v_mid = np.asarray(potential(mid), dtype=np.float64)
    else:
        grid = potential.grid
        folded = mid.copy()
        for u in range(grid.dimension):
            folded[:, u], _ = fold_positions(folded[:, u], grid.extent, grid.boundary)
        v_mid = potential.values.reshape(-1)[grid.flat_index(folded)]
    kinetic = 0.5 * units.particle_mass * np.sum(ensemble.velocities**2, axis=1)
    action = (kinetic - v_mid) * eps
    return AmplitudeEnsemble(
        positions=ensemble.positions + eps * ensemble.velocities,
        velocities=ensemble.velocities,
        amplitudes=ensemble.amplitudes * np.exp(1j * action / units.hbar),
    )


def wave_swarm_step(ensemble, wave, potential, eps, rng, n_samples=None, v_max=None):
    """One deposit-resample-fly cycle.

    With ensemble None the given wave seeds the cycle directly (first
    step of a run). Returns (new ensemble, deposited wave), the wave
    normalized on the lattice measure.
    """
    grid, units = wave.grid, wave.units
    if n_samples is None:
        n_samples = ensemble.n if ensemble is not None else 100_000
    if ensemble is None:
        psi = wave.psi
    else:
        psi = deposit(ensemble, grid)
    norm = np.sqrt(np.sum(np.abs(psi) ** 2) * grid.cell_volume)
    if not norm > 0:
        raise AmplitudeUnderflowError("deposited wave vanished")
    new_wave = WaveField(psi=psi / norm, grid=grid, units=units)
    fresh = resample(new_wave, n_samples, rng, v_max=v_max)
    flown = fly(fresh, potential, eps, units)
    return flown, new_wave


class WaveSwarmEngine:
    """Iterates the three-phase cycle and exposes the running wave."""

    def __init__(self, wave, potential, eps, n_samples, seed=0, v_max=None):
        self.wave = wave.normalized()
        self.potential = potential
        self.eps = eps
        self.n_samples = int(n_samples)
        self.seed = seed
        self.v_max = v_max
        self.ensemble = None
        self.step_index = 0

    def step(self):
        from .seeding import substream

        rng = substream(self.seed, self.step_index)
        self.ensemble, self.wave = wave_swarm_step(
            self.ensemble,
            self.wave,
            self.potential,
            self.eps,
            rng,
            n_samples=self.n_samples,
            v_max=self.v_max,
        )
        self.step_index += 1
        return self.wave

    def run(self, steps):
        for _ in range(int(steps)):
            self.step()
        # Fold the final flight back into a wave so the caller sees the
        # state after the last slice, not before it.
        psi = deposit(self.ensemble, self.wave.grid)
        norm = np.sqrt(np.sum(np.abs(psi) ** 2) * self.wave.grid.cell_volume)
        if not norm > 0:
            raise AmplitudeUnderflowError("deposited wave vanished")
        self.wave = WaveField(psi=psi / norm, grid=self.wave.grid, units=self.wave.units)
        return self.wave

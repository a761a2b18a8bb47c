"""Reference Schrodinger integrator on the cell lattice.

Evolves a complex amplitude field with a Crank-Nicolson step on the
standard second-order stencil. The scheme is unitary up to solver
roundoff, so norm drift stays far below the 1e-8 per 1000 steps budget
and eigenstates of the discrete Hamiltonian keep an exactly stationary
density. Every engine in the package is judged against this integrator.

Also hosts the two-cell toy diagnostic: the coupled real/imaginary pair
dynamics restricted to two cells, whose density transfer rate and second
derivative have closed forms that the full integrator must reproduce.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .lattice import CellGrid, SimUnits, grid_gradient  # noqa: F401  (re-export convenience)


class TimeStepError(ValueError):
    """The requested time step exceeds the scheme's accuracy bound."""

    def __init__(self, dt, required):
        self.required = required
        super().__init__(
            f"time step {dt} too large for accurate phases; need dt <= {required}"
        )


@dataclass
class WaveField:
    """Complex amplitudes on the cell lattice, normalized so sum |psi|^2 dx^dim = 1."""

    psi: np.ndarray
    grid: CellGrid
    units: SimUnits

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=np.complex128).reshape(self.grid.shape)

    def norm(self):
        return float(np.sqrt(np.sum(np.abs(self.psi) ** 2) * self.grid.cell_volume))

    def normalized(self):
        return WaveField(psi=self.psi / self.norm(), grid=self.grid, units=self.units)

    def probability(self):
        """|psi|^2 per cell."""
        return np.abs(self.psi) ** 2

    def copy(self):
        return WaveField(psi=self.psi.copy(), grid=self.grid, units=self.units)


def _laplacian_1d(k, dx, periodic):
    main = np.full(k, -2.0)
    off = np.ones(k - 1)
    lap = sp.diags([off, main, off], [-1, 0, 1], format="lil")
    if periodic:
        lap[0, k - 1] = 1.0
        lap[k - 1, 0] = 1.0
    return (lap / dx**2).tocsr()


def hamiltonian(grid, units, potential=None):
    """Sparse discrete Hamiltonian: -hbar^2/(2M) Laplacian + V.

    Reflecting grids use hard walls (the amplitude is pinned to zero
    outside the domain); periodic grids wrap the stencil.
    """
    k = grid.cells_per_axis
    periodic = grid.boundary == "periodic"
    lap1 = _laplacian_1d(k, grid.dx, periodic)
    eye = sp.identity(k, format="csr")
    lap = None
    for u in range(grid.dimension):
        parts = [lap1 if v == u else eye for v in range(grid.dimension)]
        term = parts[0]
        for p in parts[1:]:
            term = sp.kron(term, p, format="csr")
        lap = term if lap is None else lap + term
    h = (-(units.hbar**2) / (2.0 * units.particle_mass)) * lap
    if potential is not None:
        v = np.asarray(potential.values, dtype=np.float64).reshape(-1)
        h = h + sp.diags(v)
    return h.tocsc()


def _accuracy_bound(grid, units, potential):
    # Largest stencil eigenvalue plus potential range; phases above ~1 rad
    # per step are numerically stable under Crank-Nicolson but no longer
    # accurate, so they are refused.
    e_kin = 2.0 * grid.dimension * units.hbar**2 / (units.particle_mass * grid.dx**2)
    e_pot = float(np.max(np.abs(potential.values))) if potential is not None else 0.0
    return units.hbar / (e_kin + e_pot)


def evolve(wave, potential, dt, steps=1):
    """Advance the wave by steps * dt with Crank-Nicolson; returns a new field.

    Refuses dt beyond the accuracy bound, reporting the required value.
    Negative dt runs the evolution backward (time reversal).
    """
    grid, units = wave.grid, wave.units
    bound = _accuracy_bound(grid, units, potential)
    if abs(dt) > bound:
        raise TimeStepError(dt, bound)
    h = hamiltonian(grid, units, potential)
    alpha = 1j * dt / (2.0 * units.hbar)
    eye = sp.identity(grid.n_cells, format="csc", dtype=np.complex128)
    forward = spla.splu((eye + alpha * h).tocsc())
    backward = (eye - alpha * h).tocsr()
    psi = wave.psi.reshape(-1).astype(np.complex128)
    for _ in range(int(steps)):
        psi = forward.solve(backward @ psi)
    return WaveField(psi=psi.reshape(grid.shape), grid=grid, units=units)


def energy(wave, potential=None):
    """Expectation <psi|H|psi> on the lattice (real by hermiticity)."""
    h = hamiltonian(wave.grid, wave.units, potential)
    psi = wave.psi.reshape(-1)
    val = np.vdot(psi, h @ psi) * wave.grid.cell_volume
    return float(val.real)


def ground_state(grid, units, potential=None):
    """Lowest eigenvector of the discrete Hamiltonian, as a WaveField.

    This is the state that is exactly stationary under evolve(); the
    continuum ground state is only stationary up to O(dx^2) sloshing.
    """
    h = hamiltonian(grid, units, potential)
    if grid.n_cells <= 2048:
        vals, vecs = scipy.linalg.eigh(h.toarray())
        vec = vecs[:, np.argmin(vals)]
    else:
        vals, vecs = spla.eigsh(h, k=1, which="SA")
        vec = vecs[:, 0]
    # Fix the irrelevant global sign so outputs are reproducible.
    pivot = np.argmax(np.abs(vec))
    vec = vec * np.sign(vec[pivot])
    wave = WaveField(psi=vec.reshape(grid.shape), grid=grid, units=units)
    return wave.normalized()


def gaussian_packet(grid, units, sigma0, k0=0.0, center=None):
    """Normalized Gaussian wave packet; |psi|^2 has standard deviation sigma0.

    The free packet widens as sigma(t)^2 = sigma0^2 + (hbar t / (2 M sigma0))^2.
    k0 boosts the packet along axis 0.
    """
    mesh = grid.meshgrid()
    if center is None:
        center = np.zeros(grid.dimension)
    r2 = sum((mesh[u] - center[u]) ** 2 for u in range(grid.dimension))
    psi = np.exp(-r2 / (4.0 * sigma0**2) + 1j * k0 * mesh[0])
    wave = WaveField(psi=psi, grid=grid, units=units)
    return wave.normalized()


def packet_width(wave, axis=0):
    """Standard deviation of |psi|^2 along one axis."""
    prob = wave.probability() * wave.grid.cell_volume
    prob = prob / prob.sum()
    x = wave.grid.meshgrid()[axis]
    mean = float(np.sum(prob * x))
    return float(np.sqrt(np.sum(prob * (x - mean) ** 2)))


def _two_cell_hamiltonian(v_pair, gamma, hbar):
    # Frequency-unit generator of the restricted two-cell dynamics:
    # i d/dt (psi1, psi2) = [[v1, -g], [-g, v2]] (psi1, psi2).
    v1, v2 = float(v_pair[0]) / hbar, float(v_pair[1]) / hbar
    return np.array([[v1, -gamma], [-gamma, v2]], dtype=np.complex128)


def _two_cell_propagate(psi_pair, v_pair, gamma, hbar, t):
    h = _two_cell_hamiltonian(v_pair, gamma, hbar)
    u = scipy.linalg.expm(-1j * h * t)
    return u @ np.asarray(psi_pair, dtype=np.complex128)


def two_cell_locality_check(psi_pair, v_pair, gamma, hbar=1.0):
    """Density transfer rates of the two-cell toy dynamics.

    Returns (d rho1/dt, d rho2/dt). The rates are equal and opposite by
    construction; the closed form 2*gamma*(Im psi1 * Re psi2 - Re psi1 *
    Im psi2) is cross-checked against a short numerical propagation
    before returning. Any constant shift added to both potential values
    is phase-only and cancels from the rates.
    """
    psi = np.asarray(psi_pair, dtype=np.complex128)
    r1 = 2.0 * gamma * (psi[0].imag * psi[1].real - psi[0].real * psi[1].imag)
    rates = np.array([r1, -r1])

    scale = max(abs(gamma), np.max(np.abs(np.asarray(v_pair, dtype=float))) / hbar, 1.0)
    dt = 1e-6 / scale
    fwd = np.abs(_two_cell_propagate(psi, v_pair, gamma, hbar, dt)) ** 2
    bwd = np.abs(_two_cell_propagate(psi, v_pair, gamma, hbar, -dt)) ** 2
    numeric = (fwd - bwd) / (2.0 * dt)
    if not np.allclose(numeric, rates, atol=1e-6 * max(scale, 1.0) ** 2, rtol=1e-5):
        raise RuntimeError("closed-form rate disagrees with propagated dynamics")
    return float(rates[0]), float(rates[1])


def second_derivative_check(psi_pair, v_pair, gamma, hbar=1.0):
    """Second time derivative of the two cells' densities.

    Closed form per cell: 2*gamma^2*(rho_other - rho_self)
    + 2*gamma*(V_other - V_self)/hbar * (Re psi1 Re psi2 + Im psi1 Im psi2),
    verified against a numerical second difference of the propagated
    density before returning. The cross term vanishes identically when
    the two potential values agree.
    """
    psi = np.asarray(psi_pair, dtype=np.complex128)
    v1, v2 = float(v_pair[0]) / hbar, float(v_pair[1]) / hbar
    rho = np.abs(psi) ** 2
    overlap = psi[0].real * psi[1].real + psi[0].imag * psi[1].imag
    a1 = 2.0 * gamma**2 * (rho[1] - rho[0]) + 2.0 * gamma * (v2 - v1) * overlap
    a2 = 2.0 * gamma**2 * (rho[0] - rho[1]) + 2.0 * gamma * (v1 - v2) * overlap
    closed = np.array([a1, a2])

    scale = max(abs(gamma), abs(v1), abs(v2), 1.0)
    dt = 1e-4 / scale
    fwd = np.abs(_two_cell_propagate(psi, v_pair, gamma, hbar, dt)) ** 2
    bwd = np.abs(_two_cell_propagate(psi, v_pair, gamma, hbar, -dt)) ** 2
    numeric = (fwd - 2.0 * rho + bwd) / dt**2
    if not np.allclose(numeric, closed, atol=1e-4 * scale**3, rtol=1e-4):
        raise RuntimeError("closed-form curvature disagrees with propagated dynamics")
    return float(closed[0]), float(closed[1])

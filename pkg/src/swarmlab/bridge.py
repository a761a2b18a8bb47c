"""Conversions between wave fields and swarms, in both directions.

Sampling draws positions from |psi|^2 and turns the local phase gradient
into integer mover counts. Restoration inverts this: the amplitude is
the square root of the measured density and the phase is rebuilt cell by
cell from mean sample velocities along axis-aligned lattice paths, with
phi = 0 at a reference cell. The per-edge increment is

    dphi = k * dx^2 * v_edge * dx,   k = M / (hbar * dx^2),

the unique constant for which a plane wave's velocity v = hbar*k0/M maps
back to its own phase slope k0. Closed lattice loops of these increments
vanish for vortex-free states and count 2*pi per enclosed vortex, which
contour_residual exposes directly.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np

from .lattice import EmptyCellError, Swarm, grid_gradient
from .oracle import WaveField


@dataclass
class BridgeConfig:
    """Phase restoration constants; build with for_grid()."""

    phase_constant: float
    reference_cell: int = 0
    contour_tolerance: float = 0.1
    use_arcsin: bool = False
    subcell_min_count: int = 32

    @classmethod
    def for_grid(cls, units, grid, **kwargs):
        return cls(phase_constant=units.particle_mass / (units.hbar * grid.dx**2), **kwargs)


def madelung_velocity(wave):
    """Per-cell mean velocity field (hbar/M) Im(psi* grad psi)/|psi|^2.

    Gauge-safe: evaluated from psi directly, no phase unwrapping. Cells
    with negligible probability get zero velocity. Shape grid.shape+(dim,).
    """
    grid, units = wave.grid, wave.units
    psi = wave.psi
    grad = grid_gradient(psi, grid)
    prob = np.abs(psi) ** 2
    vel = np.zeros(grid.shape + (grid.dimension,))
    tiny = prob.max() * 1e-12
    ok = prob > tiny
    for u in range(grid.dimension):
        cur = np.imag(np.conj(psi) * grad[..., u])
        vel[..., u][ok] = (units.hbar / units.particle_mass) * cur[ok] / prob[ok]
    return vel


def sample_swarm(wave, n, rng):
    """Draw an n-sample swarm whose density follows |psi|^2 and whose
    per-cell mean velocity matches the wave's phase gradient.

    Positions are i.i.d.: a multinomial over cells by probability mass,
    uniform placement inside each cell. Integer mover counts per axis
    approximate N_cell * v / c; the remainder of each cell rests.
    """
    grid, units = wave.grid, wave.units
    if abs(wave.norm() - 1.0) > 1e-8:
        raise ValueError("wave must be normalized before sampling")
    if n < 1000:
        raise ValueError("need at least 1000 samples for a usable swarm")
    prob = (np.abs(wave.psi) ** 2).reshape(-1) * grid.cell_volume
    prob = np.clip(prob, 0.0, None)
    prob = prob / prob.sum()
    counts = rng.multinomial(int(n), prob)

    occupied = np.flatnonzero(counts)
    reps = counts[occupied]
    flat = np.repeat(occupied, reps)
    coords = np.empty((flat.size, grid.dimension), dtype=np.int64)
    rem = flat
    for u in range(grid.dimension - 1, -1, -1):
        coords[:, u] = rem % grid.cells_per_axis
        rem = rem // grid.cells_per_axis
    pos = grid.positions_in_cells(coords, rng)

    vel = madelung_velocity(wave).reshape(grid.n_cells, grid.dimension)
    c = units.limit_speed
    movers = np.rint(counts[:, None] * vel / c).astype(np.int64)
    # A cell cannot host more movers than samples; scale down if ever hit.
    excess = np.abs(movers).sum(axis=1) > counts
    if np.any(excess):
        total = np.abs(movers[excess]).sum(axis=1)
        movers[excess] = np.floor(
            movers[excess] * (counts[excess] / total)[:, None]
        ).astype(np.int64)

    axes = np.full(n, -1, dtype=np.int8)
    signs = np.zeros(n, dtype=np.int8)
    starts = np.concatenate(([0], np.cumsum(reps)))
    for row, cell in enumerate(occupied):
        base = starts[row]
        for u in range(grid.dimension):
            m = movers[cell, u]
            take = abs(int(m))
            if take:
                axes[base : base + take] = u
                signs[base : base + take] = 1 if m > 0 else -1
                base += take
    return Swarm(pos, grid, units, axes=axes, signs=signs)


def cell_mean_velocity(swarm):
    """Mean velocity per cell and axis, c * net_movers / N_cell."""
    grid = swarm.grid
    flat = swarm.flat_cells()
    counts = np.bincount(flat, minlength=grid.n_cells)
    vel = np.zeros((grid.n_cells, grid.dimension))
    for u in range(grid.dimension):
        up = (swarm.axes == u) & (swarm.signs > 0)
        dn = (swarm.axes == u) & (swarm.signs < 0)
        net = np.bincount(flat[up], minlength=grid.n_cells) - np.bincount(
            flat[dn], minlength=grid.n_cells
        )
        ok = counts > 0
        vel[ok, u] = swarm.units.limit_speed * net[ok] / counts[ok]
    return vel, counts


def edge_velocities(swarm, config):
    """Mean velocity at each cell face along each axis.

    Face f along axis u sits between cell i (coordinate f) and cell i+1.
    When enough samples lie within dx/4 of the face the estimate uses
    only that sub-cell strip; otherwise it averages the two whole-cell
    means. Returns a list of flat arrays, one per axis, indexed by the
    lower cell's flat index.
    """
    grid = swarm.grid
    k = grid.cells_per_axis
    cell_vel, _ = cell_mean_velocity(swarm)
    coords = grid.cell_coords(swarm.pos)
    flat = grid.flat_from_coords(coords)
    local = (swarm.pos + grid.extent / 2.0) / grid.dx - coords  # in [0, 1)
    out = []
    stride = np.zeros(grid.dimension, dtype=np.int64)
    s = 1
    for u in range(grid.dimension - 1, -1, -1):
        stride[u] = s
        s *= k
    for u in range(grid.dimension):
        upper = local[:, u] >= 0.75
        lower = local[:, u] < 0.25
        # Contributions keyed by the face's lower-cell flat index.
        face_of_upper = flat[upper]
        below = coords[lower].copy()
        below[:, u] = (below[:, u] - 1) % k
        face_of_lower = grid.flat_from_coords(below)
        idx = np.concatenate([face_of_upper, face_of_lower])
        width = np.concatenate(
            [np.ones(face_of_upper.size), np.ones(face_of_lower.size)]
        )
        strip_n = np.bincount(idx, weights=width, minlength=grid.n_cells)
        mover_sel_up = upper & (swarm.axes == u)
        mover_sel_dn = lower & (swarm.axes == u)
        net = np.zeros(grid.n_cells)
        if np.any(mover_sel_up):
            net += np.bincount(
                flat[mover_sel_up],
                weights=swarm.signs[mover_sel_up].astype(np.float64),
                minlength=grid.n_cells,
            )
        if np.any(mover_sel_dn):
            below_m = coords[mover_sel_dn].copy()
            below_m[:, u] = (below_m[:, u] - 1) % k
            net += np.bincount(
                grid.flat_from_coords(below_m),
                weights=swarm.signs[mover_sel_dn].astype(np.float64),
                minlength=grid.n_cells,
            )
        neighbor = np.arange(grid.n_cells) + stride[u]
        coord_u = (np.arange(grid.n_cells) // stride[u]) % k
        wrap = coord_u == k - 1
        neighbor[wrap] -= k * stride[u]
        whole = 0.5 * (cell_vel[:, u] + cell_vel[neighbor, u])
        strip_ok = strip_n >= config.subcell_min_count
        v_face = np.where(
            strip_ok,
            swarm.units.limit_speed * np.divide(net, np.maximum(strip_n, 1)),
            whole,
        )
        out.append(v_face)
    return out


def _phase_increment(v_face, dx, units, config, rho_from=None, rho_to=None):
    raw = (units.particle_mass / units.hbar) * v_face * dx
    if not config.use_arcsin:
        return raw
    ratio = 1.0
    if rho_from is not None and rho_to and rho_to > 0:
        ratio = np.sqrt(rho_from / rho_to)
    return float(np.arcsin(np.clip(raw * ratio, -1.0, 1.0)))


def restore_wave(swarm, config, report=None):
    """Rebuild the wave field from a swarm: amplitude from the density,
    phase from a breadth-first integration of face velocities.

    Disconnected occupied regions are restored independently, each with
    its own zero reference; the optional report dict receives the
    component count and the number of empty cells.
    """
    grid, units = swarm.grid, swarm.units
    flat = swarm.flat_cells()
    counts = np.bincount(flat, minlength=grid.n_cells)
    amp = np.sqrt(counts / (swarm.n * grid.cell_volume))
    v_faces = edge_velocities(swarm, config)

    k = grid.cells_per_axis
    stride = np.zeros(grid.dimension, dtype=np.int64)
    s = 1
    for u in range(grid.dimension - 1, -1, -1):
        stride[u] = s
        s *= k
    periodic = grid.boundary == "periodic"

    def neighbors(cell):
        coords = [(cell // stride[u]) % k for u in range(grid.dimension)]
        for u in range(grid.dimension):
            cu = coords[u]
            if cu + 1 < k:
                yield cell + stride[u], u, +1, cell
            elif periodic:
                yield cell - (k - 1) * stride[u], u, +1, cell
            if cu - 1 >= 0:
                yield cell - stride[u], u, -1, cell - stride[u]
            elif periodic:
                yield cell + (k - 1) * stride[u], u, -1, cell + (k - 1) * stride[u]

    phase = np.zeros(grid.n_cells)
    visited = np.zeros(grid.n_cells, dtype=bool)
    occupied = counts > 0
    components = 0
    ref = config.reference_cell
    if not np.isscalar(ref):
        ref = int(grid.flat_from_coords(np.asarray(ref)))
    order = np.concatenate(([ref], np.flatnonzero(occupied)))
    for start in order:
        if visited[start] or not occupied[start]:
            continue
        components += 1
        visited[start] = True
        queue = deque([int(start)])
        while queue:
            cur = queue.popleft()
            for nxt, u, direction, face_cell in neighbors(cur):
                if visited[nxt] or not occupied[nxt]:
                    continue
                dphi = _phase_increment(
                    v_faces[u][face_cell],
                    grid.dx,
                    units,
                    config,
                    rho_from=counts[cur],
                    rho_to=counts[nxt],
                )
                phase[nxt] = phase[cur] + direction * dphi
                visited[nxt] = True
                queue.append(nxt)
    if report is not None:
        report["components"] = components
        report["empty_cells"] = int((~occupied).sum())
    psi = amp * np.exp(1j * phase)
    wave = WaveField(psi=psi.reshape(grid.shape), grid=grid, units=units)
    return wave.normalized()


def contour_residual(swarm, loop_of_cells, config):
    """Summed phase increments around a closed axis-aligned lattice loop.

    Near zero for vortex-free states; near 2*pi times the winding number
    when the loop encloses a phase vortex. Cells on the loop must be
    occupied.
    """
    grid = swarm.grid
    k = grid.cells_per_axis
    flat_loop = []
    for cell in loop_of_cells:
        if np.isscalar(cell) or isinstance(cell, (int, np.integer)):
            flat_loop.append(int(cell))
        else:
            flat_loop.append(int(grid.flat_from_coords(np.asarray(cell))))
    counts = np.bincount(swarm.flat_cells(), minlength=grid.n_cells)
    for cell in flat_loop:
        if counts[cell] == 0:
            raise EmptyCellError(f"loop passes through empty cell {cell}")
    v_faces = edge_velocities(swarm, config)
    stride = np.zeros(grid.dimension, dtype=np.int64)
    s = 1
    for u in range(grid.dimension - 1, -1, -1):
        stride[u] = s
        s *= k
    total = 0.0
    m = len(flat_loop)
    for i in range(m):
        a, b = flat_loop[i], flat_loop[(i + 1) % m]
        step_u = None
        for u in range(grid.dimension):
            ca = (a // stride[u]) % k
            cb = (b // stride[u]) % k
            if ca == cb:
                continue
            delta = (cb - ca) % k
            if delta == 1:
                found = (u, +1, a)
            elif delta == k - 1:
                found = (u, -1, b)
            else:
                raise ValueError("loop cells must be lattice neighbors")
            if step_u is not None:
                raise ValueError("loop cells must differ along exactly one axis")
            step_u = found
        if step_u is None:
            raise ValueError("consecutive loop cells must differ")
        u, direction, face_cell = step_u
        total += direction * _phase_increment(
            v_faces[u][face_cell], grid.dx, swarm.units, config,
            rho_from=counts[a], rho_to=counts[b],
        )
    return float(total)


def fidelity(wave_a, wave_b):
    """|<a|b>| on the lattice measure."""
    overlap = np.vdot(wave_a.psi.reshape(-1), wave_b.psi.reshape(-1))
    return float(np.abs(overlap) * wave_a.grid.cell_volume)


def phase_rms(restored, reference, min_weight=1e-6):
    """Probability-weighted RMS phase mismatch, gauge-fixed, mod 2*pi.

    The global phase offset is removed by the weighted circular mean of
    the pointwise mismatch; cells below min_weight of the peak
    probability are ignored (their phase is undefined noise).
    """
    w = reference.probability().reshape(-1)
    mask = w > w.max() * min_weight
    w = w[mask]
    diff = np.angle(restored.psi.reshape(-1)[mask]) - np.angle(
        reference.psi.reshape(-1)[mask]
    )
    mean = np.angle(np.sum(w * np.exp(1j * diff)))
    residual = np.angle(np.exp(1j * (diff - mean)))
    return float(np.sqrt(np.sum(w * residual**2) / w.sum()))

"""Benchmark dynamical systems, fixed-step integration, and trajectory data.

Two benchmark plants: a two-dimensional slow-fast system with a stable fixed
point away from the origin, and a damped cubic oscillator chain that stands in
for a high-dimensional soft body.  Trajectories are generated with classical
fixed-step RK4 under zero-order-hold inputs, and datasets round-trip through
one CSV per trajectory plus a JSON manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np


class DivergenceError(RuntimeError):
    """Integration produced a non-finite state."""

    def __init__(self, step: int, t: float):
        super().__init__(f"non-finite state at step {step} (t={t:.6g})")
        self.step = step
        self.t = t


# ---------------------------------------------------------------------------
# vector fields


def slow_fast_field(x, u, params) -> np.ndarray:
    """Two-dimensional system with a fast coordinate slaved to the slow one.

    ``dx1 = lam*x1*(1 - x1^2) + alpha*u1`` and
    ``dx2 = (x1^2 - x2)/eps + beta*u2``; requires ``lam, eps > 0``.
    The timescale ratio ``1/eps`` makes x2 collapse onto the parabola
    ``x2 = x1^2`` much faster than x1 evolves.
    """
    lam, eps = params["lam"], params["eps"]
    alpha, beta = params["alpha"], params["beta"]
    if lam <= 0 or eps <= 0:
        raise ValueError("lam and eps must be positive")
    x1, x2 = x[0], x[1]
    u1, u2 = (u[0], u[1]) if u is not None and len(u) else (0.0, 0.0)
    return np.array(
        [
            lam * x1 * (1.0 - x1 * x1) + alpha * u1,
            (x1 * x1 - x2) / eps + beta * u2,
        ]
    )


def slow_fast_jacobian(x, params) -> np.ndarray:
    """Analytic Jacobian of the unforced slow-fast field."""
    lam, eps = params["lam"], params["eps"]
    x1 = x[0]
    return np.array([[lam * (1.0 - 3.0 * x1 * x1), 0.0], [2.0 * x1 / eps, -1.0 / eps]])


def chain_field(x, u, params, forced: Sequence[int]) -> np.ndarray:
    """Damped cubic oscillator chain with unit masses.

    State is ``(q_1..q_L, v_1..v_L)``.  Mass 1 is anchored to a wall; each
    link carries a linear+cubic spring (``k``, ``k3``) and a linear dashpot
    (``c``), so the origin is the unique equilibrium and damping grows with
    mode frequency.  Inputs are forces on the ``forced`` masses, scaled by
    ``input_gain``.
    """
    k, k3, c = params["k"], params["k3"], params["c"]
    gain = params["input_gain"]
    if k <= 0 or c <= 0 or k3 < 0:
        raise ValueError("need k > 0, c > 0, k3 >= 0")
    L = x.size // 2
    q, v = x[:L], x[L:]
    ext = np.empty(L)  # spring extensions, wall spring first
    ext[0] = q[0]
    ext[1:] = q[1:] - q[:-1]
    rate = np.empty(L)
    rate[0] = v[0]
    rate[1:] = v[1:] - v[:-1]
    tension = k * ext + k3 * ext**3 + c * rate
    f = np.empty(L)
    f[:-1] = -tension[:-1] + tension[1:]
    f[-1] = -tension[-1]
    if u is not None and len(u):
        f[list(forced)] += gain * np.asarray(u, dtype=float)
    return np.concatenate([v, f])


def chain_linear_matrix(L: int, k: float, c: float) -> np.ndarray:
    """State matrix of the linearized chain, useful for spectrum checks."""
    T = 2.0 * np.eye(L) - np.eye(L, k=1) - np.eye(L, k=-1)
    T[-1, -1] = 1.0
    A = np.zeros((2 * L, 2 * L))
    A[:L, L:] = np.eye(L)
    A[L:, :L] = -k * T
    A[L:, L:] = -c * T
    return A


# ---------------------------------------------------------------------------
# system specifications


@dataclass
class SystemSpec:
    """Benchmark vector-field definition.

    ``rhs(x, u)`` is the full-state field, ``equilibrium`` a stable fixed
    point of the unforced dynamics, and ``observed`` the state indices that
    form the observable vector.
    """

    name: str
    state_dim: int
    input_dim: int
    parameters: dict
    equilibrium: np.ndarray
    rhs: Callable[[np.ndarray, Optional[np.ndarray]], np.ndarray]
    observed: np.ndarray

    @property
    def observable_dim(self) -> int:
        return len(self.observed)

    def observe(self, states: np.ndarray) -> np.ndarray:
        """Apply the observable map to a state vector or snapshot matrix."""
        return states[self.observed] if states.ndim == 1 else states[self.observed, :]

    def jacobian_fd(self, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
        """Central finite-difference Jacobian of the unforced field."""
        n = self.state_dim
        J = np.zeros((n, n))
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            J[:, i] = (self.rhs(x + e, None) - self.rhs(x - e, None)) / (2 * h)
        return J

    def box(self, half_widths) -> np.ndarray:
        """Axis-aligned box around the equilibrium, shape (state_dim, 2)."""
        hw = np.broadcast_to(np.asarray(half_widths, dtype=float), (self.state_dim,))
        return np.stack([self.equilibrium - hw, self.equilibrium + hw], axis=1)


def slow_fast_system(
    lam: float = 0.1,
    eps: float = 0.1,
    alpha: float = 0.2,
    beta: float = 0.2,
) -> SystemSpec:
    """Slow-fast benchmark observed in full state, equilibrium at (1, 1)."""
    params = {"lam": lam, "eps": eps, "alpha": alpha, "beta": beta}
    return SystemSpec(
        name="slow_fast",
        state_dim=2,
        input_dim=2,
        parameters=params,
        equilibrium=np.array([1.0, 1.0]),
        rhs=lambda x, u: slow_fast_field(x, u, params),
        observed=np.array([0, 1]),
    )


def chain_system(
    L: int = 30,
    k: float = 900.0,
    k3: float = 3.0e5,
    c: float = 190.0,
    input_gain: float = 10.0,
    forced_masses: Optional[Sequence[int]] = None,
    observed_masses: Optional[Sequence[int]] = None,
) -> SystemSpec:
    """Oscillator-chain benchmark (state dimension ``2L``).

    By default three masses are forced and the positions of the last three
    masses are observed; both index sets are configurable (0-based mass
    indices).
    """
    if L < 2:
        raise ValueError("chain needs at least two masses")
    if forced_masses is None:
        forced_masses = (L // 3 - 1, 2 * L // 3 - 1, L - 1)
    if observed_masses is None:
        observed_masses = (L - 3, L - 2, L - 1)
    forced = tuple(int(i) for i in forced_masses)
    obs = tuple(int(i) for i in observed_masses)
    if any(i < 0 or i >= L for i in forced + obs):
        raise ValueError("mass indices out of range")
    params = {"k": k, "k3": k3, "c": c, "input_gain": input_gain, "L": L}
    return SystemSpec(
        name="chain",
        state_dim=2 * L,
        input_dim=len(forced),
        parameters={**params, "forced_masses": forced, "observed_masses": obs},
        equilibrium=np.zeros(2 * L),
        rhs=lambda x, u: chain_field(x, u, params, forced),
        observed=np.array(obs),
    )


SYSTEM_BUILDERS = {"slow_fast": slow_fast_system, "chain": chain_system}


# ---------------------------------------------------------------------------
# integration


def rk4_step(f, x: np.ndarray, u, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step of ``xdot = f(x, u)`` with ``u`` held."""
    k1 = f(x, u)
    k2 = f(x + 0.5 * dt * k1, u)
    k3 = f(x + 0.5 * dt * k2, u)
    k4 = f(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(
    system: SystemSpec,
    x0: np.ndarray,
    input_fn: Optional[Callable[[float], np.ndarray]],
    t_span: float,
    dt: float,
    substeps: int = 1,
):
    """Integrate the plant with fixed-step RK4 and zero-order-hold inputs.

    ``input_fn(t)`` is sampled at each snapshot time and held for the whole
    sampling interval (including internal substeps, which exist only to keep
    stiff plants inside the RK4 stability region).  Returns ``(times,
    states)`` with ``N = t_span/dt + 1`` snapshot columns.

    Raises :class:`DivergenceError` with the failing step index if the state
    leaves the space of finite vectors.
    """
    if dt <= 0 or t_span <= 0:
        raise ValueError("dt and t_span must be positive")
    n_steps = int(round(t_span / dt))
    if abs(n_steps * dt - t_span) > 1e-9 * max(1.0, t_span):
        raise ValueError("t_span must be a positive multiple of dt")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (system.state_dim,):
        raise ValueError(f"x0 must have shape ({system.state_dim},)")
    times = np.arange(n_steps + 1) * dt
    states = np.empty((system.state_dim, n_steps + 1))
    states[:, 0] = x
    h = dt / substeps
    for k in range(n_steps):
        u = input_fn(times[k]) if input_fn is not None else None
        for _ in range(substeps):
            x = rk4_step(system.rhs, x, u, h)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(step=k + 1, t=times[k + 1])
        states[:, k + 1] = x
    return times, states


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Trajectory:
    times: np.ndarray
    observables: np.ndarray  # q x N
    inputs: Optional[np.ndarray] = None  # m x N, None for decay data

    @property
    def n_samples(self) -> int:
        return self.observables.shape[1]


@dataclass
class TrajectoryDataset:
    """Uniformly sampled observable trajectories with optional inputs."""

    dt: float
    trajectories: list
    metadata: dict = field(default_factory=dict)

    @property
    def is_controlled(self) -> bool:
        return any(tr.inputs is not None for tr in self.trajectories)

    def __post_init__(self):
        flags = {tr.inputs is not None for tr in self.trajectories}
        if len(flags) > 1:
            raise ValueError("input snapshots must be present on all trajectories or none")

    @property
    def observable_dim(self) -> int:
        return self.trajectories[0].observables.shape[0]


class SinusoidProtocol:
    """Per-channel sinusoid excitation with randomized parameters.

    Each channel gets ``u_j(t) = A_j sin(w_j t + phi_j)`` with amplitude,
    angular frequency, and phase drawn uniformly from the configured ranges.
    """

    def __init__(self, amp_range=(0.2, 1.0), freq_range=(0.5, 5.0), phase_range=(0.0, 2 * np.pi)):
        self.amp_range = tuple(amp_range)
        self.freq_range = tuple(freq_range)
        self.phase_range = tuple(phase_range)

    def sample(self, rng: np.random.Generator, m: int):
        amps = rng.uniform(*self.amp_range, size=m)
        freqs = rng.uniform(*self.freq_range, size=m)
        phases = rng.uniform(*self.phase_range, size=m)
        return lambda t: amps * np.sin(freqs * t + phases)

    def describe(self) -> dict:
        return {
            "kind": "sinusoid",
            "amp_range": list(self.amp_range),
            "freq_range": list(self.freq_range),
            "phase_range": list(self.phase_range),
        }


def generate_decay_dataset(
    system: SystemSpec,
    n_traj: int,
    ic_box: np.ndarray,
    t_span: float,
    dt: float,
    seed: int,
    substeps: int = 1,
) -> TrajectoryDataset:
    """Unforced trajectories from uniform initial conditions in ``ic_box``.

    ``ic_box`` has shape ``(state_dim, 2)`` with per-coordinate lower/upper
    bounds.  Deterministic for a fixed seed.
    """
    ic_box = np.asarray(ic_box, dtype=float)
    if ic_box.shape != (system.state_dim, 2):
        raise ValueError("ic_box must have shape (state_dim, 2)")
    rng = np.random.default_rng(seed)
    trajectories = []
    for _ in range(n_traj):
        x0 = rng.uniform(ic_box[:, 0], ic_box[:, 1])
        times, states = integrate(system, x0, None, t_span, dt, substeps=substeps)
        trajectories.append(Trajectory(times=times, observables=system.observe(states)))
    meta = {
        "system": system.name,
        "seed": seed,
        "protocol": "decay",
        "n_traj": n_traj,
        "t_span": t_span,
        "substeps": substeps,
    }
    return TrajectoryDataset(dt=dt, trajectories=trajectories, metadata=meta)


def generate_controlled_dataset(
    system: SystemSpec,
    n_traj: int,
    protocol: SinusoidProtocol,
    t_span: float,
    dt: float,
    seed: int,
    substeps: int = 1,
) -> TrajectoryDataset:
    """Excited trajectories paired with the exact applied input sequences."""
    rng = np.random.default_rng(seed)
    trajectories = []
    for _ in range(n_traj):
        u_fn = protocol.sample(rng, system.input_dim)
        times, states = integrate(
            system, system.equilibrium.copy(), u_fn, t_span, dt, substeps=substeps
        )
        U = np.stack([u_fn(t) for t in times], axis=1)
        trajectories.append(
            Trajectory(times=times, observables=system.observe(states), inputs=U)
        )
    meta = {
        "system": system.name,
        "seed": seed,
        "protocol": protocol.describe(),
        "n_traj": n_traj,
        "t_span": t_span,
        "substeps": substeps,
    }
    return TrajectoryDataset(dt=dt, trajectories=trajectories, metadata=meta)


# ---------------------------------------------------------------------------
# serialization (one CSV per trajectory + JSON manifest)

FLOAT_FMT = "%.17g"


def save_dataset(dataset: TrajectoryDataset, directory) -> None:
    """Write one CSV per trajectory plus ``manifest.json``; 17 significant digits."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    q = dataset.observable_dim
    files = []
    for i, tr in enumerate(dataset.trajectories):
        name = f"traj_{i:03d}.csv"
        cols = [tr.times[None, :], tr.observables]
        header = ["t"] + [f"y_{j + 1}" for j in range(q)]
        if tr.inputs is not None:
            cols.append(tr.inputs)
            header += [f"u_{j + 1}" for j in range(tr.inputs.shape[0])]
        table = np.vstack(cols).T
        with open(directory / name, "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in table:
                fh.write(",".join(FLOAT_FMT % v for v in row) + "\n")
        files.append(name)
    manifest = {
        "dt": dataset.dt,
        "observable_dim": q,
        "controlled": dataset.is_controlled,
        "files": files,
        "metadata": dataset.metadata,
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(directory) -> TrajectoryDataset:
    """Inverse of :func:`save_dataset`."""
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    q = manifest["observable_dim"]
    trajectories = []
    for name in manifest["files"]:
        table = np.loadtxt(directory / name, delimiter=",", skiprows=1, ndmin=2).T
        times = table[0]
        Y = table[1:1 + q]
        U = table[1 + q:] if manifest["controlled"] else None
        trajectories.append(Trajectory(times=times, observables=Y, inputs=U))
    return TrajectoryDataset(
        dt=manifest["dt"], trajectories=trajectories, metadata=manifest["metadata"]
    )

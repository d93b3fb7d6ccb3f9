"""Receding-horizon tracking control on the reduced model.

The continuous-time tracking objective (output deviation, input effort,
input rate, terminal weight) is discretized at the controller step, the
reduced dynamics are linearized along a nominal trajectory (exact RK4
sensitivities), and the resulting condensed box-constrained QP is solved
with an accelerated projected-gradient method.  A fixed number of
linearize-then-solve rounds per controller tick provides the sequential
convex programming outer loop.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from . import numkit
from .learning import SSMModel
from .systems import FLOAT_FMT, SystemSpec, rk4_step
import json


class EmbeddingShortfall(ValueError):
    """The controller has not seen enough samples to delay-embed."""


def _check_symmetric(M, name):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square")
    if np.linalg.norm(M - M.T) > 1e-12 * max(1.0, np.linalg.norm(M)):
        raise ValueError(f"{name} must be symmetric")
    return M


@dataclass
class MpcConfig:
    """Weights, horizon, bounds, and solver knobs for the tracking controller.

    ``C`` selects the performance outputs from the embedded observable
    (shape o x p).  ``stride`` is the number of horizon inputs executed per
    solve; ``dt_mpc`` the controller step.
    """

    Q: np.ndarray
    Q_f: np.ndarray
    R_u: np.ndarray
    R_delta: np.ndarray
    horizon: int
    dt_mpc: float
    u_min: np.ndarray
    u_max: np.ndarray
    C: np.ndarray
    stride: int = 1
    scp_iters: int = 3
    qp_tol: float = 1e-9
    qp_max_iters: int = 5000

    def __post_init__(self):
        self.Q = _check_symmetric(self.Q, "Q")
        self.Q_f = _check_symmetric(self.Q_f, "Q_f")
        self.R_u = _check_symmetric(self.R_u, "R_u")
        self.R_delta = _check_symmetric(self.R_delta, "R_delta")
        self.C = np.asarray(self.C, dtype=float)
        self.u_min = np.asarray(self.u_min, dtype=float).reshape(-1)
        self.u_max = np.asarray(self.u_max, dtype=float).reshape(-1)
        if np.any(self.u_min > self.u_max):
            raise ValueError("u_min must be elementwise <= u_max")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if not 1 <= self.stride <= self.horizon:
            raise ValueError("stride must lie in [1, horizon]")
        if self.dt_mpc <= 0:
            raise ValueError("dt_mpc must be positive")
        if np.min(np.linalg.eigvalsh(self.R_u)) <= 0:
            raise ValueError("R_u must be positive definite")
        for M, name in ((self.Q, "Q"), (self.Q_f, "Q_f"), (self.R_delta, "R_delta")):
            if np.min(np.linalg.eigvalsh(M)) < -1e-10:
                raise ValueError(f"{name} must be positive semidefinite")

    @property
    def n_outputs(self) -> int:
        return self.C.shape[0]

    @property
    def n_inputs(self) -> int:
        return len(self.u_min)


# ---------------------------------------------------------------------------
# linearization


def discretize_linearize(model: SSMModel, x_bar, u_bar, dt_mpc: float):
    """Exact sensitivities of one RK4 step of the reduced dynamics.

    Returns ``(A_d, B_d, c_d)`` such that the linearized step map is
    ``x+ = A_d x + B_d u + c_d``; the sensitivities differentiate the RK4
    update itself, so ``A_d`` matches the truncated exponential series of a
    linear model through fourth order.
    """
    x_bar = np.asarray(x_bar, dtype=float)
    u_bar = np.asarray(u_bar, dtype=float)
    n = model.n
    B = model.B_r if model.B_r is not None else np.zeros((n, 0))
    basis = numkit.polynomial_basis(n, 1, model.n_r)

    def f(x):
        return model.R @ numkit.monomials(x, basis) + B @ u_bar

    def J(x):
        return model.R @ numkit.monomial_jacobian(x, basis)

    if dt_mpc == 0.0:
        return np.eye(n), np.zeros_like(B), np.zeros(n)
    h = dt_mpc
    I = np.eye(n)
    k1 = f(x_bar)
    K1x, K1u = J(x_bar), B.copy()
    x2 = x_bar + 0.5 * h * k1
    J2 = J(x2)
    k2 = f(x2)
    K2x = J2 @ (I + 0.5 * h * K1x)
    K2u = J2 @ (0.5 * h * K1u) + B
    x3 = x_bar + 0.5 * h * k2
    J3 = J(x3)
    k3 = f(x3)
    K3x = J3 @ (I + 0.5 * h * K2x)
    K3u = J3 @ (0.5 * h * K2u) + B
    x4 = x_bar + h * k3
    J4 = J(x4)
    k4 = f(x4)
    K4x = J4 @ (I + h * K3x)
    K4u = J4 @ (h * K3u) + B
    phi = x_bar + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    A_d = I + (h / 6.0) * (K1x + 2 * K2x + 2 * K3x + K4x)
    B_d = (h / 6.0) * (K1u + 2 * K2u + 2 * K3u + K4u)
    c_d = phi - A_d @ x_bar - B_d @ u_bar
    if not (np.all(np.isfinite(A_d)) and np.all(np.isfinite(B_d)) and np.all(np.isfinite(c_d))):
        raise FloatingPointError("non-finite linearization sensitivities")
    return A_d, B_d, c_d


def linearize_output(model: SSMModel, C_sel: np.ndarray, x_bar):
    """First-order output map ``z ~ H x + h`` about ``x_bar``.

    The constant term absorbs the equilibrium output, so ``z`` is expressed
    in absolute (unshifted) coordinates.
    """
    x_bar = np.asarray(x_bar, dtype=float)
    z_eq = C_sel @ model.y_eq
    W = C_sel @ model.V_E
    if model.n_w >= 2 and model.W_nl.size:
        basis2 = numkit.polynomial_basis(model.n, 2, model.n_w)
        H = W + C_sel @ model.W_nl @ numkit.monomial_jacobian(x_bar, basis2)
        z0 = W @ x_bar + C_sel @ model.W_nl @ numkit.monomials(x_bar, basis2) + z_eq
    else:
        H = W
        z0 = W @ x_bar + z_eq
    return H, z0 - H @ x_bar


# ---------------------------------------------------------------------------
# condensed box QP


@dataclass
class QpResult:
    U: np.ndarray  # m x N input sequence
    converged: bool
    iterations: int
    pg_residual: float
    objective: float


def solve_tracking_qp(
    lin_dynamics: list,
    lin_outputs: list,
    x0: np.ndarray,
    z_ref: np.ndarray,
    config: MpcConfig,
    u_prev: np.ndarray,
    warm_start: Optional[np.ndarray] = None,
) -> QpResult:
    """Minimize the discretized tracking objective over box-bounded inputs.

    ``lin_dynamics`` holds ``(A_k, B_k, c_k)`` for steps ``k = 0..N-1`` and
    ``lin_outputs`` holds ``(H_k, h_k)`` for the predicted states
    ``x_1..x_N``; ``z_ref`` has one column per predicted state.  The stage
    terms are scaled by ``dt_mpc`` (integral discretization) and the
    terminal deviation additionally carries ``Q_f``.  Solved by accelerated
    projected gradient on the condensed problem, terminating when the
    unit-step projected-gradient residual drops below ``qp_tol``.
    """
    N = config.horizon
    m = config.n_inputs
    o = config.n_outputs
    n = x0.shape[0]
    if len(lin_dynamics) != N or len(lin_outputs) != N:
        raise ValueError("need one dynamics and one output linearization per step")
    if z_ref.shape != (o, N):
        raise ValueError(f"z_ref must have shape {(o, N)}")
    dt = config.dt_mpc

    # condense states: x_stack = S u_stack + w
    S = np.zeros((N * n, N * m))
    w = np.empty(N * n)
    A0, B0, c0 = lin_dynamics[0]
    S[:n, :m] = B0
    w[:n] = A0 @ x0 + c0
    for k in range(1, N):
        A, Bk, ck = lin_dynamics[k]
        S[k * n:(k + 1) * n, : k * m] = A @ S[(k - 1) * n:k * n, : k * m]
        S[k * n:(k + 1) * n, k * m:(k + 1) * m] = Bk
        w[k * n:(k + 1) * n] = A @ w[(k - 1) * n:k * n] + ck

    # outputs: z_stack = Hbig x_stack + hbig
    G = np.zeros((N * o, N * m))
    r = np.empty(N * o)
    for k in range(N):
        H, h = lin_outputs[k]
        G[k * o:(k + 1) * o, :] = H @ S[k * n:(k + 1) * n, :]
        r[k * o:(k + 1) * o] = H @ w[k * n:(k + 1) * n] + h - z_ref[:, k]

    # quadratic form
    Qt = np.zeros((N * o, N * o))
    for k in range(N):
        Qt[k * o:(k + 1) * o, k * o:(k + 1) * o] = dt * config.Q
    Qt[(N - 1) * o:, (N - 1) * o:] += config.Q_f
    Rt = np.kron(np.eye(N), dt * config.R_u)
    D = np.kron(np.eye(N), np.eye(m)) - np.kron(np.eye(N, k=-1), np.eye(m))
    e = np.zeros(N * m)
    e[:m] = u_prev
    Rd = np.kron(np.eye(N), dt * config.R_delta)

    H_qp = 2.0 * (G.T @ Qt @ G + Rt + D.T @ Rd @ D)
    g = 2.0 * (G.T @ Qt @ r - D.T @ Rd @ e)

    lb = np.tile(config.u_min, N)
    ub = np.tile(config.u_max, N)

    def clip(v):
        return np.minimum(np.maximum(v, lb), ub)

    def objective(v):
        return 0.5 * v @ H_qp @ v + g @ v

    def pg_residual(v):
        return float(np.max(np.abs(v - clip(v - (H_qp @ v + g)))))

    L = float(np.max(np.linalg.eigvalsh(H_qp)))
    x = clip(warm_start.reshape(-1, order="F").copy() if warm_start is not None else np.zeros(N * m))
    y = x.copy()
    t_acc = 1.0
    best_x, best_obj = x.copy(), objective(x)
    converged = False
    iters = 0
    for iters in range(1, config.qp_max_iters + 1):
        grad_y = H_qp @ y + g
        x_new = clip(y - grad_y / L)
        if objective(x_new) < best_obj:
            best_obj = objective(x_new)
            best_x = x_new.copy()
        if pg_residual(x_new) < config.qp_tol:
            x = x_new
            converged = True
            break
        # function-free adaptive restart
        if (y - x_new) @ (x_new - x) > 0:
            t_acc = 1.0
            y = x_new.copy()
        else:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_acc * t_acc))
            y = x_new + ((t_acc - 1.0) / t_next) * (x_new - x)
            t_acc = t_next
        x = x_new
    final = x if converged else best_x
    return QpResult(
        U=final.reshape(m, N, order="F"),
        converged=converged,
        iterations=iters,
        pg_residual=pg_residual(final),
        objective=objective(final),
    )


# ---------------------------------------------------------------------------
# receding-horizon controller


@dataclass
class SolveDiagnostics:
    t: float
    scp_rounds: int
    qp_iterations: list
    qp_residuals: list
    qp_converged: list
    plan_changes: list
    wall_time: float


class RecedingHorizonController:
    """Owns the observation buffer, warm starts, and the SCP loop."""

    def __init__(self, model: SSMModel, config: MpcConfig, reference: Callable[[float], np.ndarray]):
        if model.B_r is None:
            raise ValueError("model has no control matrix; fit B_r first")
        if config.C.shape[1] != model.p:
            raise ValueError("performance selector width must match the embedded dimension")
        if config.n_inputs != model.B_r.shape[1]:
            raise ValueError("input bound dimension must match the control matrix")
        self.model = model
        self.config = config
        self.reference = reference
        self._buffer = deque(maxlen=model.d + 1)
        self.u_prev = np.zeros(config.n_inputs)
        self._plan: Optional[np.ndarray] = None
        self.diagnostics: List[SolveDiagnostics] = []

    def prime(self, y_raw: np.ndarray) -> None:
        """Fill the observation history by holding the given sample."""
        self._buffer.clear()
        for _ in range(self.model.d + 1):
            self._buffer.append(np.asarray(y_raw, dtype=float).copy())

    def observe(self, y_raw: np.ndarray) -> None:
        self._buffer.append(np.asarray(y_raw, dtype=float).copy())

    def embedded_observable(self) -> np.ndarray:
        if len(self._buffer) < self.model.d + 1:
            raise EmbeddingShortfall(
                f"need {self.model.d + 1} samples, have {len(self._buffer)}"
            )
        return np.concatenate(list(self._buffer)[::-1])

    def current_output(self) -> np.ndarray:
        return self.config.C @ self.embedded_observable()

    def _rollout(self, x0: np.ndarray, U: np.ndarray) -> np.ndarray:
        from .rom import reduced_rhs

        N = self.config.horizon
        X = np.empty((self.model.n, N + 1))
        X[:, 0] = x0
        for k in range(N):
            X[:, k + 1] = rk4_step(
                lambda x, u: reduced_rhs(self.model, x, u), X[:, k], U[:, k], self.config.dt_mpc
            )
        return X

    def step(self, y_measured: np.ndarray, t: float) -> np.ndarray:
        """Solve the horizon problem at time ``t`` and return the inputs to apply.

        Pushes the measurement, charts it, runs ``scp_iters`` rounds of
        linearize-then-QP warm-started from the previous plan, and returns
        the first ``stride`` inputs clipped to the bounds (a no-op whenever
        the QP converged).
        """
        wall0 = time.monotonic()
        cfg = self.config
        model = self.model
        self.observe(y_measured)
        y_emb = self.embedded_observable()
        x0 = model.V_opt.T @ (y_emb - model.y_eq)

        N, m = cfg.horizon, cfg.n_inputs
        if self._plan is not None:
            U_nom = np.hstack(
                [self._plan[:, cfg.stride:], np.tile(self._plan[:, -1:], (1, cfg.stride))]
            )
        else:
            U_nom = np.zeros((m, N))
        z_ref = np.stack([self.reference(t + (k + 1) * cfg.dt_mpc) for k in range(N)], axis=1)

        diag = SolveDiagnostics(
            t=t, scp_rounds=0, qp_iterations=[], qp_residuals=[], qp_converged=[],
            plan_changes=[], wall_time=0.0,
        )
        qp = None
        for _ in range(cfg.scp_iters):
            X_nom = self._rollout(x0, U_nom)
            lin_dyn = [
                discretize_linearize(model, X_nom[:, k], U_nom[:, k], cfg.dt_mpc)
                for k in range(N)
            ]
            lin_out = [linearize_output(model, cfg.C, X_nom[:, k + 1]) for k in range(N)]
            qp = solve_tracking_qp(lin_dyn, lin_out, x0, z_ref, cfg, self.u_prev, warm_start=U_nom)
            diag.scp_rounds += 1
            diag.qp_iterations.append(qp.iterations)
            diag.qp_residuals.append(qp.pg_residual)
            diag.qp_converged.append(qp.converged)
            diag.plan_changes.append(float(np.linalg.norm(qp.U - U_nom)))
            U_nom = qp.U
        self._plan = U_nom
        applied = np.clip(U_nom[:, : cfg.stride], cfg.u_min[:, None], cfg.u_max[:, None])
        self.u_prev = applied[:, -1].copy()
        diag.wall_time = time.monotonic() - wall0
        self.diagnostics.append(diag)
        return applied


# ---------------------------------------------------------------------------
# closed loop


@dataclass
class ClosedLoopResult:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray
    reference: np.ndarray
    ise: float
    diagnostics: list = field(default_factory=list)
    completed: bool = True

    def summary(self, include_timing: bool = False) -> dict:
        qp_iters = [it for d in self.diagnostics for it in d.qp_iterations]
        out = {
            "ise": self.ise,
            "duration": float(self.times[-1]),
            "n_solves": len(self.diagnostics),
            "qp_iterations_max": int(np.max(qp_iters)) if qp_iters else 0,
            "qp_iterations_mean": float(np.mean(qp_iters)) if qp_iters else 0.0,
            "qp_all_converged": bool(
                all(all(d.qp_converged) for d in self.diagnostics)
            ),
            "completed": self.completed,
        }
        if include_timing:
            walls = [d.wall_time for d in self.diagnostics]
            out["solve_wall_time_mean"] = float(np.mean(walls)) if walls else 0.0
            out["solve_wall_time_max"] = float(np.max(walls)) if walls else 0.0
        return out

    def to_csv(self, path) -> None:
        o, m = self.outputs.shape[0], self.inputs.shape[0]
        header = (
            ["t"]
            + [f"z_{i + 1}" for i in range(o)]
            + [f"z_ref_{i + 1}" for i in range(o)]
            + [f"u_{i + 1}" for i in range(m)]
        )
        table = np.vstack([self.times[None, :], self.outputs, self.reference, self.inputs]).T
        with open(Path(path), "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in table:
                fh.write(",".join(FLOAT_FMT % v for v in row) + "\n")

    def to_json(self, path, include_timing: bool = False) -> None:
        Path(path).write_text(
            json.dumps(self.summary(include_timing), indent=2, sort_keys=True) + "\n"
        )


def run_closed_loop(
    plant: SystemSpec,
    model: SSMModel,
    config: MpcConfig,
    reference: Callable[[float], np.ndarray],
    duration: float,
    plant_dt: float,
    plant_substeps: int = 1,
    x0: Optional[np.ndarray] = None,
) -> ClosedLoopResult:
    """Alternate plant integration with receding-horizon solves.

    The controller runs every ``dt_mpc`` (an integer multiple of
    ``plant_dt``), re-solving every ``stride`` controller ticks and holding
    each planned input for one controller step.  The observation buffer is
    primed by holding the initial measurement, which is exact for runs that
    start at rest.
    """
    k_sub = int(round(config.dt_mpc / plant_dt))
    if abs(k_sub * plant_dt - config.dt_mpc) > 1e-9 or k_sub < 1:
        raise ValueError("dt_mpc must be a positive integer multiple of plant_dt")
    n_steps = int(round(duration / plant_dt))
    if abs(n_steps * plant_dt - duration) > 1e-9:
        raise ValueError("duration must be a multiple of plant_dt")

    ctrl = RecedingHorizonController(model, config, reference)
    x = np.asarray(x0, dtype=float).copy() if x0 is not None else plant.equilibrium.copy()
    ctrl.prime(plant.observe(x))

    times = np.arange(n_steps + 1) * plant_dt
    states = np.empty((plant.state_dim, n_steps + 1))
    inputs = np.zeros((config.n_inputs, n_steps + 1))
    outputs = np.empty((config.n_outputs, n_steps + 1))
    ref = np.stack([reference(t) for t in times], axis=1)

    states[:, 0] = x
    h = plant_dt / plant_substeps
    block = None
    u_current = np.zeros(config.n_inputs)
    completed = True
    for k in range(n_steps):
        t = times[k]
        y = plant.observe(x)
        if k % k_sub == 0:
            tick = k // k_sub
            if tick % config.stride == 0:
                block = ctrl.step(y, t)  # pushes the measurement itself
                u_current = block[:, 0]
            else:
                ctrl.observe(y)
                u_current = block[:, tick % config.stride]
        elif k > 0:
            ctrl.observe(y)
        outputs[:, k] = config.C @ ctrl.embedded_observable()
        inputs[:, k] = u_current
        for _ in range(plant_substeps):
            x = rk4_step(plant.rhs, x, u_current, h)
        if not np.all(np.isfinite(x)):
            completed = False
            times = times[: k + 2]
            states = states[:, : k + 2]
            inputs = inputs[:, : k + 2]
            outputs = outputs[:, : k + 2]
            ref = ref[:, : k + 2]
            states[:, k + 1] = np.nan
            outputs[:, k + 1] = outputs[:, k]
            inputs[:, k + 1] = u_current
            break
        states[:, k + 1] = x
    if completed:
        ctrl.observe(plant.observe(x))
        outputs[:, n_steps] = config.C @ ctrl.embedded_observable()
        inputs[:, n_steps] = u_current
    err = np.sum((outputs - ref) ** 2, axis=0)
    finite = np.isfinite(err)
    ise = float(np.trapezoid(err[finite], times[finite]))
    return ClosedLoopResult(
        times=times,
        states=states,
        inputs=inputs,
        outputs=outputs,
        reference=ref,
        ise=ise,
        diagnostics=ctrl.diagnostics,
        completed=completed,
    )


# ---------------------------------------------------------------------------
# reference paths


def circle_reference(center, radius: float, period: float) -> Callable[[float], np.ndarray]:
    """Planar circle traversed once per ``period``, starting at angle 0."""
    center = np.asarray(center, dtype=float)
    if center.shape != (2,):
        raise ValueError("circle references are planar (two outputs)")

    def ref(t: float) -> np.ndarray:
        th = 2.0 * np.pi * t / period
        return center + radius * np.array([np.cos(th), np.sin(th)])

    return ref


def figure_eight_reference(center, radius: float, period: float) -> Callable[[float], np.ndarray]:
    """Planar lemniscate ``(sin th, sin th cos th)`` scaled by ``radius``."""
    center = np.asarray(center, dtype=float)
    if center.shape != (2,):
        raise ValueError("figure-eight references are planar (two outputs)")

    def ref(t: float) -> np.ndarray:
        th = 2.0 * np.pi * t / period
        return center + radius * np.array([np.sin(th), np.sin(th) * np.cos(th)])

    return ref


def csv_reference(path) -> Callable[[float], np.ndarray]:
    """Reference interpolated from a CSV with columns ``t, z_1..z_o``.

    Linear interpolation between samples; the end values are held outside
    the tabulated range.
    """
    table = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2).T
    t_tab, z_tab = table[0], table[1:]

    def ref(t: float) -> np.ndarray:
        return np.array([np.interp(t, t_tab, z_tab[i]) for i in range(z_tab.shape[0])])

    return ref

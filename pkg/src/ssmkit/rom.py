"""The fitted reduced-order model as an executable object.

Chart/parameterization evaluation, the reduced vector field, open-loop
prediction from raw observable histories, and the MSE/ISE comparison metrics
used to score models against held-out trajectories.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import numkit
from .learning import SSMModel
from .systems import FLOAT_FMT, TrajectoryDataset, rk4_step


def chart(model: SSMModel, y: np.ndarray) -> np.ndarray:
    """Reduced coordinates of an equilibrium-shifted, delay-embedded observable."""
    y = np.asarray(y, dtype=float)
    if y.shape != (model.p,):
        raise ValueError(f"expected embedded observable of length {model.p}")
    return model.V_opt.T @ y


def parameterize(model: SSMModel, x_r: np.ndarray) -> np.ndarray:
    """Embedded observable on the manifold for reduced coordinates ``x_r``."""
    x_r = np.asarray(x_r, dtype=float)
    if x_r.shape != (model.n,):
        raise ValueError(f"expected reduced state of length {model.n}")
    return model.parameterize_vec(x_r)


def reduced_rhs(model: SSMModel, x_r: np.ndarray, u: Optional[np.ndarray] = None) -> np.ndarray:
    """Reduced vector field: polynomial dynamics plus the linear control term."""
    basis = numkit.polynomial_basis(model.n, 1, model.n_r)
    dx = model.R @ numkit.monomials(np.asarray(x_r, dtype=float), basis)
    if u is not None and model.B_r is not None and len(u):
        dx = dx + model.B_r @ np.asarray(u, dtype=float)
    return dx


@dataclass
class PredictionResult:
    """Open-loop prediction with optional ground-truth comparison.

    ``predicted``/``reference`` live in the embedded observable space; the
    squared error, MSE (time average), and ISE (trapezoidal time integral)
    are computed on the selected performance rows.
    """

    times: np.ndarray
    predicted: np.ndarray
    reference: Optional[np.ndarray]
    performance_rows: np.ndarray
    sq_err: Optional[np.ndarray]
    mse: Optional[float]
    ise: Optional[float]

    def summary(self) -> dict:
        return {
            "n_steps": len(self.times),
            "t_final": float(self.times[-1]),
            "mse": self.mse,
            "ise": self.ise,
        }

    def to_csv(self, path) -> None:
        header = ["t"] + [f"y_pred_{i + 1}" for i in range(self.predicted.shape[0])]
        cols = [self.times[None, :], self.predicted]
        if self.reference is not None:
            header += [f"y_true_{i + 1}" for i in range(self.reference.shape[0])]
            header += ["sq_err"]
            cols += [self.reference, self.sq_err[None, :]]
        table = np.vstack(cols).T
        with open(Path(path), "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in table:
                fh.write(",".join(FLOAT_FMT % v for v in row) + "\n")

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def _embed_initial_history(model: SSMModel, y0: np.ndarray, dt: float) -> np.ndarray:
    q, d = model.q, model.d
    y0 = np.asarray(y0, dtype=float)
    if y0.ndim == 1:
        y0 = y0[:, None]
    if y0.shape[0] != q or y0.shape[1] < d + 1:
        raise ValueError(
            f"initial history must provide at least {d + 1} columns of the "
            f"{q}-dimensional observable (got shape {y0.shape})"
        )
    window = y0[:, -(d + 1):] - model.y_eq[:q][:, None]
    return numkit.delay_embed(window, d, dt)[:, 0]


def predict_open_loop(
    model: SSMModel,
    y0: np.ndarray,
    u_seq: Optional[np.ndarray],
    t_span: float,
    dt: float,
    y_true: Optional[np.ndarray] = None,
    performance: Optional[np.ndarray] = None,
) -> PredictionResult:
    """Propagate the reduced model from a raw observable history.

    Parameters
    ----------
    y0 : array, shape (q, >= d+1)
        Raw observable history in chronological order; the newest column is
        the prediction start.  A bare q-vector is accepted when ``d == 0``.
    u_seq : array (m, N) or None
        Zero-order-held inputs per step (the final column is unused).
    t_span, dt : float
        Prediction horizon; ``N = t_span/dt + 1`` snapshots are produced.
    y_true : array (q, N + d), optional
        Raw ground-truth trajectory whose first ``d+1`` columns are the
        initial history; enables the error metrics.
    performance : array of int, optional
        Raw-observable coordinates scored by MSE/ISE.  Defaults to the whole
        un-delayed block (the most recent sample in the embedding).
    """
    n_steps = int(round(t_span / dt))
    if abs(n_steps * dt - t_span) > 1e-9 * max(1.0, t_span) or n_steps < 1:
        raise ValueError("t_span must be a positive multiple of dt")
    N = n_steps + 1
    if u_seq is not None:
        u_seq = np.asarray(u_seq, dtype=float)
        if u_seq.shape[1] < N - 1:
            raise ValueError(f"u_seq must provide at least {N - 1} input columns")
    e0 = _embed_initial_history(model, y0, dt)
    x = model.V_opt.T @ e0
    times = np.arange(N) * dt
    X = np.empty((model.n, N))
    X[:, 0] = x
    f = lambda xr, u: reduced_rhs(model, xr, u)
    for k in range(n_steps):
        u_k = u_seq[:, k] if u_seq is not None else None
        x = rk4_step(f, x, u_k, dt)
        X[:, k + 1] = x
    predicted = np.empty((model.p, N))
    for k in range(N):
        predicted[:, k] = model.parameterize_vec(X[:, k]) + model.y_eq

    if performance is None:
        performance = np.arange(model.q)
    performance = np.asarray(performance, dtype=int)

    reference = sq_err = mse = ise = None
    if y_true is not None:
        y_true = np.asarray(y_true, dtype=float)
        if y_true.shape != (model.q, N + model.d):
            raise ValueError(
                f"y_true must have shape (q, N + d) = {(model.q, N + model.d)}"
            )
        reference = numkit.delay_embed(y_true, model.d, dt)
        diff = predicted[performance, :] - reference[performance, :]
        sq_err = np.sum(diff * diff, axis=0)
        mse = float(np.mean(sq_err))
        ise = float(np.trapezoid(sq_err, times))
    return PredictionResult(
        times=times,
        predicted=predicted,
        reference=reference,
        performance_rows=performance,
        sq_err=sq_err,
        mse=mse,
        ise=ise,
    )


def evaluate_decay_suite(
    model: SSMModel,
    test_dataset: TrajectoryDataset,
    performance: Optional[np.ndarray] = None,
) -> dict:
    """Per-trajectory open-loop MSE on held-out decay data, with mean and spread."""
    mses = []
    for tr in test_dataset.trajectories:
        d = model.d
        n_steps = tr.n_samples - 1 - d
        if n_steps < 1:
            raise ValueError("test trajectory too short for the model's embedding")
        res = predict_open_loop(
            model,
            tr.observables[:, : d + 1],
            None,
            n_steps * test_dataset.dt,
            test_dataset.dt,
            y_true=tr.observables,
            performance=performance,
        )
        mses.append(res.mse)
    mses = np.asarray(mses)
    return {
        "per_trajectory_mse": mses.tolist(),
        "mean_mse": float(np.mean(mses)),
        "std_mse": float(np.std(mses, ddof=1)) if len(mses) > 1 else 0.0,
        "n_trajectories": len(mses),
    }

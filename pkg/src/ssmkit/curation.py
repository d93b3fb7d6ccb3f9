"""Data curation: derivatives, equilibrium shift, transient/near split.

Turns a decay dataset into the stacked snapshot matrices the fitting stage
consumes: per trajectory the observables are shifted to the estimated
equilibrium, delay-embedded, differenced in time, and split at a
user-specified sample count into a transient block (which carries the fiber
directions) and a near-manifold block (which carries the reduced dynamics).
The tangent basis comes from a truncated SVD of the near-manifold stack.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numkit
from .systems import TrajectoryDataset


class EmbeddingError(ValueError):
    """Observable dimension too small to embed the requested manifold."""


@dataclass
class CuratedData:
    """Outputs of the curation stage.

    All snapshot matrices live in the shifted, delay-embedded observable
    space of dimension ``p = q*(d+1)``.  ``trans_counts`` / ``near_counts``
    record the per-trajectory split so the stacks can be unambiguously
    unstacked.
    """

    Y_trans: np.ndarray
    Ydot_trans: np.ndarray
    Y_near: np.ndarray
    Ydot_near: np.ndarray
    V_E: np.ndarray
    y_eq: np.ndarray
    n: int
    d: int
    q: int
    dt: float
    trans_counts: list
    near_counts: list

    @property
    def p(self) -> int:
        return self.q * (self.d + 1)

    def validate(self) -> dict:
        """Residuals of the structural invariants (all should be tiny)."""
        return {
            "orthonormality": float(
                np.linalg.norm(self.V_E.T @ self.V_E - np.eye(self.n))
            ),
            "embedding_margin": self.p - (2 * self.n + 1),
        }


def estimate_equilibrium(dataset: TrajectoryDataset, tail_fraction: float = 0.1) -> np.ndarray:
    """Average the final ``tail_fraction`` of samples across all trajectories.

    Only meaningful for unforced data; a controlled dataset raises.
    Returns the equilibrium in raw observable coordinates (length q).
    """
    if dataset.is_controlled:
        raise ValueError("equilibrium must be estimated from unforced (decay) data")
    if not 0.0 < tail_fraction <= 1.0:
        raise ValueError("tail_fraction must lie in (0, 1]")
    tails = []
    for tr in dataset.trajectories:
        n_tail = max(1, int(np.ceil(tail_fraction * tr.n_samples)))
        tails.append(tr.observables[:, -n_tail:])
    return np.mean(np.hstack(tails), axis=1)


def _embed_and_differentiate(Y_raw, y_eq_raw, d, dt):
    shifted = Y_raw - y_eq_raw[:, None]
    Y = numkit.delay_embed(shifted, d, dt)
    Ydot = numkit.finite_difference(Y, dt)
    return Y, Ydot


def curate(
    dataset: TrajectoryDataset,
    N_T1: int,
    n: int,
    d: int,
    tail_fraction: float = 0.1,
    strict_embedding: bool = True,
) -> CuratedData:
    """Run the curation stage on a decay dataset.

    Parameters
    ----------
    dataset : TrajectoryDataset
        Unforced trajectories at a uniform sampling step.
    N_T1 : int
        Per-trajectory count of embedded samples assigned to the transient
        block.  ``N_T1 = 0`` sends everything to the near-manifold block.
    n : int
        Manifold dimension (columns of ``V_E``).
    d : int
        Delay count; the embedded dimension is ``p = q*(d+1)``.
    strict_embedding : bool
        Enforce ``p >= 2n+1``.  Disable only when the observable is the full
        state and no embedding is required.

    Notes
    -----
    Differencing happens on the embedded signal, before the split, so
    derivative columns align one-to-one with snapshot columns.
    """
    if N_T1 < 0:
        raise ValueError("N_T1 must be nonnegative")
    q = dataset.observable_dim
    p = q * (d + 1)
    if strict_embedding and p < 2 * n + 1:
        raise EmbeddingError(
            f"embedded dimension p={p} violates p >= 2n+1 = {2 * n + 1}; "
            "increase the delay count or disable strict embedding for "
            "full-state observables"
        )
    y_eq_raw = estimate_equilibrium(dataset, tail_fraction)
    trans_blocks, dtrans_blocks = [], []
    near_blocks, dnear_blocks = [], []
    trans_counts, near_counts = [], []
    for i, tr in enumerate(dataset.trajectories):
        if tr.n_samples <= N_T1 + d + 2:
            raise ValueError(
                f"trajectory {i} has {tr.n_samples} samples; needs more than "
                f"N_T1 + d + 2 = {N_T1 + d + 2}"
            )
        Y, Ydot = _embed_and_differentiate(tr.observables, y_eq_raw, d, dataset.dt)
        trans_blocks.append(Y[:, :N_T1])
        dtrans_blocks.append(Ydot[:, :N_T1])
        near_blocks.append(Y[:, N_T1:])
        dnear_blocks.append(Ydot[:, N_T1:])
        trans_counts.append(N_T1)
        near_counts.append(Y.shape[1] - N_T1)
    Y_near = np.hstack(near_blocks)
    V_E = numkit.truncated_svd(Y_near, n)
    return CuratedData(
        Y_trans=np.hstack(trans_blocks),
        Ydot_trans=np.hstack(dtrans_blocks),
        Y_near=Y_near,
        Ydot_near=np.hstack(dnear_blocks),
        V_E=V_E,
        y_eq=np.tile(y_eq_raw, d + 1),
        n=n,
        d=d,
        q=q,
        dt=dataset.dt,
        trans_counts=trans_counts,
        near_counts=near_counts,
    )


def curate_controlled(dataset: TrajectoryDataset, y_eq: np.ndarray, d: int):
    """Prepare controlled data for the control-matrix regression.

    Applies the same shift/embed/difference treatment as :func:`curate`,
    using the equilibrium already estimated from decay data (``y_eq`` may be
    the raw q-vector or the tiled p-vector).  Input columns are truncated to
    align with the embedded snapshot columns.

    Returns ``(Y_u, Ydot_u, U)``.
    """
    if not dataset.is_controlled:
        raise ValueError("dataset carries no input snapshots")
    q = dataset.observable_dim
    y_eq = np.asarray(y_eq, dtype=float).reshape(-1)
    if y_eq.size == q * (d + 1):
        y_eq_raw = y_eq[:q]
    elif y_eq.size == q:
        y_eq_raw = y_eq
    else:
        raise ValueError("y_eq length matches neither q nor q*(d+1)")
    Ys, Ydots, Us = [], [], []
    for tr in dataset.trajectories:
        Y, Ydot = _embed_and_differentiate(tr.observables, y_eq_raw, d, dataset.dt)
        Ys.append(Y)
        Ydots.append(Ydot)
        Us.append(tr.inputs[:, d:])
    return np.hstack(Ys), np.hstack(Ydots), np.hstack(Us)


def normal_energy_profile(
    dataset: TrajectoryDataset, n: int, d: int, fit_fraction: float = 0.5,
    tail_fraction: float = 0.1,
):
    """Diagnostic to help choose the transient split.

    Builds a provisional tangent basis from the trailing ``fit_fraction`` of
    every trajectory (assumed near-manifold) and reports, per embedded
    sample index, the mean squared distance of the data to that subspace.
    The knee of this curve is a reasonable transient cutoff; the choice
    itself is always left to the user.

    Returns ``(sample_index, mean_normal_energy)``.
    """
    y_eq_raw = estimate_equilibrium(dataset, tail_fraction)
    embedded = []
    for tr in dataset.trajectories:
        Y, _ = _embed_and_differentiate(tr.observables, y_eq_raw, d, dataset.dt)
        embedded.append(Y)
    tail = np.hstack([Y[:, int((1 - fit_fraction) * Y.shape[1]):] for Y in embedded])
    V = numkit.truncated_svd(tail, n)
    n_max = min(Y.shape[1] for Y in embedded)
    energy = np.zeros(n_max)
    for Y in embedded:
        R = Y[:, :n_max] - V @ (V.T @ Y[:, :n_max])
        energy += np.sum(R * R, axis=0)
    energy /= len(embedded)
    return np.arange(n_max), energy


# ---------------------------------------------------------------------------
# checkpoint bundle (binary arrays + JSON header inside one npz)


def save_curated(curated: CuratedData, path) -> None:
    header = {
        "n": curated.n,
        "d": curated.d,
        "q": curated.q,
        "dt": curated.dt,
        "trans_counts": curated.trans_counts,
        "near_counts": curated.near_counts,
    }
    np.savez(
        Path(path).with_suffix(".npz"),
        header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
        Y_trans=curated.Y_trans,
        Ydot_trans=curated.Ydot_trans,
        Y_near=curated.Y_near,
        Ydot_near=curated.Ydot_near,
        V_E=curated.V_E,
        y_eq=curated.y_eq,
    )


def load_curated(path) -> CuratedData:
    with np.load(Path(path).with_suffix(".npz")) as bundle:
        header = json.loads(bytes(bundle["header"]).decode())
        return CuratedData(
            Y_trans=bundle["Y_trans"],
            Ydot_trans=bundle["Ydot_trans"],
            Y_near=bundle["Y_near"],
            Ydot_near=bundle["Ydot_near"],
            V_E=bundle["V_E"],
            y_eq=bundle["y_eq"],
            n=int(header["n"]),
            d=int(header["d"]),
            q=int(header["q"]),
            dt=float(header["dt"]),
            trans_counts=list(header["trans_counts"]),
            near_counts=list(header["near_counts"]),
        )

"""Fitting the oblique chart, reduced dynamics, geometry, and control matrix.

The chart direction is found by co-optimizing a reduced-dynamics fit on
transient data over the null-space coordinates of the tangent basis;
eliminating the idempotency constraint this way keeps it exact at every
iterate.  The remaining maps are plain (optionally ridge-regularized) least
squares on near-manifold and controlled data.  An analytic oracle assembles
the exact fiber-aligned projector for a known linear system via an ordered
Schur form and a Sylvester solve; it serves as ground truth in tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.linalg

from . import numkit
from .curation import CuratedData
from .numkit import PolynomialBasis, SpectralGapViolation


class OptimizationFailure(RuntimeError):
    """The chart optimization produced a non-finite loss."""

    def __init__(self, iteration: int, message: str):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


class ExcitationError(ValueError):
    """Input snapshots do not excite every channel independently."""

    def __init__(self, channel: int):
        super().__init__(
            f"input channel {channel} is not independently excited "
            "(rank-deficient input snapshots)"
        )
        self.channel = channel


# ---------------------------------------------------------------------------
# transient loss and gradient


def transient_loss(C, R_trans, Y_trans, Ydot_trans, V_E, N, basis: PolynomialBasis) -> float:
    """Squared Frobenius residual of the reduced-dynamics fit on transients.

    The chart is ``V_opt = V_E + N C`` with ``N`` an orthonormal complement
    of ``V_E``, so the loss is evaluated on a chart that satisfies the
    idempotency constraint by construction.
    """
    if Y_trans.shape[1] == 0:
        return 0.0
    V = V_E + N @ C
    X = V.T @ Y_trans
    Xdot = V.T @ Ydot_trans
    E = Xdot - R_trans @ numkit.monomials(X, basis)
    return float(np.sum(E * E))


def _feature_gradient_contraction(X, W, basis: PolynomialBasis):
    """Return G with ``G[i, j] = sum_k W[k, j] * d(phi_k)/d(x_i) (X[:, j])``."""
    dim, M = X.shape
    hi = basis.hi
    powers = np.ones((dim, hi + 1, M))
    for p in range(1, hi + 1):
        powers[:, p, :] = powers[:, p - 1, :] * X
    G = np.zeros((dim, M))
    for k, e in enumerate(basis.exponents):
        w = W[k]
        for i in range(dim):
            if e[i] == 0:
                continue
            term = float(e[i]) * powers[i, e[i] - 1]
            for l in range(dim):
                if l != i and e[l]:
                    term = term * powers[l, e[l]]
            G[i] += w * term
    return G


def transient_loss_gradient(C, R_trans, Y_trans, Ydot_trans, V_E, N, basis: PolynomialBasis):
    """Analytic gradients of :func:`transient_loss` w.r.t. ``C`` and ``R_trans``."""
    if Y_trans.shape[1] == 0:
        return np.zeros_like(C), np.zeros_like(R_trans)
    V = V_E + N @ C
    X = V.T @ Y_trans
    Xdot = V.T @ Ydot_trans
    Phi = numkit.monomials(X, basis)
    E = Xdot - R_trans @ Phi
    grad_R = -2.0 * E @ Phi.T
    G = _feature_gradient_contraction(X, R_trans.T @ E, basis)
    grad_C = 2.0 * N.T @ (Ydot_trans @ E.T - Y_trans @ G.T)
    return grad_C, grad_R


# ---------------------------------------------------------------------------
# Algorithm: oblique chart optimization


@dataclass
class FitOptions:
    """Optimizer knobs for the chart fit (and ridge for all regressions)."""

    max_iters: int = 5000
    tol: float = 1e-8  # relative loss decrease below which we stop
    armijo_slope: float = 1e-4
    armijo_shrink: float = 0.5
    init_step: float = 1.0
    max_backtracks: int = 60
    grad_tol: float = 1e-14  # on the squared gradient norm, relative to the loss scale
    ridge: float = 0.0
    joint: bool = False  # full joint gradient descent instead of alternating
    n_r_transient: Optional[int] = None  # override the transient dynamics order


@dataclass
class ObliqueFit:
    """Result of the transient chart optimization."""

    V_opt: np.ndarray
    C: np.ndarray
    R_trans: np.ndarray  # transient-dynamics coefficients; diagnostic only
    loss_history: np.ndarray
    converged: bool
    iterations: int


def _refit_R(X, Xdot, basis, ridge):
    return numkit.least_squares(numkit.monomials(X, basis), Xdot, ridge=ridge)


def learn_oblique_projection(
    curated: CuratedData, n_r: int, opts: Optional[FitOptions] = None
) -> ObliqueFit:
    """Optimize the chart direction on transient data.

    Alternates a closed-form least-squares refresh of the transient dynamics
    with a backtracking (Armijo) gradient step on the null-space coordinates
    ``C``; iterate 0 is the orthogonal chart ``C = 0``, so the accepted-step
    loss history starts at the orthogonal baseline and never increases.
    With ``opts.joint`` the two blocks are stepped simultaneously instead.
    """
    opts = opts or FitOptions()
    if curated.Y_trans.shape[1] == 0:
        raise ValueError("transient block is empty; choose N_T1 > 0")
    order = opts.n_r_transient or n_r
    basis = numkit.polynomial_basis(curated.n, 1, order)
    V_E = curated.V_E
    N = numkit.orthonormal_complement(V_E)
    Y, Ydot = curated.Y_trans, curated.Ydot_trans
    C = np.zeros((N.shape[1], curated.n))

    def loss_at(C_, R_):
        return transient_loss(C_, R_, Y, Ydot, V_E, N, basis)

    X = (V_E + N @ C).T @ Y
    R = _refit_R(X, (V_E + N @ C).T @ Ydot, basis, opts.ridge)
    history = [loss_at(C, R)]
    if not np.isfinite(history[0]):
        raise OptimizationFailure(0, "non-finite loss at the orthogonal initialization")

    converged = False
    step = opts.init_step
    it = 0
    prev_C = prev_grad = None
    for it in range(1, opts.max_iters + 1):
        grad_C, grad_R = transient_loss_gradient(C, R, Y, Ydot, V_E, N, basis)
        g2 = float(np.sum(grad_C * grad_C))
        if opts.joint:
            g2 += float(np.sum(grad_R * grad_R))
        if g2 <= opts.grad_tol * max(history[-1], 1e-30):
            converged = True
            break
        # Barzilai-Borwein warm start for the step length; the loss in C is
        # badly scaled when the data covariance is anisotropic, and a spectral
        # step makes the Armijo search start near the right magnitude
        if prev_grad is not None and not opts.joint:
            dC = C - prev_C
            dg = grad_C - prev_grad
            denom = float(np.sum(dC * dg))
            if denom > 0:
                step = float(np.sum(dC * dC)) / denom
        step = min(max(step, 1e-12), 1e12)
        prev_C, prev_grad = C.copy(), grad_C.copy()
        # Armijo backtracking along the negative gradient
        base = history[-1]
        accepted = False
        s = step
        for _ in range(opts.max_backtracks):
            C_new = C - s * grad_C
            R_new = R - s * grad_R if opts.joint else R
            trial = loss_at(C_new, R_new)
            if not np.isfinite(trial):
                raise OptimizationFailure(it, "non-finite loss during line search")
            if trial <= base - opts.armijo_slope * s * g2:
                accepted = True
                break
            s *= opts.armijo_shrink
        if not accepted:
            converged = True  # no descent direction left at line-search resolution
            break
        C = C_new
        if opts.joint:
            R = R_new
            step = min(s * 2.0, opts.init_step)
        else:
            R = _refit_R((V_E + N @ C).T @ Y, (V_E + N @ C).T @ Ydot, basis, opts.ridge)
        new_loss = loss_at(C, R)
        if not np.isfinite(new_loss):
            raise OptimizationFailure(it, "non-finite loss after accepted step")
        if new_loss > history[-1]:
            converged = True  # refresh hit float noise; stop before recording
            break
        history.append(new_loss)
        if history[-2] - history[-1] <= opts.tol * max(history[-2], 1e-30):
            converged = True
            break

    return ObliqueFit(
        V_opt=V_E + N @ C,
        C=C,
        R_trans=R,
        loss_history=np.array(history),
        converged=converged,
        iterations=it,
    )


# ---------------------------------------------------------------------------
# analytic oracle for linear systems


def analytic_oracle(A: np.ndarray, n: int):
    """Exact fiber-aligned projector factors for a stable linear system.

    Orders a real Schur form of ``A`` so the ``n`` slowest eigenvalues lead,
    solves the Sylvester equation for the first-order normal-to-tangent
    coupling, and maps the block-form factors back to ambient coordinates.
    Returns ``(V_E_model, V_opt_model)`` with ``V_E_model`` orthonormal and
    ``V_opt_model.T @ V_E_model = I``.
    """
    A = np.asarray(A, dtype=float)
    nf = A.shape[0]
    if A.shape != (nf, nf) or not (1 <= n < nf):
        raise ValueError("A must be square and 1 <= n < n_f")
    ev = np.linalg.eigvals(A)
    order = np.argsort(-ev.real)
    sep = ev.real[order[n - 1]] - ev.real[order[n]]
    scale = max(np.max(np.abs(ev)), 1.0)
    if sep <= 1e-8 * scale:
        raise SpectralGapViolation(
            f"no spectral gap after {n} eigenvalues (separation {sep:.3e}); "
            "the split may be cutting through a complex pair"
        )
    cutoff = 0.5 * (ev.real[order[n - 1]] + ev.real[order[n]])
    T, Q, sdim = scipy.linalg.schur(A, output="real", sort=lambda re, im: re > cutoff)
    if sdim != n:
        raise SpectralGapViolation(
            f"Schur reordering selected {sdim} eigenvalues instead of {n}"
        )
    A_TT, A_TN, A_NN = T[:n, :n], T[:n, n:], T[n:, n:]
    V0 = numkit.sylvester_solve(A_TT, A_NN, A_TN)
    V_E_model = Q[:, :n].copy()
    V_opt_model = Q[:, :n] - Q[:, n:] @ V0.T
    # deterministic signs; flipping both factors leaves the projector intact
    for j in range(n):
        idx = int(np.argmax(np.abs(V_E_model[:, j])))
        if V_E_model[idx, j] < 0:
            V_E_model[:, j] = -V_E_model[:, j]
            V_opt_model[:, j] = -V_opt_model[:, j]
    return V_E_model, V_opt_model


# ---------------------------------------------------------------------------
# Algorithm: reduced dynamics, geometry, control


def fit_reduced_dynamics(Y_near, Ydot_near, V_opt, n_r: int, ridge: float = 0.0):
    """Least-squares reduced dynamics over monomials of the chart coordinates."""
    if Y_near.shape[1] == 0:
        raise ValueError("near-manifold block is empty")
    n = V_opt.shape[1]
    basis = numkit.polynomial_basis(n, 1, n_r)
    X = V_opt.T @ Y_near
    return numkit.least_squares(numkit.monomials(X, basis), V_opt.T @ Ydot_near, ridge=ridge)


def _kernel_basis(V_opt):
    """Orthonormal, sign-fixed basis of ``null(V_opt.T)``."""
    K = scipy.linalg.null_space(V_opt.T)
    return numkit.fix_column_signs(K) if K.shape[1] else K


def fit_parameterization(Y_near, V_opt, V_E, n_w: int, ridge: float = 0.0):
    """Nonlinear geometry coefficients constrained to the chart's kernel.

    Writes the unknown as ``W_nl = Q Z`` with ``Q`` an orthonormal basis of
    ``null(V_opt.T)`` and regresses ``Z`` on the residual left after the
    linear reconstruction, so ``V_opt.T @ W_nl = 0`` holds by construction.
    """
    p, n = V_E.shape
    if n_w < 2:
        return np.zeros((p, 0))
    basis = numkit.polynomial_basis(n, 2, n_w)
    Q = _kernel_basis(V_opt)
    if Q.shape[1] == 0:
        return np.zeros((p, basis.size))
    X = V_opt.T @ Y_near
    residual = Y_near - V_E @ X
    Z = numkit.least_squares(numkit.monomials(X, basis), Q.T @ residual, ridge=ridge)
    return Q @ Z


def fit_control_matrix(Y_u, Ydot_u, U, V_opt, R, n_r: int, ridge: float = 0.0):
    """Regress the control matrix from the autonomous-model residual.

    Raises :class:`ExcitationError` naming a deficient channel when the input
    snapshots are rank-deficient.
    """
    m, Ncols = U.shape
    if Ncols < m:
        raise ExcitationError(0)
    norms = np.linalg.norm(U, axis=1)
    dead = np.where(norms <= 1e-300)[0]
    if dead.size:
        raise ExcitationError(int(dead[0]))
    _, Rfac, piv = scipy.linalg.qr(U.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(Rfac))
    small = diag <= max(U.shape) * np.finfo(float).eps * diag[0]
    if np.any(small):
        raise ExcitationError(int(piv[int(np.argmax(small))]))
    n = V_opt.shape[1]
    basis = numkit.polynomial_basis(n, 1, n_r)
    X = V_opt.T @ Y_u
    D = V_opt.T @ Ydot_u - R @ numkit.monomials(X, basis)
    return numkit.least_squares(U, D, ridge=ridge)


# ---------------------------------------------------------------------------
# the model object


@dataclass
class SSMModel:
    """Fitted reduced-order model in the embedded observable space."""

    V_E: np.ndarray
    V_opt: np.ndarray
    W_nl: np.ndarray
    R: np.ndarray
    B_r: Optional[np.ndarray]
    y_eq: np.ndarray
    n: int
    p: int
    m: int
    n_r: int
    n_w: int
    d: int

    @property
    def q(self) -> int:
        return self.p // (self.d + 1)

    def validate(self) -> dict:
        """Frobenius residuals of the structural model invariants."""
        Pi = self.V_E @ self.V_opt.T
        out = {
            "chart_constraint": float(
                np.linalg.norm(self.V_opt.T @ self.V_E - np.eye(self.n))
            ),
            "idempotency": float(np.linalg.norm(Pi @ Pi - Pi)),
            "geometry_constraint": float(np.linalg.norm(self.V_opt.T @ self.W_nl))
            if self.W_nl.size
            else 0.0,
        }
        rng = np.random.default_rng(0)
        xs = rng.normal(scale=0.1, size=(self.n, 16))
        worst = 0.0
        for j in range(xs.shape[1]):
            y = self.parameterize_vec(xs[:, j])
            worst = max(worst, float(np.linalg.norm(self.V_opt.T @ y - xs[:, j])))
        out["chart_of_parameterization"] = worst
        return out

    # minimal evaluation hooks; the rom module wraps these with embedding and
    # integration
    def parameterize_vec(self, x_r: np.ndarray) -> np.ndarray:
        y = self.V_E @ x_r
        if self.n_w >= 2 and self.W_nl.size:
            basis = numkit.polynomial_basis(self.n, 2, self.n_w)
            y = y + self.W_nl @ numkit.monomials(x_r, basis)
        return y


def model_to_json(model: SSMModel) -> str:
    doc = {
        "format": "ssmkit-model-v1",
        "monomial_ordering": "graded-lex-v1",
        "dims": {
            "n": model.n,
            "p": model.p,
            "m": model.m,
            "n_r": model.n_r,
            "n_w": model.n_w,
            "d": model.d,
        },
        "y_eq": model.y_eq.tolist(),
        "V_E": model.V_E.tolist(),
        "V_opt": model.V_opt.tolist(),
        "W_nl": model.W_nl.tolist(),
        "R": model.R.tolist(),
        "B_r": None if model.B_r is None else model.B_r.tolist(),
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def model_from_json(text: str) -> SSMModel:
    doc = json.loads(text)
    if doc.get("format") != "ssmkit-model-v1":
        raise ValueError("not a recognized model document")
    if doc.get("monomial_ordering") != "graded-lex-v1":
        raise ValueError("incompatible monomial ordering tag")
    dims = doc["dims"]
    n, p = dims["n"], dims["p"]
    W_nl = np.asarray(doc["W_nl"], dtype=float).reshape(p, -1)
    B_r = doc["B_r"]
    return SSMModel(
        V_E=np.asarray(doc["V_E"], dtype=float),
        V_opt=np.asarray(doc["V_opt"], dtype=float),
        W_nl=W_nl,
        R=np.asarray(doc["R"], dtype=float).reshape(n, -1),
        B_r=None if B_r is None else np.asarray(B_r, dtype=float).reshape(n, -1),
        y_eq=np.asarray(doc["y_eq"], dtype=float),
        n=n,
        p=p,
        m=dims["m"],
        n_r=dims["n_r"],
        n_w=dims["n_w"],
        d=dims["d"],
    )


def save_model(model: SSMModel, path) -> None:
    Path(path).write_text(model_to_json(model) + "\n")


def load_model(path) -> SSMModel:
    return model_from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# end-to-end fit


def fit_ssm_model(
    curated: CuratedData,
    mode: str,
    n_r: int,
    n_w: int,
    controlled: Optional[tuple] = None,
    opts: Optional[FitOptions] = None,
):
    """Run the chart fit (oblique mode only) and the three regressions.

    ``mode`` is ``"orthogonal"`` (chart equals the tangent basis) or
    ``"oblique"``.  ``controlled`` is an optional ``(Y_u, Ydot_u, U)`` triple
    for the control-matrix fit.  Returns ``(model, report)`` where the report
    carries the loss history, convergence flag, and residual diagnostics.
    """
    opts = opts or FitOptions()
    report = {"mode": mode}
    if mode == "oblique":
        fit = learn_oblique_projection(curated, n_r, opts)
        V_opt = fit.V_opt
        report["loss_history"] = fit.loss_history.tolist()
        report["converged"] = fit.converged
        report["iterations"] = fit.iterations
    elif mode == "orthogonal":
        V_opt = curated.V_E.copy()
    else:
        raise ValueError(f"unknown mode {mode!r}; expected 'orthogonal' or 'oblique'")

    R = fit_reduced_dynamics(curated.Y_near, curated.Ydot_near, V_opt, n_r, ridge=opts.ridge)
    W_nl = fit_parameterization(curated.Y_near, V_opt, curated.V_E, n_w, ridge=opts.ridge)

    B_r = None
    m = 0
    if controlled is not None:
        Y_u, Ydot_u, U = controlled
        B_r = fit_control_matrix(Y_u, Ydot_u, U, V_opt, R, n_r, ridge=opts.ridge)
        m = U.shape[0]

    model = SSMModel(
        V_E=curated.V_E,
        V_opt=V_opt,
        W_nl=W_nl,
        R=R,
        B_r=B_r,
        y_eq=curated.y_eq,
        n=curated.n,
        p=curated.p,
        m=m,
        n_r=n_r,
        n_w=n_w,
        d=curated.d,
    )
    basis = numkit.polynomial_basis(curated.n, 1, n_r)
    X = V_opt.T @ curated.Y_near
    dyn_residual = V_opt.T @ curated.Ydot_near - R @ numkit.monomials(X, basis)
    report["reduced_dynamics_rms"] = float(
        np.sqrt(np.mean(dyn_residual**2)) if dyn_residual.size else 0.0
    )
    report["constraints"] = model.validate()
    return model, report

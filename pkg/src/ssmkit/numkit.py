"""Shared numerical kernels.

Polynomial feature maps over a deterministic monomial ordering, dense least
squares with an optional ridge term, truncated SVD with a fixed sign
convention, a Sylvester solver with a spectral-gap guard, second-order finite
differencing, delay embedding, and orthonormal complements.  Everything here
is pure, deterministic, and dense; all routines reject NaN/Inf inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations_with_replacement

import numpy as np
import scipy.linalg


class RankDeficiencyError(ValueError):
    """A regression or factorization met a numerically rank-deficient matrix."""


class SpectralGapViolation(ValueError):
    """Spectra of the two Sylvester blocks are not numerically disjoint."""


def _as_finite_array(a, name: str) -> np.ndarray:
    out = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains NaN or Inf entries")
    return out


@dataclass(frozen=True)
class PolynomialBasis:
    """Monomial exponent table for all total degrees in ``[lo, hi]``.

    The ordering is graded lexicographic: ascending total degree, and within
    each degree the variable-ordered convention where e.g. for two variables
    the degree-2 block reads ``x1^2, x1*x2, x2^2``.  The table is a pure
    function of ``(dim, lo, hi)``, so serialized models are portable.
    """

    dim: int
    lo: int
    hi: int
    exponents: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be a positive integer")
        if self.lo < 1 or self.hi < self.lo:
            raise ValueError("need 1 <= lo <= hi")

    @property
    def size(self) -> int:
        return self.exponents.shape[0]

    def __len__(self) -> int:
        return self.size


@lru_cache(maxsize=None)
def polynomial_basis(dim: int, lo: int, hi: int) -> PolynomialBasis:
    """Build the exponent table for total degrees ``lo..hi`` in ``dim`` variables.

    Instances are cached (the table is a pure function of the arguments) and
    their exponent arrays are write-protected.
    """
    if dim < 1 or lo < 1 or hi < lo:
        raise ValueError("need dim >= 1 and 1 <= lo <= hi")
    rows = []
    for deg in range(lo, hi + 1):
        # combinations_with_replacement on variable indices enumerates each
        # degree block in the required order (all x1 first).
        for combo in combinations_with_replacement(range(dim), deg):
            e = np.zeros(dim, dtype=int)
            for i in combo:
                e[i] += 1
            rows.append(e)
    exponents = np.array(rows, dtype=int).reshape(len(rows), dim)
    exponents.setflags(write=False)
    return PolynomialBasis(dim=dim, lo=lo, hi=hi, exponents=exponents)


def monomials(x: np.ndarray, basis: PolynomialBasis) -> np.ndarray:
    """Evaluate the monomial family at ``x``.

    Parameters
    ----------
    x : array, shape (dim,) or (dim, N)
        Point or matrix of column points.
    basis : PolynomialBasis

    Returns
    -------
    array, shape (K,) or (K, N)
        ``out[k] = prod_i x[i]**exponents[k, i]``.
    """
    x = _as_finite_array(x, "x")
    single = x.ndim == 1
    if x.shape[0] != basis.dim:
        raise ValueError(f"expected {basis.dim} variables, got {x.shape[0]}")
    X = x.reshape(basis.dim, 1) if single else x
    # precompute powers 0..hi of every variable once
    powers = np.ones((basis.dim, basis.hi + 1, X.shape[1]))
    for p in range(1, basis.hi + 1):
        powers[:, p, :] = powers[:, p - 1, :] * X
    out = np.ones((basis.size, X.shape[1]))
    for k, e in enumerate(basis.exponents):
        for i in range(basis.dim):
            if e[i]:
                out[k] *= powers[i, e[i]]
    return out[:, 0] if single else out


def monomial_jacobian(x: np.ndarray, basis: PolynomialBasis) -> np.ndarray:
    """Jacobian of the monomial map at a single point: shape (K, dim)."""
    x = _as_finite_array(x, "x").reshape(-1)
    if x.shape[0] != basis.dim:
        raise ValueError(f"expected {basis.dim} variables, got {x.shape[0]}")
    powers = np.ones((basis.dim, basis.hi + 1))
    for p in range(1, basis.hi + 1):
        powers[:, p] = powers[:, p - 1] * x
    J = np.zeros((basis.size, basis.dim))
    for k, e in enumerate(basis.exponents):
        for i in range(basis.dim):
            if e[i] == 0:
                continue
            term = float(e[i]) * powers[i, e[i] - 1]
            for j in range(basis.dim):
                if j != i and e[j]:
                    term *= powers[j, e[j]]
            J[k, i] = term
    return J


def least_squares(A: np.ndarray, B: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """Solve ``min_X ||B - X A||_F`` for snapshot matrices.

    Parameters
    ----------
    A : array, shape (p, N)
        Regressor snapshots, one per column.  Requires ``N >= p``.
    B : array, shape (q, N)
        Target snapshots.
    ridge : float
        Optional Tikhonov term; ``ridge > 0`` regularizes rank-deficient
        regressors instead of raising.

    Returns
    -------
    X : array, shape (q, p)

    Raises
    ------
    RankDeficiencyError
        If ``A`` is numerically rank-deficient and ``ridge == 0``.
    """
    A = _as_finite_array(A, "A")
    B = _as_finite_array(B, "B")
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValueError("A and B must be matrices with matching column counts")
    p, N = A.shape
    if N < p:
        raise ValueError(f"need at least as many snapshots as regressors (N={N} < p={p})")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    if ridge == 0.0:
        # pivoted orthogonal decomposition; gelsy reports the numerical rank
        cond = max(A.shape) * np.finfo(float).eps
        sol, _, rank = scipy.linalg.lstsq(A.T, B.T, cond=cond, lapack_driver="gelsy")[:3]
        if rank < p:
            raise RankDeficiencyError(
                f"regressor matrix has numerical rank {rank} < {p}; "
                "supply ridge > 0 to regularize"
            )
        return sol.T
    G = A @ A.T + ridge * np.eye(p)
    return scipy.linalg.solve(G, A @ B.T, assume_a="pos").T


def fix_column_signs(M: np.ndarray) -> np.ndarray:
    """Flip column signs so the largest-magnitude entry of each column is positive."""
    out = M.copy()
    for j in range(out.shape[1]):
        idx = int(np.argmax(np.abs(out[:, j])))
        if out[idx, j] < 0:
            out[:, j] = -out[:, j]
    return out


def truncated_svd(Y: np.ndarray, n: int) -> np.ndarray:
    """Leading ``n`` left singular vectors of ``Y`` with a fixed sign convention.

    Raises ``RankDeficiencyError`` when ``n`` exceeds the numerical rank.
    """
    Y = _as_finite_array(Y, "Y")
    if Y.ndim != 2:
        raise ValueError("Y must be a matrix")
    p, N = Y.shape
    if not (1 <= n <= min(p, N)):
        raise ValueError(f"need 1 <= n <= min(p, N) = {min(p, N)}")
    U, s, _ = np.linalg.svd(Y, full_matrices=False)
    tol = max(p, N) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    if s[n - 1] <= tol:
        raise RankDeficiencyError(f"requested {n} modes but numerical rank is smaller")
    return fix_column_signs(U[:, :n])


def sylvester_solve(A_TT: np.ndarray, A_NN: np.ndarray, A_TN: np.ndarray) -> np.ndarray:
    """Solve ``A_TT V0 - V0 A_NN = -A_TN`` for ``V0``.

    The two blocks must have numerically disjoint spectra: the minimum
    eigenvalue separation has to exceed ``1e-8`` times the larger spectral
    radius, otherwise :class:`SpectralGapViolation` is raised.
    """
    A_TT = _as_finite_array(A_TT, "A_TT")
    A_NN = _as_finite_array(A_NN, "A_NN")
    A_TN = _as_finite_array(A_TN, "A_TN")
    n, m = A_TN.shape
    if A_TT.shape != (n, n) or A_NN.shape != (m, m):
        raise ValueError("block shapes are inconsistent")
    ev_t = np.linalg.eigvals(A_TT)
    ev_n = np.linalg.eigvals(A_NN)
    sep = np.min(np.abs(ev_t[:, None] - ev_n[None, :]))
    scale = max(np.max(np.abs(ev_t)), np.max(np.abs(ev_n)), 1.0)
    if sep <= 1e-8 * scale:
        raise SpectralGapViolation(
            f"eigenvalue separation {sep:.3e} below 1e-8 * spectral radius {scale:.3e}"
        )
    # A_TT V0 + V0 (-A_NN) = -A_TN is the standard Bartels-Stewart form
    return scipy.linalg.solve_sylvester(A_TT, -A_NN, -A_TN)


def finite_difference(Y: np.ndarray, dt: float) -> np.ndarray:
    """Second-order time derivative of uniformly sampled snapshot columns.

    Central differences on interior columns, one-sided second-order stencils
    at both ends.  Requires at least three samples.
    """
    Y = _as_finite_array(Y, "Y")
    if Y.ndim != 2:
        raise ValueError("Y must be a matrix with one snapshot per column")
    if Y.shape[1] < 3:
        raise ValueError("finite differencing needs at least 3 samples")
    if dt <= 0:
        raise ValueError("dt must be positive")
    return np.gradient(Y, dt, axis=1, edge_order=2)


def delay_embed(Y: np.ndarray, d: int, dt: float) -> np.ndarray:
    """Stack ``d`` past samples under each column of ``Y``.

    Column ``k`` of the output is ``(y_{k+d}, y_{k+d-1}, ..., y_k)``: the
    newest sample sits in the top block, so the embedded column carries the
    timestamp of its newest sample, ``t_k + d*dt``.  Must be applied per
    trajectory, never across trajectory boundaries.

    Returns an array of shape ``(q*(d+1), N-d)``.
    """
    Y = _as_finite_array(Y, "Y")
    if Y.ndim != 2:
        raise ValueError("Y must be a matrix with one snapshot per column")
    if d < 0:
        raise ValueError("delay count must be nonnegative")
    if dt <= 0:
        raise ValueError("dt must be positive")
    q, N = Y.shape
    if N <= d:
        raise ValueError(f"trajectory with {N} samples is too short for {d} delays")
    if d == 0:
        return Y.copy()
    blocks = [Y[:, d - j:N - j] for j in range(d + 1)]
    return np.vstack(blocks)


def orthonormal_complement(V: np.ndarray) -> np.ndarray:
    """Orthonormal basis ``N`` of the complement of ``range(V)``.

    ``V`` must have orthonormal columns; the result satisfies ``N.T V = 0``
    and ``N.T N = I`` with the same deterministic sign convention as
    :func:`truncated_svd`.
    """
    V = _as_finite_array(V, "V")
    if V.ndim != 2:
        raise ValueError("V must be a matrix")
    p, n = V.shape
    if n > p:
        raise ValueError("V cannot have more columns than rows")
    if np.linalg.norm(V.T @ V - np.eye(n)) > 1e-10:
        raise ValueError("V must have orthonormal columns")
    if n == p:
        return np.zeros((p, 0))
    Q, _ = np.linalg.qr(V, mode="complete")
    N = Q[:, n:]
    # guard against roundoff in the QR extension
    N = N - V @ (V.T @ N)
    N, _ = np.linalg.qr(N)
    return fix_column_signs(N)

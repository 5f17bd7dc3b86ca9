"""Dense real matrix arithmetic and a from-scratch singular value decomposition.

Matrices are plain 2-D float64 ``numpy`` arrays. The SVD is a one-sided Jacobi
iteration: cheap to reason about, dependency-free, and accurate enough that the
factors reconstruct the input to ~1e-12 relative error for the matrix sizes
this toolkit handles (a few thousand per side at most).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalFailureError, RejectedInputError

# Rotation threshold: a column pair (i, j) is rotated while
# |a_i . a_j| > PAIR_TOL * ||a_i|| * ||a_j||. This is stricter than the sweep
# exit bound of 1e-12 * ||W||_F^2 on every pair, and keeps factor orthogonality
# at roundoff level even for strongly graded spectra.
PAIR_TOL = 1e-15
MAX_SWEEPS = 100
# Singular values below SIGMA_CLAMP * sigma_max are treated as noise ranks.
SIGMA_CLAMP = 1e-12


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return ``a`` as a finite 2-D float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise RejectedInputError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise RejectedInputError(f"{name} must have positive dims, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise RejectedInputError(f"{name} contains non-finite entries")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with shape validation.

    Raises ``RejectedInputError`` on a dimension mismatch and
    ``NumericalFailureError`` if the product overflows to non-finite values.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise RejectedInputError(
            f"matmul dimension mismatch: {a.shape} x {b.shape}"
        )
    out = a @ b
    if not np.isfinite(out).all():
        raise NumericalFailureError("matmul overflowed to non-finite entries")
    return out


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``w = u @ diag(sigma) @ vt``.

    ``u`` is m x r with orthonormal columns, ``sigma`` a non-increasing
    non-negative vector of length r = min(m, n), ``vt`` r x n with orthonormal
    rows. Arrays are marked read-only; factorizations are shared freely.
    """

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray


def _round_robin_schedule(n: int):
    """Tournament rounds of disjoint column pairs covering every (i, j) once."""
    players = list(range(n + (n % 2)))  # pad with a bye when odd
    total = len(players)
    rounds = []
    for _ in range(total - 1):
        left, right = [], []
        for k in range(total // 2):
            a, b = players[k], players[total - 1 - k]
            if a < n and b < n:
                left.append(min(a, b))
                right.append(max(a, b))
        rounds.append((np.asarray(left, dtype=np.intp),
                       np.asarray(right, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_core(a: np.ndarray):
    """One-sided Jacobi on a tall matrix (rows >= cols).

    Rotates column pairs until all pairwise dot products are negligible
    relative to the column norms. Pairs within a round are disjoint, so each
    round applies its rotations simultaneously; the fixed schedule keeps the
    result deterministic. Returns (u, sigma, v) where zero-sigma columns of
    ``u`` are filled with an orthonormal completion.
    """
    m, n = a.shape
    work = a.copy()
    v = np.eye(n)
    schedule = _round_robin_schedule(n)

    sq = np.einsum("ij,ij->j", work, work)  # running column norms^2
    for sweep in range(MAX_SWEEPS):
        rotated = False
        for ii, jj in schedule:
            if ii.shape[0] == 0:
                continue
            ai = work[:, ii]
            aj = work[:, jj]
            gamma = np.einsum("ij,ij->j", ai, aj)
            alpha = sq[ii]
            beta = sq[jj]
            needs = gamma * gamma > (PAIR_TOL * PAIR_TOL) * alpha * beta
            needs &= (alpha > 0.0) & (beta > 0.0)
            if not needs.any():
                continue
            rotated = True
            safe_gamma = np.where(needs, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe_gamma)
            t = np.where(zeta >= 0.0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(needs, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            work[:, ii] = ai * c - aj * s
            work[:, jj] = ai * s + aj * c
            vi = v[:, ii]
            vj = v[:, jj]
            v[:, ii] = vi * c - vj * s
            v[:, jj] = vi * s + vj * c
            sq[ii] = alpha - t * gamma
            sq[jj] = beta + t * gamma
        # Refresh tracked norms once per sweep to stop drift.
        sq = np.einsum("ij,ij->j", work, work)
        if not rotated:
            break
    else:
        residual = _max_offdiag(work)
        raise NumericalFailureError(
            f"SVD did not converge in {MAX_SWEEPS} sweeps; "
            f"max off-diagonal column dot product {residual:.3e}",
            residual=residual,
        )

    sigma = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]

    if sigma[0] > 0.0:
        sigma[sigma < SIGMA_CLAMP * sigma[0]] = 0.0
    u = np.zeros((m, n))
    nonzero = sigma > 0.0
    u[:, nonzero] = work[:, nonzero] / sigma[nonzero]
    for k in np.flatnonzero(~nonzero):
        u[:, k] = _orthonormal_fill(u, k)
    return u, sigma, v


def _max_offdiag(work: np.ndarray) -> float:
    gram = work.T @ work
    norms = np.sqrt(np.diag(gram))
    denom = np.outer(norms, norms)
    denom[denom == 0.0] = 1.0
    np.fill_diagonal(gram, 0.0)
    return float(np.max(np.abs(gram) / denom))


def _orthonormal_fill(u: np.ndarray, col: int) -> np.ndarray:
    """Deterministic unit vector orthogonal to u[:, :col_others]."""
    m = u.shape[0]
    basis = u[:, [k for k in range(u.shape[1]) if k != col and np.any(u[:, k])]]
    best = None
    best_norm = 0.0
    for idx in range(m):
        cand = np.zeros(m)
        cand[idx] = 1.0
        if basis.shape[1]:
            cand -= basis @ (basis.T @ cand)
            cand -= basis @ (basis.T @ cand)  # second pass for stability
        norm = float(np.linalg.norm(cand))
        if norm > best_norm:
            best_norm = norm
            best = cand / norm
    if best is None:
        raise NumericalFailureError("could not complete an orthonormal basis")
    return best


def svd(w: np.ndarray) -> SvdFactors:
    """Thin SVD by one-sided Jacobi rotations.

    Deterministic: the sweep order is fixed and the sign of each left singular
    vector is chosen so its largest-magnitude entry is non-negative, so two
    calls on the same input return bit-identical factors.
    """
    w = as_matrix(w, "w")
    m, n = w.shape
    if m >= n:
        u, sigma, v = _jacobi_core(w)
        vt = v.T
    else:
        ut, sigma, vtt = _jacobi_core(w.T)
        u = vtt
        vt = ut.T

    # Sign convention: largest-magnitude entry of each u column non-negative.
    for k in range(sigma.shape[0]):
        pivot = np.argmax(np.abs(u[:, k]))
        if u[pivot, k] < 0.0:
            u[:, k] = -u[:, k]
            vt[k, :] = -vt[k, :]

    for arr in (u, sigma, vt):
        arr.flags.writeable = False
    return SvdFactors(u=u, sigma=sigma, vt=vt)


def truncate(factors: SvdFactors, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Rank-k factor pair (a, b) with a @ b the best rank-k approximation.

    The sqrt of each retained singular value is split between the factors so
    neither side carries the full scale, which keeps subsequent fine-tuning
    well conditioned.
    """
    r = factors.sigma.shape[0]
    if not isinstance(k, (int, np.integer)) or k < 1 or k > r:
        raise RejectedInputError(f"rank k={k} out of range [1, {r}]")
    roots = np.sqrt(factors.sigma[:k])
    a = factors.u[:, :k] * roots
    b = roots[:, None] * factors.vt[:k, :]
    return a, b


def frobenius(a: np.ndarray) -> float:
    """Frobenius norm."""
    return float(np.sqrt(np.sum(np.asarray(a) ** 2)))

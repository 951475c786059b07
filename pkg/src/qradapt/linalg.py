"""Dense matrix core: Householder QR with column pivoting and one-sided Jacobi SVD.

The pivoted QR follows the classical Businger-Golub scheme: at each step the
remaining column with the largest running norm is swapped into place, a
Householder reflector annihilates its subdiagonal, and the running norms of the
trailing columns are downdated.  Exact norms are recomputed every
``NORM_RECOMPUTE_STRIDE`` steps (plus a per-column cancellation guard) to avoid
the classic downdating bug.  Signs are fixed afterwards so every diagonal entry
of R is non-negative, which makes the factorization deterministic and easy to
compare against golden values.

The SVD is one-sided Jacobi (Hestenes): plane rotations orthogonalize column
pairs until every normalized off-diagonal inner product falls below
``JACOBI_TOL``.  Accurate and simple at desk scale; not meant for matrices
beyond a few thousand rows/columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# exact column-norm refresh cadence for the pivoted QR downdating
NORM_RECOMPUTE_STRIDE = 8
# if a downdated squared norm falls below this fraction of its last exactly
# computed value, half the digits are gone; recompute that column exactly
_DOWNDATE_GUARD = 1e-12
# two running column norms within this relative distance count as tied;
# the tie goes to the lower original column index
PIVOT_TIE_REL = 1e-12

JACOBI_MAX_SWEEPS = 30
JACOBI_TOL = 1e-12


class ConvergenceError(RuntimeError):
    """An iterative factorization hit its sweep cap without converging."""


def check_finite(a: np.ndarray, name: str = "matrix") -> None:
    """Raise ValueError naming the first non-finite entry of ``a``."""
    if np.isfinite(a).all():
        return
    idx = np.argwhere(~np.isfinite(a))[0]
    pos = tuple(int(i) for i in idx)
    raise ValueError(f"{name} has non-finite entry {a[tuple(idx)]!r} at index {pos}")


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Coerce ``values`` to a 2-D float64 array and validate it.

    Rejects empty shapes and non-finite entries; this is the single entry
    gate through which every public operation receives its input.
    """
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name} must have at least one row and one column, got {a.shape}")
    check_finite(a, name)
    return a


@dataclass(frozen=True)
class PivotedQR:
    """Reduced pivoted-QR factors of an L x M matrix.

    q has orthonormal columns (L x k, k = min(L, M)); r is upper triangular
    (k x M) with a non-negative, non-increasing diagonal; ``perm[j]`` is the
    original index of the column placed at pivoted position j, so that
    ``w[:, perm] == q @ r`` up to rounding.
    """

    q: np.ndarray
    r: np.ndarray
    perm: np.ndarray


@dataclass(frozen=True)
class ThinSVD:
    """Reduced SVD factors: u (L x k) orthonormal columns, sigma (k,)
    non-negative and non-increasing, vt (k x M) orthonormal rows."""

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray


def qr_pivoted(w) -> PivotedQR:
    """Householder QR with greedy column pivoting.

    Deterministic for identical input: pivot ties go to the lower original
    column index and the sign convention forces diag(r) >= 0.
    """
    a = as_matrix(w).copy()
    n_rows, n_cols = a.shape
    k = min(n_rows, n_cols)

    perm = np.arange(n_cols)
    norms2 = np.einsum("ij,ij->j", a, a)
    ref2 = norms2.copy()  # value at last exact computation, per column
    reflectors: list[tuple[int, np.ndarray, float]] = []

    for j in range(k):
        if j > 0 and j % NORM_RECOMPUTE_STRIDE == 0:
            norms2[j:] = np.einsum("ij,ij->j", a[j:, j:], a[j:, j:])
            ref2[j:] = norms2[j:]

        p = _choose_pivot(norms2, perm, j)
        if p != j:
            a[:, [j, p]] = a[:, [p, j]]
            perm[[j, p]] = perm[[p, j]]
            norms2[[j, p]] = norms2[[p, j]]
            ref2[[j, p]] = ref2[[p, j]]

        x = a[j:, j]
        norm_x = float(np.linalg.norm(x))
        if norm_x == 0.0:
            # remaining block is exactly zero in this column; nothing to reflect
            a[j:, j] = 0.0
            continue

        s = -1.0 if x[0] < 0.0 else 1.0
        v = x.copy()
        v[0] = x[0] + s * norm_x  # no cancellation: both terms share a sign
        v /= v[0]
        tau = s * (x[0] + s * norm_x) / norm_x

        if j + 1 < n_cols:
            a[j:, j + 1 :] -= np.outer(tau * v, v @ a[j:, j + 1 :])
        a[j, j] = -s * norm_x
        a[j + 1 :, j] = 0.0
        reflectors.append((j, v, tau))

        if j + 1 < n_cols:
            trailing = slice(j + 1, n_cols)
            norms2[trailing] -= a[j, trailing] ** 2
            np.maximum(norms2[trailing], 0.0, out=norms2[trailing])
            stale = np.flatnonzero(norms2[trailing] <= _DOWNDATE_GUARD * ref2[trailing])
            for c in stale + j + 1:
                norms2[c] = float(a[j + 1 :, c] @ a[j + 1 :, c])
                ref2[c] = norms2[c]

    q = np.eye(n_rows, k)
    for j, v, tau in reversed(reflectors):
        q[j:, :] -= np.outer(tau * v, v @ q[j:, :])

    r = a[:k, :]
    flip = np.flatnonzero(np.diagonal(r) < 0.0)
    r[flip, :] *= -1.0
    q[:, flip] *= -1.0
    # the flip writes -0.0 below the diagonal; keep those entries exact zeros
    r[np.tril_indices(k, -1, r.shape[1])] = 0.0

    return PivotedQR(q=q, r=r, perm=perm)


def _choose_pivot(norms2: np.ndarray, perm: np.ndarray, j: int) -> int:
    """Index of the pivot column for step j: largest running norm, ties
    (within PIVOT_TIE_REL relative on the norm) broken by lowest original
    column index."""
    live = norms2[j:]
    best = float(live.max())
    if best == 0.0:
        cand = np.arange(j, norms2.size)
    else:
        # compare norms, not squared norms: (1 - eps)^2 ~ 1 - 2 eps
        cutoff = best * (1.0 - PIVOT_TIE_REL) ** 2
        cand = np.flatnonzero(live >= cutoff) + j
    return int(cand[np.argmin(perm[cand])])


def reconstruct(f: PivotedQR) -> np.ndarray:
    """Undo the factorization: returns w with its original column order."""
    permuted = f.q @ f.r
    out = np.empty_like(permuted)
    out[:, f.perm] = permuted
    return out


def svd(w) -> ThinSVD:
    """One-sided Jacobi SVD in reduced form.

    Raises ConvergenceError if the rotation sweeps do not settle within
    JACOBI_MAX_SWEEPS.  Columns of u belonging to exactly-zero singular
    values are filled by deterministic basis completion so u always has
    orthonormal columns.
    """
    a = as_matrix(w)
    n_rows, n_cols = a.shape
    if n_rows >= n_cols:
        u, sigma, v = _jacobi_tall(a)
        return ThinSVD(u=u, sigma=sigma, vt=v.T)
    # wide input: factor the transpose and swap the roles of u and v
    u_t, sigma, v_t = _jacobi_tall(a.T.copy())
    return ThinSVD(u=v_t, sigma=sigma, vt=u_t.T)


def _jacobi_tall(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hestenes one-sided Jacobi on a tall (n x m, n >= m) matrix.

    Returns (u, sigma, v) with a == u @ diag(sigma) @ v.T.
    """
    work = a.copy()
    m = work.shape[1]
    v = np.eye(m)

    for _ in range(JACOBI_MAX_SWEEPS):
        rotated = False
        for p in range(m - 1):
            for q in range(p + 1, m):
                col_p = work[:, p]
                col_q = work[:, q]
                app = float(col_p @ col_p)
                aqq = float(col_q @ col_q)
                apq = float(col_p @ col_q)
                if abs(apq) <= JACOBI_TOL * np.sqrt(app * aqq):
                    continue
                rotated = True
                zeta = (aqq - app) / (2.0 * apq)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                rot = np.array([[c, s], [-s, c]])
                work[:, [p, q]] = work[:, [p, q]] @ rot
                v[:, [p, q]] = v[:, [p, q]] @ rot
        if not rotated:
            break
    else:
        raise ConvergenceError(
            f"one-sided Jacobi SVD did not converge within {JACOBI_MAX_SWEEPS} sweeps"
        )

    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]

    u = np.zeros_like(work)
    nonzero = sigma > 0.0
    u[:, nonzero] = work[:, nonzero] / sigma[nonzero]
    if not nonzero.all():
        _complete_basis(u, np.flatnonzero(~nonzero))
    return u, sigma, v


def _complete_basis(u: np.ndarray, missing: np.ndarray) -> None:
    """Fill the listed columns of u with unit vectors orthogonal to the rest.

    Deterministic: each missing column takes the canonical basis vector with
    the largest residual after projecting out the columns already in place,
    re-orthogonalized twice.
    """
    n = u.shape[0]
    for col in missing:
        residuals = np.eye(n) - u @ u.T  # column j = residual of e_j
        norms = np.linalg.norm(residuals, axis=0)
        pick = int(np.argmax(norms))
        vec = residuals[:, pick]
        vec = vec - u @ (u.T @ vec)
        u[:, col] = vec / np.linalg.norm(vec)

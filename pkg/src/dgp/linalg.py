"""Dense linear algebra kernel.

Everything downstream (basis pools, projections, compression) sits on the
three operations in this module: a deterministic singular value
decomposition, energy-based rank selection, and projection onto the
orthogonal complement of a basis.  The SVD is a one-sided Jacobi iteration
rather than a LAPACK call so that runs are bit-stable across platforms and
the sign/ordering convention is pinned down by us, not by the backend.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConvergenceError

# Relative off-diagonal tolerance for Jacobi convergence.
_JACOBI_TOL = 1e-12
# Sweep cap; exceeded only for pathological inputs.
_MAX_SWEEPS = 60
# On the Gram path, singular values below this fraction of sigma_max are
# unresolvable (squared condition number) and are reported as exact zeros.
_GRAM_CUTOFF = 1e-7
# On the plain path, singular values below this fraction of sigma_max sit
# under the Jacobi tolerance: their directions are rotation noise, so they
# are reported as exact zeros rather than normalized into garbage columns.
_PLAIN_CUTOFF = 1e-14
# Columns whose residual norm falls below this are dropped by
# orthonormalize_append.
_APPEND_DROP = 1e-10


def check_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a C-contiguous float64 2-D array, rejecting non-finite entries."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size and not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class SvdFactorization:
    """Thin SVD ``m = u @ diag(sigma) @ vt`` with ``p = min(rows, cols)`` factors.

    ``u`` is (rows, p) column-orthonormal, ``sigma`` is (p,) descending and
    nonnegative, ``vt`` is (p, cols) row-orthonormal.
    """

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray


@dataclass(frozen=True)
class OrthonormalBasis:
    """A (possibly empty) set of orthonormal columns in ``R^dim``.

    Treated as immutable: growth goes through :func:`orthonormalize_append`,
    which returns a new instance.
    """

    dim: int
    vectors: np.ndarray  # shape (dim, count)

    @classmethod
    def empty(cls, dim: int) -> "OrthonormalBasis":
        return cls(dim, np.zeros((dim, 0)))

    @classmethod
    def from_columns(cls, cols) -> "OrthonormalBasis":
        cols = check_matrix(cols, "basis columns")
        return cls(cols.shape[0], cols)

    @property
    def count(self) -> int:
        return self.vectors.shape[1]

    @property
    def is_empty(self) -> bool:
        return self.vectors.shape[1] == 0


@lru_cache(maxsize=64)
def _round_robin_rounds(n: int) -> tuple:
    """Round-robin schedule pairing every column index with every other once.

    Circle method: with an (n+1)-th bye slot when n is odd, fix player 0 and
    rotate the rest.  Each round is a set of disjoint pairs, which lets one
    Jacobi sweep apply whole rounds of rotations as vectorized updates while
    keeping the visit order fully deterministic.
    """
    m = n + (n & 1)
    players = list(range(m))
    rounds = []
    for _ in range(max(m - 1, 0)):
        pairs = []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                pairs.append((min(p, q), max(p, q)))
        rounds.append((np.array([p for p, _ in pairs], dtype=np.intp),
                       np.array([q for _, q in pairs], dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _one_sided_jacobi(a: np.ndarray, max_sweeps: int, shape_note: tuple) -> tuple:
    """Rotate columns of ``a`` until pairwise orthogonal; returns (a, v).

    ``a @ v`` is accumulated in place, so on return ``a`` holds the original
    matrix times ``v`` and its column norms are the singular values.
    """
    a = np.array(a, dtype=np.float64, order="F")
    n_cols = a.shape[1]
    v = np.eye(n_cols)
    if n_cols < 2:
        return a, v
    rounds = _round_robin_rounds(n_cols)
    for _ in range(max_sweeps):
        rotated = False
        for ps, qs in rounds:
            ap = a[:, ps]
            aq = a[:, qs]
            app = np.einsum("ij,ij->j", ap, ap)
            aqq = np.einsum("ij,ij->j", aq, aq)
            apq = np.einsum("ij,ij->j", ap, aq)
            denom = np.sqrt(app * aqq)
            active = denom > 0.0
            np.logical_and(active, np.abs(apq) > _JACOBI_TOL * denom, out=active)
            if not active.any():
                continue
            idx = np.flatnonzero(active)
            tau = (aqq[idx] - app[idx]) / (2.0 * apq[idx])
            with np.errstate(over="ignore"):
                t = np.sign(tau) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            # huge tau overflows the discriminant; first-order branch still
            # cancels the off-diagonal term
            big = np.abs(tau) > 1e150
            if big.any():
                t[big] = 0.5 / tau[big]
            # sign(0) would zero the rotation; tau == 0 means a 45 degree turn
            t[tau == 0.0] = 1.0
            # an underflowed angle is an identity rotation; count it as done
            moving = t != 0.0
            if not moving.any():
                continue
            rotated = True
            idx = idx[moving]
            t = t[moving]
            cs = 1.0 / np.sqrt(1.0 + t * t)
            sn = cs * t
            pi = ps[idx]
            qi = qs[idx]
            ap = a[:, pi].copy()
            aq = a[:, qi]
            a[:, pi] = cs * ap - sn * aq
            a[:, qi] = sn * ap + cs * aq
            vp = v[:, pi].copy()
            vq = v[:, qi]
            v[:, pi] = cs * vp - sn * vq
            v[:, qi] = sn * vp + cs * vq
        if not rotated:
            return a, v
    raise ConvergenceError(
        f"one-sided Jacobi SVD did not converge within {max_sweeps} sweeps "
        f"for a {shape_note[0]}x{shape_note[1]} matrix"
    )


def _apply_sign_convention(u: np.ndarray, vt: np.ndarray) -> None:
    """Make each right singular vector's largest-magnitude entry nonnegative.

    Ties resolve to the lowest index (argmax on |.| returns the first hit).
    The matching left vector flips with it so the product is unchanged.
    """
    for i in range(vt.shape[0]):
        j = int(np.argmax(np.abs(vt[i])))
        if vt[i, j] < 0.0:
            vt[i] = -vt[i]
            u[:, i] = -u[:, i]


def svd(m, max_sweeps: int = _MAX_SWEEPS) -> SvdFactorization:
    """Deterministic thin SVD of a dense float64 matrix.

    One-sided Jacobi rotations with a round-robin pair schedule, 1e-12
    relative off-diagonal tolerance and a cap of ``max_sweeps`` sweeps.
    Matrices with rows > 4*cols go through the Gram matrix ``m.T @ m`` for
    speed; on that path singular values below 1e-7 * sigma_max are reported
    as exact zeros (the squared condition number makes them unresolvable).

    Raises
    ------
    ConvergenceError
        If the sweep cap is exhausted; the message names the matrix shape.
    """
    m = check_matrix(m)
    rows, cols = m.shape
    if rows == 0 or cols == 0:
        p = min(rows, cols)
        return SvdFactorization(np.zeros((rows, p)), np.zeros(p), np.zeros((p, cols)))
    if rows < cols:
        f = svd(m.T, max_sweeps=max_sweeps)
        u = np.ascontiguousarray(f.vt.T)
        vt = np.ascontiguousarray(f.u.T)
        _apply_sign_convention(u, vt)  # convention is defined on right vectors
        return SvdFactorization(u, f.sigma, vt)

    if rows > 4 * cols:
        gram = m.T @ m
        _, v = _one_sided_jacobi(gram, max_sweeps, (rows, cols))
        u = m @ v
        sigma = np.sqrt(np.einsum("ij,ij->j", u, u))
        order = np.argsort(-sigma, kind="stable")
        sigma = sigma[order]
        u = u[:, order]
        v = v[:, order]
        cutoff = _GRAM_CUTOFF * (sigma[0] if sigma.size else 0.0)
        keep = sigma > cutoff
        sigma = np.where(keep, sigma, 0.0)
        u[:, keep] /= sigma[keep]
        # near the cutoff the quotient can drift off unit length
        norms = np.sqrt(np.einsum("ij,ij->j", u[:, keep], u[:, keep]))
        u[:, keep] /= np.where(norms > 0.0, norms, 1.0)
        u[:, ~keep] = 0.0
        u = _complete_orthonormal_masked(u, keep)
    else:
        rotated, v = _one_sided_jacobi(m, max_sweeps, (rows, cols))
        sigma = np.sqrt(np.einsum("ij,ij->j", rotated, rotated))
        order = np.argsort(-sigma, kind="stable")
        sigma = sigma[order]
        rotated = rotated[:, order]
        v = v[:, order]
        cutoff = _PLAIN_CUTOFF * (sigma[0] if sigma.size else 0.0)
        pos = sigma > cutoff
        sigma = np.where(pos, sigma, 0.0)
        u = np.zeros_like(rotated)
        u[:, pos] = rotated[:, pos] / sigma[pos]
        u = _complete_orthonormal_masked(u, pos)

    vt = v.T.copy()
    _apply_sign_convention(u, vt)
    return SvdFactorization(np.ascontiguousarray(u), sigma, np.ascontiguousarray(vt))


def _complete_orthonormal_masked(u: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Orthonormally fill the columns of ``u`` where ``filled`` is False.

    Candidates are standard basis vectors, then seeded random draws as a
    fallback for adversarial spans.  Each candidate is projected against the
    accepted columns twice (single-pass Gram-Schmidt is not enough when the
    residual is small) and accepted once its residual norm clears 0.1.
    """
    if filled.all():
        return u
    rows = u.shape[0]
    good = [u[:, k] for k in np.flatnonzero(filled)]

    def candidates():
        for e in range(rows):
            cand = np.zeros(rows)
            cand[e] = 1.0
            yield cand
        rng = np.random.default_rng(0)
        for _ in range(4 * rows):
            yield rng.normal(size=rows)

    source = candidates()
    for j in np.flatnonzero(~filled):
        for cand in source:
            for _ in range(2):
                for g in good:
                    cand -= (g @ cand) * g
            nrm = np.linalg.norm(cand)
            if nrm > 0.1:
                u[:, j] = cand / nrm
                good.append(u[:, j])
                break
        else:
            raise ConvergenceError("failed to complete orthonormal factor")
    return u


def rank_select(sigma, alpha: float) -> int:
    """Smallest k with ``sum(sigma[:k]**2) >= alpha * sum(sigma**2)``.

    ``sigma`` must be descending and nonnegative with at least one positive
    entry; ``alpha`` in (0, 1].  ``alpha = 1.0`` returns the count of
    positive singular values.
    """
    sig = np.asarray(sigma, dtype=np.float64)
    if sig.ndim != 1:
        raise ValueError(f"sigma must be 1-D, got shape {sig.shape}")
    if sig.size == 0 or not (sig > 0.0).any():
        raise ValueError("zero matrix has no informative subspace")
    if (sig < 0.0).any():
        raise ValueError("sigma must be nonnegative")
    if np.any(np.diff(sig) > 0.0):
        raise ValueError("sigma must be sorted in descending order")
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if alpha == 1.0:
        return int(np.count_nonzero(sig > 0.0))
    energy = np.cumsum(sig * sig)
    total = energy[-1]
    return int(np.searchsorted(energy, alpha * total - 1e-300) + 1)


def project_out(m, basis: OrthonormalBasis) -> np.ndarray:
    """Remove from each column of ``m`` its component along ``basis``.

    Returns ``r = m - B @ (B.T @ m)``.  An empty basis returns an exact
    copy.  Two projection passes keep ``max|B.T r|`` at roundoff even for
    large accumulated bases.
    """
    m = check_matrix(m)
    if m.shape[0] != basis.dim:
        raise ValueError(
            f"matrix rows ({m.shape[0]}) must equal basis dim ({basis.dim})"
        )
    if basis.is_empty:
        return m.copy()
    b = basis.vectors
    r = m - b @ (b.T @ m)
    r -= b @ (b.T @ r)
    return r


def orthonormalize_append(basis: OrthonormalBasis, new_vectors) -> OrthonormalBasis:
    """Append columns to ``basis``, re-orthonormalizing with modified Gram-Schmidt.

    Columns whose residual norm drops below 1e-10 are dropped.  The caller
    is expected to pass vectors already residualized against ``basis``; the
    MGS pass here re-projects anyway, which only tightens orthonormality.
    """
    new = check_matrix(new_vectors, "new_vectors")
    if new.shape[0] != basis.dim:
        raise ValueError(
            f"new vectors have dim {new.shape[0]}, basis has dim {basis.dim}"
        )
    kept = []
    existing = basis.vectors
    for j in range(new.shape[1]):
        w = new[:, j].copy()
        for _ in range(2):  # two MGS passes for numerical insurance
            if existing.shape[1]:
                w -= existing @ (existing.T @ w)
            for k in kept:
                w -= (k @ w) * k
        nrm = np.linalg.norm(w)
        if nrm < _APPEND_DROP:
            continue
        kept.append(w / nrm)
    if not kept:
        return basis
    cols = np.column_stack([existing] + kept) if existing.size else np.column_stack(kept)
    if cols.shape[1] > basis.dim:
        raise ValueError(
            f"basis would exceed ambient dimension ({cols.shape[1]} > {basis.dim})"
        )
    return OrthonormalBasis(basis.dim, cols)

"""Deterministic dense linear algebra on double-precision matrices.

Matrices are plain 2-D float64 numpy arrays (row-major). Every public
operation validates shapes and finiteness, so NaN/Inf can never leak
into downstream modules. Randomness comes from a counter-based
generator documented in :class:`Rng`, which makes every stream
reproducible from a single 64-bit seed, independent of numpy's own RNG.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

Matrix = np.ndarray

_U64 = np.uint64
_MASK64 = (1 << 64) - 1
_EPS = float(np.finfo(np.float64).eps)

# splitmix64 constants (Steele, Lea, Flood 2014)
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class SvdConvergenceError(RuntimeError):
    """Raised when the Jacobi sweep cap is exhausted before convergence."""


def as_matrix(data, name: str = "matrix") -> Matrix:
    """Coerce to a validated 2-D float64 array (finite entries, nonempty dims)."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={m.ndim}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"{name} must have positive dims, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(m)


def check_finite(m: Matrix, context: str = "result") -> Matrix:
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{context} contains non-finite entries")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product a @ b with explicit shape validation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: left is {a.shape[0]}x{a.shape[1]}, "
            f"right is {b.shape[0]}x{b.shape[1]}"
        )
    return check_finite(a @ b, "matmul result")


def frobenius_norm(m: Matrix) -> float:
    return float(np.linalg.norm(np.asarray(m, dtype=np.float64)))


class Rng:
    """Counter-based splitmix64 stream with Box-Muller normals.

    The k-th raw 64-bit output (k = 0, 1, 2, ...) is

        out_k = mix(seed + (k + 1) * 0x9E3779B97F4A7C15  mod 2^64)

    where mix(z) is the splitmix64 finalizer:

        z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9  (mod 2^64)
        z ^= z >> 27;  z *= 0x94D049BB133111EB  (mod 2^64)
        z ^= z >> 31

    Uniforms in [0, 1) take the top 53 bits: u_k = (out_k >> 11) * 2^-53.
    Normals consume uniforms in consecutive pairs (u_{2p}, u_{2p+1}):

        r = sqrt(-2 * ln(1 - u_{2p}))
        z_{2p}   = r * cos(2*pi*u_{2p+1})
        z_{2p+1} = r * sin(2*pi*u_{2p+1})

    An odd request discards the trailing sine value. Since 1 - u is in
    (0, 1] and u has at most 53 significant bits, r is bounded by
    sqrt(106 * ln 2), so normals are always finite. Equal seeds give
    bit-identical streams; the recipe above is the whole contract, so
    any language can reproduce it.
    """

    def __init__(self, seed: int):
        self._seed = int(seed) & _MASK64
        self._counter = 0

    def u64(self, n: int) -> np.ndarray:
        """Next n raw 64-bit outputs."""
        if n < 0:
            raise ValueError("n must be nonnegative")
        k = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        z = _U64(self._seed) + k * _U64(_GAMMA)
        z = (z ^ (z >> _U64(30))) * _U64(_MIX1)
        z = (z ^ (z >> _U64(27))) * _U64(_MIX2)
        return z ^ (z >> _U64(31))

    def uniform(self, n: int) -> np.ndarray:
        return (self.u64(n) >> _U64(11)).astype(np.float64) * (2.0 ** -53)

    def normal(self, n: int) -> np.ndarray:
        if n == 0:
            return np.zeros(0)
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        theta = (2.0 * np.pi) * u[1::2]
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n); j = floor(u * (i + 1)) at step i."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def offset_seed(seed: int, offset: int) -> int:
    """Derived stream seed: (seed + offset) mod 2^64.

    Distinct offsets give non-overlapping splitmix64 state sequences for
    any desk-scale number of draws, since the per-stream state advances
    by the odd constant gamma.
    """
    return (int(seed) + int(offset)) & _MASK64


def gaussian_matrix(rows: int, cols: int, std: float, seed: int) -> Matrix:
    """i.i.d. N(0, std^2) matrix from the documented Rng stream, row-major fill."""
    if rows < 1 or cols < 1:
        raise ValueError(f"dims must be >= 1, got {rows}x{cols}")
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    z = Rng(seed).normal(rows * cols)
    return (std * z).reshape(rows, cols)


class SvdResult(NamedTuple):
    u: Matrix
    s: np.ndarray
    vt: Matrix


def _round_robin_pairs(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Circle-method tournament: each round pairs disjoint columns, all
    # C(n,2) pairs are visited exactly once per sweep.
    players: list[int | None] = list(range(n)) + ([None] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        li, lj = [], []
        for k in range(m // 2):
            a, b = players[k], players[m - 1 - k]
            if a is not None and b is not None:
                li.append(min(a, b))
                lj.append(max(a, b))
        rounds.append((np.array(li), np.array(lj)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _correlation_off_mass(g: Matrix) -> float:
    # Frobenius mass of the off-diagonal of the column correlation matrix,
    # ignoring numerically negligible columns. Computed directly from the
    # off-diagonal entries; forming fro^2 - sum(diag^2) would cancel.
    d = np.sqrt(np.diag(g).copy())
    dmax = float(d.max()) if d.size else 0.0
    if dmax == 0.0:
        return 0.0
    live = d > _EPS * g.shape[0] * dmax
    denom = np.where(live, d, 1.0)
    c = np.abs(g) / denom[:, None] / denom[None, :]
    c[~live, :] = 0.0
    c[:, ~live] = 0.0
    np.fill_diagonal(c, 0.0)
    return float(np.linalg.norm(c))


def _jacobi_tall(m: Matrix, max_sweeps: int, tol: float) -> SvdResult:
    # One-sided Jacobi on a tall matrix (rows >= cols): orthogonal column
    # rotations until all column pairs decorrelate. Convergence measure is
    # scaled per pair, which keeps U orthonormal even with a wide spread
    # of singular values.
    a = np.array(m, dtype=np.float64, order="F", copy=True)
    rows, n = a.shape
    v = np.eye(n)
    rounds = _round_robin_pairs(n) if n > 1 else []
    skip_tol = 1e-15
    converged = False
    for _ in range(max_sweeps):
        g = a.T @ a
        if _correlation_off_mass(g) <= tol:
            converged = True
            break
        negligible = (_EPS * n) ** 2 * float(np.max(np.diag(g)))
        for li, lj in rounds:
            ci = a[:, li]
            cj = a[:, lj]
            aii = np.einsum("ij,ij->j", ci, ci)
            ajj = np.einsum("ij,ij->j", cj, cj)
            aij = np.einsum("ij,ij->j", ci, cj)
            live = (aii > negligible) & (ajj > negligible)
            rot = live & (np.abs(aij) > skip_tol * np.sqrt(aii * ajj))
            if not rot.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                tau = (ajj - aii) / (2.0 * aij)
                t = np.copysign(1.0, tau) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(rot, c, 1.0)
            s = np.where(rot, s, 0.0)
            a[:, li] = c * ci - s * cj
            a[:, lj] = s * ci + c * cj
            vi = v[:, li]
            vj = v[:, lj]
            v[:, li] = c * vi - s * vj
            v[:, lj] = s * vi + c * vj
    else:
        converged = _correlation_off_mass(a.T @ a) <= tol
    if not converged:
        raise SvdConvergenceError(
            f"one-sided Jacobi did not converge within {max_sweeps} sweeps "
            f"on a {rows}x{n} matrix"
        )

    norms = np.sqrt(np.einsum("ij,ij->j", a, a))
    order = np.argsort(-norms, kind="stable")
    s = norms[order]
    u = np.zeros((rows, n))
    tiny = _EPS * max(rows, n) * (s[0] if s.size else 0.0)
    basis_cursor = 0
    for idx, col in enumerate(order):
        if norms[col] > tiny:
            u[:, idx] = a[:, col] / norms[col]
        else:
            # Negligible singular value: complete U with a unit vector
            # orthogonal to the columns already placed.
            for _ in range(2 * rows):
                e = np.zeros(rows)
                e[basis_cursor % rows] = 1.0
                basis_cursor += 1
                e -= u[:, :idx] @ (u[:, :idx].T @ e)
                nrm = float(np.linalg.norm(e))
                if nrm > 0.5:
                    u[:, idx] = e / nrm
                    break
    return SvdResult(u=u, s=s, vt=v[:, order].T)


def svd(m: Matrix, max_sweeps: int = 60, tol: float = 1e-12) -> SvdResult:
    """Thin SVD via one-sided Jacobi rotations.

    Returns (u, s, vt) with u: m x k orthonormal columns, s nonincreasing
    and nonnegative of length k = min(rows, cols), vt: k x n orthonormal
    rows. Wide inputs are transposed internally. Raises
    SvdConvergenceError instead of returning an unconverged result.
    """
    m = as_matrix(m, "svd input")
    if m.shape[0] >= m.shape[1]:
        return _jacobi_tall(m, max_sweeps, tol)
    u2, s, vt2 = _jacobi_tall(m.T, max_sweeps, tol)
    return SvdResult(u=vt2.T, s=s, vt=u2.T)


def effective_rank(s: Sequence[float], rel_tol: float) -> int:
    """Count singular values above rel_tol times the largest one."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1:
        raise ValueError("singular values must be a 1-D sequence")
    if not (0.0 < rel_tol < 1.0):
        raise ValueError(f"rel_tol must be in (0, 1), got {rel_tol}")
    if s.size == 0:
        return 0
    if np.any(s < 0):
        raise ValueError("singular values must be nonnegative")
    if np.any(np.diff(s) > 0):
        raise ValueError("singular values must be nonincreasing")
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))

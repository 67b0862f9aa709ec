"""Numeric kernels shared by every other module.

Tensors are plain ``numpy.ndarray`` values. This module owns the project-wide
precision switch, seeded random streams, and the two linear-algebra kernels the
Fisher approximation relies on: a symmetric eigensolver and the Kronecker
matrix-vector identity.

The vec convention is column-major everywhere: ``vec(C) == C.flatten(order="F")``.
"""

from __future__ import annotations

import contextlib
import logging
from typing import Iterator, List, Sequence, Tuple

import numpy as np
from scipy import special

from .errors import ConfigError, NumericError, ShapeError

logger = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}

JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-12
SYMMETRY_TOL = 1e-6

_dtype = np.float32


def set_precision(name: str) -> None:
    """Switch all subsequently created tensors to ``float32`` or ``float64``."""
    global _dtype
    if name not in PRECISIONS:
        raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {name!r}")
    _dtype = PRECISIONS[name]


def get_dtype() -> type:
    return _dtype


def precision_name() -> str:
    return "float64" if _dtype is np.float64 else "float32"


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch precision (used by oracle tests and grad checks)."""
    previous = precision_name()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def as_tensor(data: object, dtype: object = None) -> np.ndarray:
    """Convert to a contiguous array in the active precision."""
    return np.ascontiguousarray(data, dtype=dtype or _dtype)


def ensure_finite(name: str, array: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        bad = int(np.size(array) - np.count_nonzero(np.isfinite(array)))
        raise NumericError(f"{name}: {bad} non-finite value(s)")
    return array


def _require_matrix(name: str, m: np.ndarray) -> None:
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit shape checking."""
    a = np.asarray(a)
    b = np.asarray(b)
    _require_matrix("a", a)
    _require_matrix("b", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return ensure_finite("matmul", a @ b)


def kron_apply(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Return the q x p matrix whose vec equals ``(A ⊗ B) vec(C)``.

    Uses ``(A ⊗ B) vec(C) = vec(B C Aᵀ)``; for the symmetric second-moment
    factors this is the same as ``vec(Bᵀ C A)``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    c = np.asarray(c)
    for name, m in (("a", a), ("b", b), ("c", c)):
        _require_matrix(name, m)
    p, q = a.shape[0], b.shape[0]
    if a.shape != (p, p) or b.shape != (q, q):
        raise ShapeError(f"kron_apply factors must be square, got {a.shape} and {b.shape}")
    if c.shape != (q, p):
        raise ShapeError(f"kron_apply expects c of shape {(q, p)}, got {c.shape}")
    return ensure_finite("kron_apply", b @ c @ a.T)


def vec(c: np.ndarray) -> np.ndarray:
    return np.asarray(c).flatten(order="F")


def unvec(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    return np.asarray(v).reshape((rows, cols), order="F")


def _round_robin_rounds(n: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Tournament ordering: every index pair appears in exactly one round,
    and the pairs inside a round are disjoint."""
    m = n + (n % 2)
    players = list(range(m))
    rounds: List[Tuple[np.ndarray, np.ndarray]] = []
    for _ in range(m - 1):
        pairs = []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                pairs.append((min(p, q), max(p, q)))
        if pairs:
            arr = np.asarray(pairs, dtype=np.intp)
            rounds.append((arr[:, 0], arr[:, 1]))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _off_diagonal_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a - np.diag(np.diag(a))))


def _jacobi(a: np.ndarray, max_sweeps: int, tol: float) -> Tuple[np.ndarray, np.ndarray]:
    n = a.shape[0]
    v = np.eye(n)
    scale = float(np.linalg.norm(a))
    if n < 2 or scale == 0.0:
        return np.diag(a).copy(), v

    rounds = _round_robin_rounds(n)
    for sweep in range(max_sweeps):
        off = _off_diagonal_norm(a)
        logger.debug("jacobi sweep %d: off-diagonal %.3e (n=%d)", sweep, off / scale, n)
        if off <= tol * scale:
            return np.diag(a).copy(), v
        for p, q in rounds:
            apq = a[p, q]
            active = apq != 0.0
            theta = (a[q, q] - a[p, p]) / (2.0 * np.where(active, apq, 1.0))
            t = np.where(theta >= 0.0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
            c = np.where(active, 1.0 / np.hypot(t, 1.0), 1.0)
            s = np.where(active, t * c, 0.0)

            col_p, col_q = a[:, p], a[:, q]
            a[:, p] = col_p * c - col_q * s
            a[:, q] = col_p * s + col_q * c
            row_p, row_q = a[p, :], a[q, :]
            a[p, :] = c[:, None] * row_p - s[:, None] * row_q
            a[q, :] = s[:, None] * row_p + c[:, None] * row_q
            a[p, q] = 0.0
            a[q, p] = 0.0

            vec_p, vec_q = v[:, p], v[:, q]
            v[:, p] = vec_p * c - vec_q * s
            v[:, q] = vec_p * s + vec_q * c

    off = _off_diagonal_norm(a)
    if off <= tol * scale:
        return np.diag(a).copy(), v
    raise NumericError(
        f"sym_eig: Jacobi did not converge after {max_sweeps} sweeps "
        f"(relative off-diagonal norm {off / scale:.3e})"
    )


def sym_eig(
    m: np.ndarray,
    solver: str = "jacobi",
    max_sweeps: int = JACOBI_MAX_SWEEPS,
    tol: float = JACOBI_TOL,
) -> Tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Always computed in float64 regardless of the active precision. Returns
    ``(eigvecs, eigvals)`` with ``m ≈ U diag(λ) Uᵀ``.
    """
    a = np.array(m, dtype=np.float64)
    _require_matrix("m", a)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"sym_eig expects a square matrix, got {a.shape}")
    ensure_finite("sym_eig input", a)
    magnitude = float(np.max(np.abs(a))) if a.size else 0.0
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > SYMMETRY_TOL * max(magnitude, np.finfo(np.float64).tiny):
        raise NumericError(f"sym_eig: matrix is not symmetric (max |m - mᵀ| = {asym:.3e})")
    a = 0.5 * (a + a.T)

    if solver == "jacobi":
        eigvals, eigvecs = _jacobi(a, max_sweeps, tol)
    elif solver == "lapack":
        eigvals, eigvecs = np.linalg.eigh(a)
    else:
        raise ConfigError(f"unknown eigensolver {solver!r}")

    order = np.argsort(-eigvals, kind="stable")
    return eigvecs[:, order], eigvals[order]


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return special.expit(x)


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return special.logsumexp(x, axis=axis)


class Rng:
    """Seeded PCG64 stream; identical seed gives an identical stream on any platform."""

    def __init__(self, seed: int, spawn_key: Sequence[int] = ()):
        if int(seed) < 0:
            raise ConfigError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self._sequence = np.random.SeedSequence(self.seed, spawn_key=tuple(int(k) for k in spawn_key))
        self._generator = np.random.Generator(np.random.PCG64(self._sequence))

    @property
    def spawn_key(self) -> Tuple[int, ...]:
        return tuple(self._sequence.spawn_key)

    def spawn(self, *index: int) -> "Rng":
        """Independent child stream keyed by ``index`` (e.g. a sample index)."""
        return Rng(self.seed, self.spawn_key + tuple(index))

    def gaussian(self, shape: Sequence[int] | int) -> np.ndarray:
        # Drawn in float64 so the stream does not depend on the precision switch.
        return self._generator.standard_normal(shape).astype(_dtype, copy=False)

    def uniform(self, shape: Sequence[int] | int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._generator.uniform(low, high, shape).astype(_dtype, copy=False)

    def integers(self, low: int, high: int, shape: Sequence[int] | int) -> np.ndarray:
        return self._generator.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        """``size`` distinct indices out of ``range(n)``."""
        return self._generator.choice(n, size=size, replace=False)

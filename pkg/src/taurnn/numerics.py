"""Dense linear-algebra helpers shared by the cells, the integrator and training.

Vectors are 1-D float64 numpy arrays and matrices are 2-D float64 numpy arrays.
The elementwise helpers accept trailing batch axes (shape (d,) or (d, B)) since
they are plain ufunc applications; the shape checks guard the contracted axes.
All arithmetic is 64-bit; nothing here depends on global state.
"""

from __future__ import annotations

import numpy as np

Vector = np.ndarray
Matrix = np.ndarray


class PowerIterationError(RuntimeError):
    """Power iteration hit the iteration cap before the estimate settled.

    The estimate attribute carries the last singular-value iterate so callers
    can still inspect how far the run got.
    """

    def __init__(self, message: str, estimate: float):
        super().__init__(message)
        self.estimate = estimate


def matvec(m: Matrix, v: Vector) -> Vector:
    """Matrix-vector product with shape checking."""
    if m.ndim != 2:
        raise ValueError(f"matvec expects a 2-D matrix, got shape {m.shape}")
    if v.ndim != 1 or v.shape[0] != m.shape[1]:
        raise ValueError(
            f"matvec shape mismatch: matrix {m.shape} against vector {v.shape}"
        )
    return m @ v


def tanh_vec(v: np.ndarray) -> np.ndarray:
    """Elementwise tanh."""
    return np.tanh(v)


def sigmoid_vec(v: np.ndarray) -> np.ndarray:
    """Elementwise logistic sigmoid, overflow-safe for large |v|."""
    out = np.empty_like(v, dtype=np.float64)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def hadamard(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Elementwise product; operands must have identical shapes."""
    if u.shape != v.shape:
        raise ValueError(f"hadamard shape mismatch: {u.shape} vs {v.shape}")
    return u * v


def axpy(alpha: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """alpha * x + y; operands must have identical shapes."""
    if x.shape != y.shape:
        raise ValueError(f"axpy shape mismatch: {x.shape} vs {y.shape}")
    return alpha * x + y


def inf_norm(m: Matrix) -> float:
    """Induced infinity norm: maximum absolute row sum."""
    if m.ndim != 2:
        raise ValueError(f"inf_norm expects a 2-D matrix, got shape {m.shape}")
    return float(np.max(np.sum(np.abs(m), axis=1)))


def operator_norm(m: Matrix, rtol: float = 1e-10, max_iters: int = 10_000) -> float:
    """Largest singular value by power iteration on M^T M.

    Iterates v <- normalize(G v) with G = M^T M and stops once the Rayleigh
    quotient is stable to rtol (relative). Raises PowerIterationError carrying
    the last estimate if max_iters is exhausted first. The start vector is a
    fixed deterministic ramp, so repeated calls agree bit-for-bit.
    """
    if m.ndim != 2:
        raise ValueError(f"operator_norm expects a 2-D matrix, got shape {m.shape}")
    scale = float(np.max(np.abs(m))) if m.size else 0.0
    if scale == 0.0:
        return 0.0
    ms = m / scale  # keep G = M^T M away from overflow for extreme inputs
    g = ms.T @ ms
    n = g.shape[0]
    v = 1.0 + np.arange(n, dtype=np.float64) / max(n, 1)
    v /= np.linalg.norm(v)
    lam_prev = np.inf
    lam = 0.0
    for _ in range(max_iters):
        w = g @ v
        norm_w = float(np.linalg.norm(w))
        if norm_w == 0.0:
            # v landed exactly in the null space of G; with the deterministic
            # ramp start this only happens for the zero matrix, handled above.
            return 0.0
        v = w / norm_w
        lam = float(v @ (g @ v))
        if abs(lam - lam_prev) <= rtol * max(abs(lam), 1e-300):
            return scale * float(np.sqrt(max(lam, 0.0)))
        lam_prev = lam
    raise PowerIterationError(
        f"operator_norm did not converge in {max_iters} iterations "
        f"(last estimate {scale * float(np.sqrt(max(lam, 0.0)))!r})",
        estimate=scale * float(np.sqrt(max(lam, 0.0))),
    )

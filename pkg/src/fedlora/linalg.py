"""Dense float64 matrix kernel: seeded fills, products, norms, similarity, truncated SVD.

All functions are pure and operate on 2-D numpy arrays ("matrices"). Inputs are
coerced to float64; outputs are always finite float64 arrays. Randomness only
enters through explicit integer seeds, never through global RNG state.
"""

from __future__ import annotations

import hashlib

import numpy as np

Matrix = np.ndarray

# Norms below this are treated as degenerate for similarity purposes.
NORM_EPS = 1e-12

# Desk-scale cap for the decomposition routines.
MAX_SIDE = 1024


def as_matrix(values) -> Matrix:
    """Coerce to a 2-D float64 array, validating shape and finiteness."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


def derive_seed(root: int, *path) -> int:
    """Derive a 64-bit child seed from a root seed and a path of labels.

    Stable across platforms and runs: hashing, not RNG state, so independent
    streams can be drawn in any order.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root)).encode())
    for part in path:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest(), "little")


def gaussian_fill(rows: int, cols: int, std: float, seed: int) -> Matrix:
    """i.i.d. normal(0, std^2) matrix, fully determined by the seed."""
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, std, size=(rows, cols))


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def transpose(m: Matrix) -> Matrix:
    return m.T.copy()


def add(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def scale(m: Matrix, c: float) -> Matrix:
    return c * m


def frobenius_norm(m: Matrix) -> float:
    return float(np.linalg.norm(m))


def cosine_similarity_flat(a: Matrix, b: Matrix) -> float:
    """Cosine similarity of the flattened matrices. Errors on degenerate norms."""
    if a.shape != b.shape:
        raise ValueError(f"cosine shape mismatch: {a.shape} vs {b.shape}")
    na = frobenius_norm(a)
    nb = frobenius_norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        raise ValueError(
            f"cosine undefined for near-zero input (norms {na:.3e}, {nb:.3e})"
        )
    return float(np.vdot(a, b) / (na * nb))


def truncated_svd(m: Matrix, k: int) -> tuple[Matrix, np.ndarray, Matrix]:
    """Best rank-k factorization: U (rows x k), S (k, descending), V (cols x k).

    U @ diag(S) @ V.T is the Frobenius-optimal rank-k approximation of m.
    """
    rows, cols = m.shape
    if rows > MAX_SIDE or cols > MAX_SIDE:
        raise ValueError(f"matrix {m.shape} exceeds the {MAX_SIDE} per-side cap")
    if not 1 <= k <= min(rows, cols):
        raise ValueError(f"k={k} out of range for shape {m.shape}")
    try:
        u, s, vh = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        resid = float(np.linalg.norm(m))
        raise RuntimeError(
            f"SVD failed to converge on shape {m.shape} (input norm {resid:.3e})"
        ) from exc
    return u[:, :k], s[:k], vh[:k].T.copy()


def pad_zero(m: Matrix, target_rows: int, target_cols: int) -> Matrix:
    if target_rows < m.shape[0] or target_cols < m.shape[1]:
        raise ValueError(
            f"pad target ({target_rows}, {target_cols}) smaller than {m.shape}"
        )
    out = np.zeros((target_rows, target_cols))
    out[: m.shape[0], : m.shape[1]] = m
    return out


def slice_rows(m: Matrix, n: int) -> Matrix:
    if not 0 < n <= m.shape[0]:
        raise ValueError(f"cannot take {n} rows from shape {m.shape}")
    return m[:n].copy()


def slice_cols(m: Matrix, n: int) -> Matrix:
    if not 0 < n <= m.shape[1]:
        raise ValueError(f"cannot take {n} cols from shape {m.shape}")
    return m[:, :n].copy()


def hstack(blocks) -> Matrix:
    return np.hstack(list(blocks))


def vstack(blocks) -> Matrix:
    return np.vstack(list(blocks))


def solve_spd(a: Matrix, b: Matrix) -> Matrix:
    """Solve a @ x = b for small symmetric positive-definite a."""
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"solve_spd needs a square matrix, got {a.shape}")
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-12):
        raise ValueError("solve_spd needs a symmetric matrix")
    try:
        np.linalg.cholesky(a)  # positive-definiteness check
    except np.linalg.LinAlgError as exc:
        raise ValueError("solve_spd needs a positive-definite matrix") from exc
    return np.linalg.solve(a, b)

"""Server-side residual refinement of the averaged adapter factors.

Given the ideal global update dW and the averaged factors (A_bar, B_bar),
finds a residual delta so that (B_bar + delta) @ A_bar aligns with dW while
staying close to B_bar. The loss is (1 - cosine) plus a norm penalty; plain
gradient descent with step-halving keeps the loss monotone non-increasing.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import linalg

ON_B = "on_B"
ON_A = "on_A"

_MAX_HALVINGS = 60


class SolverDiverged(RuntimeError):
    """Raised when the loss turns non-finite (unreachable under step-halving)."""


@dataclass(frozen=True)
class SolverConfig:
    learning_rate: float = 0.1
    max_steps: int = 500
    lam: float = 0.01
    grad_tol: float = 1e-7
    norm_guard_eps: float = 1e-12
    residual_position: str = ON_B
    squared_norm: bool = False  # optional lam * ||delta||_F^2 penalty variant

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.residual_position not in (ON_B, ON_A):
            raise ValueError(f"unknown residual_position {self.residual_position!r}")


@dataclass(frozen=True)
class SolverReport:
    delta: np.ndarray
    steps_taken: int
    initial_cosine: float
    final_cosine: float
    final_delta_norm: float
    final_loss: float
    regularizer_similarity: float


def _penalty(delta: np.ndarray, lam: float, squared: bool) -> float:
    n = linalg.frobenius_norm(delta)
    return lam * n * n if squared else lam * n


def objective(
    delta_B: np.ndarray,
    dW: np.ndarray,
    A_bar: np.ndarray,
    B_bar: np.ndarray,
    lam: float,
    norm_guard_eps: float = 1e-12,
    squared_norm: bool = False,
) -> float:
    """(1 - cosine(dW, (B_bar + delta) @ A_bar)) + lam * ||delta||_F."""
    if linalg.frobenius_norm(dW) < norm_guard_eps:
        raise ValueError("objective undefined: target update has near-zero norm")
    realized = (B_bar + delta_B) @ A_bar
    cos = linalg.cosine_similarity_flat(dW, realized)
    return (1.0 - cos) + _penalty(delta_B, lam, squared_norm)


def gradient(
    delta_B: np.ndarray,
    dW: np.ndarray,
    A_bar: np.ndarray,
    B_bar: np.ndarray,
    lam: float,
    norm_guard_eps: float = 1e-12,
    squared_norm: bool = False,
) -> np.ndarray:
    """Analytic gradient of the objective with respect to the residual."""
    nv = linalg.frobenius_norm(dW)
    if nv < norm_guard_eps:
        raise ValueError("gradient undefined: target update has near-zero norm")
    m = (B_bar + delta_B) @ A_bar
    nu = linalg.frobenius_norm(m)
    if nu < norm_guard_eps:
        raise ValueError("gradient undefined: realized update has near-zero norm")
    dot = float(np.vdot(m, dW))
    # d(cos)/dM, then chain through M = (B_bar + delta) @ A_bar.
    dcos_dm = dW / (nu * nv) - (dot / (nu**3 * nv)) * m
    grad = -(dcos_dm @ A_bar.T)
    if lam > 0:
        if squared_norm:
            grad = grad + 2.0 * lam * delta_B
        else:
            dn = max(linalg.frobenius_norm(delta_B), norm_guard_eps)
            grad = grad + lam * delta_B / dn
    return grad


def solve(
    dW: np.ndarray, A_bar: np.ndarray, B_bar: np.ndarray, cfg: SolverConfig
) -> SolverReport:
    """Minimize the residual objective from delta = 0 with monotone descent.

    With residual_position="on_A" the roles of the factors are mirrored via
    the transposed problem, so both ablation positions share one code path.
    """
    if cfg.residual_position == ON_A:
        inner = solve(dW.T, A_bar=B_bar.T, B_bar=A_bar.T, cfg=replace(cfg, residual_position=ON_B))
        return replace(inner, delta=inner.delta.T)

    delta = np.zeros_like(B_bar)
    loss = objective(delta, dW, A_bar, B_bar, cfg.lam, cfg.norm_guard_eps, cfg.squared_norm)
    if not np.isfinite(loss):
        raise SolverDiverged(f"non-finite loss at start: {loss}")
    initial_cosine = 1.0 - loss  # penalty is zero at delta = 0

    steps_taken = 0
    for _ in range(cfg.max_steps):
        grad = gradient(delta, dW, A_bar, B_bar, cfg.lam, cfg.norm_guard_eps, cfg.squared_norm)
        if linalg.frobenius_norm(grad) <= cfg.grad_tol:
            break
        step = cfg.learning_rate
        accepted = False
        for _ in range(_MAX_HALVINGS):
            candidate = delta - step * grad
            cand_loss = objective(
                candidate, dW, A_bar, B_bar, cfg.lam, cfg.norm_guard_eps, cfg.squared_norm
            )
            if not np.isfinite(cand_loss):
                step *= 0.5
                continue
            if cand_loss < loss:
                delta, loss = candidate, cand_loss
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break  # no decrease at minimal step: numerically converged
        steps_taken += 1

    if not np.isfinite(loss):
        raise SolverDiverged(f"non-finite loss after {steps_taken} steps")

    final_cosine = 1.0 - (loss - _penalty(delta, cfg.lam, cfg.squared_norm))
    if linalg.frobenius_norm(delta) < cfg.norm_guard_eps:
        reg_similarity = 1.0
    else:
        reg_similarity = linalg.cosine_similarity_flat(B_bar, B_bar + delta)
    return SolverReport(
        delta=delta,
        steps_taken=steps_taken,
        initial_cosine=initial_cosine,
        final_cosine=final_cosine,
        final_delta_norm=linalg.frobenius_norm(delta),
        final_loss=loss,
        regularizer_similarity=reg_similarity,
    )


def projection_oracle(dW: np.ndarray, A_bar: np.ndarray) -> tuple[np.ndarray, float]:
    """Closed-form optimum of the lam = 0 problem.

    X* = dW @ A_bar.T @ (A_bar @ A_bar.T)^-1 maximizes cosine(dW, X @ A_bar);
    the optimum value is ||X* @ A_bar||_F / ||dW||_F. Requires A_bar to have
    full row rank.
    """
    smallest = np.linalg.svd(A_bar, compute_uv=False)[-1]
    if smallest <= 1e-8:
        raise ValueError(f"A_bar is rank-deficient (smallest singular value {smallest:.3e})")
    gram = A_bar @ A_bar.T
    x_star = linalg.solve_spd(gram, A_bar @ dW.T).T
    cos_star = linalg.frobenius_norm(x_star @ A_bar) / linalg.frobenius_norm(dW)
    return x_star, float(cos_star)

"""Server-side aggregation strategies for client adapter contributions.

Implements the plain weighted average (fedit), frozen-A averaging (ffa-lora),
module stacking (flora), SVD redistribution (flexlora), zero-pad / truncate
rank alignment (hetlora), and residual-refined averaging (lora-fair).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import linalg, solver
from .lora import LoraPair, effective_update

FEDIT = "fedit"
FFA = "ffa-lora"
FLORA = "flora"
FLEXLORA = "flexlora"
HETLORA = "hetlora"
LORAFAIR = "lora-fair"
LORAFAIR_HETLORA = "lora-fair-hetlora"

METHODS = (FEDIT, FFA, FLORA, FLEXLORA, HETLORA, LORAFAIR, LORAFAIR_HETLORA)


class ProtocolViolation(ValueError):
    """A client broke a method invariant (e.g. trained a frozen factor)."""


@dataclass(frozen=True)
class ClientContribution:
    """One client's trained pair plus the sample count that sets its weight."""

    pair: LoraPair
    sample_count: int
    client_id: int = 0

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError(f"sample_count must be >= 1, got {self.sample_count}")


@dataclass(frozen=True)
class AggregateResult:
    method: str
    broadcast_A: np.ndarray
    broadcast_B: np.ndarray
    ideal_update: np.ndarray
    realized_update: np.ndarray
    bias_cosine: float
    bias_frobenius: float
    downlink_floats: float
    fold_delta: np.ndarray | None = None
    reinit_required: bool = False
    solver_report: solver.SolverReport | None = None
    solve_seconds: float = 0.0


def weights(contribs) -> np.ndarray:
    """Data-proportional weights p_k = count_k / sum(counts), summing to 1.

    Counts are reduced by their gcd first, so scaling every count by the same
    integer yields bit-identical weights.
    """
    if not contribs:
        raise ValueError("cannot aggregate an empty contribution list")
    counts = [c.sample_count for c in contribs]
    g = math.gcd(*counts)
    reduced = [c // g for c in counts]
    total = sum(reduced)
    return np.array([c / total for c in reduced])


def _check_dims(contribs) -> tuple[int, int]:
    dims = {(c.pair.out_dim, c.pair.in_dim) for c in contribs}
    if len(dims) != 1:
        raise ValueError(f"contributions have mismatched update shapes: {sorted(dims)}")
    return dims.pop()


def _check_uniform_rank(contribs, method: str) -> int:
    ranks = {c.pair.rank for c in contribs}
    if len(ranks) != 1:
        raise ValueError(
            f"{method} does not support heterogeneous ranks {sorted(ranks)}; "
            "pad contributions to a common rank first"
        )
    return ranks.pop()


def average_pairs(contribs) -> tuple[np.ndarray, np.ndarray]:
    """Weighted averages (A_bar, B_bar) of homogeneous-shape factor pairs."""
    _check_dims(contribs)
    _check_uniform_rank(contribs, "average_pairs")
    p = weights(contribs)
    a_bar = sum(pk * c.pair.A for pk, c in zip(p, contribs))
    b_bar = sum(pk * c.pair.B for pk, c in zip(p, contribs))
    return a_bar, b_bar


def approx_update(a_bar: np.ndarray, b_bar: np.ndarray) -> np.ndarray:
    """Update the clients actually receive from averaged factors: B_bar @ A_bar."""
    return linalg.matmul(b_bar, a_bar)


def ideal_update(contribs) -> np.ndarray:
    """Weighted sum of the clients' effective updates."""
    _check_dims(contribs)
    p = weights(contribs)
    return sum(pk * effective_update(c.pair) for pk, c in zip(p, contribs))


def _bias(ideal: np.ndarray, realized: np.ndarray) -> tuple[float, float]:
    ni = linalg.frobenius_norm(ideal)
    nr = linalg.frobenius_norm(realized)
    if ni < linalg.NORM_EPS or nr < linalg.NORM_EPS:
        cos = 1.0 if (ni < linalg.NORM_EPS and nr < linalg.NORM_EPS) else 0.0
    else:
        cos = linalg.cosine_similarity_flat(ideal, realized)
    return cos, linalg.frobenius_norm(ideal - realized)


def aggregate_fedit(contribs) -> AggregateResult:
    """Weighted-average both factors and broadcast them as-is."""
    d, l = _check_dims(contribs)
    r = _check_uniform_rank(contribs, FEDIT)
    a_bar, b_bar = average_pairs(contribs)
    ideal = ideal_update(contribs)
    realized = approx_update(a_bar, b_bar)
    cos, frob = _bias(ideal, realized)
    return AggregateResult(
        method=FEDIT,
        broadcast_A=a_bar,
        broadcast_B=b_bar,
        ideal_update=ideal,
        realized_update=realized,
        bias_cosine=cos,
        bias_frobenius=frob,
        downlink_floats=r * (d + l),
    )


def aggregate_ffa(contribs, frozen_A: np.ndarray) -> AggregateResult:
    """Average only B; A must be the bit-exact shared frozen factor."""
    d, l = _check_dims(contribs)
    r = _check_uniform_rank(contribs, FFA)
    for c in contribs:
        if not np.array_equal(c.pair.A, frozen_A):
            raise ProtocolViolation(
                f"client {c.client_id} modified the frozen A factor"
            )
    p = weights(contribs)
    b_bar = sum(pk * c.pair.B for pk, c in zip(p, contribs))
    ideal = ideal_update(contribs)
    realized = linalg.matmul(b_bar, frozen_A)
    cos, frob = _bias(ideal, realized)
    return AggregateResult(
        method=FFA,
        broadcast_A=frozen_A,
        broadcast_B=b_bar,
        ideal_update=ideal,
        realized_update=realized,
        bias_cosine=cos,
        bias_frobenius=frob,
        downlink_floats=r * d,
    )


def aggregate_flora(contribs) -> AggregateResult:
    """Stack weighted B blocks against stacked A blocks; the product is exact.

    The weight p_k multiplies the B block so the stacked product equals the
    weighted sum of client updates. Clients fold the product into their base
    and reinitialize their adapters.
    """
    d, l = _check_dims(contribs)
    p = weights(contribs)
    b_stack = linalg.hstack([pk * c.pair.B for pk, c in zip(p, contribs)])
    a_stack = linalg.vstack([c.pair.A for c in contribs])
    fold_delta = linalg.matmul(b_stack, a_stack)
    ideal = ideal_update(contribs)
    cos, frob = _bias(ideal, fold_delta)
    total_rank = sum(c.pair.rank for c in contribs)
    return AggregateResult(
        method=FLORA,
        broadcast_A=a_stack,
        broadcast_B=b_stack,
        ideal_update=ideal,
        realized_update=fold_delta,
        bias_cosine=cos,
        bias_frobenius=frob,
        downlink_floats=total_rank * (d + l),
        fold_delta=fold_delta,
        reinit_required=True,
    )


def aggregate_flexlora(contribs, target_rank: int) -> AggregateResult:
    """Rebuild factors from the truncated SVD of the ideal update.

    The realized update is the Frobenius-best rank-r approximation, so the
    bias is exactly the discarded singular-value tail.
    """
    d, l = _check_dims(contribs)
    if not 1 <= target_rank <= min(d, l):
        raise ValueError(
            f"rank must satisfy rank <= min(d,l): rank={target_rank}, min(d,l)={min(d, l)}"
        )
    ideal = ideal_update(contribs)
    t0 = time.perf_counter()
    u, s, v = linalg.truncated_svd(ideal, target_rank)
    svd_seconds = time.perf_counter() - t0
    sqrt_s = np.sqrt(s)
    b_new = u * sqrt_s[np.newaxis, :]
    a_new = sqrt_s[:, np.newaxis] * v.T
    realized = linalg.matmul(b_new, a_new)
    cos, frob = _bias(ideal, realized)
    return AggregateResult(
        method=FLEXLORA,
        broadcast_A=a_new,
        broadcast_B=b_new,
        ideal_update=ideal,
        realized_update=realized,
        bias_cosine=cos,
        bias_frobenius=frob,
        downlink_floats=target_rank * (d + l),
        solve_seconds=svd_seconds,
    )


def hetlora_pad(contribs, r_max: int) -> list[ClientContribution]:
    """Zero-pad every pair to rank r_max; effective updates are unchanged."""
    ranks = [c.pair.rank for c in contribs]
    if r_max < max(ranks):
        raise ValueError(f"r_max={r_max} is below the largest client rank {max(ranks)}")
    padded = []
    for c in contribs:
        d, l = c.pair.out_dim, c.pair.in_dim
        b = linalg.pad_zero(c.pair.B, d, r_max)
        a = linalg.pad_zero(c.pair.A, r_max, l)
        padded.append(
            ClientContribution(
                pair=LoraPair(B=b, A=a),
                sample_count=c.sample_count,
                client_id=c.client_id,
            )
        )
    return padded


def hetlora_truncate(pair: LoraPair, r_k: int) -> LoraPair:
    """Keep the leading r_k columns of B and rows of A."""
    if r_k > pair.rank:
        raise ValueError(f"cannot truncate rank {pair.rank} pair to larger rank {r_k}")
    return LoraPair(B=linalg.slice_cols(pair.B, r_k), A=linalg.slice_rows(pair.A, r_k))


def fit_pair_to_rank(pair: LoraPair, r_k: int) -> LoraPair:
    """Truncate or zero-pad a pair to rank r_k for heterogeneous distribution."""
    if r_k == pair.rank:
        return pair
    if r_k < pair.rank:
        return hetlora_truncate(pair, r_k)
    d, l = pair.out_dim, pair.in_dim
    return LoraPair(
        B=linalg.pad_zero(pair.B, d, r_k), A=linalg.pad_zero(pair.A, r_k, l)
    )


def aggregate_lorafair(contribs, solver_cfg: solver.SolverConfig) -> AggregateResult:
    """Average the factors, then refine one of them with a solved residual.

    Starting the solve from a zero residual reproduces the plain average, so
    the refined broadcast never scores a lower alignment cosine than fedit on
    the same inputs.
    """
    d, l = _check_dims(contribs)
    r = _check_uniform_rank(contribs, LORAFAIR)
    a_bar, b_bar = average_pairs(contribs)
    ideal = ideal_update(contribs)
    t0 = time.perf_counter()
    report = solver.solve(ideal, a_bar, b_bar, solver_cfg)
    solve_seconds = time.perf_counter() - t0
    if solver_cfg.residual_position == solver.ON_A:
        broadcast_a = a_bar + report.delta
        broadcast_b = b_bar
    else:
        broadcast_a = a_bar
        broadcast_b = b_bar + report.delta
    realized = linalg.matmul(broadcast_b, broadcast_a)
    cos, frob = _bias(ideal, realized)
    return AggregateResult(
        method=LORAFAIR,
        broadcast_A=broadcast_a,
        broadcast_B=broadcast_b,
        ideal_update=ideal,
        realized_update=realized,
        bias_cosine=cos,
        bias_frobenius=frob,
        downlink_floats=r * (d + l),
        solver_report=report,
        solve_seconds=solve_seconds,
    )


def comm_cost(method: str, d: int, l: int, ranks) -> tuple[int, float]:
    """Per-round communication in float counts.

    Returns (uplink, downlink): uplink summed over all contributing clients,
    downlink per client. When truncated distribution gives clients different
    ranks (hetlora modes), downlink is the per-client average.
    """
    ranks = [int(r) for r in ranks]
    if not ranks:
        raise ValueError("ranks must be nonempty")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    k = len(ranks)
    if method == FFA:
        uplink = sum(r * d for r in ranks)
        per_client = [r * d for r in ranks]
    elif method == FLORA:
        uplink = sum(r * (d + l) for r in ranks)
        per_client = [sum(ranks) * (d + l)] * k
    else:
        uplink = sum(r * (d + l) for r in ranks)
        per_client = [r * (d + l) for r in ranks]
    total_down = sum(per_client)
    downlink = total_down // k if total_down % k == 0 else total_down / k
    return uplink, downlink

"""Federated round orchestration: local training, aggregation, broadcast policies.

Every source of randomness is derived from the config seed, so a (config,
seed) pair fully determines all records. Clients are processed in id order;
wall-clock timings are recorded but never feed back into the computation.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import aggregation, data, linalg, metrics, solver
from .aggregation import AggregateResult, ClientContribution
from .config import POLICY_AVG, POLICY_LOCAL, POLICY_RE, FedConfig, canonical_dict
from .lora import FrozenBase, LoraPair, effective_update, fold_into_base, init_pair

_BASE_STD = 0.01  # weak random pre-trained weights: chance-level but tie-free


class TrainingDiverged(RuntimeError):
    """Raised when a local training loss turns non-finite."""


class PolicyMismatch(ValueError):
    """Raised when the init policy contradicts the aggregation method."""


@dataclass(frozen=True)
class GlobalState:
    base: FrozenBase
    current_pair: LoraPair
    round_index: int = 0
    frozen_A: np.ndarray | None = None


@dataclass(frozen=True)
class LocalTrainResult:
    pair: LoraPair
    mean_loss: float


def trainable_param_count(method: str, d: int, l: int, rank: int) -> int:
    """Parameters a client updates per round: d*r when A is frozen, else r*(d+l)."""
    if method == aggregation.FFA:
        return d * rank
    return rank * (d + l)


def _softmax_loss_and_grad(w, inputs, labels):
    """Mean cross-entropy of logits = inputs @ w.T and its gradient w.r.t. w."""
    logits = inputs @ w.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    n = inputs.shape[0]
    loss = -float(log_p[np.arange(n), labels].mean())
    probs = np.exp(log_p)
    probs[np.arange(n), labels] -= 1.0
    grad = (probs / n).T @ inputs
    return loss, grad


class _BatchStream:
    """Cycles through seeded permutations of the sample indices."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self._n = n
        self._batch = min(batch_size, n)
        self._rng = np.random.default_rng(seed)
        self._order = self._rng.permutation(n)
        self._pos = 0

    def next_batch(self) -> np.ndarray:
        if self._pos + self._batch > self._n:
            self._order = self._rng.permutation(self._n)
            self._pos = 0
        batch = self._order[self._pos : self._pos + self._batch]
        self._pos += self._batch
        return batch


def local_train(
    state: GlobalState, dataset: data.ClientDataset, cfg: FedConfig, seed: int
) -> LocalTrainResult:
    """Run cfg.local_iters mini-batch SGD steps on the adapter factors.

    Both factors receive gradients through the frozen base; under ffa-lora
    only B moves. Returns the trained pair and the mean step loss.
    """
    w0 = state.base.W0
    b = np.array(state.current_pair.B)
    a = np.array(state.current_pair.A)
    train_a = cfg.method != aggregation.FFA
    stream = _BatchStream(len(dataset), cfg.batch_size, seed)
    eta = cfg.learning_rate
    losses = []
    for _ in range(cfg.local_iters):
        idx = stream.next_batch()
        loss, grad_w = _softmax_loss_and_grad(
            w0 + b @ a, dataset.inputs[idx], dataset.labels[idx]
        )
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite training loss {loss}")
        # Both factor gradients come from the same forward pass, so the two
        # updates within one iteration are simultaneous, not sequential.
        grad_b = grad_w @ a.T
        if train_a:
            a = a - eta * (b.T @ grad_w)
        b = b - eta * grad_b
        losses.append(loss)
    return LocalTrainResult(pair=LoraPair(B=b, A=a), mean_loss=float(np.mean(losses)))


def apply_broadcast(
    state: GlobalState,
    result: AggregateResult,
    policy: str,
    seed: int,
    contribs=None,
    init_std: float = 0.02,
) -> GlobalState:
    """Produce the next global state from an aggregation result.

    avg-initial keeps the base and adopts the broadcast factors; re-initial and
    local-initial fold the realized update into the base first, then restart
    from a fresh pair or a uniformly chosen participant's pair.
    """
    if result.reinit_required and policy != POLICY_RE:
        raise PolicyMismatch(f"{result.method} folds its update and requires {POLICY_RE}")
    next_round = state.round_index + 1
    if policy == POLICY_AVG:
        pair = LoraPair(B=result.broadcast_B, A=result.broadcast_A)
        return replace(state, current_pair=pair, round_index=next_round)
    delta = result.fold_delta if result.fold_delta is not None else result.realized_update
    base = fold_into_base(state.base, delta)
    if policy == POLICY_RE:
        d, l = base.W0.shape
        pair = init_pair(d, l, state.current_pair.rank, std=init_std, seed=seed)
    elif policy == POLICY_LOCAL:
        if not contribs:
            raise PolicyMismatch("local-initial needs the participating contributions")
        pick = int(np.random.default_rng(seed).integers(len(contribs)))
        pair = contribs[pick].pair
    else:
        raise PolicyMismatch(f"unknown init policy {policy!r}")
    return GlobalState(
        base=base, current_pair=pair, round_index=next_round, frozen_A=state.frozen_A
    )


def _solver_config(cfg: FedConfig) -> solver.SolverConfig:
    return solver.SolverConfig(
        learning_rate=cfg.solver_lr,
        max_steps=cfg.solver_max_steps,
        lam=cfg.lam,
        residual_position=cfg.residual_position,
    )


def _aggregate(contribs, state: GlobalState, cfg: FedConfig) -> AggregateResult:
    method = cfg.method
    if method == aggregation.FEDIT:
        return aggregation.aggregate_fedit(contribs)
    if method == aggregation.FFA:
        return aggregation.aggregate_ffa(contribs, state.frozen_A)
    if method == aggregation.FLORA:
        return aggregation.aggregate_flora(contribs)
    if method == aggregation.FLEXLORA:
        return aggregation.aggregate_flexlora(contribs, cfg.state_rank())
    if method == aggregation.LORAFAIR:
        return aggregation.aggregate_lorafair(contribs, _solver_config(cfg))
    if method == aggregation.HETLORA:
        padded = aggregation.hetlora_pad(contribs, cfg.state_rank())
        result = aggregation.aggregate_fedit(padded)
        return replace(result, method=aggregation.HETLORA)
    if method == aggregation.LORAFAIR_HETLORA:
        padded = aggregation.hetlora_pad(contribs, cfg.state_rank())
        result = aggregation.aggregate_lorafair(padded, _solver_config(cfg))
        return replace(result, method=aggregation.LORAFAIR_HETLORA)
    raise ValueError(f"unknown aggregation method {method!r}")


def _sample_participants(cfg: FedConfig, round_index: int) -> list[int]:
    k = cfg.num_clients
    n_part = max(1, math.ceil(cfg.participation_fraction * k))
    if n_part >= k:
        return list(range(k))
    rng = np.random.default_rng(
        linalg.derive_seed(cfg.seed, "round", round_index, "participation")
    )
    return sorted(rng.permutation(k)[:n_part].tolist())


def run_round(
    state: GlobalState,
    clients: list[data.ClientDataset],
    test_sets: list[data.ClientDataset],
    cfg: FedConfig,
) -> tuple[GlobalState, metrics.RoundRecord]:
    """One communication round: sample, train, aggregate, broadcast, evaluate."""
    t = state.round_index
    participants = _sample_participants(cfg, t)

    contribs = []
    losses = []
    client_seconds = 0.0
    for k in participants:
        start_pair = aggregation.fit_pair_to_rank(state.current_pair, cfg.rank_of(k))
        client_state = replace(state, current_pair=start_pair)
        t0 = time.perf_counter()
        trained = local_train(
            client_state, clients[k], cfg, linalg.derive_seed(cfg.seed, "round", t, "client", k)
        )
        client_seconds += time.perf_counter() - t0
        losses.append(trained.mean_loss)
        contribs.append(
            ClientContribution(
                pair=trained.pair, sample_count=len(clients[k]), client_id=k
            )
        )

    result = _aggregate(contribs, state, cfg)
    uplink, downlink = aggregation.comm_cost(
        cfg.method, cfg.num_classes, cfg.input_dim, [cfg.rank_of(k) for k in participants]
    )
    new_state = apply_broadcast(
        state,
        result,
        cfg.effective_policy(),
        seed=linalg.derive_seed(cfg.seed, "round", t, "broadcast"),
        contribs=contribs,
        init_std=cfg.init_std,
    )
    per_domain = metrics.evaluate(new_state, test_sets)

    report = result.solver_report
    record = metrics.build_round_record(
        t + 1,
        per_domain,
        train_loss=float(np.mean(losses)),
        uplink_floats=uplink,
        downlink_floats=downlink,
        bias_cosine=result.bias_cosine,
        bias_frobenius=result.bias_frobenius,
        server_solve_seconds=result.solve_seconds,
        client_train_seconds=client_seconds,
        solver_final_cosine=report.final_cosine if report else None,
        solver_regularizer_similarity=report.regularizer_similarity if report else None,
        solver_delta_norm=report.final_delta_norm if report else None,
    )
    return new_state, record


def pretrain_base(cfg: FedConfig, task: data.SyntheticTask) -> FrozenBase:
    """Fit the frozen base on the source distribution (ridge least squares).

    With pretrain_samples=0 the base is weak random noise instead, giving a
    chance-level starting model.
    """
    if cfg.pretrain_samples == 0:
        return FrozenBase(
            W0=linalg.gaussian_fill(
                task.num_classes, task.input_dim, _BASE_STD,
                linalg.derive_seed(cfg.seed, "base"),
            )
        )
    source = data.sample_source(
        task, cfg.pretrain_samples, linalg.derive_seed(cfg.seed, "pretrain")
    )
    x = source.inputs
    onehot = np.zeros((len(source), task.num_classes))
    onehot[np.arange(len(source)), source.labels] = 1.0
    gram = x.T @ x + cfg.pretrain_ridge * np.eye(task.input_dim)
    w0 = np.linalg.solve(gram, x.T @ onehot).T
    return FrozenBase(W0=w0)


def initial_state(cfg: FedConfig, task: data.SyntheticTask) -> GlobalState:
    base = pretrain_base(cfg, task)
    pair = init_pair(
        task.num_classes,
        task.input_dim,
        cfg.state_rank(),
        std=cfg.init_std,
        seed=linalg.derive_seed(cfg.seed, "adapter"),
    )
    frozen_a = np.array(pair.A) if cfg.method == aggregation.FFA else None
    return GlobalState(base=base, current_pair=pair, round_index=0, frozen_A=frozen_a)


def build_environment(cfg: FedConfig):
    """Task, client datasets, and held-out test sets for a config."""
    task = data.make_task(
        input_dim=cfg.input_dim,
        num_classes=cfg.num_classes,
        num_domains=cfg.num_domains,
        noise_std=cfg.noise_std,
        domain_shift=cfg.domain_shift,
        seed=linalg.derive_seed(cfg.seed, "taskgen"),
    )
    if cfg.partition == "feature":
        clients = data.gen_feature_noniid(
            task, cfg.num_clients, cfg.train_samples_per_client,
            linalg.derive_seed(cfg.seed, "train"),
        )
    else:
        clients = data.gen_label_noniid(
            task, cfg.num_clients, cfg.dirichlet_alpha, cfg.train_samples_per_client,
            linalg.derive_seed(cfg.seed, "train"),
        )
    test_sets = data.make_test_sets(
        task, cfg.test_samples_per_domain, linalg.derive_seed(cfg.seed, "test")
    )
    return task, clients, test_sets


def run_experiment(cfg: FedConfig) -> tuple[list[metrics.RoundRecord], metrics.RunSummary]:
    """Full run: T rounds with per-round held-out evaluation."""
    task, clients, test_sets = build_environment(cfg)
    state = initial_state(cfg, task)

    records: list[metrics.RoundRecord] = []
    for _ in range(cfg.rounds):
        state, record = run_round(state, clients, test_sets, cfg)
        records.append(record)

    if records:
        final_per_domain = records[-1].per_domain_accuracy
        final_avg = records[-1].average_accuracy
    else:
        accs = metrics.evaluate(state, test_sets)
        final_per_domain = tuple(accs)
        final_avg = float(np.mean(accs))

    n_participants = max(1, math.ceil(cfg.participation_fraction * cfg.num_clients))
    summary = metrics.RunSummary(
        config=canonical_dict(cfg),
        final_per_domain_accuracy=tuple(final_per_domain),
        final_average_accuracy=final_avg,
        accuracy_trajectory=tuple(r.average_accuracy for r in records),
        total_uplink_floats=float(sum(r.uplink_floats for r in records)),
        total_downlink_floats=float(
            sum(r.downlink_floats * n_participants for r in records)
        ),
        total_server_solve_seconds=float(sum(r.server_solve_seconds for r in records)),
        total_client_train_seconds=float(sum(r.client_train_seconds for r in records)),
    )
    return records, summary

"""Synthetic multi-domain classification tasks for desk-scale federated runs.

A task has M domains, each a random rotation of a shared set of class
prototypes. A sample of class c in domain m is x = T_m @ (prototype_c + noise).
Feature non-IID assigns whole domains to clients; label non-IID additionally
skews class proportions inside each domain group with a Dirichlet draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import derive_seed


@dataclass(frozen=True)
class SyntheticTask:
    input_dim: int
    num_classes: int
    num_domains: int
    noise_std: float
    domain_transforms: np.ndarray  # (M, l, l) orthogonal
    class_prototypes: np.ndarray  # (d, l)


@dataclass(frozen=True)
class ClientDataset:
    inputs: np.ndarray  # (n, l)
    labels: np.ndarray  # (n,) int class indices
    domain_id: int

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _random_rotation(dim: int, rng: np.random.Generator, shift: float) -> np.ndarray:
    # QR of I + shift*N: a rotation whose distance from the identity grows
    # with `shift`, so domain difficulty is tunable.
    q, r = np.linalg.qr(np.eye(dim) + shift * rng.normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))  # canonical sign so Q is unique given input


def make_task(
    input_dim: int = 32,
    num_classes: int = 10,
    num_domains: int = 6,
    noise_std: float = 0.8,
    domain_shift: float = 0.35,
    seed: int = 0,
    bayes_floor: float = 0.9,
) -> SyntheticTask:
    """Build a task and verify it is cleanly solvable by the domain oracle."""
    if noise_std <= 0:
        raise ValueError("noise_std must be positive")
    if domain_shift <= 0:
        raise ValueError("domain_shift must be positive")
    rng = np.random.default_rng(derive_seed(seed, "task"))
    prototypes = rng.normal(size=(num_classes, input_dim))
    transforms = np.stack(
        [_random_rotation(input_dim, rng, domain_shift) for _ in range(num_domains)]
    )
    task = SyntheticTask(
        input_dim=input_dim,
        num_classes=num_classes,
        num_domains=num_domains,
        noise_std=noise_std,
        domain_transforms=transforms,
        class_prototypes=prototypes,
    )
    probe = [
        sample_domain(task, m, 200, derive_seed(seed, "bayes-probe", m))
        for m in range(num_domains)
    ]
    acc = nearest_prototype_accuracy(task, probe)
    if acc <= bayes_floor:
        raise ValueError(
            f"task too noisy: nearest-prototype oracle accuracy {acc:.3f} <= {bayes_floor}"
        )
    return task


def _balanced_labels(n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    return labels


def sample_domain(task: SyntheticTask, domain_id: int, n: int, seed: int) -> ClientDataset:
    """n samples with a near-uniform class mix from one domain."""
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, task.num_classes, rng)
    noise = rng.normal(0.0, task.noise_std, size=(n, task.input_dim))
    clean = task.class_prototypes[labels] + noise
    inputs = clean @ task.domain_transforms[domain_id].T
    return ClientDataset(inputs=inputs, labels=labels, domain_id=domain_id)


def sample_source(task: SyntheticTask, n: int, seed: int) -> ClientDataset:
    """Samples from the unshifted source distribution the base model is fit on."""
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, task.num_classes, rng)
    noise = rng.normal(0.0, task.noise_std, size=(n, task.input_dim))
    return ClientDataset(
        inputs=task.class_prototypes[labels] + noise, labels=labels, domain_id=-1
    )


def _domain_of(client_id: int, num_domains: int) -> int:
    return client_id % num_domains


def gen_feature_noniid(
    task: SyntheticTask, num_clients: int, samples_per_client: int, seed: int
) -> list[ClientDataset]:
    """One domain per client (clients cycle through domains when K > M)."""
    m = task.num_domains
    if num_clients > m and num_clients % m != 0:
        raise ValueError(
            f"num_clients={num_clients} must be <= num_domains={m} or divisible by it"
        )
    return [
        sample_domain(
            task, _domain_of(k, m), samples_per_client, derive_seed(seed, "client", k)
        )
        for k in range(num_clients)
    ]


def _split_counts(total: int, proportions: np.ndarray) -> np.ndarray:
    """Integer allocation of `total` following `proportions`, conserving the sum."""
    bounds = np.floor(np.cumsum(proportions) * total).astype(int)
    bounds[-1] = total
    return np.diff(np.concatenate(([0], bounds)))


def gen_label_noniid(
    task: SyntheticTask,
    num_clients: int,
    alpha: float,
    samples_per_client: int,
    seed: int,
) -> list[ClientDataset]:
    """Dirichlet label skew inside each domain group.

    Clients cycle through domains; within the group sharing a domain, each
    class's pool is split across clients by a Dirichlet(alpha) draw. The total
    sample count is conserved exactly; a client is never left empty.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    m = task.num_domains
    if num_clients > m and num_clients % m != 0:
        raise ValueError(
            f"num_clients={num_clients} must be <= num_domains={m} or divisible by it"
        )
    d = task.num_classes
    groups: dict[int, list[int]] = {}
    for k in range(num_clients):
        groups.setdefault(_domain_of(k, m), []).append(k)

    per_client_labels: dict[int, list[int]] = {k: [] for k in range(num_clients)}
    for domain, members in sorted(groups.items()):
        rng = np.random.default_rng(derive_seed(seed, "dirichlet", domain))
        pool = len(members) * samples_per_client
        class_counts = np.full(d, pool // d)
        class_counts[: pool % d] += 1
        for c in range(d):
            proportions = rng.dirichlet(np.full(len(members), alpha))
            for k, cnt in zip(members, _split_counts(int(class_counts[c]), proportions)):
                per_client_labels[k].extend([c] * int(cnt))
        # Dirichlet tails can starve a client; repair from the largest one.
        for k in members:
            while not per_client_labels[k]:
                donor = max(members, key=lambda j: len(per_client_labels[j]))
                per_client_labels[k].append(per_client_labels[donor].pop())

    datasets = []
    for k in range(num_clients):
        labels = np.array(per_client_labels[k], dtype=int)
        rng = np.random.default_rng(derive_seed(seed, "client", k))
        rng.shuffle(labels)
        noise = rng.normal(0.0, task.noise_std, size=(labels.size, task.input_dim))
        clean = task.class_prototypes[labels] + noise
        inputs = clean @ task.domain_transforms[_domain_of(k, m)].T
        datasets.append(ClientDataset(inputs=inputs, labels=labels, domain_id=_domain_of(k, m)))
    return datasets


def make_test_sets(task: SyntheticTask, per_domain: int, seed: int) -> list[ClientDataset]:
    """Held-out evaluation sets, one per domain, from streams independent of training."""
    return [
        sample_domain(task, mdom, per_domain, derive_seed(seed, "test", mdom))
        for mdom in range(task.num_domains)
    ]


def nearest_prototype_accuracy(task: SyntheticTask, datasets) -> float:
    """Oracle that undoes the known domain rotation and matches prototypes."""
    hits = 0
    total = 0
    for ds in datasets:
        unrotated = ds.inputs @ task.domain_transforms[ds.domain_id]
        dist = np.linalg.norm(
            unrotated[:, np.newaxis, :] - task.class_prototypes[np.newaxis, :, :], axis=2
        )
        pred = dist.argmin(axis=1)
        hits += int((pred == ds.labels).sum())
        total += len(ds)
    return hits / total

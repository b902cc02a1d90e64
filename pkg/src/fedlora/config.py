"""Experiment configuration: defaults, validation, parsing, serialization.

Config files are flat JSON with the keys documented below; unknown keys are
rejected. Flag-style overrides are applied on top of file values.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import aggregation

POLICY_AVG = "avg-initial"
POLICY_RE = "re-initial"
POLICY_LOCAL = "local-initial"
POLICIES = (POLICY_AVG, POLICY_RE, POLICY_LOCAL)


class ConfigError(ValueError):
    """Invalid configuration file, key, or value."""


class FedConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    num_clients: int = Field(6, ge=1, description="number of federated clients K")
    rounds: int = Field(30, ge=0, description="number of communication rounds T")
    local_iters: int = Field(100, ge=1, description="mini-batch gradient steps per client per round")
    batch_size: int = Field(32, ge=1, description="mini-batch size for local training")
    learning_rate: float = Field(0.05, gt=0, description="local SGD learning rate")
    participation_fraction: float = Field(
        1.0, gt=0, le=1, description="fraction of clients sampled each round"
    )
    method: Literal[
        "fedit", "ffa-lora", "flora", "flexlora", "hetlora", "lora-fair", "lora-fair-hetlora"
    ] = Field("fedit", description="server aggregation strategy")
    init_policy: Optional[Literal["avg-initial", "re-initial", "local-initial"]] = Field(
        None,
        description="client initialization policy; default avg-initial (re-initial for flora)",
    )
    rank: int = Field(4, ge=1, description="adapter rank r (uniform-rank methods)")
    client_ranks: Optional[list[int]] = Field(
        None, description="per-client adapter ranks for heterogeneous-rank methods"
    )
    lam: float = Field(
        0.01, ge=0, alias="lambda", description="residual solve regularization weight"
    )
    dirichlet_alpha: float = Field(
        0.5, gt=0, description="Dirichlet concentration for the label non-IID split"
    )
    partition: Literal["feature", "feature-label"] = Field(
        "feature", description="client data split: per-domain, or per-domain plus label skew"
    )
    seed: int = Field(1, ge=0, description="root seed; fully determines the run")
    input_dim: int = Field(32, ge=2, description="task feature dimension l")
    num_classes: int = Field(10, ge=2, description="task class count d")
    num_domains: int = Field(6, ge=1, description="number of feature domains M")
    train_samples_per_client: int = Field(600, ge=1, description="training samples per client")
    test_samples_per_domain: int = Field(200, ge=1, description="held-out samples per domain")
    noise_std: float = Field(0.8, gt=0, description="task sample noise standard deviation")
    domain_shift: float = Field(
        0.35, gt=0, description="how far each domain's rotation sits from the source distribution"
    )
    pretrain_samples: int = Field(
        600, ge=0, description="source samples used to fit the frozen base (0: random base)"
    )
    pretrain_ridge: float = Field(
        10.0, gt=0, description="ridge strength for the base model fit"
    )
    init_std: float = Field(0.02, gt=0, description="gaussian std for fresh adapter A factors")
    solver_lr: float = Field(0.1, gt=0, description="residual solve learning rate")
    solver_max_steps: int = Field(500, ge=1, description="residual solve iteration cap")
    residual_position: Literal["on_B", "on_A"] = Field(
        "on_B", description="which averaged factor receives the solved residual"
    )

    @model_validator(mode="after")
    def _check_cross_field(self):
        min_dl = min(self.num_classes, self.input_dim)
        if self.rank > min_dl:
            raise ValueError(
                f"rank must satisfy rank <= min(d,l): rank={self.rank}, min(d,l)={min_dl}"
            )
        if self.client_ranks is not None:
            if len(self.client_ranks) != self.num_clients:
                raise ValueError(
                    f"client_ranks has {len(self.client_ranks)} entries for "
                    f"{self.num_clients} clients"
                )
            for r in self.client_ranks:
                if not 1 <= r <= min_dl:
                    raise ValueError(
                        f"client rank must satisfy rank <= min(d,l): rank={r}, min(d,l)={min_dl}"
                    )
            if self.method in (aggregation.FEDIT, aggregation.FFA) and len(set(self.client_ranks)) > 1:
                raise ValueError(f"{self.method} does not support heterogeneous client_ranks")
        elif self.method in (aggregation.HETLORA, aggregation.LORAFAIR_HETLORA):
            raise ValueError(f"{self.method} requires client_ranks")
        if self.method == aggregation.FLORA and self.init_policy not in (None, POLICY_RE):
            raise ValueError("flora folds the update into the base and requires re-initial")
        if self.method == aggregation.FFA and self.init_policy not in (None, POLICY_AVG):
            raise ValueError("ffa-lora keeps A frozen and requires avg-initial")
        k, m = self.num_clients, self.num_domains
        if k > m and k % m != 0:
            raise ValueError(
                f"num_clients={k} must be <= num_domains={m} or divisible by it"
            )
        return self

    def effective_policy(self) -> str:
        if self.init_policy is not None:
            return self.init_policy
        return POLICY_RE if self.method == aggregation.FLORA else POLICY_AVG

    def rank_of(self, client_id: int) -> int:
        if self.client_ranks is not None:
            return self.client_ranks[client_id]
        return self.rank

    def state_rank(self) -> int:
        return max(self.client_ranks) if self.client_ranks is not None else self.rank


def _format_validation_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<config>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def parse_config(source=None, overrides: dict | None = None) -> FedConfig:
    """Build a FedConfig from a file path or dict, then apply overrides.

    `source` may be None (all defaults), a mapping, or a path to a flat JSON
    file. Unknown keys are rejected with the offending key named.
    """
    if source is None:
        values: dict = {}
    elif isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            values = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
            ) from exc
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: top-level value must be a JSON object")
    elif isinstance(source, dict):
        values = dict(source)
    elif isinstance(source, FedConfig):
        values = source.model_dump(by_alias=True)
    else:
        raise ConfigError(f"unsupported config source type {type(source).__name__}")
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return FedConfig.model_validate(values)
    except ValidationError as exc:
        raise ConfigError(_format_validation_error(exc)) from exc


def canonical_dict(cfg: FedConfig) -> dict:
    """Stable dict form with file-facing key names."""
    return cfg.model_dump(by_alias=True)


def serialize_config(cfg: FedConfig) -> str:
    return json.dumps(canonical_dict(cfg), indent=2, sort_keys=True) + "\n"


def config_key_table() -> list[tuple[str, str, str]]:
    """(key, default, description) for every config key, for --help and docs."""
    rows = []
    for name, f in FedConfig.model_fields.items():
        key = f.alias or name
        rows.append((key, json.dumps(f.default), f.description or ""))
    return rows

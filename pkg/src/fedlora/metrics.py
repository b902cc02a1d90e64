"""Round records, model evaluation, and CSV/JSON emission.

The CSV schema contains only deterministic quantities so that reruns with the
same seeds are byte-identical; wall-clock timings live in the in-memory
records and the JSON document. Column order is part of the repo's
compatibility contract (see README).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .lora import effective_update

_BASE_COLUMNS = ("round", "average_accuracy")
_TAIL_COLUMNS = (
    "train_loss",
    "uplink_floats",
    "downlink_floats",
    "bias_cosine",
    "bias_frobenius",
    "solver_final_cosine",
    "solver_regularizer_similarity",
    "solver_delta_norm",
)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    per_domain_accuracy: tuple[float, ...]
    average_accuracy: float
    train_loss: float
    uplink_floats: float
    downlink_floats: float
    bias_cosine: float
    bias_frobenius: float
    server_solve_seconds: float
    client_train_seconds: float
    solver_final_cosine: float | None = None
    solver_regularizer_similarity: float | None = None
    solver_delta_norm: float | None = None

    def __post_init__(self):
        mean = sum(self.per_domain_accuracy) / len(self.per_domain_accuracy)
        if abs(mean - self.average_accuracy) > 1e-12:
            raise ValueError("average_accuracy must be the mean of per_domain_accuracy")


def build_round_record(round_index: int, per_domain_accuracy, **kwargs) -> RoundRecord:
    per_domain = tuple(float(a) for a in per_domain_accuracy)
    return RoundRecord(
        round=round_index,
        per_domain_accuracy=per_domain,
        average_accuracy=sum(per_domain) / len(per_domain),
        **kwargs,
    )


@dataclass(frozen=True)
class RunSummary:
    config: dict
    final_per_domain_accuracy: tuple[float, ...]
    final_average_accuracy: float
    accuracy_trajectory: tuple[float, ...]
    total_uplink_floats: float
    total_downlink_floats: float
    total_server_solve_seconds: float
    total_client_train_seconds: float
    extra: dict = field(default_factory=dict)


def evaluate(state, test_sets) -> list[float]:
    """Argmax accuracy of the current global model, one value per domain."""
    w = state.base.W0 + effective_update(state.current_pair)
    accs = []
    for ds in test_sets:
        if len(ds) == 0:
            raise ValueError(f"empty test set for domain {ds.domain_id}")
        pred = (ds.inputs @ w.T).argmax(axis=1)
        accs.append(float((pred == ds.labels).mean()))
    return accs


def csv_columns(num_domains: int) -> list[str]:
    cols = list(_BASE_COLUMNS)
    cols += [f"accuracy_domain_{i}" for i in range(num_domains)]
    cols += list(_TAIL_COLUMNS)
    return cols


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _record_row(rec: RoundRecord) -> list[str]:
    row = [_fmt(rec.round), _fmt(rec.average_accuracy)]
    row += [_fmt(a) for a in rec.per_domain_accuracy]
    row += [
        _fmt(rec.train_loss),
        _fmt(rec.uplink_floats),
        _fmt(rec.downlink_floats),
        _fmt(rec.bias_cosine),
        _fmt(rec.bias_frobenius),
        _fmt(rec.solver_final_cosine),
        _fmt(rec.solver_regularizer_similarity),
        _fmt(rec.solver_delta_norm),
    ]
    return row


def write_csv(records, path, num_domains: int | None = None) -> None:
    """One row per record with the documented deterministic column set."""
    if num_domains is None:
        if not records:
            raise ValueError("num_domains is required when writing an empty record list")
        num_domains = len(records[0].per_domain_accuracy)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(csv_columns(num_domains))
            for rec in records:
                writer.writerow(_record_row(rec))
    except OSError as exc:
        raise OSError(f"cannot write CSV to {path}: {exc}") from exc


def read_csv(path) -> list[dict]:
    """Parse an emitted CSV back into dicts of floats (None for blanks)."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            rows = []
            for raw in reader:
                rows.append(
                    {k: (None if v == "" else float(v)) for k, v in raw.items()}
                )
            return rows
    except OSError as exc:
        raise OSError(f"cannot read CSV from {path}: {exc}") from exc


def summary_dict(summary: RunSummary) -> dict:
    return asdict(summary)


def record_dicts(records) -> list[dict]:
    out = []
    for rec in records:
        d = asdict(rec)
        d["per_domain_accuracy"] = list(rec.per_domain_accuracy)
        out.append(d)
    return out


def write_json(records, summary: RunSummary, path) -> None:
    """Full-fidelity document: summary plus records, including timings."""
    doc = {"summary": summary_dict(summary), "records": record_dicts(records)}
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write JSON to {path}: {exc}") from exc


def emit(records, summary: RunSummary, path, format: str = "csv") -> None:
    """Write records to `path` as 'csv' or 'json' (summary only used for json)."""
    if format == "csv":
        num_domains = len(summary.final_per_domain_accuracy)
        write_csv(records, path, num_domains=num_domains)
    elif format == "json":
        write_json(records, summary, path)
    else:
        raise ValueError(f"unknown emit format {format!r}")

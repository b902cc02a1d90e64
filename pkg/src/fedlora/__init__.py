"""Desk-scale federated LoRA fine-tuning simulator.

Compares server aggregation strategies (fedit, ffa-lora, flora, flexlora,
hetlora, lora-fair) on synthetic non-IID clients, with full determinism from
a single seed. Exposed as a Python package, a FastAPI service, and a CLI.
"""

__version__ = "0.1.0"

"""Federated-learning simulator for full-combination backdoor attacks."""

from __future__ import annotations

from .config import ExperimentConfig, parse_config, parse_config_text
from .data import Dataset, dirichlet_partition, load_idx, synth_dataset
from .defense import DefenseConfig, add_noise, clip_update
from .errors import FCBAError
from .federation import AttackConfig, EvalConfig, FederationConfig, run_experiment
from .trigger import GlobalTriggerSpec, TriggerStrategy, enumerate_triggers, malicious_count, poison_alignment

__all__ = [
    "AttackConfig", "Dataset", "DefenseConfig", "EvalConfig", "ExperimentConfig", "FCBAError", "FederationConfig",
    "GlobalTriggerSpec", "TriggerStrategy", "add_noise", "clip_update", "dirichlet_partition", "enumerate_triggers",
    "load_idx", "malicious_count", "parse_config", "parse_config_text", "poison_alignment", "run_experiment",
    "synth_dataset",
]
__version__ = "0.1.0"

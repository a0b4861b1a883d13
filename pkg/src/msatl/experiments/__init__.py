from .config import ExperimentConfig, load_config
from .runner import run, sweep_alpha_lambda, sweep_unlabeled
from .synthetic import DomainStyle, SyntheticSpec, gen_synthetic

__all__ = [
    "DomainStyle",
    "ExperimentConfig",
    "SyntheticSpec",
    "gen_synthetic",
    "load_config",
    "run",
    "sweep_alpha_lambda",
    "sweep_unlabeled",
]

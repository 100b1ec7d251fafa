"""Over-the-air adversarial perturbations against Wi-Fi CSI fingerprint localization.

The package bundles everything needed to study the attack on a desk:

- :mod:`fooloc.tensorcore` -- minimal reverse-mode autodiff over numpy arrays
- :mod:`fooloc.channel` -- synthetic multipath channels and CSI estimation
- :mod:`fooloc.models` -- the two victim localization networks and training
- :mod:`fooloc.attack` -- multiplicative, repetitive perturbation optimization
- :mod:`fooloc.metrics` -- localization error, attack success rate, PSR
- :mod:`fooloc.harness` -- the offline experiment methodology end to end
- :mod:`fooloc.cli` -- `fooloc` command-line pipeline driver
"""

from .attack import (
    AttackConfig,
    Perturbation,
    apply_perturbation,
    attack_objective,
    check_demodulation,
    expand_weights,
    optimize_perturbation,
    perturb_transmission,
)
from .channel import (
    AmplitudeSample,
    CsiMeasurement,
    PathComponent,
    SpotEnvironment,
    amplitude_features,
    channel_response,
    estimate_csi,
    sample_link_pair,
    synth_environment,
)
from .errors import ContractError, GraphError, StageError
from .harness import (
    ExperimentReport,
    SpotGrid,
    SpotPair,
    build_grid,
    run_random_baseline,
    run_transfer,
    run_whitebox,
    select_targets,
    selection_thresholds,
)
from .metrics import (
    AttackOutcome,
    attack_success_rate,
    localization_error,
    percentile,
    perturbation_to_signal_ratio,
)
from .models import (
    LocalizationModel,
    TrainConfig,
    model_forward,
    normalize_input,
    predict_batch,
    train_localizer,
)
from .tensorcore import Graph, Tensor, backward, evaluate, sgd_step, tanh_reparam

__version__ = "0.1.0"

__all__ = [
    "AmplitudeSample",
    "AttackConfig",
    "AttackOutcome",
    "ContractError",
    "CsiMeasurement",
    "ExperimentReport",
    "Graph",
    "GraphError",
    "LocalizationModel",
    "PathComponent",
    "Perturbation",
    "SpotEnvironment",
    "SpotGrid",
    "SpotPair",
    "StageError",
    "Tensor",
    "TrainConfig",
    "amplitude_features",
    "apply_perturbation",
    "attack_objective",
    "attack_success_rate",
    "backward",
    "build_grid",
    "channel_response",
    "check_demodulation",
    "estimate_csi",
    "evaluate",
    "expand_weights",
    "localization_error",
    "model_forward",
    "normalize_input",
    "optimize_perturbation",
    "percentile",
    "perturb_transmission",
    "perturbation_to_signal_ratio",
    "predict_batch",
    "run_random_baseline",
    "run_transfer",
    "run_whitebox",
    "sample_link_pair",
    "select_targets",
    "selection_thresholds",
    "sgd_step",
    "synth_environment",
    "tanh_reparam",
    "train_localizer",
]

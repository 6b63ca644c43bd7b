"""Field-guided adversarial attacks on point-cloud classifiers."""

__version__ = "0.1.0"

from .attacks import AttackConfig, AttackOutcome, attack_clouds, run_attack
from .errors import DataError, NumericError, P2SError
from .field import P2SField, build_field, train_score_net
from .geometry import PointCloud, SyntheticShape, generate_shape, normalize
from .metrics import MetricsReport, aggregate, compute_metrics
from .victim import TrainConfig, VictimModel

__all__ = [
    "AttackConfig",
    "AttackOutcome",
    "DataError",
    "MetricsReport",
    "NumericError",
    "P2SError",
    "P2SField",
    "PointCloud",
    "SyntheticShape",
    "TrainConfig",
    "VictimModel",
    "aggregate",
    "attack_clouds",
    "build_field",
    "compute_metrics",
    "generate_shape",
    "normalize",
    "run_attack",
    "train_score_net",
]

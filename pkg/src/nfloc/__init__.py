"""Near-field multiuser localization with partitioned-array message passing."""

from .bounds import channel_bcrb, information_matrix, position_bcrb
from .channel import UserChannelParams, channel_matrix, channel_vector
from .errors import ConfigError, DomainError, NumericalError
from .estimator import EstimateResult, EstimatorConfig, run
from .frontend import NoiseModel, UplinkScenario, random_beamformer, sigma2_for_snr, synthesize_received
from .geometry import ArrayGeometry, cartesian_to_polar, polar_to_cartesian, rayleigh_distance
from .harness import ExperimentConfig, es_ga_baseline, run_sweep, run_trial, sample_scenario
from .partition import PartitionSpec, build_B, make_partition, reconstruct_channel

__all__ = [
    "ArrayGeometry", "ConfigError", "DomainError", "EstimateResult", "EstimatorConfig",
    "ExperimentConfig", "NoiseModel", "NumericalError", "PartitionSpec", "UplinkScenario",
    "UserChannelParams", "build_B", "cartesian_to_polar", "channel_bcrb", "channel_matrix",
    "channel_vector", "es_ga_baseline", "information_matrix", "make_partition", "polar_to_cartesian",
    "position_bcrb", "random_beamformer", "rayleigh_distance", "reconstruct_channel", "run",
    "run_sweep", "run_trial", "sample_scenario", "sigma2_for_snr", "synthesize_received",
]

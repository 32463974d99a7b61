from ffgaf_snn.allocation import Allocation, AllocationStrategy, allocate, analyze_similarity
from ffgaf_snn.blocks import BlockOptions, Network, TrainingBlock, build_network, fit, network_forward, predict
from ffgaf_snn.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from ffgaf_snn.config import ExperimentConfig
from ffgaf_snn.data import Dataset, load_cifar10, load_idx, standardize, synthetic_classes
from ffgaf_snn.energy import EnergyConstants, count_ops, count_params, estimate_energy
from ffgaf_snn.exceptions import ConfigError, DataError, FFGAFError, NumericError
from ffgaf_snn.pipeline import Pipeline
from ffgaf_snn._version import __version__

__all__ = ['Allocation', 'AllocationStrategy', 'allocate', 'analyze_similarity', 'BlockOptions', 'Network',
           'TrainingBlock', 'build_network', 'fit', 'network_forward', 'predict', 'Checkpoint', 'load_checkpoint',
           'save_checkpoint', 'ExperimentConfig', 'Dataset', 'load_cifar10', 'load_idx', 'standardize',
           'synthetic_classes', 'EnergyConstants', 'count_ops', 'count_params', 'estimate_energy', 'ConfigError',
           'DataError', 'FFGAFError', 'NumericError', 'Pipeline', '__version__']

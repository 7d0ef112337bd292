"""Desk-scale spiking-network backdoor toolkit.

Trains small convolutional spiking classifiers under paired nominal and
malicious neuron configurations, optimizes low-visibility triggers against
the resulting model, and evaluates clean accuracy / attack success over
attack-hyperparameter grids.
"""

from .engine import SGD, SurrogateSpec, Tensor, grad_check, no_grad
from .neurons import NeuronConfig, lif_step, plif_tau
from .network import SpikingNetwork, build_network, encode_static, spike_count_probe
from .data import Dataset, EventDataset, PoisonPartition, partition, synth_dataset, synth_events
from .attack import (BackdoorTrainPlan, BlendResult, DeepFoolResult, adaptive_blend,
                     deepfool, power_transform, train_backdoor, train_clean)
from .trigger import GeneratorTrigger, NoiseTrigger, PowerTrigger, TriggerGenerator, \
    train_trigger_generator
from .evaluate import (Corpus, MetricsReport, SelectionRule, SweepGrid, clean_accuracy,
                       attack_success, finetune_defense, select_attack_config, sweep)
from .checkpoint import CheckpointMeta, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, parse_config, serialize_config

__version__ = "0.1.0"

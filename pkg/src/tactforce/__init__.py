"""Tactile-force alignment: simulator, force codec, tactile encoder, alignment training and policy head."""

from .alignment import TactileForceAdapter, info_nce_symmetric, retrieval_from_embeddings
from .baseline import ForceRegressionBaseline
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import Codebook, ForceCodec, codebook_perplexity, quant_loss, quantize, recon_loss
from .data import DatasetManifest, Episode, load_dataset, resample_to_tactile_rate, save_dataset
from .errors import ConfigError, LeakageError, NumericalError
from .policy import FlowMatchingPolicy, GripEnv, evaluate_policy, flow_interpolate, fm_loss, sample_action
from .sim import INDENTERS, SENSORS, generate_dataset, simulate_episode
from .tactile import TactileEncoder

__version__ = "0.1.0"

__all__ = [
    "TactileForceAdapter", "info_nce_symmetric", "retrieval_from_embeddings", "ForceRegressionBaseline",
    "load_checkpoint", "save_checkpoint", "Codebook", "ForceCodec", "codebook_perplexity", "quant_loss",
    "quantize", "recon_loss", "DatasetManifest", "Episode", "load_dataset", "resample_to_tactile_rate",
    "save_dataset", "ConfigError", "LeakageError", "NumericalError", "FlowMatchingPolicy", "GripEnv",
    "evaluate_policy", "flow_interpolate", "fm_loss", "sample_action", "INDENTERS", "SENSORS",
    "generate_dataset", "simulate_episode", "TactileEncoder",
]

"""Certified robust training and probabilistic worst-case certification for
variational autoencoders via latent support sets."""

from .tensor import Tensor, Tape, ParameterSet, Gradients
from .intervals import IntervalTensor, InputRegion, LatentBounds, \
    propagate_encoder, propagate_decoder, region_to_interval
from .gaussian import (ProbabilityThreshold, DeltaSchedule, SupportSet,
                       std_normal_cdf, std_normal_icdf, coverage,
                       find_support_1d, find_support, verify_support)
from .model import (ArchitectureSpec, LayerSpec, LatentDistribution,
                    make_architecture, init_parameters, encode, reparameterize,
                    decode, save_checkpoint, load_checkpoint)
from .training import (TrainConfig, ErrorMetric, standard_loss, civet_loss,
                       pgd_attack, lsa_attack, mda_attack, sabr_region, train)
from .certify import (CertifiedBound, certify_point, monte_carlo_validate,
                      snr, evaluate_suite)
from .data import Dataset, RunConfig, load_idx, synthetic_dataset, parse_config

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Tape", "ParameterSet", "Gradients",
    "IntervalTensor", "InputRegion", "LatentBounds",
    "propagate_encoder", "propagate_decoder", "region_to_interval",
    "ProbabilityThreshold", "DeltaSchedule", "SupportSet",
    "std_normal_cdf", "std_normal_icdf", "coverage",
    "find_support_1d", "find_support", "verify_support",
    "ArchitectureSpec", "LayerSpec", "LatentDistribution",
    "make_architecture", "init_parameters", "encode", "reparameterize",
    "decode", "save_checkpoint", "load_checkpoint",
    "TrainConfig", "ErrorMetric", "standard_loss", "civet_loss",
    "pgd_attack", "lsa_attack", "mda_attack", "sabr_region", "train",
    "CertifiedBound", "certify_point", "monte_carlo_validate",
    "snr", "evaluate_suite",
    "Dataset", "RunConfig", "load_idx", "synthetic_dataset", "parse_config",
]

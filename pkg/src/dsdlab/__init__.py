"""Decentralized speculative decoding lab: verifier, latency model, simulator."""

from .latency import ClusterConfig, in_regime, r_comm, speedup, t_dsd, t_std
from .token_model import Distribution, TokenModel, next_distribution, sample, temperature_scale
from .verifier import KeyCriteria, VerificationResult, generate, verify_round

__version__ = "0.1.0"

"""Guaranteed-cost leader-follower consensus synthesis for networks of LTI agents."""

__version__ = "0.1.0"

from .network import Graph, Pinning, SpectralData, analyze  # noqa: E402
from .synthesis import NetworkSpec, SynthesisCertificate, synthesize  # noqa: E402
from .coupling import LtiFilter, MemorylessGain  # noqa: E402
from .simulator import SimConfig, simulate  # noqa: E402

__all__ = [
    "Graph", "Pinning", "SpectralData", "analyze",
    "NetworkSpec", "SynthesisCertificate", "synthesize",
    "LtiFilter", "MemorylessGain",
    "SimConfig", "simulate",
]

"""Lightweight nuclei instance segmentation and classification."""
from .encoder import EncoderConfig, build_encoder, reparameterize
from .network import NetworkConfig, NetworkOutput, NuLite, build_network, reparameterize_network, variant

__version__ = "0.1.0"

__all__ = ["EncoderConfig", "build_encoder", "reparameterize", "NetworkConfig", "NetworkOutput", "NuLite",
           "build_network", "reparameterize_network", "variant"]

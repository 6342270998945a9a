"""Native multimodal LLM at desk scale: visual encoder, modality-routed MoE decoder,
multi-scale packing, staged training and a scaling-law lab."""

from ._backend import NAME as KERNEL_BACKEND

__all__ = ["KERNEL_BACKEND"]
__version__ = "0.1.0"

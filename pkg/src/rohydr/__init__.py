"""Recovery-based multimodal emotion recognition under missing modalities.

Diffusion-based recovery of absent unimodal representations, adversarial
refinement of the fused multimodal representation, and a staged training
schedule, all on a self-contained numpy autodiff core.
"""

from .tensor import Tensor, no_grad, grad_check

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "grad_check", "__version__"]

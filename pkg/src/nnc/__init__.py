"""Joint hyperspectral + LiDAR pixel classification with momentum-contrast
pretraining and bilinear-attention fusion, built on a numpy autodiff core."""

from .autograd import Tensor, backward, grad_check, grad_of, no_grad, tape

__version__ = "0.1.0"

__all__ = ["Tensor", "tape", "backward", "no_grad", "grad_of", "grad_check", "__version__"]

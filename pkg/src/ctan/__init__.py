"""Channel-temporal attention for adversarial video domain adaptation, on a small numpy autodiff engine."""
from ctan.tensor import NonFiniteError, Tensor, backward, no_grad

__version__ = "0.1.0"
__all__ = ["Tensor", "backward", "no_grad", "NonFiniteError", "__version__"]

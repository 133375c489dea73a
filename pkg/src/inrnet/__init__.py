"""Neural networks on implicit neural representations, estimated by quasi-Monte Carlo sums."""

from . import autodiff, convert, inr, layers, pointset, theory, train
from .errors import InrNetError

__version__ = "0.1.0"

__all__ = ["InrNetError", "autodiff", "convert", "inr", "layers", "pointset", "theory", "train", "__version__"]

"""prunefuse: a desk-scale transformer layer-pruning laboratory.

Twelve single-signal pruning strategies (activations, mutual information,
gradients, weights, attention), two signal-fusion regressors (ridge linear
and random forest), a sequential prune / fine-tune loop with identity-
wrapper layer removal, knowledge distillation, and CSV/figure reporting.
"""

__version__ = "0.1.0"

from .signals import SIGNAL_NAMES
from .pruning import ALL_STRATEGIES

__all__ = ["ALL_STRATEGIES", "SIGNAL_NAMES", "__version__"]

"""Block-built Bayesian neural networks.

Networks are expanded from compact computation skeletons using three block
types (function, random feature, inducing point), trained by doubly
stochastic variational inference, and analyzed post-training with an
ANOVA-style interaction decomposition over additive structures.
"""

from . import addnn, autodiff, bench, blocks, kernels, skeleton, vi

__all__ = ["addnn", "autodiff", "bench", "blocks", "kernels", "skeleton", "vi"]
__version__ = "0.1.0"

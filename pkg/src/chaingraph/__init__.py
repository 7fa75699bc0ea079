"""Neural networks as layered chain graphs."""

from .distributions import Binary, Multilabel, RectifiedGaussian
from .graph import LayeredChainGraph, augment_dropout, build_recurrent_unrolled, build_refinement, init_params, sequential
from .inference import exact_marginals, feed_forward, forward_sample, pcff_forward
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

"""Recurrent bag-of-words networks for sequence classification.

A bag-of-words codebook is a softmax layer whose histogram is the frame
average of its outputs; making that average a recurrent layer lets the
codebook be trained jointly with the classifier.
"""

from .bownet import BowNetwork, batch_gradient, encode, encode_channels, forward, gradient, predict
from .codebook import Codebook, KMeansConfig, from_network, kmeans_fit, posterior, to_network
from .data import FeatureSequence, generate_synthetic, SyntheticSpec
from .featmap import FeatureMapSpec
from .optim import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BowNetwork", "Codebook", "FeatureMapSpec", "FeatureSequence", "KMeansConfig",
    "SyntheticSpec", "TrainConfig", "batch_gradient", "encode", "encode_channels",
    "forward", "from_network", "generate_synthetic", "gradient", "kmeans_fit",
    "posterior", "predict", "to_network", "train",
]

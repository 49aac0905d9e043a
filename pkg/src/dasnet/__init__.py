"""Maxout convolutional classifiers with a learned internal attention policy.

A frozen maxout net classifies each image over several passes. After each
pass a linear policy reads summary statistics of the net's activations and
re-weights every convolutional map for the next pass. The policy is
evolved with Separable Natural Evolution Strategies.
"""

from .numerics import DimensionError, NumericalError, RngStream
from .dataio import Dataset, FormatError, IngestionError
from .maxoutnet import LayerSpec, MaxoutNet, SgdConfig, build_net, build_preset, forward
from .policy import PolicyParams, act, observe
from .snes import SearchDistribution
from .trainer import DasNetConfig, run_episode, train_policy

__version__ = "0.1.0"

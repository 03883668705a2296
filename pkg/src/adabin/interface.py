# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Shared vocabulary for the package: enumerations used across modules and the common exception type.

Enum values are the stable strings that appear in config files, checkpoints, bundles and reports,
so they must never be renamed once published.
"""

from enum import Enum
from typing import Optional

from attrs import frozen

__all__ = [
    "FailureReason",
    "AdaBinError",
    "ParameterRole",
    "Granularity",
    "WeightMode",
    "ActivationMode",
    "Nonlinearity",
    "AlphaGradMode",
    "ArchitectureId",
    "DatasetKind",
    "Profile",
    "ConvMode",
]


class FailureReason(Enum):
    """Classes of failure reported through AdaBinError."""

    SHAPE_MISMATCH = "Shape mismatch"
    INVALID_VALUE = "Invalid value"
    INVALID_ARGUMENT = "Invalid argument"
    NOT_BINARY = "Tensor is not {-1, +1} valued"
    BACKWARD_BEFORE_FORWARD = "Backward called before forward"
    MISSING_CONTEXT = "Saved forward context is missing"
    LABEL_OUT_OF_RANGE = "Label out of range"
    UNKNOWN_ARCHITECTURE = "Unknown architecture"
    CLASS_MISMATCH = "Class count mismatch"
    EMPTY_MODEL = "Model has no layers"
    CORRUPT_CHECKPOINT = "Corrupt checkpoint"
    CORRUPT_BUNDLE = "Corrupt inference bundle"
    DATASET_FORMAT = "Invalid dataset file"
    CONFIG_CONTRADICTION = "Contradictory configuration"


@frozen(repr=False)
class AdaBinError(RuntimeError):
    """Exception thrown when an operation cannot be completed."""

    reason: FailureReason
    comment: Optional[str] = None
    offset: Optional[int] = None

    def __repr__(self) -> str:
        text = self.comment if self.comment else self.reason.value
        return "%s (at byte offset %d)" % (text, self.offset) if self.offset is not None else text

    def __str__(self) -> str:
        return self.__repr__()


class ParameterRole(Enum):
    """Role of a trainable parameter, which decides weight decay and clamping."""

    WEIGHT = "weight"
    BIAS = "bias"
    QUANTIZER_ALPHA = "quantizer-alpha"
    QUANTIZER_BETA = "quantizer-beta"
    MAXOUT_GAMMA = "maxout-gamma"
    BATCHNORM = "batchnorm"


class Granularity(Enum):
    """Granularity of a binary set specification."""

    PER_FILTER = "per-output-filter"
    PER_LAYER = "per-layer-scalar"


class WeightMode(Enum):
    """How binary weights are derived from latent weights."""

    SCALED_SIGN = "scaled-sign"
    ADABIN = "adabin"
    ADABIN_LEARNABLE = "adabin-learnable"


class ActivationMode(Enum):
    """How activations are binarized."""

    SIGN = "sign"
    ADABIN = "adabin"


class Nonlinearity(Enum):
    """Nonlinearity following each binary unit."""

    NONE = "none"
    PRELU = "prelu"
    MAXOUT_POS = "maxout-pos"
    MAXOUT = "maxout"


class AlphaGradMode(Enum):
    """Which derivative is used for the activation distance parameter."""

    CONSISTENT = "consistent"
    PAPER = "paper"


class ArchitectureId(Enum):
    """Stable architecture identifiers."""

    RESNET20_ADABIN = "resnet20-adabin"
    RESNET20_SIGN_PRELU = "resnet20-sign-prelu"
    SMALLCNN_ADABIN = "smallcnn-adabin"
    SMALLCNN_SIGN_PRELU = "smallcnn-sign-prelu"


class DatasetKind(Enum):
    """Supported datasets."""

    CIFAR10 = "cifar10"
    MNIST = "mnist"


class Profile(Enum):
    """Named default profiles for a training run."""

    PAPER = "paper"
    DESK = "desk"


class ConvMode(Enum):
    """Arithmetic used by a convolution, for cost accounting."""

    FLOAT = "float"
    SIGN_BINARY = "sign-binary"
    ADABIN = "adabin"

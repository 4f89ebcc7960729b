"""Semi-supervised semantic segmentation with zero-shot pseudo-labels from foundation models."""

from .core import (BackgroundPolicy, ClassVocabulary, ConfidenceMap, ConfigError, DataError, EnhsegError,
                   FeatureMap, LabelMap, NumericError, Provenance, ProviderError, SegmentMask, ValidationError)

__version__ = "0.1.0"

#!/usr/bin/env python3
"""
Exceptions - Error taxonomy shared by every pipeline module
"""


class CasrError(Exception):
    """Base class for all framework errors"""


class ShapeError(CasrError, ValueError):
    """Image or tensor dimensions do not match what an operation needs"""


class ConfigurationError(CasrError, ValueError):
    """Invalid configuration or inconsistent intensity convention"""


class DomainError(CasrError, ValueError):
    """Argument outside its mathematical domain"""


class NumericError(CasrError, ArithmeticError):
    """NaN or infinite value in a loss or activation"""


class CheckpointError(CasrError):
    """Checkpoint is missing, malformed, or incompatible with the model"""


class IngestionError(CasrError):
    """Dataset directory cannot be ingested"""


class SplitError(CasrError, ValueError):
    """Requested train/test split is infeasible"""


class TrainingError(CasrError):
    """Training cannot proceed on the given inputs"""


class AggregationError(CasrError, ValueError):
    """Report rows cannot be aggregated consistently"""

"""
Exception hierarchy for rbfsnt.

Every error carries the CLI exit code and the JSON-RPC error code it maps to,
so the command line and the tool server report failures the same way.
"""

from typing import Any, Optional

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

JSONRPC_INVALID_PARAMS = -32602
JSONRPC_INTERNAL = -32603


class RbfsntError(Exception):
    exit_code = EXIT_NUMERIC
    jsonrpc_code = JSONRPC_INTERNAL
    kind = "error"


# ----------------------------------------------------------------------------
# Usage
# ----------------------------------------------------------------------------

class UsageError(RbfsntError):
    exit_code = EXIT_USAGE
    jsonrpc_code = JSONRPC_INVALID_PARAMS
    kind = "usage_error"


class ConfigError(UsageError):
    kind = "config_error"


# ----------------------------------------------------------------------------
# Data
# ----------------------------------------------------------------------------

class DataError(RbfsntError):
    exit_code = EXIT_DATA
    jsonrpc_code = JSONRPC_INVALID_PARAMS
    kind = "data_error"


class IdxMagicError(DataError):
    kind = "idx_bad_magic"


class IdxTruncatedError(DataError):
    kind = "idx_truncated"


class IdxCountMismatchError(DataError):
    kind = "idx_count_mismatch"


class CheckpointMagicError(DataError):
    kind = "checkpoint_bad_magic"


class CheckpointTruncatedError(DataError):
    kind = "checkpoint_truncated"


class CheckpointHeaderError(DataError):
    kind = "checkpoint_bad_header"


class EmptyDatasetError(DataError):
    kind = "empty_dataset"


class InfeasiblePackingError(DataError):
    kind = "infeasible_packing"


# ----------------------------------------------------------------------------
# Shapes and graph state
# ----------------------------------------------------------------------------

class ShapeError(RbfsntError, ValueError):
    exit_code = EXIT_DATA
    jsonrpc_code = JSONRPC_INVALID_PARAMS
    kind = "shape_error"


class StaleCacheError(RbfsntError):
    kind = "stale_cache"


class UnsupportedLayerError(RbfsntError):
    kind = "unsupported_layer"


class AttackError(RbfsntError):
    kind = "attack_error"


# ----------------------------------------------------------------------------
# Numerics
# ----------------------------------------------------------------------------

class NumericError(RbfsntError):
    exit_code = EXIT_NUMERIC
    kind = "numeric_error"


class NonFiniteError(NumericError, ValueError):
    kind = "non_finite"


class NonFiniteGradientError(NumericError):
    kind = "non_finite_gradient"


class TrainingDiverged(NumericError):
    kind = "training_diverged"

    def __init__(self, message: str, report: Optional[Any] = None):
        super().__init__(message)
        self.report = report

"""Exception hierarchy.

Every error carries a short machine-readable ``category`` used by the CLI when
it reports a failure on a single stderr line.
"""


class TafusionError(Exception):
    category = "error"


class DimensionError(TafusionError, ValueError):
    category = "dimension"


class ContractError(TafusionError, ValueError):
    category = "contract"


class NumericError(TafusionError, ArithmeticError):
    category = "numeric"


class DeterminismError(TafusionError):
    category = "determinism"


class EmptySequenceError(TafusionError, ValueError):
    category = "empty"


class ConfigError(TafusionError, ValueError):
    category = "config"


class VocabularyError(TafusionError, IndexError):
    category = "vocabulary"


class FitError(TafusionError, ValueError):
    category = "fit"


class LeakageError(TafusionError):
    """Raised when a fitted artifact is applied to data it must not see."""

    category = "leakage"


class SchemeError(TafusionError, ValueError):
    category = "scheme"


class ParseError(TafusionError, ValueError):
    category = "parse"


class MigrationError(TafusionError):
    category = "migration"


class SplitError(TafusionError, ValueError):
    category = "split"


class PretrainError(TafusionError):
    category = "pretrain"


class UndefinedMetricError(TafusionError, ValueError):
    category = "undefined-metric"


class DegenerateTestError(TafusionError, ValueError):
    category = "degenerate-test"

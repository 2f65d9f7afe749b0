"""Exception hierarchy shared across the toolkit."""


class FishyError(Exception):
    """Base class. ``code`` is the machine-readable tag the CLI reports."""

    code = "ERROR"


class ContractViolation(FishyError, ValueError):
    code = "CONTRACT_VIOLATION"


class TrainingDivergence(FishyError, ArithmeticError):
    code = "TRAINING_DIVERGENCE"

    def __init__(self, message, last_good_iteration=None):
        super().__init__(message)
        self.last_good_iteration = last_good_iteration


class NumericOverflow(FishyError, ArithmeticError):
    code = "NUMERIC_OVERFLOW"

    def __init__(self, message, step_index=None):
        super().__init__(message)
        self.step_index = step_index


class UndefinedMetric(FishyError, ValueError):
    code = "UNDEFINED_METRIC"


class ScoreRangeError(FishyError, ValueError):
    code = "SCORE_OUT_OF_RANGE"

    def __init__(self, message, n_out_of_range=0):
        super().__init__(message)
        self.n_out_of_range = n_out_of_range


class DegenerateFit(FishyError, ValueError):
    code = "DEGENERATE_FIT"


class PlacementInfeasible(FishyError, RuntimeError):
    code = "PLACEMENT_INFEASIBLE"


class ConfigError(FishyError, ValueError):
    code = "CONFIG_ERROR"


class FormatError(FishyError, ValueError):
    code = "FORMAT_ERROR"

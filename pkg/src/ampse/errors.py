"""Exception hierarchy shared by every stage of the engine."""


class AmpseError(Exception):
    """Base class; ``stage`` is filled in by the pipeline driver."""

    code = "error"

    def __init__(self, message: str = "", **details):
        super().__init__(message)
        self.details = details


class ParseError(AmpseError):
    code = "parse_error"


class UnknownFormula(AmpseError):
    code = "unknown_formula"


class BindingError(AmpseError):
    code = "binding_error"


class OutOfBounds(AmpseError):
    code = "out_of_bounds"


class MissingPort(AmpseError):
    code = "missing_port"


class CycleError(AmpseError):
    code = "cycle"

    def __init__(self, message: str = "", cycle=()):
        super().__init__(message, cycle=tuple(cycle))
        self.cycle = tuple(cycle)


class MissingEvaluator(AmpseError):
    code = "missing_evaluator"


class ShapeError(AmpseError):
    code = "shape_error"


class FilterStarvation(AmpseError):
    code = "filter_starvation"


class DivergedError(AmpseError):
    code = "diverged"


class MissingInput(AmpseError):
    code = "missing_input"


class EmptyDataset(AmpseError):
    code = "empty_dataset"


class NestedAdapter(AmpseError):
    code = "nested_adapter"


class SingleClassError(AmpseError):
    code = "single_class"


class LengthMismatch(AmpseError):
    code = "length_mismatch"


class NoModels(AmpseError):
    code = "no_models"


class NonFiniteLoss(AmpseError):
    code = "non_finite_loss"


class MissingOracleSpecs(AmpseError):
    code = "missing_oracle_specs"


class UnknownKey(AmpseError):
    code = "unknown_key"


class HashMismatch(AmpseError):
    code = "hash_mismatch"


class VersionUnsupported(AmpseError):
    code = "version_unsupported"


class StageError(AmpseError):
    """Wraps any failure inside a pipeline stage."""

    code = "stage_failure"

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause

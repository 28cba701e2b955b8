"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented exit statuses without a lookup table.
"""


class LattleError(Exception):
    exit_code = 3


class ConfigError(LattleError):
    exit_code = 1


class DataError(LattleError):
    exit_code = 2


class NumericError(LattleError, ArithmeticError):
    exit_code = 3


class ContractViolation(LattleError):
    exit_code = 4


# tensor-core
class DimensionError(LattleError, ValueError):
    pass


class GraphError(LattleError, RuntimeError):
    pass


class OptimizerStateError(LattleError, RuntimeError):
    pass


class LabelIndexError(LattleError, IndexError):
    pass


# tabular-io
class ParseError(DataError):
    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class DatasetError(DataError):
    pass


class DisjointnessError(DataError):
    def __init__(self, shared):
        self.shared = sorted(shared)
        super().__init__("source and target share features: " + ", ".join(self.shared))


class FeatureError(DataError):
    pass


class VocabularyError(DataError):
    pass


# models / transplant
class LayerError(ConfigError, IndexError):
    pass


class TransplantError(ConfigError):
    pass


class StrategyError(ConfigError):
    pass


class FrozenWeightViolation(ContractViolation):
    pass


# training / evaluation
class TrainingError(NumericError):
    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class MetricError(NumericError, ValueError):
    pass


class SearchError(NumericError):
    pass


class AggregateRunError(LattleError):
    def __init__(self, failures):
        self.failures = dict(failures)
        seeds = ", ".join(str(s) for s in sorted(self.failures))
        super().__init__(f"runs failed for seeds: {seeds}")


# checkpoints
class CheckpointError(DataError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class PayloadSizeError(CheckpointError):
    pass


class ModelKindError(CheckpointError):
    pass


class HashMismatchError(CheckpointError):
    pass

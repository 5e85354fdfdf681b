"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class ReIDError(Exception):
    exit_code = 1


class MalformedName(ReIDError):
    exit_code = 10


class EmptyDataset(ReIDError):
    exit_code = 11


class InsufficientIdentities(ReIDError):
    exit_code = 12


class InvalidSpec(ReIDError, ValueError):
    exit_code = 13


class UnknownIdentity(ReIDError, KeyError):
    exit_code = 14


class GenerationFailed(ReIDError):
    exit_code = 15


class ShapeMismatch(ReIDError, ValueError):
    exit_code = 16


class NoNegativeAvailable(ReIDError):
    exit_code = 17


class MissingContext(ReIDError):
    exit_code = 18


class NonFiniteGradient(ReIDError, FloatingPointError):
    exit_code = 19


class NonFiniteLoss(ReIDError, FloatingPointError):
    exit_code = 20


class InvalidK(ReIDError, ValueError):
    exit_code = 21


class InvalidTransfer(ReIDError, ValueError):
    exit_code = 22


class DegenerateBatch(ReIDError):
    exit_code = 23


class MissingAdversarialHalf(ReIDError):
    exit_code = 24


class NoRelevant(ReIDError):
    exit_code = 25


class NoValidQuery(ReIDError):
    exit_code = 26


class MissingReport(ReIDError, FileNotFoundError):
    exit_code = 27


class IOFailure(ReIDError, OSError):
    exit_code = 28


class CheckpointError(ReIDError):
    exit_code = 29

"""Exception hierarchy shared by all expgraph modules."""


class ExpGraphError(Exception):
    """Base class for every error raised by this package."""


# --- feature-map container ---

class BadMagic(ExpGraphError):
    pass


class HeaderParseError(ExpGraphError):
    pass


class PayloadSizeMismatch(ExpGraphError):
    pass


class NonFiniteValues(ExpGraphError):
    pass


class IndexOutOfRange(ExpGraphError):
    pass


# --- graph model / serialization ---

class SchemaError(ExpGraphError):
    pass


class DanglingEdge(ExpGraphError):
    pass


# --- learning ---

class MissingNeighborInference(ExpGraphError):
    pass


class ZeroTotalWeight(ExpGraphError):
    pass


class InsufficientCandidates(ExpGraphError):
    pass


class EmptyDataset(ExpGraphError):
    pass


class LayerMissingInImage(ExpGraphError):
    pass


# --- inference / metrics ---

class AllZeroScores(ExpGraphError):
    pass


class InsufficientSamples(ExpGraphError):
    pass


# --- synthetic data ---

class SeparationUnsatisfiable(ExpGraphError):
    pass


class ShapeMismatch(ExpGraphError):
    pass


# --- part localization ---

class NoDetectedPatterns(ExpGraphError):
    pass

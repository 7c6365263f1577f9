"""Exception types raised across the simulator."""


class FedSnowError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(FedSnowError, ValueError):
    pass


class DimensionError(FedSnowError, ValueError):
    pass


class EmptyDataError(FedSnowError, ValueError):
    pass


class IoError(FedSnowError, OSError):
    pass


class SchemaError(FedSnowError, ValueError):
    pass


# aggregation
class EmptyAggregationError(FedSnowError, ValueError):
    pass


class ZeroMassError(FedSnowError, ValueError):
    pass


# novelty
class InsufficientDataError(FedSnowError, ValueError):
    pass


# consensus
class ProtocolError(FedSnowError):
    pass


# ledger
class DuplicateValidatorError(FedSnowError):
    pass


class AccessDenied(FedSnowError, PermissionError):
    pass


class StateError(FedSnowError):
    pass


# vault
class EncodingError(FedSnowError, ValueError):
    pass


class DecryptError(FedSnowError):
    pass


class NotFoundError(FedSnowError, KeyError):
    pass


class IntegrityError(FedSnowError):
    pass


# trust / model generation
class PolicyError(FedSnowError, ValueError):
    pass


class FallbackError(FedSnowError):
    """Model generation is impossible this round; the caller should carry the
    previous global model forward."""

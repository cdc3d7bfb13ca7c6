"""Exception types shared across the package.

The CLI maps these onto exit codes: contract/config violations exit 1,
file-format and I/O problems exit 2.
"""


class RcermError(Exception):
    """Base class for all package errors."""


class DimensionError(RcermError):
    """Operands have incompatible shapes."""


class ConfigError(RcermError):
    """A configuration value is outside its legal range."""


class ContractError(RcermError):
    """A caller violated an operation precondition."""


class DomainError(RcermError):
    """An input lies outside the mathematical domain of an operation."""


class DegenerateEmbeddingError(RcermError):
    """A vector with (near-)zero norm reached a normalization step."""


class EmptyPoolError(RcermError):
    """A positive or negative pool required by the caller is empty."""


class FormatError(RcermError):
    """A file on disk does not match its expected layout."""


class DatasetError(RcermError):
    """A dataset does not satisfy the requirements of a run."""


class RecordError(RcermError):
    """A run record lacks fields required by a selection criterion."""

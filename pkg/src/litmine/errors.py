"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
OracleError -> 4.
"""


class LitmineError(Exception):
    """Base class for all package errors."""


class ConfigError(LitmineError):
    """Invalid configuration or usage (bad parameters, missing paths)."""


class DataError(LitmineError):
    """Invalid input data (corpus files, tag files, records)."""


class ParseError(DataError):
    """Malformed structured input; carries a human-readable location."""

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        super().__init__(f"{message} (at {location})" if location else message)


class TransportError(LitmineError):
    """Retriable failure talking to a remote port (embedder or oracle)."""


class OracleError(LitmineError):
    """Failure in an oracle-backed agent call."""


class OracleTransportError(TransportError, OracleError):
    """Oracle endpoint unreachable or persistently failing."""


class OracleProtocolError(OracleError):
    """Oracle answered, but the response violates the expected shape,
    or a scripted oracle ran out of matching entries."""

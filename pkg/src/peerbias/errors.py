"""Exception hierarchy shared by all modules.

Data problems (bad input, missing members, degenerate samples) derive from
:class:`DataError`; optimizer and sampler failures derive from
:class:`NumericError`. The CLI maps the two families to distinct exit codes.
"""


class PeerBiasError(Exception):
    pass


class DataError(PeerBiasError):
    pass


class NumericError(PeerBiasError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NotFoundError(DataError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "not found"


class SchemaError(DataError):
    pass


class DegenerateDataError(DataError):
    pass


class ConvergenceError(NumericError):
    pass


class FitError(NumericError):
    pass

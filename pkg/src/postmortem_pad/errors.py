"""Exception hierarchy shared by all pipeline stages.

The CLI maps these onto exit codes, so every failure raised by library code
should derive from :class:`PadError`.
"""


class PadError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 4


class InputError(PadError):
    """Bad configuration, parameters or input files (CLI exit code 2)."""

    exit_code = 2


class LoadError(InputError):
    pass


class ValidationError(InputError):
    def __init__(self, message, row=None, field=None):
        self.row = row
        self.field = field
        where = []
        if row is not None:
            where.append(f"row {row}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class ConfigurationError(InputError):
    pass


class ParameterError(InputError, ValueError):
    pass


class ConsistencyError(InputError):
    pass


class BackboneUnavailableError(InputError):
    """Pretrained backbone weights could not be found or fetched."""


class IntegrityError(InputError):
    pass


class ModelVersionError(InputError):
    pass


class TrainingDivergenceError(PadError):
    exit_code = 3

    def __init__(self, epoch, batch, loss):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")


class InvariantError(PadError):
    exit_code = 4

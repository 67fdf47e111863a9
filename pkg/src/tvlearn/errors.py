"""Exception types shared across the package."""


class SolverError(RuntimeError):
    """A nonlinear or linear solve failed.

    Carries enough context to report which solve failed and how far it
    got; the CLI maps this to exit code 3.
    """

    def __init__(self, message, residual=None, iteration=None, subdomain=None):
        super().__init__(message)
        self.residual = residual
        self.iteration = iteration
        self.subdomain = subdomain


class DataFormatError(ValueError):
    """An input file is malformed or unsupported.

    ``offset`` is the byte offset at which parsing failed, when known;
    the CLI maps this to exit code 4.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset

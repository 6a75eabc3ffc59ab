"""Exception hierarchy shared by every module of the package."""


class SwarmLocError(Exception):
    """Base class for all package errors."""


class InputError(SwarmLocError, ValueError):
    """Invalid user input (bad file, bad parameter, bad config)."""


class ParseError(InputError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class EmptyMesh(InputError):
    pass


class NonPositiveInput(InputError):
    pass


class CountExceedsCapacity(InputError):
    pass


class InvariantViolation(InputError):
    """A plan failed validation. ``invariant`` names the broken rule."""

    def __init__(self, invariant, fls_id=None, detail=""):
        self.invariant = invariant
        self.fls_id = fls_id
        msg = invariant
        if fls_id is not None:
            msg += f" (fls_id={fls_id})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class UnbridgeableEdge(InputError):
    pass


class DegenerateTravel(InputError):
    pass


class EmptySet(InputError):
    pass


class MissingFls(InputError):
    def __init__(self, fls_id, detail=""):
        self.fls_id = fls_id
        super().__init__(f"no trajectory samples for fls_id {fls_id}" + (f": {detail}" if detail else ""))


class MalformedFrame(SwarmLocError, ValueError):
    def __init__(self, reason):
        self.reason = reason
        super().__init__(reason)


class BindError(SwarmLocError, OSError):
    pass


class SchemaError(InputError):
    pass


class InvalidDuration(InputError):
    pass


class OutputDirError(SwarmLocError, OSError):
    pass


class IncompleteRun(InputError):
    pass

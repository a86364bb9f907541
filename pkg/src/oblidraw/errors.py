"""Exception hierarchy. Each class maps to one CLI exit code (see cli.py)."""


class OblidrawError(Exception):
    """Base class for all library errors."""


class InputFormatError(OblidrawError):
    """Input file could not be parsed; carries line and column."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", col {column})" if column is not None else ")")
        super().__init__(message + loc)


class StructureError(OblidrawError):
    """Malformed instance: not a tree, not an st-digraph, bad SPQ shape, bad areas."""


class SealError(OblidrawError):
    """Record does not fit the configured cell width."""


class SealAuthError(OblidrawError):
    """Cell failed authentication on open (tampered, truncated, or wrong key)."""


class RoundDisciplineError(OblidrawError):
    """Single-touch / one-output-per-read rule violated."""

    def __init__(self, message, round_index=None, cell_index=None):
        self.round_index = round_index
        self.cell_index = cell_index
        super().__init__(message)


class WorkspaceOverflowError(OblidrawError):
    """Client workspace exceeded its configured word budget."""


class TraversalError(OblidrawError):
    """Tour next-chain is broken; carries the dangling tag."""

    def __init__(self, message, tag=None):
        self.tag = tag
        super().__init__(message)


class SortKeyError(OblidrawError):
    """Records in one array carry non-comparable or missing sort keys."""


class JoinAmbiguityError(OblidrawError):
    """Join value table holds more than one entry for a key."""


class IncompleteDrawingError(OblidrawError):
    """A node is present on one axis only after finalization."""

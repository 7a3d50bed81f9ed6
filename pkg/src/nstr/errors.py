"""Exception types shared across the package."""


class NstrError(Exception):
    """Base class for all package errors."""


class ParseError(NstrError, ValueError):
    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {message}")


class DuplicateKeyError(NstrError, ValueError):
    pass


class ReferentialError(NstrError, ValueError):
    pass


class EmptyInputError(NstrError, ValueError):
    pass


class CheckpointError(NstrError, ValueError):
    pass


class StageError(NstrError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        self.stage = stage
        super().__init__(f"stage {stage} failed: {cause}")

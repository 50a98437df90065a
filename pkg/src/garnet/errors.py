class ContractError(ValueError):
    """Raised when an operation's preconditions (shapes, ranges, counts) are violated."""


class FormatError(ValueError):
    """Raised when a binary file is malformed. Carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset

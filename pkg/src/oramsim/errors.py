"""Exception types shared across the simulator."""


class OramError(Exception):
    """Base class for simulator errors."""


class ProtocolViolation(OramError):
    """An ORAM invariant was broken; the run cannot continue."""


class StashOverflow(ProtocolViolation):
    def __init__(self, level, size, capacity):
        super().__init__(f"stash overflow at level {level}: {size} tags > capacity {capacity}")
        self.level = level
        self.size = size
        self.capacity = capacity


class HazardError(ProtocolViolation):
    """A read observed a bucket that was (or is being) rewritten after its slot was selected."""


class OrderError(OramError):
    """A request was admitted or completed out of its legal order."""


class DeadlockError(OramError):
    """The controller mesh has outstanding work but nothing can make progress."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class TraceParseError(OramError, ValueError):
    def __init__(self, lineno, line, reason):
        super().__init__(f"line {lineno}: {reason}: {line!r}")
        self.lineno = lineno


class InsufficientSamples(OramError, ValueError):
    pass

"""Exception types shared across the package."""


class RejectedInput(ValueError):
    """An argument violates an operation's preconditions."""


class ProtocolError(RuntimeError):
    """Message exchange between workers went wrong."""

    def __init__(self, message, epoch=None, edge=None, kind=None):
        ctx = [f"{k}={v}" for k, v in (("epoch", epoch), ("edge", edge), ("kind", kind)) if v is not None]
        super().__init__(message + (f" [{', '.join(ctx)}]" if ctx else ""))
        self.epoch = epoch
        self.edge = edge
        self.kind = kind


class DeadlockError(ProtocolError):
    """wait_all timed out; ``unmatched`` lists the (epoch, edge, kind) keys still missing."""

    def __init__(self, unmatched, timeout):
        self.unmatched = list(unmatched)
        keys = ", ".join(f"(epoch={e}, edge={g}, kind={k})" for e, g, k in self.unmatched)
        super().__init__(f"wait_all timed out after {timeout:g}s; unmatched receives: {keys}")


class NonFiniteError(FloatingPointError):
    """A computation produced NaN/inf; ``index`` points at the offending entry."""

    def __init__(self, message, index):
        super().__init__(f"{message} (index {index})")
        self.index = index


class ConfigError(ValueError):
    """Invalid run configuration; ``path`` is the dotted field path."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path

"""Exception hierarchy shared across the package."""


class CxrTruncError(Exception):
    """Base class for every error raised deliberately by cxrtrunc."""


class RegistryConflictError(CxrTruncError):
    pass


class NotFoundError(CxrTruncError, LookupError):
    pass


class InvalidDepthError(CxrTruncError, ValueError):
    def __init__(self, name: str, k: int, max_depth: int):
        self.k = k
        self.max_depth = max_depth
        super().__init__(
            f"truncation depth k={k} is invalid for {name}: "
            f"maximum depth is {max_depth}"
        )


class RemapError(CxrTruncError, KeyError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        units = sorted({key.split(".", 1)[0] for key in self.missing})
        shown = ", ".join(self.missing[:8])
        more = "" if len(self.missing) <= 8 else f" (+{len(self.missing) - 8} more)"
        super().__init__(
            f"weight map is missing {len(self.missing)} key(s) for unit(s) "
            f"{units}: {shown}{more}"
        )

    def __str__(self):
        return self.args[0]


class ShapeError(CxrTruncError, ValueError):
    pass


class SchemaError(CxrTruncError, ValueError):
    pass


class RowError(CxrTruncError, ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class EmptyDatasetError(CxrTruncError, ValueError):
    pass


class UndefinedAUCError(CxrTruncError, ValueError):
    pass


class UndefinedCorrelationError(CxrTruncError, ValueError):
    pass


class InputError(CxrTruncError, ValueError):
    pass


class UnsupportedModelError(CxrTruncError, TypeError):
    pass


class NonFiniteLossError(CxrTruncError, FloatingPointError):
    def __init__(self, step: int, batch_id: int, value: float):
        self.step = step
        self.batch_id = batch_id
        super().__init__(f"non-finite loss {value!r} at step {step} (batch {batch_id})")


class BootstrapError(CxrTruncError, RuntimeError):
    pass

"""Exception types raised across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain where an operation is defined."""


class ExtrapolationError(DomainError):
    """A surface query falls outside the grid hull."""


class PicardConvergenceError(RuntimeError):
    def __init__(self, message, residual, step=None):
        super().__init__(message)
        self.residual = residual
        self.step = step


class NumericalError(FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(ValueError):
    """Scenario configuration could not be parsed or is inconsistent."""

    def __init__(self, message, section=None, key=None, line=None):
        where = []
        if section is not None:
            where.append(f"[{section}]")
        if key is not None:
            where.append(key)
        if line is not None:
            where.append(f"line {line}")
        prefix = " ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.section = section
        self.key = key
        self.line = line

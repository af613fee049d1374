"""
Exception types raised across the package.

The CLI maps these onto process exit codes (see savae.cli.EXIT_CODES).
"""
from typing import Optional, Sequence


class SaVaeError(Exception):
    """Base class for every error raised by savae."""


class NonFiniteValue(SaVaeError, ArithmeticError):
    def __init__(self, node: str, step: Optional[int] = None):
        self.node = node
        self.step = step
        where = f" at SVI step {step}" if step is not None else ""
        super().__init__(f"non-finite value produced by {node}{where}")

    def at_step(self, step: int) -> "NonFiniteValue":
        return NonFiniteValue(self.node, step)


class UsedTape(SaVaeError, RuntimeError):
    def __init__(self):
        super().__init__("tape has already been consumed by backward()")


class ShapeError(SaVaeError, ValueError):
    def __init__(self, op: str, shape_a: Sequence[int], shape_b: Sequence[int]):
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{op}: incompatible shapes {self.shape_a} and {self.shape_b}")


class TraceMismatch(SaVaeError, ValueError):
    pass


class VocabError(SaVaeError, ValueError):
    pass


class EmptyInput(SaVaeError, ValueError):
    pass


class DimensionError(SaVaeError, ValueError):
    pass


class ConfigError(SaVaeError, ValueError):
    pass


class MissingArtifact(SaVaeError, FileNotFoundError):
    def __init__(self, path: str, what: str = "artifact"):
        self.path = str(path)
        super().__init__(f"missing {what}: {self.path}")

"""Exception hierarchy for the tarflow package.

Every error raised on purpose by the library derives from `TarflowError`
and from the closest builtin, so callers may catch either.
"""

from typing import Sequence


class TarflowError(Exception):
    pass


class ShapeMismatchError(TarflowError, ValueError):
    def __init__(self, op: str, *shapes: Sequence[int]):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        rendered = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"[{op}] incompatible shapes: {rendered}")


class DomainError(TarflowError, ArithmeticError):
    pass


class DegenerateMaskError(TarflowError, ValueError):
    pass


class ParameterError(TarflowError, ValueError):
    pass


class CacheFullError(TarflowError, IndexError):
    pass


class GradientError(TarflowError, RuntimeError):
    pass


class NumericalRangeError(TarflowError, FloatingPointError):
    def __init__(
        self,
        message: str,
        max_abs_alpha: float,
        block: int | None = None,
        position: int | None = None,
    ):
        self.max_abs_alpha = max_abs_alpha
        self.block = block
        self.position = position
        where = f"block:{block}" if block is not None else "block:?"
        if position is not None:
            where += f" position:{position}"
        super().__init__(
            f"[{where}] {message} (max |alpha| = {max_abs_alpha:.4g})"
        )


class NonFiniteLossError(TarflowError, FloatingPointError):
    def __init__(self, step: int, max_abs_alpha: float, max_abs_z: float):
        self.step = step
        self.max_abs_alpha = max_abs_alpha
        self.max_abs_z = max_abs_z
        super().__init__(
            f"[step:{step}] loss is not finite "
            f"(max |alpha| = {max_abs_alpha:.4g}, "
            f"max |z| = {max_abs_z:.4g})"
        )


class ConfigError(TarflowError, ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"invalid config field '{field}': {message}")


class _OffsetError(TarflowError, ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class IdxFormatError(_OffsetError):
    pass


class ImageFormatError(_OffsetError):
    pass


class CheckpointFormatError(_OffsetError):
    pass

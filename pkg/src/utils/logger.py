import logging
from typing import TYPE_CHECKING, Any, MutableMapping

if TYPE_CHECKING:
    _LoggerAdapter = logging.LoggerAdapter[logging.Logger]
else:
    _LoggerAdapter = logging.LoggerAdapter


class CustomLoggingAdapter(_LoggerAdapter):
    """Prefixes every message with `[ctx key=value ...]`, built from the
    adapter's extra mapping."""

    def process(
        self,
        msg: str,
        kwargs: MutableMapping[str, Any],
    ) -> tuple[str, MutableMapping[str, Any]]:
        assert self.extra is not None
        fields = [
            f"{key}={value}"
            for key, value in self.extra.items()
            if key != "ctx"
        ]
        prefix = " ".join([str(self.extra["ctx"]), *fields])
        return (f"[{prefix}] {msg}", kwargs)

    def bind(self, **fields: Any) -> "CustomLoggingAdapter":
        """A sibling adapter with extra fields added to the prefix."""
        assert self.extra is not None
        return CustomLoggingAdapter(self.logger, {**self.extra, **fields})

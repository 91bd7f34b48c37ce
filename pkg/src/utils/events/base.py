import abc
import logging
import typing
from uuid import uuid4

from pydantic import BaseModel

from utils.logger import CustomLoggingAdapter

Topic: typing.TypeAlias = str


class BaseEvent(BaseModel):
    topic: Topic


class AbstractSubscriber(abc.ABC):
    def __init__(self) -> None:
        self._id = uuid4()
        self._topics: set[Topic] = set()
        self._logger = CustomLoggingAdapter(
            logging.getLogger(__name__),
            {"ctx": self},
        )

    def __repr__(self):
        return f"sub-{str(self._id)[:8]}[{type(self).__name__}]"

    @property
    def topics(self) -> set[Topic]:
        return set(self._topics)

    @abc.abstractmethod
    def handle(self, event: BaseEvent) -> None:
        raise NotImplementedError

    @abc.abstractmethod
    def subscribe(self, topics: list[Topic]) -> None:
        raise NotImplementedError

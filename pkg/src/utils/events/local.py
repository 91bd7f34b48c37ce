"""In-process publish/subscribe.

Delivery is synchronous: `publish` returns once every subscriber of the
topic has handled the event, in registration order.
"""

import logging
from collections import defaultdict
from uuid import uuid4

from utils.logger import CustomLoggingAdapter

from .base import AbstractSubscriber, BaseEvent, Topic


class LocalPublisher:
    def __init__(self):
        self._id = uuid4()
        self._latest_event: BaseEvent | None = None
        self.subscribers: dict[Topic, list["LocalSubscriber"]] = defaultdict(
            list
        )
        self._logger = CustomLoggingAdapter(
            logging.getLogger(__name__),
            {"ctx": self},
        )

    def __repr__(self):
        return f"pub-{str(self._id)[:8]}"

    @property
    def latest_event(self) -> BaseEvent | None:
        return self._latest_event

    def register(self, subscriber: "LocalSubscriber", topic: Topic):
        self._logger.debug(f"Registering {subscriber} for {topic}")
        self.subscribers[topic].append(subscriber)

    def publish(self, event: BaseEvent):
        topic = getattr(event, "topic", None)
        if not topic:
            raise ValueError("Event must have a topic")
        self._latest_event = event
        subscribers = self.subscribers.get(topic, [])
        if len(subscribers) == 0:
            self._logger.debug(f"No subscribers for topic: {topic}")
        for subscriber in subscribers:
            subscriber.notify(event)


class LocalSubscriber(AbstractSubscriber):
    def __init__(self, publisher: LocalPublisher):
        self.publisher = publisher
        super().__init__()

    def notify(self, event: BaseEvent):
        """Handle `event` now. Errors propagate to the publisher's caller."""
        self._logger.debug(f"Handling event: {event.topic}")
        self.handle(event)

    def subscribe(self, topics: list[Topic]):
        for topic in topics:
            if topic not in self._topics:
                self._logger.debug(f"Subscribing to {topic}")
                self.publisher.register(self, topic)
                self._topics.add(topic)

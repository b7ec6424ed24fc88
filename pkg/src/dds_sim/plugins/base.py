"""The offload plugin contract and the plugin registry."""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Sequence

from dds_sim.wire import AppRequest


@dataclass(frozen=True)
class ReadOp:
    """A file read.  ``data`` is filled in when the read has completed
    (Invalidate sees it); offload functions leave it ``None``."""
    file_id: int
    offset: int
    size: int
    data: Optional[memoryview] = None


@dataclass(frozen=True)
class WriteOp:
    file_id: int
    offset: int
    data: memoryview


class _Decline:
    __slots__ = ()

    def __repr__(self) -> str:
        return "DECLINE"

    def __bool__(self) -> bool:
        return False


DECLINE = _Decline()


class OffloadPlugin(ABC):
    """Four user functions deciding which reads the DPU serves.

    Implementations must be pure over their arguments and the table: no
    file I/O and no state outside the cache table.
    """

    name: str = ""

    @abstractmethod
    def off_pred(self, msg: Sequence[AppRequest], table) -> tuple[list, list]:
        """Split one client message into (host requests, DPU requests)."""

    @abstractmethod
    def off_func(self, req: AppRequest, table):
        """The file read serving ``req``, or ``DECLINE``."""

    @abstractmethod
    def cache(self, op: WriteOp) -> tuple[list, list]:
        """(keys, items) to insert after a host write completes."""

    @abstractmethod
    def invalidate(self, op: ReadOp) -> list:
        """Keys to delete after a host read completes."""


class HostOnlyPlugin(OffloadPlugin):
    """Routes everything to the host; the director then acts as a plain proxy."""

    name = "host_only"

    def off_pred(self, msg, table):
        return list(msg), []

    def off_func(self, req, table):
        return DECLINE

    def cache(self, op):
        return [], []

    def invalidate(self, op):
        return []


_REGISTRY: dict[str, type] = {}


def register(cls: type) -> type:
    _REGISTRY[cls.name] = cls
    return cls


register(HostOnlyPlugin)


def get_plugin(name: str, **params) -> OffloadPlugin:
    # importing the in-tree plugins registers them
    from dds_sim.plugins import kv_log, page_lsn  # noqa: F401
    try:
        cls = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown plugin {name!r}; known: {sorted(_REGISTRY)}") from None
    return cls(**params)


def plugin_names() -> list[str]:
    from dds_sim.plugins import kv_log, page_lsn  # noqa: F401
    return sorted(_REGISTRY)


class HostApp:
    """Host-side half of an application: executes the requests the director
    forwards, doing its file I/O through a poll group.

    ``reply(request_id, status, data)`` sends one response back to the
    client.  File completions are routed to the callback registered with
    :meth:`issue`.
    """

    def __init__(self) -> None:
        self.fs = None
        self.group = None
        self._io: dict = {}
        self.file_ops = 0

    def attach(self, fs, group) -> None:
        self.fs = fs
        self.group = group
        self.setup()

    def setup(self) -> None:
        """Create files; called once after :meth:`attach`."""

    def issue(self, rid: int, done) -> None:
        self._io[rid] = done
        self.file_ops += 1

    def on_completion(self, c) -> None:
        self._io.pop(c.request_id)(c)

    def outstanding_io(self) -> int:
        return len(self._io)

    def handle(self, req: AppRequest, reply) -> None:  # pragma: no cover - abstract
        raise NotImplementedError

    def load_requests(self) -> list:
        """Requests executed through the host path before the workload starts."""
        return []

"""How execution commands reach resource endpoints.

Endpoints use two schemes: ``local://<name>`` resolves to an in-process
handler (demo agents, tests), ``http(s)://`` posts the encoded command to
the resource's ``/invoke`` route. Transport failures raise
:class:`TransportError`; deadline overruns raise :class:`DeadlineExceeded`.
Both are distinct from an ``error`` ExecutionResult, which means the
resource itself reported a failure.
"""
from __future__ import annotations

import logging
from typing import Callable, Protocol

import httpx

from .protocol import ExecutionCommand, ExecutionResult, decode, encode

logger = logging.getLogger(__name__)


class TransportError(Exception):
    """The endpoint could not be reached or spoke garbage."""


class DeadlineExceeded(TransportError):
    """The call did not complete within the command's deadline."""


class Transport(Protocol):
    def invoke(self, command: ExecutionCommand) -> ExecutionResult: ...


Handler = Callable[[ExecutionCommand], ExecutionResult]


class LocalTransport:
    """Routes ``local://name`` endpoints to registered in-process handlers."""

    def __init__(self):
        self._handlers: dict[str, Handler] = {}

    def mount(self, name: str, handler: Handler) -> None:
        self._handlers[name] = handler

    def invoke(self, command: ExecutionCommand) -> ExecutionResult:
        if not command.endpoint.startswith("local://"):
            raise TransportError(f"not a local endpoint: {command.endpoint}")
        name = command.endpoint[len("local://"):]
        handler = self._handlers.get(name)
        if handler is None:
            raise TransportError(f"no handler mounted for {command.endpoint}")
        result = handler(command)
        if result.elapsed_ms > command.deadline_ms:
            raise DeadlineExceeded(
                f"{command.endpoint} took {result.elapsed_ms}ms > deadline {command.deadline_ms}ms")
        return result


class HttpTransport:
    """Posts the canonical command encoding to ``<endpoint>/invoke``."""

    def __init__(self, client: httpx.Client | None = None):
        self._client = client or httpx.Client()

    def invoke(self, command: ExecutionCommand) -> ExecutionResult:
        url = command.endpoint.rstrip("/") + "/invoke"
        try:
            response = self._client.post(
                url,
                content=encode(command),
                headers={"content-type": "application/json"},
                timeout=command.deadline_ms / 1000.0,
            )
        except httpx.TimeoutException as exc:
            raise DeadlineExceeded(str(exc)) from exc
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if response.status_code != 200:
            raise TransportError(f"{url} returned HTTP {response.status_code}")
        result = decode(response.content)
        if not isinstance(result, ExecutionResult):
            raise TransportError(f"{url} returned a non-result message")
        return result


class RoutingTransport:
    """Dispatches on endpoint scheme; the default for gateway services."""

    def __init__(self, local: LocalTransport | None = None,
                 http: HttpTransport | None = None):
        self.local = local or LocalTransport()
        self._http = http

    def invoke(self, command: ExecutionCommand) -> ExecutionResult:
        if command.endpoint.startswith("local://"):
            return self.local.invoke(command)
        if command.endpoint.startswith(("http://", "https://")):
            if self._http is None:
                self._http = HttpTransport()
            return self._http.invoke(command)
        raise TransportError(f"unsupported endpoint scheme: {command.endpoint}")

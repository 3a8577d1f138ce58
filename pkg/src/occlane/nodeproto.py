"""Child-process node protocol, version "occlane-node/1".

One pipeline stage (detect, inpaint, or segment) can be served by an external
executable speaking line-delimited UTF-8 JSON over stdin/stdout: one complete
JSON document per line, images exchanged by file path inside a scratch
directory, log text on stderr only. The parent sends a hello and expects a
matching ready within the handshake timeout; requests are strictly serial per
handle with monotonically increasing ids; shutdown is polite, then forced.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import shutil
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field

log = logging.getLogger("occlane.nodeproto")

PROTOCOL_VERSION = "occlane-node/1"
NODE_ROLES = ("detect", "inpaint", "segment")

HANDSHAKE_TIMEOUT = 10.0
CALL_TIMEOUT = 30.0
SHUTDOWN_TIMEOUT = 5.0


class NodeError(Exception):
    """Base failure talking to an external node."""


class NodeSpawnError(NodeError):
    """Process could not start or never completed the handshake."""


class NodeProtocolError(NodeError):
    """The node violated the wire contract (bad line, id, or outputs)."""


class NodeTimeoutError(NodeError):
    """The node missed a deadline; the process was killed."""


@dataclass
class NodeRequest:
    role: str
    inputs: dict[str, str]
    scratch_dir: str
    params: dict = field(default_factory=dict)
    id: int | None = None

    def __post_init__(self):
        if self.role not in NODE_ROLES:
            raise ValueError(f"role must be one of {NODE_ROLES}, got {self.role!r}")
        for name, path in self.inputs.items():
            if not os.path.isfile(path):
                raise ValueError(f"request input {name!r} does not exist: {path}")

    def to_wire(self) -> dict:
        return {
            "type": "request",
            "id": self.id,
            "role": self.role,
            "inputs": dict(self.inputs),
            "scratch_dir": self.scratch_dir,
            "params": self.params,
        }


@dataclass
class NodeResponse:
    type: str  # "response" | "error"
    id: int
    outputs: dict[str, str] | None = None
    boxes: list[list[float]] | None = None
    message: str | None = None

    @property
    def ok(self) -> bool:
        return self.type == "response"


def _parse_response(obj: dict, raw: str) -> NodeResponse:
    kind = obj.get("type")
    if kind not in ("response", "error"):
        raise NodeProtocolError(f"unexpected message type {kind!r} in line: {raw!r}")
    if not isinstance(obj.get("id"), int):
        raise NodeProtocolError(f"response id missing or not an integer: {raw!r}")
    if kind == "error":
        message = obj.get("message")
        if not isinstance(message, str) or not message:
            raise NodeProtocolError(f"error response without message: {raw!r}")
        return NodeResponse(type="error", id=obj["id"], message=message)
    outputs = obj.get("outputs")
    boxes = obj.get("boxes")
    if (outputs is None) == (boxes is None):
        raise NodeProtocolError(f"response must carry exactly one of outputs/boxes: {raw!r}")
    if outputs is not None:
        if not isinstance(outputs, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in outputs.items()
        ):
            raise NodeProtocolError(f"outputs must map names to paths: {raw!r}")
        return NodeResponse(type="response", id=obj["id"], outputs=outputs)
    if not isinstance(boxes, list):
        raise NodeProtocolError(f"boxes must be a list: {raw!r}")
    parsed = []
    for entry in boxes:
        if not isinstance(entry, list) or len(entry) != 6:
            raise NodeProtocolError(f"each box is [x0,y0,x1,y1,class_id,conf]: {raw!r}")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in entry):
            raise NodeProtocolError(f"box fields must be numbers: {raw!r}")
        parsed.append([float(v) for v in entry])
    return NodeResponse(type="response", id=obj["id"], boxes=parsed)


class NodeHandle:
    """One external node process plus its reader thread and scratch dir."""

    def __init__(self, proc, role, command, scratch_dir, owns_scratch, keep_scratch):
        self.proc = proc
        self.role = role
        self.command = list(command)
        self.scratch_dir = scratch_dir
        self._owns_scratch = owns_scratch
        self.keep_scratch = keep_scratch
        self.poisoned = False
        self._closed = False
        self._last_id = 0
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self):
        for line in self.proc.stdout:
            self._lines.put(line)
        self._lines.put(None)  # EOF marker

    def _read_line(self, timeout: float) -> str:
        try:
            line = self._lines.get(timeout=timeout)
        except queue.Empty:
            raise NodeTimeoutError(
                f"node {self.command[0]!r} sent nothing for {timeout:.1f}s"
            ) from None
        if line is None:
            raise NodeProtocolError(f"node {self.command[0]!r} closed its stdout")
        return line

    def _send(self, obj: dict) -> None:
        payload = json.dumps(obj, separators=(",", ":")) + "\n"
        try:
            self.proc.stdin.write(payload)
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise NodeProtocolError(f"node {self.command[0]!r} stdin closed: {exc}") from None

    def next_id(self) -> int:
        self._last_id += 1
        return self._last_id


def spawn_node(
    command,
    role: str,
    scratch_dir: str | None = None,
    keep_scratch: bool = False,
    handshake_timeout: float = HANDSHAKE_TIMEOUT,
) -> NodeHandle:
    """Start an external node and complete the hello/ready handshake."""
    if role not in NODE_ROLES:
        raise ValueError(f"role must be one of {NODE_ROLES}, got {role!r}")
    command = [str(c) for c in command]
    owns_scratch = scratch_dir is None
    if owns_scratch:
        base = os.environ.get("OCCLANE_SCRATCH") or tempfile.gettempdir()
        os.makedirs(base, exist_ok=True)
        scratch_dir = tempfile.mkdtemp(prefix="occlane-node-", dir=base)
    try:
        proc = subprocess.Popen(
            command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=None,
            text=True,
            encoding="utf-8",
            bufsize=1,
        )
    except OSError as exc:
        if owns_scratch and not keep_scratch:
            shutil.rmtree(scratch_dir, ignore_errors=True)
        raise NodeSpawnError(f"cannot start node {command!r}: {exc}") from None

    handle = NodeHandle(proc, role, command, scratch_dir, owns_scratch, keep_scratch)
    try:
        handle._send({"type": "hello", "protocol": PROTOCOL_VERSION, "role": role})
        raw = handle._read_line(handshake_timeout)
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError:
            raise NodeSpawnError(f"handshake line is not JSON: {raw!r}") from None
        if not isinstance(obj, dict) or obj.get("type") != "ready":
            raise NodeSpawnError(f"expected ready, got: {raw!r}")
        if obj.get("protocol") != PROTOCOL_VERSION:
            raise NodeSpawnError(f"protocol mismatch: {obj.get('protocol')!r}")
        if obj.get("role") != role:
            raise NodeSpawnError(
                f"role mismatch: asked {role!r}, node serves {obj.get('role')!r}"
            )
    except NodeError as exc:
        if isinstance(exc, NodeTimeoutError):
            exc = NodeSpawnError(f"handshake timed out after {handshake_timeout:.1f}s")
        handle.poisoned = True
        _terminate(handle, wait=1.0)
        _cleanup_scratch(handle)
        raise exc
    log.debug("node ready: role=%s command=%s", role, command)
    return handle


def call(handle: NodeHandle, request: NodeRequest, timeout: float = CALL_TIMEOUT) -> NodeResponse:
    """Send one request and wait for its response. Strictly serial: the next
    line from the node must answer this id. Protocol violations raise; an
    error-type response is returned for the caller to record."""
    if handle.poisoned:
        raise NodeError("handle is poisoned by an earlier timeout or shutdown")
    if request.id is None:
        request.id = handle.next_id()
    elif request.id <= handle._last_id:
        raise ValueError(
            f"request id {request.id} not greater than last id {handle._last_id}"
        )
    else:
        handle._last_id = request.id

    handle._send(request.to_wire())
    try:
        raw = handle._read_line(timeout)
    except NodeTimeoutError:
        handle.poisoned = True
        _terminate(handle, wait=1.0)
        raise NodeTimeoutError(
            f"no response to request {request.id} within {timeout:.1f}s; node killed"
        ) from None
    try:
        obj = json.loads(raw)
        if not isinstance(obj, dict):
            raise json.JSONDecodeError("not an object", raw, 0)
    except json.JSONDecodeError:
        raise NodeProtocolError(f"malformed protocol line: {raw!r}") from None
    response = _parse_response(obj, raw)
    if response.id != request.id:
        raise NodeProtocolError(
            f"response id {response.id} does not echo request id {request.id}"
        )
    if response.ok and response.outputs is not None:
        for name, path in response.outputs.items():
            if not os.path.isfile(path):
                raise NodeProtocolError(f"output {name!r} missing on disk: {path}")
    return response


def _terminate(handle: NodeHandle, wait: float) -> None:
    if handle.proc.poll() is None:
        handle.proc.kill()
    try:
        handle.proc.wait(timeout=wait)
    except subprocess.TimeoutExpired:  # pragma: no cover - kill is not ignorable
        pass


def _cleanup_scratch(handle: NodeHandle) -> None:
    if handle._owns_scratch and not handle.keep_scratch:
        shutil.rmtree(handle.scratch_dir, ignore_errors=True)


def shutdown(handle: NodeHandle, wait: float = SHUTDOWN_TIMEOUT) -> None:
    """Polite shutdown, bounded wait, then kill. Idempotent; never raises."""
    if handle._closed:
        return
    handle._closed = True
    try:
        handle._send({"type": "shutdown"})
        handle.proc.stdin.close()
    except (NodeError, OSError):
        pass
    try:
        handle.proc.wait(timeout=wait)
    except subprocess.TimeoutExpired:
        log.warning("node %r ignored shutdown; killing", handle.command[0])
        _terminate(handle, wait=wait)
    handle.poisoned = True
    _cleanup_scratch(handle)

"""Framed binary messages exchanged between the controller and rollout workers.

Every frame is ``<u32 length><u8 type><payload>`` where ``length`` counts the
type byte plus the payload. Each payload opens with a ``u8`` version. All
integers and reals are little-endian; ``docs/protocol.md`` has the byte
layout of every frame type.
"""

from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass

import numpy as np

from .sim.rollout import RolloutResult

VERSION = 1
HASH_LEN = 32
MAX_FRAME = 1 << 28

_HEAD = struct.Struct("<IB")
_TASK = struct.Struct("<BQQ32sI")
_RESULT_HEAD = struct.Struct("<BQB")
_RESULT_OK = struct.Struct("<dBqIdQ")
_TEXT_LEN = struct.Struct("<I")
_PING = struct.Struct("<BQ")
_PONG = struct.Struct("<BQ32s")
_MISMATCH = struct.Struct("<BQ32s")
_SHUTDOWN = struct.Struct("<B")


class FrameType(enum.IntEnum):
    TASK = 1
    RESULT = 2
    PING = 3
    PONG = 4
    SHUTDOWN = 5
    MISMATCH = 6


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Task:
    task_id: int
    sample: np.ndarray
    seed: int
    scenario_hash: bytes


@dataclass(frozen=True)
class TaskResult:
    """Exactly one of ``result`` and ``error`` is set."""

    task_id: int
    result: RolloutResult | None = None
    error: str | None = None

    @property
    def ok(self):
        return self.result is not None


def frame(ftype: FrameType, payload: bytes) -> bytes:
    return _HEAD.pack(len(payload) + 1, int(ftype)) + payload


def encode_task(task: Task) -> bytes:
    values = np.ascontiguousarray(task.sample, dtype="<f8").ravel()
    if len(task.scenario_hash) != HASH_LEN:
        raise ProtocolError("scenario hash must be 32 bytes")
    head = _TASK.pack(VERSION, task.task_id, task.seed, task.scenario_hash, values.size)
    return frame(FrameType.TASK, head + values.tobytes())


def decode_task(payload: bytes) -> Task:
    _check(payload, _TASK.size)
    _, task_id, seed, digest, n = _TASK.unpack_from(payload)
    if len(payload) != _TASK.size + 8 * n:
        raise ProtocolError("task frame length does not match its sample count")
    sample = np.frombuffer(payload, dtype="<f8", count=n, offset=_TASK.size).astype(float)
    return Task(task_id, sample, seed, digest)


def encode_result(tr: TaskResult) -> bytes:
    if tr.ok:
        r = tr.result
        body = _RESULT_HEAD.pack(VERSION, tr.task_id, 0) + _RESULT_OK.pack(
            r.min_ttc, int(r.crashed), -1 if r.crash_step is None else r.crash_step,
            r.steps, r.log_p0, r.seed)
    else:
        text = (tr.error or "").encode("utf-8")
        body = _RESULT_HEAD.pack(VERSION, tr.task_id, 1) + _TEXT_LEN.pack(len(text)) + text
    return frame(FrameType.RESULT, body)


def decode_result(payload: bytes) -> TaskResult:
    _check(payload, _RESULT_HEAD.size)
    _, task_id, status = _RESULT_HEAD.unpack_from(payload)
    off = _RESULT_HEAD.size
    if status == 0:
        if len(payload) != off + _RESULT_OK.size:
            raise ProtocolError("bad result frame length")
        min_ttc, crashed, crash_step, steps, log_p0, seed = _RESULT_OK.unpack_from(payload, off)
        return TaskResult(task_id, RolloutResult(
            min_ttc, bool(crashed), None if crash_step < 0 else crash_step, steps, log_p0, seed))
    if status == 1:
        (n,) = _TEXT_LEN.unpack_from(payload, off)
        if len(payload) != off + _TEXT_LEN.size + n:
            raise ProtocolError("bad failure frame length")
        text = payload[off + _TEXT_LEN.size:].decode("utf-8", errors="replace")
        return TaskResult(task_id, error=text)
    raise ProtocolError(f"unknown result status {status}")


def encode_ping(nonce: int) -> bytes:
    return frame(FrameType.PING, _PING.pack(VERSION, nonce))


def decode_ping(payload: bytes) -> int:
    _check(payload, _PING.size, exact=True)
    return _PING.unpack(payload)[1]


def encode_pong(nonce: int, digest: bytes) -> bytes:
    return frame(FrameType.PONG, _PONG.pack(VERSION, nonce, digest))


def decode_pong(payload: bytes):
    _check(payload, _PONG.size, exact=True)
    _, nonce, digest = _PONG.unpack(payload)
    return nonce, digest


def encode_mismatch(task_id: int, digest: bytes) -> bytes:
    return frame(FrameType.MISMATCH, _MISMATCH.pack(VERSION, task_id, digest))


def decode_mismatch(payload: bytes):
    _check(payload, _MISMATCH.size, exact=True)
    _, task_id, digest = _MISMATCH.unpack(payload)
    return task_id, digest


def encode_shutdown() -> bytes:
    return frame(FrameType.SHUTDOWN, _SHUTDOWN.pack(VERSION))


def _check(payload, size, exact=False):
    if len(payload) < size or (exact and len(payload) != size):
        raise ProtocolError("truncated frame")
    if payload[0] != VERSION:
        raise ProtocolError(f"unsupported protocol version {payload[0]}")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket):
    """Block until one whole frame arrives; returns ``(FrameType, payload)``."""
    length, ftype = _HEAD.unpack(_recv_exact(sock, _HEAD.size))
    if not 1 <= length <= MAX_FRAME:
        raise ProtocolError(f"bad frame length {length}")
    payload = _recv_exact(sock, length - 1) if length > 1 else b""
    try:
        return FrameType(ftype), payload
    except ValueError:
        raise ProtocolError(f"unknown frame type {ftype}") from None

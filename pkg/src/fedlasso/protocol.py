"""Query rounds between the aggregation center and institution workers.

One round is: the center sends a single frame to every worker, every
worker sends back exactly one reply frame. The center never sees shard
rows, only per-worker reply payloads that it sums in a fixed
institution order (floating-point addition is order sensitive, so the
order is part of the protocol).

Frame layout, all little-endian:

    4 bytes  payload length in bytes
    8 bytes  round id
    1 byte   kind (0 broadcast, 1 vector sum, 2 scalar sum)
    2 bytes  tag length
    ...      tag, UTF-8
    ...      payload, float64

Broadcasts are acknowledged with an empty reply so every round has the
same shape on the wire. The center keeps a transcript of everything it
sends and receives (metadata and payload lengths, never payload
contents); `privacy_audit` replays a transcript against the declared
per-tag payload lengths and flags anything that does not conform, plus
any worker reply whose length equals a shard's row count, which is the
signature of raw rows going over the wire.
"""

from __future__ import annotations

import io
import json
import socket
import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import ConfigError, ProtocolError
from .linalg import sum_in_order

_HEADER = struct.Struct("<IQBH")
MAX_TAG_BYTES = 65535
MAX_PAYLOAD_BYTES = 2**32 - 1
SOCKET_TIMEOUT = 30.0


class Kind(IntEnum):
    BROADCAST = 0
    VECTOR_SUM = 1
    SCALAR_SUM = 2


@dataclass(frozen=True)
class Frame:
    round_id: int
    kind: Kind
    tag: str
    payload: np.ndarray

    def __post_init__(self):
        payload = np.ascontiguousarray(self.payload, dtype=np.float64)
        if payload.ndim != 1:
            raise ConfigError(f"payload must be 1-D, got shape {payload.shape}")
        object.__setattr__(self, "payload", payload)
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.round_id < 0:
            raise ConfigError(f"round_id must be non-negative, got {self.round_id}")


def encode_frame(frame: Frame) -> bytes:
    tag_bytes = frame.tag.encode("utf-8")
    if len(tag_bytes) > MAX_TAG_BYTES:
        raise ConfigError(f"tag too long ({len(tag_bytes)} bytes)")
    payload_bytes = frame.payload.astype("<f8", copy=False).tobytes()
    if len(payload_bytes) > MAX_PAYLOAD_BYTES:
        raise ConfigError(f"payload too large ({len(payload_bytes)} bytes)")
    header = _HEADER.pack(len(payload_bytes), frame.round_id, int(frame.kind), len(tag_bytes))
    return header + tag_bytes + payload_bytes


def _read_exact(stream, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            raise ProtocolError(f"connection closed mid-frame ({got}/{n} bytes)")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(stream) -> Frame:
    header = _read_exact(stream, _HEADER.size)
    payload_len, round_id, kind, tag_len = _HEADER.unpack(header)
    if payload_len % 8 != 0:
        raise ProtocolError(f"payload length {payload_len} is not a whole number of float64s")
    tag = _read_exact(stream, tag_len).decode("utf-8")
    payload = np.frombuffer(_read_exact(stream, payload_len), dtype="<f8").copy()
    try:
        kind = Kind(kind)
    except ValueError:
        raise ProtocolError(f"unknown frame kind {kind}") from None
    return Frame(round_id, kind, tag, payload)


def write_frame(stream, frame: Frame) -> None:
    stream.write(encode_frame(frame))


def decode_frame(buf: bytes) -> Frame:
    return read_frame(io.BytesIO(buf))


# --- transcript and audit ----------------------------------------------------


@dataclass
class Transcript:
    """Center-side log of message metadata. Payload contents are never stored."""

    shard_rows: dict[int, int] = field(default_factory=dict)
    reduction_order: list[int] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)

    def declare(self, tag: str, c2w_len: int, w2c_len: int) -> None:
        self.events.append({"type": "declare", "tag": tag, "c2w": c2w_len, "w2c": w2c_len})

    def record(
        self, direction: str, worker: int, round_id: int, kind: Kind, tag: str, length: int
    ) -> None:
        self.events.append(
            {
                "type": "msg",
                "dir": direction,
                "worker": worker,
                "round": round_id,
                "kind": int(kind),
                "tag": tag,
                "len": length,
            }
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            header = {
                "type": "header",
                "shard_rows": {str(k): v for k, v in self.shard_rows.items()},
                "reduction_order": self.reduction_order,
            }
            fh.write(json.dumps(header) + "\n")
            for event in self.events:
                fh.write(json.dumps(event) + "\n")

    @classmethod
    def load(cls, path) -> "Transcript":
        with open(path, "r", encoding="utf-8") as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        if not lines or lines[0].get("type") != "header":
            raise ConfigError(f"{path}: not a transcript file")
        header = lines[0]
        return cls(
            shard_rows={int(k): int(v) for k, v in header["shard_rows"].items()},
            reduction_order=[int(w) for w in header["reduction_order"]],
            events=lines[1:],
        )


@dataclass(frozen=True)
class Violation:
    rule: str
    direction: str
    worker: int
    round_id: int
    tag: str
    length: int
    detail: str


def privacy_audit(transcript: Transcript) -> list[Violation]:
    """Check every logged message against the declared tag vocabulary.

    Rules, in precedence order (one violation at most per message):
      unknown-tag      the tag was never declared at that point
      length-mismatch  payload length differs from the declaration
      row-count-match  a worker reply is exactly as long as some shard's
                       row count: the shape of raw subject rows
    """
    row_counts = set(transcript.shard_rows.values())
    declared: dict[str, dict[str, int]] = {}
    violations = []
    for event in transcript.events:
        if event["type"] == "declare":
            declared[event["tag"]] = {"c2w": event["c2w"], "w2c": event["w2c"]}
            continue
        if event["type"] != "msg":
            raise ConfigError(f"unknown transcript event type {event['type']!r}")
        tag, direction, length = event["tag"], event["dir"], event["len"]

        def flag(rule, detail):
            violations.append(
                Violation(rule, direction, event["worker"], event["round"], tag, length, detail)
            )

        if tag not in declared:
            flag("unknown-tag", f"tag {tag!r} was never declared")
        elif length != declared[tag][direction]:
            flag(
                "length-mismatch",
                f"tag {tag!r} declares {declared[tag][direction]} floats "
                f"for {direction}, saw {length}",
            )
        elif direction == "w2c" and length in row_counts:
            flag("row-count-match", f"reply length {length} equals a shard row count")
    return violations


# --- transports ---------------------------------------------------------------


class LocalTransport:
    """Workers living in this process. Frames still round-trip through the
    byte encoding so numerics match the socket transport bit for bit."""

    def __init__(self, handlers: dict):
        if not handlers:
            raise ConfigError("need at least one worker")
        self._handlers = dict(handlers)

    @property
    def worker_ids(self) -> list[int]:
        return sorted(self._handlers)

    def exchange(self, frame: Frame) -> dict[int, Frame]:
        wire = encode_frame(frame)
        replies = {}
        for wid, handler in self._handlers.items():
            reply = handler.handle(decode_frame(wire))
            replies[wid] = decode_frame(encode_frame(reply))
        return replies

    def close(self) -> None:
        pass


class SocketTransport:
    """Workers behind TCP endpoints. One persistent connection per worker;
    replies must arrive within SOCKET_TIMEOUT seconds of the query."""

    def __init__(self, endpoints: dict[int, tuple[str, int]], timeout: float = SOCKET_TIMEOUT):
        if not endpoints:
            raise ConfigError("need at least one worker endpoint")
        self._endpoints = dict(endpoints)
        self._timeout = timeout
        self._streams: dict[int, object] = {}
        self._sockets: dict[int, socket.socket] = {}

    @property
    def worker_ids(self) -> list[int]:
        return sorted(self._endpoints)

    def connect(self) -> None:
        for wid, (host, port) in sorted(self._endpoints.items()):
            try:
                sock = socket.create_connection((host, port), timeout=self._timeout)
            except OSError as exc:
                self.close()
                raise ProtocolError(f"cannot reach worker {wid} at {host}:{port}: {exc}") from exc
            sock.settimeout(self._timeout)
            self._sockets[wid] = sock
            self._streams[wid] = sock.makefile("rwb")

    def exchange(self, frame: Frame) -> dict[int, Frame]:
        if not self._streams:
            self.connect()
        wire = encode_frame(frame)
        for wid in self.worker_ids:
            stream = self._streams[wid]
            try:
                stream.write(wire)
                stream.flush()
            except OSError as exc:
                raise ProtocolError(f"send to worker {wid} failed: {exc}") from exc
        replies = {}
        for wid in self.worker_ids:
            try:
                replies[wid] = read_frame(self._streams[wid])
            except TimeoutError as exc:
                raise ProtocolError(
                    f"worker {wid} did not reply within {self._timeout}s "
                    f"(round {frame.round_id}, tag {frame.tag!r})"
                ) from exc
            except OSError as exc:
                raise ProtocolError(f"receive from worker {wid} failed: {exc}") from exc
        return replies

    def close(self) -> None:
        for stream in self._streams.values():
            try:
                stream.close()
            except OSError:
                pass
        for sock in self._sockets.values():
            try:
                sock.close()
            except OSError:
                pass
        self._streams.clear()
        self._sockets.clear()

    def __enter__(self):
        self.connect()
        return self

    def __exit__(self, *exc):
        self.close()


def serve_worker(runtime, host: str = "127.0.0.1", port: int = 0, on_ready=None) -> None:
    """Run one worker: accept a single center connection, answer every frame
    with exactly one reply, exit when the center hangs up."""
    with socket.create_server((host, port)) as server:
        if on_ready is not None:
            on_ready(server.getsockname()[1])
        conn, _ = server.accept()
        with conn:
            stream = conn.makefile("rwb")
            while True:
                try:
                    frame = read_frame(stream)
                except ProtocolError:
                    break
                reply = runtime.handle(frame)
                write_frame(stream, reply)
                stream.flush()
            stream.close()


# --- the aggregation center ----------------------------------------------------


class Federation:
    """Center endpoint: runs rounds, validates replies, sums in fixed order.

    Holds no problem data, only the round counter, the declared tag
    vocabulary, the institution order used for summation, and the
    optional transcript.
    """

    def __init__(self, transport, reduction_order=None, transcript: Transcript | None = None):
        self._transport = transport
        ids = transport.worker_ids
        self.reduction_order = list(reduction_order) if reduction_order is not None else ids
        if sorted(self.reduction_order) != sorted(ids):
            raise ConfigError(
                f"reduction order {self.reduction_order} does not match workers {ids}"
            )
        self._round = 0
        self._declared: dict[str, tuple[int, int]] = {}
        self.transcript = transcript
        if transcript is not None:
            transcript.reduction_order = list(self.reduction_order)

    @property
    def n_workers(self) -> int:
        return len(self.reduction_order)

    @property
    def rounds_run(self) -> int:
        return self._round

    def declare(self, tag: str, c2w_len: int, w2c_len: int) -> None:
        self._declared[tag] = (c2w_len, w2c_len)
        if self.transcript is not None:
            self.transcript.declare(tag, c2w_len, w2c_len)

    def _run_round(self, kind: Kind, tag: str, payload) -> dict[int, Frame]:
        if tag not in self._declared:
            raise ConfigError(f"tag {tag!r} used before being declared")
        payload = np.ascontiguousarray(payload, dtype=np.float64)
        c2w_len, w2c_len = self._declared[tag]
        if payload.shape[0] != c2w_len:
            raise ConfigError(
                f"tag {tag!r} declares {c2w_len} floats center-to-worker, "
                f"got {payload.shape[0]}"
            )
        self._round += 1
        frame = Frame(self._round, kind, tag, payload)
        replies = self._transport.exchange(frame)
        if self.transcript is not None:
            for wid in self.reduction_order:
                self.transcript.record("c2w", wid, self._round, kind, tag, payload.shape[0])
            for wid in self.reduction_order:
                if wid in replies:
                    reply = replies[wid]
                    self.transcript.record(
                        "w2c", wid, reply.round_id, reply.kind, reply.tag, reply.payload.shape[0]
                    )
        missing = [wid for wid in self.reduction_order if wid not in replies]
        if missing:
            raise ProtocolError(f"round {self._round} ({tag!r}): no reply from workers {missing}")
        for wid in self.reduction_order:
            reply = replies[wid]
            if reply.round_id != self._round:
                raise ProtocolError(
                    f"worker {wid} replied to round {reply.round_id}, expected {self._round}"
                )
            if reply.tag != tag or reply.kind != kind:
                raise ProtocolError(
                    f"worker {wid} reply tag/kind {reply.tag!r}/{reply.kind} does not "
                    f"match query {tag!r}/{kind}"
                )
            if reply.payload.shape[0] != w2c_len:
                raise ProtocolError(
                    f"worker {wid} reply to {tag!r} has {reply.payload.shape[0]} floats, "
                    f"declared {w2c_len}"
                )
        return replies

    def broadcast(self, tag: str, payload) -> None:
        self._run_round(Kind.BROADCAST, tag, payload)

    def vector_sum(self, tag: str, payload=()) -> np.ndarray:
        replies = self._run_round(Kind.VECTOR_SUM, tag, payload)
        parts = {wid: reply.payload for wid, reply in replies.items()}
        return sum_in_order(parts, self.reduction_order)

    def scalar_sum(self, tag: str, payload=()) -> float:
        replies = self._run_round(Kind.SCALAR_SUM, tag, payload)
        parts = {wid: float(reply.payload[0]) for wid, reply in replies.items()}
        return float(sum_in_order(parts, self.reduction_order))

    def scalar_collect(self, tag: str, payload=()) -> dict[int, float]:
        """Scalar round where the center keeps the per-worker values
        (used for public shard metadata such as row counts)."""
        replies = self._run_round(Kind.SCALAR_SUM, tag, payload)
        return {wid: float(reply.payload[0]) for wid, reply in replies.items()}

    def close(self) -> None:
        self._transport.close()

"""Deterministic stateful service: ordered key-value state, a pure message
handler, canonical state serialization, checkpoint/restore and the runtime
modes a live migration moves an instance through.

Canonical state serialization (external interface, all integers big-endian):

    u64  last_processed_id
    u32  entry count
    per entry, keys sorted by their UTF-8 bytes:
        u32  key length, then the key (UTF-8)
        u32  value length, then the value: 1 tag byte + body
             tag 0x01 int64   tag 0x02 raw bytes   tag 0x03 UTF-8 string

The length of this encoding is the state's size_bytes, which drives the
linear checkpoint, restore and transfer cost models. Independent
implementations must produce identical bytes for identical state.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from .broker import Broker, Message, Subscription
from .simnet import Host, SimClock

Scalar = int | bytes | str


class ServiceError(Exception):
    pass


class StaleMessage(ServiceError):
    """Input id at or below last_processed_id: a duplicate or out-of-order
    message. Rejection must leave state unchanged and emit nothing."""


class UnknownCommand(ServiceError):
    pass


class ModeError(ServiceError):
    pass


class ProtocolError(ServiceError):
    """An exactly-once bookkeeping rule was about to be broken."""


class SerializationError(ServiceError):
    pass


@dataclass
class ServiceState:
    data: dict[str, Scalar] = field(default_factory=dict)
    last_processed_id: int = 0

    def copy(self) -> "ServiceState":
        return ServiceState(dict(self.data), self.last_processed_id)


_TAG_INT = 0x01
_TAG_BYTES = 0x02
_TAG_STR = 0x03


def _encode_value(value: Scalar) -> bytes:
    if isinstance(value, bool):
        raise SerializationError("bool values are not part of the state schema")
    if isinstance(value, int):
        try:
            return bytes([_TAG_INT]) + struct.pack(">q", value)
        except struct.error:
            raise SerializationError(f"int out of 64-bit range: {value}") from None
    if isinstance(value, bytes):
        return bytes([_TAG_BYTES]) + value
    if isinstance(value, str):
        return bytes([_TAG_STR]) + value.encode("utf-8")
    raise SerializationError(f"unsupported value type {type(value).__name__}")


def _decode_value(raw: bytes) -> Scalar:
    if not raw:
        raise SerializationError("empty value field")
    tag, body = raw[0], raw[1:]
    if tag == _TAG_INT:
        if len(body) != 8:
            raise SerializationError("int value must be exactly 8 bytes")
        return struct.unpack(">q", body)[0]
    if tag == _TAG_BYTES:
        return body
    if tag == _TAG_STR:
        return body.decode("utf-8")
    raise SerializationError(f"unknown value tag {tag:#x}")


def serialize_state(state: ServiceState) -> bytes:
    if state.last_processed_id < 0:
        raise SerializationError("last_processed_id must be >= 0")
    out = bytearray(struct.pack(">QI", state.last_processed_id, len(state.data)))
    for key in sorted(state.data, key=lambda k: k.encode("utf-8")):
        kb = key.encode("utf-8")
        vb = _encode_value(state.data[key])
        out += struct.pack(">I", len(kb))
        out += kb
        out += struct.pack(">I", len(vb))
        out += vb
    return bytes(out)


def deserialize_state(blob: bytes) -> ServiceState:
    if len(blob) < 12:
        raise SerializationError("truncated state blob")
    last_id, count = struct.unpack_from(">QI", blob, 0)
    offset = 12
    data: dict[str, Scalar] = {}
    for _ in range(count):
        if offset + 4 > len(blob):
            raise SerializationError("truncated key length")
        (klen,) = struct.unpack_from(">I", blob, offset)
        offset += 4
        key = blob[offset:offset + klen].decode("utf-8")
        offset += klen
        if offset + 4 > len(blob):
            raise SerializationError("truncated value length")
        (vlen,) = struct.unpack_from(">I", blob, offset)
        offset += 4
        data[key] = _decode_value(blob[offset:offset + vlen])
        offset += vlen
    if offset != len(blob):
        raise SerializationError("trailing bytes after state entries")
    return ServiceState(data, last_id)


def state_size_bytes(state: ServiceState) -> int:
    return len(serialize_state(state))


@dataclass(frozen=True)
class Checkpoint:
    """A frozen copy of a paused instance's state."""

    snapshot: bytes
    size_bytes: int
    created_at: float
    source_host: str
    checkpoint_last_id: int


def handle(state: ServiceState, msg: Message) -> tuple[ServiceState, list[bytes]]:
    """Apply one input message. Pure: same (state, message) always yields the
    same successor state and the same output payloads.

    Commands:
        set <key> <value-bytes>   overwrite a key (value may contain spaces)
        add <key> <int> [pad]     increment an integer counter
    Every applied input produces exactly one output payload.
    """
    if msg.id <= state.last_processed_id:
        raise StaleMessage(
            f"id {msg.id} <= last processed {state.last_processed_id}")
    payload = msg.payload
    op = payload.split(b" ", 1)[0]
    if op == b"set":
        parts = payload.split(b" ", 2)
        if len(parts) != 3 or not parts[1]:
            raise UnknownCommand(f"malformed set: {payload[:40]!r}")
        key = parts[1].decode("ascii")
        data = dict(state.data)
        data[key] = parts[2]
        outputs = [b"ok %d set %s" % (msg.id, parts[1])]
    elif op == b"add":
        parts = payload.split(b" ", 3)
        if len(parts) < 3 or not parts[1]:
            raise UnknownCommand(f"malformed add: {payload[:40]!r}")
        key = parts[1].decode("ascii")
        try:
            delta = int(parts[2])
        except ValueError:
            raise UnknownCommand(f"bad increment: {parts[2]!r}") from None
        old = state.data.get(key, 0)
        if not isinstance(old, int):
            raise UnknownCommand(f"key {key!r} is not a counter")
        data = dict(state.data)
        data[key] = old + delta
        outputs = [b"ok %d %s=%d" % (msg.id, parts[1], data[key])]
    else:
        raise UnknownCommand(f"unknown op {op!r}")
    return ServiceState(data, msg.id), outputs


class Mode(enum.Enum):
    SERVING = "Serving"
    PAUSED = "Paused"
    REPLAYING = "Replaying"
    STOPPED = "Stopped"


class ServiceInstance:
    """One running copy of the service, attached to a host and a broker.

    The instance consumes its subscribed queue one message at a time: a poll
    takes processing_ms of simulated time, after which the message is applied,
    its outputs are published (Serving) or suppressed (Replaying), and the
    delivery is acked. State changes and output emission happen together at
    completion time, so a pause or crash before completion leaves the message
    fully unapplied and still buffered for redelivery.

    Hooks (all optional): on_mode_change(instance, old, new),
    on_applied(instance, message), on_idle(instance).
    """

    def __init__(self, instance_id: str, host: Host, state: ServiceState,
                 clock: SimClock, broker: Broker, processing_ms: float,
                 output_topic: str, shadow: bool = False):
        if processing_ms < 0:
            raise ValueError("processing_ms must be >= 0")
        self.instance_id = instance_id
        self.host = host
        self.state = state
        self.clock = clock
        self.broker = broker
        self.processing_ms = processing_ms
        self.output_topic = output_topic
        self._mode = Mode.PAUSED
        self.crashed = False
        self.subscription: Subscription | None = None
        self.replayed_count = 0
        self.rejected_count = 0
        self.applied_count = 0
        self.shadow_outputs: list[bytes] | None = [] if shadow else None
        self.on_mode_change = None
        self.on_applied = None
        self.on_idle = None
        self._pending = None
        self._inflight: Message | None = None
        self._idle = True
        self._frozen = False
        self._freeze_cb = None
        self._stop_cb = None
        self._replay_limit: int | None = None
        self._switch_target: str | None = None
        self._switch_cb = None

    # -- mode handling -------------------------------------------------------

    @property
    def mode(self) -> Mode:
        return self._mode

    def _set_mode(self, new: Mode) -> None:
        old = self._mode
        if old is new:
            return
        self._mode = new
        if self.on_mode_change is not None:
            self.on_mode_change(self, old, new)

    def _require(self, *modes: Mode) -> None:
        if self._mode not in modes:
            want = " or ".join(m.value for m in modes)
            raise ModeError(
                f"{self.instance_id}: requires {want}, is {self._mode.value}")

    @property
    def busy(self) -> bool:
        return self._pending is not None

    # -- lifecycle -----------------------------------------------------------

    def start_serving(self, queue: str) -> None:
        """Subscribe to queue and serve with outputs enabled."""
        self._require(Mode.PAUSED)
        self.subscription = self.broker.subscribe(
            queue, self.instance_id, on_wake=self._on_wake)
        self._set_mode(Mode.SERVING)
        self._idle = False
        self._try_next()

    def pause(self) -> None:
        """Halt consumption and detach from the queue.

        An in-flight message is deferred, never torn: its completion is
        cancelled and the broker may redeliver it later, so the message ends
        up fully unapplied rather than half-applied.
        """
        self._require(Mode.SERVING)
        self._cancel_inflight()
        sub = self.subscription
        self.broker.unsubscribe(sub.queue, sub.consumer)
        self.subscription = None
        self._set_mode(Mode.PAUSED)

    def resume(self, queue: str) -> None:
        """Reattach a paused instance; consumption restarts at the oldest
        unacknowledged message."""
        self._require(Mode.PAUSED)
        if self.crashed:
            raise ModeError(f"{self.instance_id} crashed; cannot resume")
        self.subscription = self.broker.subscribe(
            queue, self.instance_id, on_wake=self._on_wake)
        self._set_mode(Mode.SERVING)
        self._idle = False
        self._try_next()

    def create_checkpoint(self) -> Checkpoint:
        """Freeze the paused state into a transferable snapshot. The caller
        models the time this takes; the content is the state as paused."""
        self._require(Mode.PAUSED)
        snapshot = serialize_state(self.state)
        return Checkpoint(
            snapshot=snapshot,
            size_bytes=len(snapshot),
            created_at=self.clock.now,
            source_host=self.host.id,
            checkpoint_last_id=self.state.last_processed_id,
        )

    @classmethod
    def restore(cls, checkpoint: Checkpoint, host: Host, clock: SimClock,
                broker: Broker, processing_ms: float, output_topic: str,
                instance_id: str, shadow: bool = False) -> "ServiceInstance":
        """Rebuild an instance from a checkpoint. It comes up Paused with
        state bit-identical to what was frozen."""
        state = deserialize_state(checkpoint.snapshot)
        return cls(instance_id, host, state, clock, broker, processing_ms,
                   output_topic, shadow=shadow)

    def enter_replay(self, queue: str) -> None:
        """Consume queue with outputs suppressed. State advances; nothing is
        published."""
        self._require(Mode.PAUSED)
        self.subscription = self.broker.subscribe(
            queue, self.instance_id, on_wake=self._on_wake)
        self._set_mode(Mode.REPLAYING)
        self._idle = False
        self._try_next()

    def freeze_replay(self, on_frozen) -> None:
        """Stop pulling from the replay queue. If a message is in flight its
        completion still applies (suppressed); on_frozen(instance) fires once
        the instance is quiescent."""
        self._require(Mode.REPLAYING)
        self._frozen = True
        if self._pending is not None:
            self._freeze_cb = on_frozen
        else:
            on_frozen(self)

    def finish_replay(self, watermark: int, main_queue: str, on_switched) -> None:
        """Replay the remaining backlog up to and including watermark, then
        switch: unsubscribe the replay queue, subscribe main_queue, enable
        outputs. on_switched(instance) fires at the switchover instant.

        A watermark below what was already applied would mean suppressed
        outputs can never be emitted; that is refused.
        """
        self._require(Mode.REPLAYING)
        if watermark < self.state.last_processed_id:
            raise ProtocolError(
                f"watermark {watermark} below already-applied id "
                f"{self.state.last_processed_id}")
        self._replay_limit = watermark
        self._switch_target = main_queue
        self._switch_cb = on_switched
        self._frozen = False
        self._try_next()

    def request_stop(self, on_stopped) -> None:
        """Finish any in-flight message, then detach and stop. Used for the
        source side of a handoff; on_stopped(instance) fires once stopped,
        with state.last_processed_id as the watermark value."""
        self._require(Mode.SERVING)
        if self._pending is not None:
            self._stop_cb = on_stopped
        else:
            self._do_stop(on_stopped)

    def stop(self) -> None:
        """Immediate stop (discard path). Any in-flight message is released
        unapplied."""
        if self._mode is Mode.STOPPED:
            return
        self._cancel_inflight()
        if self.subscription is not None:
            self.broker.unsubscribe(self.subscription.queue,
                                    self.subscription.consumer)
            self.subscription = None
        self._set_mode(Mode.STOPPED)

    def crash(self) -> None:
        """Fail the instance. Unacked deliveries become redeliverable; state
        and outputs after the last completion are lost."""
        self.stop()
        self.crashed = True

    # -- consumption ---------------------------------------------------------

    def _on_wake(self, _queue_name: str) -> None:
        self._try_next()

    def _cancel_inflight(self) -> None:
        if self._pending is not None:
            self.clock.cancel(self._pending)
            self._pending = None
            self._inflight = None
            if self.subscription is not None:
                self.broker.release_inflight(self.subscription.queue)

    def _try_next(self) -> None:
        if self._pending is not None or self.subscription is None:
            return
        if self._mode not in (Mode.SERVING, Mode.REPLAYING):
            return
        if self._mode is Mode.REPLAYING and self._frozen:
            return
        sub = self.subscription
        nxt = self.broker.peek(sub.queue, sub.consumer)
        if self._mode is Mode.REPLAYING and self._replay_limit is not None:
            if self.state.last_processed_id >= self._replay_limit:
                self._finish_switch()
                return
            if nxt is not None and nxt.id > self._replay_limit:
                self._finish_switch()
                return
            if nxt is None:
                # every id <= watermark was mirrored before the watermark was
                # announced, so an empty queue here is a protocol bug
                raise ProtocolError(
                    f"{self.instance_id}: replay starved below watermark "
                    f"{self._replay_limit}")
        if nxt is None:
            self._mark_idle()
            return
        msg = self.broker.poll(sub.queue, sub.consumer)
        self._idle = False
        self._inflight = msg
        self._pending = self.clock.schedule(self.processing_ms, self._complete)

    def _complete(self) -> None:
        msg = self._inflight
        self._pending = None
        self._inflight = None
        try:
            new_state, outputs = handle(self.state, msg)
        except StaleMessage:
            # duplicate delivery: drop without state change or output
            self.rejected_count += 1
            outputs = []
        else:
            self.state = new_state
            self.applied_count += 1
            if self._mode is Mode.SERVING:
                for out in outputs:
                    self.broker.publish(self.output_topic, out)
            elif self._mode is Mode.REPLAYING:
                self.replayed_count += 1
                if self.shadow_outputs is not None:
                    self.shadow_outputs.extend(outputs)
        sub = self.subscription
        self.broker.ack(sub.queue, sub.consumer, msg.id)
        if self.on_applied is not None:
            self.on_applied(self, msg)
        if self._stop_cb is not None:
            cb, self._stop_cb = self._stop_cb, None
            self._do_stop(cb)
            return
        if self._frozen and self._freeze_cb is not None:
            cb, self._freeze_cb = self._freeze_cb, None
            cb(self)
            return
        self._try_next()

    def _do_stop(self, cb) -> None:
        sub = self.subscription
        if sub is not None:
            self.broker.unsubscribe(sub.queue, sub.consumer)
            self.subscription = None
        self._set_mode(Mode.STOPPED)
        cb(self)

    def _finish_switch(self) -> None:
        sub = self.subscription
        self.broker.unsubscribe(sub.queue, sub.consumer)
        target = self._switch_target
        cb = self._switch_cb
        self._replay_limit = None
        self._switch_target = None
        self._switch_cb = None
        self.subscription = self.broker.subscribe(
            target, self.instance_id, on_wake=self._on_wake)
        self._set_mode(Mode.SERVING)
        self._idle = False
        if cb is not None:
            cb(self)
        self._try_next()

    def _mark_idle(self) -> None:
        if not self._idle:
            self._idle = True
            if self.on_idle is not None:
                self.on_idle(self)

"""Live migration of a running service instance between hosts.

Two techniques are implemented.

MS2M (live replay migration): pause the source briefly to checkpoint it,
mirror the input queue onto a secondary queue from the first un-checkpointed
id, resume the source, transfer the checkpoint in the background, restore it
on the target, let the target replay the mirrored backlog with outputs
suppressed, then hand off: freeze the target's replay, stop the source, have
the source announce its last processed id as the watermark, finish replaying
up to that watermark, and switch the target onto the main queue with outputs
enabled. Every input id is applied with outputs exactly once: by the source
up to the watermark, by the target after it.

StopAndCopy (baseline): pause the source, checkpoint, transfer, restore at
the target, activate it on the main queue. The service is down for the whole
span; inputs buffer in the main queue meanwhile, so nothing is rejected.

A MigrationManager drives one migration. Control traffic rides dedicated
broker queues as JSON payloads and is handled the instant it is delivered;
manager hops cost no simulated time, so phase spans tile the record exactly.
"""

from __future__ import annotations

import base64
import enum
import json
import random
from dataclasses import dataclass, field

from .broker import Broker
from .service import (Checkpoint, Mode, ProtocolError, ServiceInstance,
                      state_size_bytes)
from .simnet import (Host, Link, SimClock, checkpoint_duration,
                     restore_duration, transfer_duration)


class Technique(str, enum.Enum):
    MS2M = "MS2M"
    STOP_AND_COPY = "StopAndCopy"


class Outcome(str, enum.Enum):
    COMPLETED = "Completed"
    ABORTED_DIVERGENCE = "AbortedDivergence"
    ABORTED_SOURCE_CRASH = "AbortedSourceCrash"


class Phase(str, enum.Enum):
    PAUSE = "ServicePause"
    CHECKPOINT = "ServiceCheckpoint"
    CONTINUATION = "ServiceContinuation"
    TRANSFER = "CheckpointTransfer"
    RESTORATION = "ServiceRestoration"
    REPLAY = "MessageReplay"
    FINALIZATION = "Finalization"


@dataclass(frozen=True)
class PhaseSpan:
    name: str
    start_ms: float
    end_ms: float

    def __post_init__(self):
        if self.end_ms < self.start_ms:
            raise ValueError("phase span ends before it starts")

    @property
    def duration_ms(self) -> float:
        return self.end_ms - self.start_ms


@dataclass
class MigrationRecord:
    """What one migration did: outcome, watermark, phase spans and counters.

    phase_timeline spans are contiguous and non-overlapping; an aborted
    migration keeps the spans it completed plus the partial span it died in,
    closed at the abort instant.
    """

    technique: Technique
    migration_id: str
    initiated_at: float
    phase_timeline: list[PhaseSpan] = field(default_factory=list)
    outcome: Outcome | None = None
    watermark: int | None = None
    replayed_count: int = 0
    completed_at: float | None = None
    checkpoint_size_bytes: int | None = None
    drain_ms: float | None = None
    abort_reason: str | None = None
    crash_info: dict | None = None

    def phase_ms(self, phase: Phase) -> float:
        return sum(s.duration_ms for s in self.phase_timeline
                   if s.name == phase.value)

    def validate_timeline(self, tolerance_ms: float = 1e-6) -> None:
        prev_end = None
        for span in self.phase_timeline:
            if prev_end is not None and abs(span.start_ms - prev_end) > tolerance_ms:
                raise ProtocolError(
                    f"phase {span.name} does not start where the previous "
                    f"phase ended ({span.start_ms} vs {prev_end})")
            prev_end = span.end_ms


class Decision(enum.Enum):
    HANDOFF = "Handoff"
    CONTINUE = "Continue"
    ABORT = "Abort"


@dataclass(frozen=True)
class HandoffPolicy:
    """When to hand off, keep waiting, or give up during message replay.

    replay_timeout_ms of None disables the timeout. Divergence is declared
    after divergence_window consecutive checks (spaced check_interval_ms
    apart) in which the arrival rate estimate exceeded the processing rate
    estimate.
    """

    handoff_threshold: int = 0
    replay_timeout_ms: float | None = 60_000.0
    divergence_window: int = 5
    check_interval_ms: float = 100.0

    def __post_init__(self):
        if self.handoff_threshold < 0:
            raise ValueError("handoff_threshold must be >= 0")
        if self.replay_timeout_ms is not None and self.replay_timeout_ms <= 0:
            raise ValueError("replay_timeout_ms must be > 0 or None")
        if self.divergence_window < 1:
            raise ValueError("divergence_window must be >= 1")
        if self.check_interval_ms <= 0:
            raise ValueError("check_interval_ms must be > 0")


def decide_handoff(backlog: int, arrival_rate_est: float,
                   processing_rate_est: float, elapsed_replay_ms: float,
                   policy: HandoffPolicy, overload_streak: int = 0) -> Decision:
    """Pure handoff decision, consulted whenever the replay backlog drains
    and at every periodic check.

    overload_streak is the caller-maintained count of consecutive checks,
    including the current one, whose arrival rate estimate exceeded the
    processing rate estimate. Precedence: a drained backlog always wins,
    then the replay timeout, then sustained divergence.
    """
    if backlog <= policy.handoff_threshold:
        return Decision.HANDOFF
    if (policy.replay_timeout_ms is not None
            and elapsed_replay_ms > policy.replay_timeout_ms):
        return Decision.ABORT
    if overload_streak >= policy.divergence_window:
        return Decision.ABORT
    return Decision.CONTINUE


@dataclass(frozen=True)
class MigrationMetrics:
    """Durations derived from one record.

    Three downtime readings are exposed because tracers bound downtime
    differently:
      * paused: the source-paused interval, pause + checkpoint +
        continuation. For StopAndCopy this extends to the instant the target
        serves, which is the whole migration.
      * strict: the checkpoint span alone.
      * pause_checkpoint_transfer: pause + checkpoint + transfer; the
        reading the calibrated reference scenario's reduction figure is
        stated in.
    """

    total_ms: float
    phase_ms: dict[str, float]
    downtime_paused_ms: float
    downtime_strict_ms: float
    downtime_pause_checkpoint_transfer_ms: float


def compute_metrics(record: MigrationRecord) -> MigrationMetrics:
    if record.completed_at is None:
        raise ValueError("record is not finished")
    phase_ms = {p.value: record.phase_ms(p) for p in Phase}
    total = record.completed_at - record.initiated_at
    p = phase_ms[Phase.PAUSE.value]
    c = phase_ms[Phase.CHECKPOINT.value]
    k = phase_ms[Phase.CONTINUATION.value]
    t = phase_ms[Phase.TRANSFER.value]
    resumed = any(s.name == Phase.CONTINUATION.value
                  for s in record.phase_timeline)
    if record.technique is Technique.MS2M and resumed:
        paused = p + c + k
    else:
        # the service never came back before the record ended: down throughout
        pause_start = (record.phase_timeline[0].start_ms
                       if record.phase_timeline else record.initiated_at)
        paused = record.completed_at - pause_start
    return MigrationMetrics(
        total_ms=total,
        phase_ms=phase_ms,
        downtime_paused_ms=paused,
        downtime_strict_ms=c,
        downtime_pause_checkpoint_transfer_ms=p + c + t,
    )


# -- control plane ----------------------------------------------------------


def _ctl(msg_type: str, **fields) -> bytes:
    fields["type"] = msg_type
    return json.dumps(fields, sort_keys=True).encode("utf-8")


def _checkpoint_to_wire(cp: Checkpoint) -> dict:
    return {
        "snapshot_b64": base64.b64encode(cp.snapshot).decode("ascii"),
        "size_bytes": cp.size_bytes,
        "created_at": cp.created_at,
        "source_host": cp.source_host,
        "checkpoint_last_id": cp.checkpoint_last_id,
    }


def _checkpoint_from_wire(d: dict) -> Checkpoint:
    return Checkpoint(
        snapshot=base64.b64decode(d["snapshot_b64"]),
        size_bytes=d["size_bytes"],
        created_at=d["created_at"],
        source_host=d["source_host"],
        checkpoint_last_id=d["checkpoint_last_id"],
    )


class ControlEndpoint:
    """Consumes one control queue, dispatching each message to a handler the
    instant it is delivered. Control work costs no simulated time."""

    def __init__(self, broker: Broker, queue: str, owner: str, handler):
        self.broker = broker
        self.queue = queue
        self.owner = owner
        self.handler = handler
        broker.create_queue(queue)
        broker.subscribe(queue, owner, on_wake=self._drain)

    def _drain(self, _queue_name=None) -> None:
        while True:
            msg = self.broker.poll(self.queue, self.owner)
            if msg is None:
                return
            payload = json.loads(msg.payload.decode("utf-8"))
            self.broker.ack(self.queue, self.owner, msg.id)
            self.handler(payload)


# -- the manager -------------------------------------------------------------


class MigrationManager:
    """Drives a single migration of one service between two hosts.

    The manager exchanges control messages with a source-side and a
    target-side agent over per-migration control queues, records the phase
    timeline as boundaries are crossed, and owns the replay monitor that
    decides between handoff, waiting, and divergence abort.

    Hooks: on_complete(record, serving_instance_or_None),
    on_phase_entered(phase, time_ms), on_instance_created(instance).
    """

    def __init__(self, *, clock: SimClock, broker: Broker, rng: random.Random,
                 technique: Technique, service_id: str, main_queue: str,
                 output_topic: str, source: ServiceInstance, source_host: Host,
                 target_host: Host, link: Link, pause_ms: float,
                 continuation_ms: float, processing_ms: float,
                 policy: HandoffPolicy, migration_id: str = "m1",
                 shadow: bool = False, on_complete=None,
                 on_phase_entered=None, on_instance_created=None):
        if pause_ms < 0 or continuation_ms < 0:
            raise ValueError("pause_ms and continuation_ms must be >= 0")
        self.clock = clock
        self.broker = broker
        self.rng = rng
        self.technique = technique
        self.service_id = service_id
        self.main_queue = main_queue
        self.output_topic = output_topic
        self.source = source
        self.source_host = source_host
        self.target_host = target_host
        self.link = link
        self.pause_ms = pause_ms
        self.continuation_ms = continuation_ms
        self.processing_ms = processing_ms
        self.policy = policy
        self.migration_id = migration_id
        self.shadow = shadow
        self.on_complete = on_complete
        self.on_phase_entered = on_phase_entered
        self.on_instance_created = on_instance_created

        self.q_mgr = f"ctl.{migration_id}.mgr"
        self.q_src = f"ctl.{migration_id}.src"
        self.q_tgt = f"ctl.{migration_id}.tgt"

        self.record: MigrationRecord | None = None
        self.state = "idle"
        self.aborted = False
        self.checkpoint: Checkpoint | None = None
        self.secondary_queue: str | None = None
        self.target_instance: ServiceInstance | None = None
        self._spans: list[PhaseSpan] = []
        self._current_phase: tuple[Phase, float] | None = None
        self._watermark_announced = False
        self._transfer_complete = False
        self._replay_started_at = 0.0
        self._streak = 0
        self._last_rates = (0.0, 0.0)
        self._prev_counts = (0, 0)
        self._monitor_event = None
        self._source_agent = None
        self._target_agent = None

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> None:
        if self.state != "idle":
            raise ProtocolError("migration already started")
        self.record = MigrationRecord(
            technique=self.technique,
            migration_id=self.migration_id,
            initiated_at=self.clock.now,
            phase_timeline=self._spans,
        )
        if self.source.crashed or self.source.mode is not Mode.SERVING:
            self._finish_crash_abort()
            return
        ControlEndpoint(self.broker, self.q_mgr,
                        f"mgr.{self.migration_id}", self._on_ctl)
        self._source_agent = _SourceAgent(self)
        self._target_agent = _TargetAgent(self)
        self.state = "phase1"
        self.broker.publish(self.q_src, _ctl("pause_request"))

    def enter_phase(self, phase: Phase) -> None:
        now = self.clock.now
        if self._current_phase is not None:
            name, start = self._current_phase
            self._spans.append(PhaseSpan(name.value, start, now))
        self._current_phase = (phase, now)
        if self.on_phase_entered is not None:
            self.on_phase_entered(phase, now)

    def _close_phases(self) -> None:
        if self._current_phase is not None:
            name, start = self._current_phase
            self._spans.append(PhaseSpan(name.value, start, self.clock.now))
            self._current_phase = None

    # -- control handling ----------------------------------------------------

    def _on_ctl(self, msg: dict) -> None:
        if self.state == "done":
            return
        kind = msg["type"]
        if kind == "phase1_done":
            self._phase1_done()
        elif kind == "restored":
            self._replay_started()
        elif kind == "replay_idle":
            if self.state == "replay":
                self._evaluate()
        elif kind == "frozen":
            if self.state == "freezing":
                self.state = "stopping"
                self.broker.publish(self.q_src, _ctl("stop_request"))
        elif kind == "source_stopped":
            self.record.watermark = msg["watermark"]
            self._watermark_announced = True
        elif kind == "switched":
            self._switched(msg)
        elif kind == "discarded":
            self._finish_divergence_abort()
        else:
            raise ProtocolError(f"unknown control message {kind!r}")

    def _phase1_done(self) -> None:
        if self.aborted:
            return
        self.enter_phase(Phase.TRANSFER)
        self.state = "transfer"
        dur = transfer_duration(self.link, self.checkpoint.size_bytes, self.rng)
        self.clock.schedule(dur, self._transfer_done)

    def _transfer_done(self) -> None:
        if self.aborted or self.state != "transfer":
            return
        self._transfer_complete = True
        self.state = "restoring"
        replay = self.technique is Technique.MS2M
        self.broker.publish(self.q_tgt, _ctl(
            "restore_request",
            checkpoint=_checkpoint_to_wire(self.checkpoint),
            replay=replay,
        ))

    def _replay_started(self) -> None:
        if self.aborted:
            return
        self.state = "replay"
        self._replay_started_at = self.clock.now
        sec = self.broker.queue(self.secondary_queue)
        self._prev_counts = (sec.published_total,
                             self.target_instance.replayed_count)
        self._streak = 0
        self._monitor_event = self.clock.schedule(
            self.policy.check_interval_ms, self._periodic_check)

    def _periodic_check(self) -> None:
        if self.state != "replay":
            return
        sec = self.broker.queue(self.secondary_queue)
        pub, rep = sec.published_total, self.target_instance.replayed_count
        dt = self.policy.check_interval_ms
        arrival = (pub - self._prev_counts[0]) / dt * 1000.0
        processing = (rep - self._prev_counts[1]) / dt * 1000.0
        self._prev_counts = (pub, rep)
        self._last_rates = (arrival, processing)
        if arrival > processing:
            self._streak += 1
        else:
            self._streak = 0
        decision = self._decide()
        if decision is Decision.CONTINUE:
            self._monitor_event = self.clock.schedule(dt, self._periodic_check)

    def _evaluate(self) -> None:
        decision = self._decide()
        if decision is Decision.CONTINUE and self._monitor_event is None:
            self._monitor_event = self.clock.schedule(
                self.policy.check_interval_ms, self._periodic_check)

    def _decide(self) -> Decision:
        backlog = len(self.broker.queue(self.secondary_queue))
        elapsed = self.clock.now - self._replay_started_at
        arrival, processing = self._last_rates
        decision = decide_handoff(backlog, arrival, processing, elapsed,
                                  self.policy, self._streak)
        if decision is Decision.HANDOFF:
            self.state = "freezing"
            self.broker.publish(self.q_tgt, _ctl("freeze"))
        elif decision is Decision.ABORT:
            timeout = self.policy.replay_timeout_ms
            reason = ("timeout" if timeout is not None and elapsed > timeout
                      else "overload")
            self._begin_divergence_abort(reason)
        return decision

    def _switched(self, msg: dict) -> None:
        self.record.replayed_count = msg.get("replayed", 0)
        if self.technique is Technique.MS2M:
            self.broker.stop_mirror(self.main_queue)
            self.broker.delete_queue(self.secondary_queue)
        self._complete(Outcome.COMPLETED)

    def _complete(self, outcome: Outcome) -> None:
        self._close_phases()
        self.record.outcome = outcome
        self.record.completed_at = self.clock.now
        self.state = "done"
        if self.on_complete is not None:
            serving = self.target_instance if outcome is Outcome.COMPLETED else None
            self.on_complete(self.record, serving)

    # -- aborts ---------------------------------------------------------------

    def _begin_divergence_abort(self, reason: str) -> None:
        self.state = "aborting"
        self.record.abort_reason = reason
        self.broker.publish(self.q_tgt, _ctl("discard"))

    def _finish_divergence_abort(self) -> None:
        """Roll back: target discarded, mirror stopped, secondary deleted.
        The source kept serving, so the workload never notices."""
        if self.secondary_queue is not None:
            main = self.broker.queue(self.main_queue)
            if main.mirror is not None:
                self.broker.stop_mirror(self.main_queue)
            self.broker.delete_queue(self.secondary_queue)
        self._close_phases()
        if self.target_instance is not None:
            self.record.replayed_count = self.target_instance.replayed_count
        self.record.outcome = Outcome.ABORTED_DIVERGENCE
        self.record.completed_at = self.clock.now
        self.state = "done"
        if self.on_complete is not None:
            self.on_complete(self.record, None)

    def on_source_crash(self) -> None:
        """Source died. If its part is already over (watermark announced, or
        checkpoint fully transferred in StopAndCopy) the migration proceeds;
        otherwise abort and report what was lost rather than promote a target
        that could duplicate or drop outputs."""
        if self.state in ("done", "idle") or self.record is None:
            return
        if self._watermark_announced:
            return
        if (self.technique is Technique.STOP_AND_COPY
                and self._transfer_complete):
            return
        self._finish_crash_abort()

    def _finish_crash_abort(self) -> None:
        self.aborted = True
        if self._monitor_event is not None:
            self.clock.cancel(self._monitor_event)
            self._monitor_event = None
        if self.target_instance is not None:
            self.target_instance.stop()
        if self.secondary_queue is not None and self.broker.has_queue(self.secondary_queue):
            main = self.broker.queue(self.main_queue)
            if main.mirror is not None:
                self.broker.stop_mirror(self.main_queue)
            self.broker.delete_queue(self.secondary_queue)
        self._close_phases()
        if self.target_instance is not None:
            self.record.replayed_count = self.target_instance.replayed_count
        main = self.broker.queue(self.main_queue)
        last = self.source.state.last_processed_id
        self.record.outcome = Outcome.ABORTED_SOURCE_CRASH
        self.record.completed_at = self.clock.now
        self.record.crash_info = {
            "source_last_processed": last,
            "published_total": main.published_total,
            "unemitted_count": main.published_total - last,
        }
        self.state = "done"
        if self.on_complete is not None:
            self.on_complete(self.record, None)


class _SourceAgent:
    """Executes source-side phase work: pause, checkpoint, mirror setup,
    resume, and the stop that fixes the watermark."""

    def __init__(self, mgr: MigrationManager):
        self.mgr = mgr
        ControlEndpoint(mgr.broker, mgr.q_src,
                        f"agent.src.{mgr.migration_id}", self._on_msg)

    def _on_msg(self, msg: dict) -> None:
        mgr = self.mgr
        if mgr.aborted or mgr.state == "done":
            return
        kind = msg["type"]
        if kind == "pause_request":
            mgr.enter_phase(Phase.PAUSE)
            mgr.source.pause()
            mgr.clock.schedule(mgr.pause_ms, self._begin_checkpoint)
        elif kind == "stop_request":
            mgr.source.request_stop(self._stopped)
        else:
            raise ProtocolError(f"source agent got {kind!r}")

    def _begin_checkpoint(self) -> None:
        mgr = self.mgr
        if mgr.aborted:
            return
        mgr.enter_phase(Phase.CHECKPOINT)
        size = state_size_bytes(mgr.source.state)
        mgr.clock.schedule(checkpoint_duration(mgr.source_host, size),
                           self._finish_checkpoint)

    def _finish_checkpoint(self) -> None:
        mgr = self.mgr
        if mgr.aborted:
            return
        cp = mgr.source.create_checkpoint()
        mgr.checkpoint = cp
        mgr.record.checkpoint_size_bytes = cp.size_bytes
        if mgr.technique is Technique.MS2M:
            mgr.secondary_queue = f"{mgr.main_queue}.sec.{mgr.migration_id}"
            mgr.broker.create_queue(mgr.secondary_queue)
            # the secondary must hold every id the checkpoint does not cover,
            # including messages buffered while the source was paused
            mgr.broker.start_mirror(mgr.main_queue, mgr.secondary_queue,
                                    cp.checkpoint_last_id + 1)
            mgr.enter_phase(Phase.CONTINUATION)
            mgr.clock.schedule(mgr.continuation_ms, self._finish_resume)
        else:
            mgr.source.stop()
            self._phase1_done()

    def _finish_resume(self) -> None:
        mgr = self.mgr
        if mgr.aborted:
            return
        mgr.source.resume(mgr.main_queue)
        self._phase1_done()

    def _phase1_done(self) -> None:
        self.mgr.broker.publish(self.mgr.q_mgr, _ctl("phase1_done"))

    def _stopped(self, instance: ServiceInstance) -> None:
        mgr = self.mgr
        watermark = instance.state.last_processed_id
        mgr.broker.publish(mgr.q_mgr, _ctl("source_stopped",
                                           watermark=watermark))
        # the source announces the watermark to the target directly
        mgr.broker.publish(mgr.q_tgt, _ctl("watermark", watermark=watermark))


class _TargetAgent:
    """Executes target-side phase work: restore, suppressed replay, freeze,
    watermark finish, and the switch onto the main queue."""

    def __init__(self, mgr: MigrationManager):
        self.mgr = mgr
        self.instance: ServiceInstance | None = None
        self._checkpoint: Checkpoint | None = None
        ControlEndpoint(mgr.broker, mgr.q_tgt,
                        f"agent.tgt.{mgr.migration_id}", self._on_msg)

    def _on_msg(self, msg: dict) -> None:
        mgr = self.mgr
        kind = msg["type"]
        if kind == "discard":
            if self.instance is not None:
                self.instance.stop()
            mgr.broker.publish(mgr.q_mgr, _ctl("discarded"))
            return
        if mgr.aborted or mgr.state == "done":
            return
        if kind == "restore_request":
            mgr.enter_phase(Phase.RESTORATION)
            self._checkpoint = _checkpoint_from_wire(msg["checkpoint"])
            self._replay = msg["replay"]
            mgr.clock.schedule(
                restore_duration(mgr.target_host, self._checkpoint.size_bytes),
                self._restored)
        elif kind == "freeze":
            self.instance.freeze_replay(self._frozen)
        elif kind == "watermark":
            self.instance.finish_replay(msg["watermark"], mgr.main_queue,
                                        self._switched)
        else:
            raise ProtocolError(f"target agent got {kind!r}")

    def _restored(self) -> None:
        mgr = self.mgr
        if mgr.aborted:
            return
        inst = ServiceInstance.restore(
            self._checkpoint, mgr.target_host, mgr.clock, mgr.broker,
            mgr.processing_ms, mgr.output_topic,
            instance_id=f"{mgr.service_id}@{mgr.target_host.id}",
            shadow=mgr.shadow)
        self.instance = inst
        mgr.target_instance = inst
        if mgr.on_instance_created is not None:
            mgr.on_instance_created(inst)
        if self._replay:
            mgr.enter_phase(Phase.REPLAY)
            mgr.broker.publish(mgr.q_mgr, _ctl("restored"))
            inst.on_idle = self._replay_idle
            inst.enter_replay(mgr.secondary_queue)
        else:
            # activation: the restored container still pays the unpause cost
            # before it can serve; it lands inside the restoration span
            mgr.clock.schedule(mgr.continuation_ms, self._activated)

    def _activated(self) -> None:
        mgr = self.mgr
        if mgr.aborted:
            return
        mgr.enter_phase(Phase.FINALIZATION)
        self.instance.start_serving(mgr.main_queue)
        mgr.broker.publish(mgr.q_mgr, _ctl("switched", replayed=0))

    def _replay_idle(self, _instance: ServiceInstance) -> None:
        self.mgr.broker.publish(self.mgr.q_mgr, _ctl("replay_idle"))

    def _frozen(self, instance: ServiceInstance) -> None:
        self.mgr.broker.publish(self.mgr.q_mgr, _ctl(
            "frozen", progress=instance.state.last_processed_id))

    def _switched(self, instance: ServiceInstance) -> None:
        mgr = self.mgr
        mgr.enter_phase(Phase.FINALIZATION)
        mgr.broker.publish(mgr.q_mgr, _ctl(
            "switched", replayed=instance.replayed_count))

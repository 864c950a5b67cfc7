import pytest
from hypothesis import given, strategies as st

from migsim.broker import (BadAck, Broker, BrokerError, DuplicateQueue,
                           ExclusiveConsumer, MirrorActive, NotSubscribed,
                           UnknownQueue)
from migsim.simnet import SimClock


@pytest.fixture
def broker():
    return Broker(SimClock())


def test_create_and_duplicate_queue(broker):
    broker.create_queue("q")
    with pytest.raises(DuplicateQueue):
        broker.create_queue("q")


def test_unknown_queue_refused(broker):
    with pytest.raises(UnknownQueue):
        broker.publish("missing", b"x")


def test_ids_assigned_from_one_in_fifo_order(broker):
    broker.create_queue("q")
    assert [broker.publish("q", bytes([i])) for i in range(4)] == [1, 2, 3, 4]
    assert broker.queue("q").ids() == [1, 2, 3, 4]
    assert broker.queue("q").head().id == 1


def test_exclusive_consumer(broker):
    broker.create_queue("q")
    broker.subscribe("q", "alice")
    with pytest.raises(ExclusiveConsumer):
        broker.subscribe("q", "bob")


def test_delete_queue_with_subscriber_refused(broker):
    broker.create_queue("q")
    broker.subscribe("q", "alice")
    with pytest.raises(BrokerError):
        broker.delete_queue("q")
    broker.unsubscribe("q", "alice")
    broker.delete_queue("q")
    assert not broker.has_queue("q")


def test_poll_requires_subscription(broker):
    broker.create_queue("q")
    broker.publish("q", b"m")
    with pytest.raises(NotSubscribed):
        broker.poll("q", "nobody")


def test_poll_ack_cycle(broker):
    broker.create_queue("q")
    broker.subscribe("q", "c")
    broker.publish("q", b"one")
    broker.publish("q", b"two")
    msg = broker.poll("q", "c")
    assert msg.id == 1 and msg.payload == b"one"
    # single outstanding delivery: next poll waits for the ack
    assert broker.poll("q", "c") is None
    assert broker.peek("q", "c") is None
    broker.ack("q", "c", 1)
    assert broker.queue("q").ids() == [2]
    assert broker.poll("q", "c").id == 2


def test_ack_wrong_id_rejected(broker):
    broker.create_queue("q")
    broker.subscribe("q", "c")
    broker.publish("q", b"m")
    broker.poll("q", "c")
    with pytest.raises(BadAck):
        broker.ack("q", "c", 99)


def test_ack_without_poll_rejected(broker):
    broker.create_queue("q")
    broker.subscribe("q", "c")
    broker.publish("q", b"m")
    with pytest.raises(BadAck):
        broker.ack("q", "c", 1)


def test_unacked_message_redelivered_after_unsubscribe(broker):
    broker.create_queue("q")
    broker.subscribe("q", "c1")
    broker.publish("q", b"m")
    assert broker.poll("q", "c1").id == 1
    broker.unsubscribe("q", "c1")
    broker.subscribe("q", "c2")
    redelivered = broker.poll("q", "c2")
    assert redelivered.id == 1 and redelivered.payload == b"m"


def test_release_inflight_makes_message_deliverable_again(broker):
    broker.create_queue("q")
    broker.subscribe("q", "c")
    broker.publish("q", b"m")
    broker.poll("q", "c")
    broker.release_inflight("q")
    assert broker.poll("q", "c").id == 1


def test_wake_fires_after_delivery_latency():
    clock = SimClock()
    broker = Broker(clock, delivery_latency_ms=2.5)
    broker.create_queue("q")
    wakes = []
    broker.subscribe("q", "c", on_wake=lambda name: wakes.append(clock.now))
    clock.schedule(10.0, lambda: broker.publish("q", b"m"))
    clock.run_until()
    assert wakes == [12.5]


def test_wake_not_duplicated_for_burst_publishes():
    clock = SimClock()
    broker = Broker(clock)
    broker.create_queue("q")
    wakes = []
    broker.subscribe("q", "c", on_wake=lambda name: wakes.append(clock.now))

    def burst():
        broker.publish("q", b"a")
        broker.publish("q", b"b")
        broker.publish("q", b"c")

    clock.schedule(1.0, burst)
    clock.run_until()
    assert wakes == [1.0]


def test_subscribe_to_nonempty_queue_wakes(broker):
    clock = broker.clock
    broker.create_queue("q")
    broker.publish("q", b"m")
    wakes = []
    broker.subscribe("q", "c", on_wake=lambda name: wakes.append(name))
    clock.run_until()
    assert wakes == ["q"]


# -- mirroring ----------------------------------------------------------------


def test_mirror_backfills_buffered_messages(broker):
    broker.create_queue("main")
    broker.create_queue("sec")
    broker.subscribe("main", "svc")
    for i in range(5):
        broker.publish("main", b"m%d" % (i + 1))
    for mid in (1, 2):
        assert broker.poll("main", "svc").id == mid
        broker.ack("main", "svc", mid)
    broker.start_mirror("main", "sec", 3)
    assert broker.queue("sec").ids() == [3, 4, 5]
    broker.publish("main", b"m6")
    assert broker.queue("sec").ids() == [3, 4, 5, 6]


def test_mirrored_copy_keeps_source_id_and_payload(broker):
    broker.create_queue("main")
    broker.create_queue("sec")
    broker.start_mirror("main", "sec", 1)
    broker.publish("main", b"payload")
    copies = broker.queue("sec").messages()
    assert len(copies) == 1
    assert copies[0].id == 1
    assert copies[0].payload == b"payload"
    assert copies[0].topic == "sec"


def test_mirror_ignores_ids_below_start(broker):
    broker.create_queue("main")
    broker.create_queue("sec")
    broker.publish("main", b"old")
    broker.start_mirror("main", "sec", 2)
    assert broker.queue("sec").ids() == []
    broker.publish("main", b"new")
    assert broker.queue("sec").ids() == [2]


def test_second_mirror_refused(broker):
    broker.create_queue("main")
    broker.create_queue("a")
    broker.create_queue("b")
    broker.start_mirror("main", "a", 1)
    with pytest.raises(MirrorActive):
        broker.start_mirror("main", "b", 1)


def test_self_mirror_and_bad_start_refused(broker):
    broker.create_queue("main")
    broker.create_queue("sec")
    with pytest.raises(BrokerError):
        broker.start_mirror("main", "main", 1)
    with pytest.raises(BrokerError):
        broker.start_mirror("main", "sec", 0)


def test_stop_mirror_halts_propagation(broker):
    broker.create_queue("main")
    broker.create_queue("sec")
    broker.start_mirror("main", "sec", 1)
    broker.publish("main", b"a")
    broker.stop_mirror("main")
    broker.publish("main", b"b")
    assert broker.queue("sec").ids() == [1]
    with pytest.raises(BrokerError):
        broker.stop_mirror("main")


def test_consuming_main_does_not_touch_mirror(broker):
    broker.create_queue("main")
    broker.create_queue("sec")
    broker.subscribe("main", "svc")
    broker.start_mirror("main", "sec", 1)
    broker.publish("main", b"a")
    broker.poll("main", "svc")
    broker.ack("main", "svc", 1)
    assert broker.queue("main").ids() == []
    assert broker.queue("sec").ids() == [1]


@given(
    pre_ops=st.lists(st.sampled_from(["pub", "consume"]), max_size=30),
    post_pubs=st.integers(min_value=0, max_value=15),
    start_back=st.integers(min_value=0, max_value=10),
)
def test_mirror_holds_exactly_the_tail_subsequence(pre_ops, post_pubs, start_back):
    """Independent bookkeeping oracle: after an arbitrary interleaving of
    publishes and consumes around mirror creation, the mirror holds exactly
    the ids >= start_id that were buffered at creation or published later."""
    broker = Broker(SimClock())
    broker.create_queue("main")
    broker.create_queue("sec")
    broker.subscribe("main", "svc")

    published = 0
    acked: set[int] = set()
    for op in pre_ops:
        if op == "pub":
            published += 1
            broker.publish("main", b"p%d" % published)
        else:
            msg = broker.poll("main", "svc")
            if msg is not None:
                broker.ack("main", "svc", msg.id)
                acked.add(msg.id)

    start_id = max(1, published - start_back)
    buffered = [i for i in range(1, published + 1) if i not in acked]
    expected = [i for i in buffered if i >= start_id]

    broker.start_mirror("main", "sec", start_id)
    assert broker.queue("sec").ids() == expected

    for _ in range(post_pubs):
        published += 1
        broker.publish("main", b"p%d" % published)
        if published >= start_id:
            expected.append(published)
    assert broker.queue("sec").ids() == expected

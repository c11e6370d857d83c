import random

import pytest

from omas_consensus.algorithms import (
    AlgorithmKind,
    Mode,
    ScheduleCorruption,
    classify_mode,
    step_arriving_qaod,
    step_departing_qaod,
    step_qaiod,
    step_qapod,
    step_remaining_qaod,
)
from omas_consensus.protocol import ZERO, DepartureConditionViolated, MassPair, NodeRecord, StateTriple
from omas_consensus.topology import NodeSets


class AlwaysZero:
    def randrange(self, stop):
        return 0


def sets(remaining=(), arriving=(), departing=(), soon=(), long_term=()):
    return NodeSets(frozenset(remaining), frozenset(arriving), frozenset(departing), frozenset(soon), frozenset(long_term))


def test_classify_mode_closed_variants():
    ns = sets(remaining={1, 2}, arriving={5}, departing={3}, long_term={1, 2})
    assert classify_mode("qaod", 1, 0, ns) is Mode.REMAINING
    assert classify_mode("qaiod", 3, 0, ns) is Mode.DEPARTING
    assert classify_mode(AlgorithmKind.QAOD, 5, 0, ns) is Mode.ARRIVING
    assert classify_mode("qaod", 9, 0, ns) is Mode.INACTIVE


def test_classify_mode_delay_aware():
    ns = sets(remaining={1, 2}, departing={3}, soon={2}, long_term={1})
    assert classify_mode("qapod", 1, 0, ns) is Mode.LONG_TERM_REMAINING
    assert classify_mode("qapod", 2, 0, ns) is Mode.DEPARTING_SOON
    assert classify_mode("qapod", 3, 0, ns) is Mode.DEPARTING
    with pytest.raises(ScheduleCorruption):
        classify_mode("qapod", 1, 0, sets(remaining={1}))
    with pytest.raises(ScheduleCorruption):
        classify_mode("qaod", 1, 0, sets(remaining={1}, departing={1}))


def test_remaining_snapshots_then_splits():
    node = NodeRecord(0, 3, MassPair(7, 3), StateTriple(6, 2, 3))
    node2, msgs = step_remaining_qaod(node, [4], [MassPair(2, 1)], AlwaysZero(), k=5)
    # draws of 0 pick the smallest target: node 0 itself
    assert node2.mass == MassPair(9, 4)
    assert node2.state == StateTriple(7, 3, 2)
    assert msgs == []


def test_remaining_sends_carry_step():
    class Outward:
        def randrange(self, stop):
            return stop - 1

    node = NodeRecord(0, 3, MassPair(7, 3))
    node2, msgs = step_remaining_qaod(node, [4], (), Outward(), k=5)
    assert node2.mass == MassPair(3, 1)
    assert len(msgs) == 1
    m = msgs[0]
    assert (m.sender, m.receiver, m.c_y, m.c_z, m.emit_step, m.deliver_step) == (0, 4, 4, 2, 5, 5)


def test_remaining_without_tokens_only_merges():
    node = NodeRecord(0, 3, MassPair(-2, 0), StateTriple(6, 2, 3))
    node2, msgs = step_remaining_qaod(node, [1], [MassPair(5, 1)], AlwaysZero())
    assert node2.mass == MassPair(3, 1) and node2.state == StateTriple(6, 2, 3) and msgs == []


def test_departing_closed_handoff():
    node = NodeRecord(2, 4, MassPair(11, 3))
    msg = step_departing_qaod(node, [5, 7], AlwaysZero(), k=9, inbox=[MassPair(1, 1)])
    assert (msg.receiver, msg.c_y, msg.c_z, msg.deliver_step) == (5, 4, 2, 9)


def test_departing_without_remaining_neighbor_reports_payload():
    node = NodeRecord(2, 4, MassPair(11, 3))
    with pytest.raises(DepartureConditionViolated) as info:
        step_departing_qaod(node, [], random.Random(0), k=9)
    assert info.value.node == 2 and info.value.step == 9
    assert info.value.payload == MassPair(3, 1)


def test_arrival_initializes():
    node = step_arriving_qaod(NodeRecord(1, 6), k=3)
    assert node.mass == MassPair(12, 2) and node.state.q_s == 6 and node.nu == 4


def test_qapod_delays_long_term_sends():
    class Outward:
        def randrange(self, stop):
            return stop - 1

    node = NodeRecord(0, 3, MassPair(6, 2))
    _, msgs = step_qapod(node, Mode.LONG_TERM_REMAINING, [4], (), delay_draw=3, rng=Outward(), k=10)
    assert [(m.emit_step, m.deliver_step) for m in msgs] == [(10, 13)]


def test_qapod_departing_soon_absorbs_silently():
    node = NodeRecord(0, 3, MassPair(6, 2), StateTriple(6, 2, 3))
    node2, msgs = step_qapod(node, Mode.DEPARTING_SOON, [4], [MassPair(5, 1)])
    assert node2.mass == MassPair(11, 3) and node2.state == node.state and msgs == []


def test_qapod_handoff_is_immediate():
    node = NodeRecord(0, 3, MassPair(9, 3))
    node2, msgs = step_qapod(node, Mode.DEPARTING, [4], (), delay_draw=7, rng=AlwaysZero(), k=2)
    assert node2.mass == ZERO
    assert [(m.receiver, m.c_y, m.c_z, m.deliver_step) for m in msgs] == [(4, 3, 1, 2)]
    with pytest.raises(ValueError):
        step_qapod(node, Mode.REMAINING, [4])


def test_qaiod_lifecycle():
    node = NodeRecord(1, 5)
    node, _ = step_qaiod(node, Mode.ARRIVING, (), k=0)
    assert node.mass == MassPair(10, 2) and node.eta == 1 and node.nu == 1
    node, _ = step_qaiod(node, Mode.REMAINING, [2], (), AlwaysZero(), k=1)
    assert node.eta == 0 and node.nu == 1
    node, msgs = step_qaiod(node, Mode.DEPARTING, [2], (), AlwaysZero(), k=2)
    # the open handoff forwards everything, initial tokens included
    assert node.mass == ZERO and (msgs[0].c_y, msgs[0].c_z) == (10, 2)
    state = node.state
    node, _ = step_qaiod(node, Mode.ARRIVING, (), k=7)
    assert node.mass == ZERO and node.state == state and node.nu == 1


def test_qaiod_empty_remaining_waits():
    node = NodeRecord(1, 5, ZERO, StateTriple(10, 2, 5), eta=0, nu=3)
    node2, msgs = step_qaiod(node, Mode.REMAINING, [2], [MassPair(4, 1)], AlwaysZero(), k=8)
    assert node2.mass == MassPair(4, 1) and node2.nu == 3 and msgs == []
    node3, _ = step_qaiod(node2, Mode.REMAINING, [2], (), AlwaysZero(), k=9)
    assert node3.nu == 9 and node3.state == StateTriple(4, 1, 4)

import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omas_consensus.protocol import (
    ZERO,
    DepartureConditionViolated,
    MassPair,
    NodeRecord,
    StateTriple,
    TransmissionMessage,
    arrival_init,
    arrival_init_open,
    departing_probabilities,
    departure_handoff_closed,
    departure_handoff_open,
    merge_received,
    remaining_probabilities,
    sample_target,
    split_mass,
)

from .oracles import peel_pieces, reference_split


class AlwaysZero:
    def randrange(self, stop):
        return 0


class Fixed:
    def __init__(self, draws):
        self.draws = list(draws)

    def randrange(self, stop):
        u = self.draws.pop(0)
        assert 0 <= u < stop
        return u


def uniform(keys):
    keys = sorted(keys)
    return {k: Fraction(1, len(keys)) for k in keys}


def test_mass_pair_arithmetic():
    a, b = MassPair(5, 2), MassPair(-3, 1)
    assert a + b == MassPair(2, 3)
    assert a - b == MassPair(8, 1)
    assert ZERO.is_zero() and not a.is_zero()


def test_state_triple_floors_toward_minus_infinity():
    assert StateTriple.from_mass(MassPair(7, 2)).q_s == 3
    assert StateTriple.from_mass(MassPair(-3, 2)).q_s == -2
    with pytest.raises(ValueError):
        StateTriple.from_mass(MassPair(4, 0))


def test_remaining_probabilities_include_self():
    probs = remaining_probabilities([4, 2], 7)
    assert probs == {2: Fraction(1, 3), 4: Fraction(1, 3), 7: Fraction(1, 3)}
    assert remaining_probabilities([], 3) == {3: Fraction(1)}
    with pytest.raises(ValueError):
        remaining_probabilities([3], 3)


def test_departing_probabilities():
    assert departing_probabilities([9, 1]) == {1: Fraction(1, 2), 9: Fraction(1, 2)}
    with pytest.raises(DepartureConditionViolated):
        departing_probabilities([])


def test_sample_target_covers_each_key_in_proportion():
    probs = {3: Fraction(1, 2), 1: Fraction(1, 3), 8: Fraction(1, 6)}
    hits = {k: 0 for k in probs}
    for u in range(6):
        hits[sample_target(probs, Fixed([u]))] += 1
    assert hits == {1: 2, 3: 3, 8: 1}
    with pytest.raises(ValueError):
        sample_target({1: Fraction(1, 2)}, AlwaysZero())


def test_split_keeps_small_masses():
    assert split_mass(MassPair(9, 1), uniform([0, 1]), 0, AlwaysZero()) == (MassPair(9, 1), [])
    assert split_mass(MassPair(-4, 0), uniform([0, 1]), 0, AlwaysZero()) == (MassPair(-4, 0), [])
    with pytest.raises(ValueError):
        split_mass(MassPair(1, -1), uniform([0]), 0, AlwaysZero())


def test_split_all_draws_to_self_reassembles():
    kept, sends = split_mass(MassPair(6, 3), uniform([0, 1, 2]), 0, AlwaysZero())
    assert kept == MassPair(6, 3) and sends == []


def test_split_pieces_follow_progressive_floor():
    # y=7, z=3 peels 2, 2 and keeps the last piece 3; draws send pieces to 5 then 9
    kept, sends = split_mass(MassPair(7, 3), uniform([1, 5, 9]), 1, Fixed([1, 2]))
    assert kept == MassPair(3, 1)
    assert sends == [(5, MassPair(2, 1)), (9, MassPair(2, 1))]


def test_split_aggregates_per_target_in_order():
    kept, sends = split_mass(MassPair(10, 4), uniform([0, 2, 3]), 0, Fixed([2, 1, 2]))
    assert [t for t, _ in sends] == [2, 3]
    assert sends[1][1] == MassPair(5, 2)
    assert kept + sends[0][1] + sends[1][1] == MassPair(10, 4)


@given(
    y=st.integers(-200, 200),
    z=st.integers(0, 30),
    others=st.sets(st.integers(1, 12), max_size=5),
    seed=st.integers(0, 2**32),
)
def test_split_conserves_and_bounds_pieces(y, z, others, seed):
    targets = uniform(others | {0})
    kept, sends = split_mass(MassPair(y, z), targets, 0, random.Random(seed))
    total = kept
    for t, m in sends:
        assert t in others
        assert m.z >= 1
        total = total + m
    assert total == MassPair(y, z)
    if z >= 1:
        lo, hi = y // z, -(-y // z)
        for _, m in sends:
            assert lo * m.z <= m.y <= hi * m.z
        assert kept.z >= 1


@given(y=st.integers(-50, 50), z=st.integers(1, 20))
def test_closed_form_pieces_match_peeling(y, z):
    pieces = []
    yy, zz = y, z
    while zz > 1:
        p = yy // zz
        pieces.append(p)
        yy -= p
        zz -= 1
    pieces.append(yy)
    assert pieces == peel_pieces(y, z)


@settings(max_examples=300)
@given(
    y=st.integers(-20, 20),
    z=st.integers(0, 10),
    others=st.sets(st.integers(1, 6), max_size=4),
    seed=st.integers(0, 2**32),
)
def test_split_matches_reference(y, z, others, seed):
    targets = uniform(others | {0})
    kept, sends = split_mass(MassPair(y, z), targets, 0, random.Random(seed))
    ref_kept, ref_sends = reference_split(y, z, targets, 0, random.Random(seed))
    assert (kept.y, kept.z) == ref_kept
    assert {t: (m.y, m.z) for t, m in sends} == ref_sends


def test_merge_received():
    assert merge_received(MassPair(1, 1), [MassPair(2, 1), MassPair(-4, 0)]) == MassPair(-1, 2)
    assert merge_received(MassPair(3, 2)) == MassPair(3, 2)


def test_arrival_and_handoffs():
    mass, state = arrival_init(4)
    assert mass == MassPair(8, 2) and state == StateTriple(8, 2, 4)
    assert departure_handoff_closed(MassPair(8, 2), 4) == ZERO
    assert departure_handoff_closed(MassPair(5, 1), 4) == MassPair(-3, -1)
    assert departure_handoff_open(MassPair(5, 1)) == MassPair(5, 1)


def test_open_arrival_restores_previous_state():
    fresh = NodeRecord(2, 6)
    assert arrival_init_open(fresh) == (MassPair(12, 2), StateTriple(12, 2, 6))
    back = NodeRecord(2, 6, eta=0, nu=14, state=StateTriple(11, 2, 5))
    assert arrival_init_open(back) == (ZERO, StateTriple(11, 2, 5))
    with pytest.raises(ValueError):
        arrival_init_open(NodeRecord(2, 6, eta=0))


def test_message_roundtrip_and_delay_order():
    msg = TransmissionMessage(1, 4, -3, 2, 10, 13)
    assert TransmissionMessage.from_dict(msg.to_dict()) == msg
    assert msg.payload == MassPair(-3, 2)
    with pytest.raises(ValueError):
        TransmissionMessage(1, 4, 0, 1, 5, 4)


def test_record_evolve_only_touches_named_fields():
    rec = NodeRecord(3, 7, MassPair(1, 1), StateTriple(1, 1, 1), eta=1, nu=2)
    rec2 = rec.evolve(mass=ZERO, eta=0)
    assert rec2 == NodeRecord(3, 7, ZERO, StateTriple(1, 1, 1), eta=0, nu=2)

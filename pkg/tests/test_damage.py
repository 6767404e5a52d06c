import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dappo import damage as dmg
from dappo.errors import InvalidInputError


def brute_force_count(n, k):
    """Enumerate assignment sets: <= 2 damaged limbs, one of k types each."""
    total = 0
    for size in range(3):
        for limbs in itertools.combinations(range(n), size):
            total += len(list(itertools.product(range(1, k + 1), repeat=len(limbs))))
    return total


@pytest.mark.parametrize("n,k,expected", [(4, 2, 33), (6, 2, 73), (4, 0, 1), (2, 2, 9)])
def test_count_classes_examples(n, k, expected):
    assert dmg.count_classes(n, k) == expected


def test_count_matches_enumeration():
    for n in range(1, 9):
        for k in range(0, 4):
            assert dmg.count_classes(n, k) == brute_force_count(n, k)


def test_count_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        dmg.count_classes(0, 2)


def test_canonical_ids_quad():
    assert dmg.class_from_id(0, 4).is_healthy
    c1 = dmg.class_from_id(1, 4)
    assert [(a.limb, a.kind) for a in c1.assignments] == [(0, 1)]
    c8 = dmg.class_from_id(8, 4)
    assert [(a.limb, a.kind) for a in c8.assignments] == [(3, 2)]
    c9 = dmg.class_from_id(9, 4)
    assert [(a.limb, a.kind) for a in c9.assignments] == [(0, 1), (1, 1)]


@pytest.mark.parametrize("n", [4, 6])
def test_bijection(n):
    D = dmg.count_classes(n, 2)
    classes = dmg.all_classes(n)
    assert len({c.assignments for c in classes}) == D
    for i, c in enumerate(classes):
        assert c.class_id == i
        assert dmg.id_from_class(c, n) == i


def test_class_from_id_out_of_range():
    with pytest.raises(InvalidInputError):
        dmg.class_from_id(33, 4)


def test_encode_examples():
    assert dmg.encode(dmg.class_from_id(0, 4), 4).tolist() == [0] * 8
    assert dmg.encode(dmg.class_from_id(1, 4), 4).tolist() == [1, 0, 0, 0, 0, 0, 0, 0]
    c = dmg.DamageClass(0, (dmg.Assignment(2, 2), dmg.Assignment(5, 1)))
    c = dmg.DamageClass(dmg.id_from_class(c, 6), c.assignments)
    enc = dmg.encode(c, 6)
    assert np.flatnonzero(enc).tolist() == [5, 10]


def test_decode_examples():
    assert dmg.decode(np.zeros(8), 4).is_healthy
    c = dmg.decode([0, 1, 0, 0, 0, 0, 0, 0], 4)
    assert [(a.limb, a.kind) for a in c.assignments] == [(0, 2)]
    assert c.class_id == 2


def test_decode_rejects_double_tuple():
    with pytest.raises(InvalidInputError):
        dmg.decode([1, 1, 0, 0, 0, 0, 0, 0], 4)


@pytest.mark.parametrize("n", [4, 6])
def test_round_trip_and_shape(n):
    encodings = set()
    for c in dmg.all_classes(n):
        enc = dmg.encode(c, n)
        assert enc.sum() <= 2
        assert not np.any(enc.reshape(n, 2).sum(axis=1) > 1)
        assert dmg.decode(enc, n) == c
        encodings.add(tuple(enc))
    assert len(encodings) == dmg.count_classes(n, 2)


def test_two_damages_on_one_limb_rejected():
    with pytest.raises(InvalidInputError):
        dmg.id_from_assignments([dmg.Assignment(1, 1), dmg.Assignment(1, 2)], 4)


@given(st.integers(0, 72))
def test_json_round_trip(i):
    c = dmg.class_from_id(i, 6)
    assert dmg.DamageClass.from_json(c.to_json(), 6) == c

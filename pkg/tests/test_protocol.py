import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcsr_eit.protocol import (
    StimulationProtocol,
    adjacent_protocol,
    measurement_operator,
    protocol_from_config,
    reciprocal_key,
    tank_protocol,
)


@pytest.mark.parametrize(
    "skip,drop,expected", [(False, False, 256), (True, True, 104), (True, False, 208)]
)
def test_adjacent_counts(skip, drop, expected):
    assert adjacent_protocol(16, skip_driven=skip, drop_reciprocal=drop).M == expected


def test_adjacent_requires_four_electrodes():
    with pytest.raises(ValueError):
        adjacent_protocol(3)


def test_skip_driven_removes_touching_pairs():
    p = adjacent_protocol(16, skip_driven=True)
    for k, pos, neg in p.measurements:
        assert not {pos, neg} & set(p.injections[k])


@pytest.mark.parametrize("terms,expected", [([1, 5, 9, 13], 54), ([1], 15), ([1, 2], 29)])
def test_tank_injection_counts(terms, expected):
    assert tank_protocol(terms, 16).n_injections == expected


def test_tank_rejects_bad_terminals():
    with pytest.raises(ValueError, match="nonempty"):
        tank_protocol([], 16)
    with pytest.raises(ValueError):
        tank_protocol([17], 16)


def test_currents_sum_to_zero():
    p = tank_protocol([1, 5, 9, 13])
    I = p.current_patterns()
    np.testing.assert_array_equal(I.sum(axis=1), 0.0)
    assert np.all((I > 0).sum(axis=1) == 1)


def test_protocol_invariants():
    with pytest.raises(ValueError, match="differ"):
        StimulationProtocol(4, [[0, 0]], 1.0, [[0, 1, 2]])
    with pytest.raises(ValueError, match="duplicate"):
        StimulationProtocol(4, [[0, 1]], 1.0, [[0, 1, 2], [0, 1, 2]])
    with pytest.raises(ValueError, match="unknown injection"):
        StimulationProtocol(4, [[0, 1]], 1.0, [[1, 1, 2]])


def test_measurement_operator_examples():
    p = StimulationProtocol(4, [[0, 1]], 1.0, [[0, 1, 0]])
    assert measurement_operator(p, np.zeros((1, 4))).tolist() == [0.0]
    assert measurement_operator(p, np.full((1, 4), 7.0)).tolist() == [0.0]
    # 1-based pair (2, 1) on U = [1, 3, 0, 0]
    assert measurement_operator(p, np.array([[1.0, 3.0, 0.0, 0.0]])).tolist() == [2.0]
    with pytest.raises(ValueError, match="shape"):
        measurement_operator(p, np.zeros((2, 4)))


def test_measurement_order_injection_major():
    p = adjacent_protocol(8)
    U = np.arange(64, dtype=float).reshape(8, 8) ** 2
    V = measurement_operator(p, U)
    expected = [U[k, a] - U[k, (a + 1) % 8] for k in range(8) for a in range(8)]
    np.testing.assert_array_equal(V, expected)


@given(L=st.integers(4, 24), skip=st.booleans())
@settings(max_examples=30, deadline=None)
def test_reciprocity_filter_property(L, skip):
    p = adjacent_protocol(L, skip_driven=skip, drop_reciprocal=True)
    keys = [reciprocal_key(*p.injections[k], a, b) for k, a, b in p.measurements]
    assert len(set(keys)) == len(keys)
    full = adjacent_protocol(L, skip_driven=skip)
    full_keys = {reciprocal_key(*full.injections[k], a, b) for k, a, b in full.measurements}
    assert set(keys) == full_keys


def test_dropped_entries_are_the_larger_member():
    full = adjacent_protocol(16, skip_driven=True)
    entries = {tuple(m) for m in full.measurements.tolist()}
    kept = {tuple(m) for m in adjacent_protocol(16, True, True).measurements.tolist()}
    inj = {tuple(pair): k for k, pair in enumerate(full.injections.tolist())}
    for k, a, b in entries:
        twin = (inj[(a, b)], *full.injections[k].tolist())
        assert twin in entries
        assert min((k, a, b), twin) in kept
        assert max((k, a, b), twin) not in kept


@given(L=st.integers(4, 16), skip=st.booleans(), drop=st.booleans())
@settings(max_examples=20, deadline=None)
def test_protocol_serialization_deterministic(L, skip, drop):
    a = adjacent_protocol(L, skip, drop).to_json()
    b = adjacent_protocol(L, skip, drop).to_json()
    assert a == b
    back = StimulationProtocol.from_dict(adjacent_protocol(L, skip, drop).to_dict())
    assert back.to_json() == a


@given(terms=st.sets(st.integers(1, 16), min_size=1, max_size=16))
@settings(max_examples=30, deadline=None)
def test_tank_counts_property(terms):
    t = len(terms)
    # pairs with at least one terminal: all pairs minus pairs with none
    expected = 16 * 15 // 2 - (16 - t) * (15 - t) // 2
    assert tank_protocol(sorted(terms)).n_injections == expected


def test_serialized_electrodes_are_one_based():
    d = tank_protocol([1, 5, 9, 13]).to_dict()
    assert min(itertools.chain.from_iterable(d["injections"])) == 1
    assert d["injections"][0] == [1, 2]


def test_protocol_from_config():
    p = protocol_from_config({"type": "adjacent", "skip_driven": True, "drop_reciprocal": True}, 16)
    assert p.M == 104
    t = protocol_from_config({"type": "tank", "terminals": [1, 5, 9, 13], "amplitude_mA": 2.0}, 16)
    assert t.n_injections == 54
    assert np.all(t.amplitudes == 2.0)
    with pytest.raises(ValueError):
        protocol_from_config({"type": "trig"}, 16)

import numpy as np
import pytest

from hflsim.streams import Streams


def test_same_name_same_draws():
    a = Streams(5).get("delays").random(8)
    b = Streams(5).get("delays").random(8)
    np.testing.assert_array_equal(a, b)


def test_streams_are_independent_of_consumption_order():
    s = Streams(5)
    first = s.get("sampling").random(4)
    s.get("delays").random(1000)
    np.testing.assert_array_equal(s.get("sampling").random(4), first)


def test_distinct_names_keys_and_seeds_differ():
    s = Streams(1)
    base = s.get("shuffle", 0).random(4)
    assert not np.array_equal(base, s.get("shuffle", 1).random(4))
    assert not np.array_equal(base, s.get("delays", 0).random(4))
    assert not np.array_equal(base, Streams(2).get("shuffle", 0).random(4))
    np.testing.assert_array_equal(base, s.device("shuffle", 0).random(4))


def test_negative_seed_rejected():
    with pytest.raises(ValueError):
        Streams(-1)

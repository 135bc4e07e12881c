import numpy as np
import pytest

from vlreward.random_utils import derive_random_state, permutation, randint


def test_same_keys_same_stream():
    a = derive_random_state(3, "dataset", 7).uniform(size=5)
    b = derive_random_state(3, "dataset", 7).uniform(size=5)
    np.testing.assert_equal(a, b)


@pytest.mark.parametrize("keys", [(4, "dataset", 7), (3, "dataset", 8), (3, "views", 7), (3, "dataset")])
def test_different_keys_different_stream(keys):
    reference = derive_random_state(3, "dataset", 7).uniform(size=5)
    assert not np.array_equal(derive_random_state(*keys).uniform(size=5), reference)


def test_negative_key():
    with pytest.raises(ValueError):
        derive_random_state(0, -1)


def test_helpers_use_given_state():
    np.testing.assert_equal(
        randint(0, 100, 10, random_state=np.random.RandomState(1)),
        randint(0, 100, 10, random_state=np.random.RandomState(1)),
    )
    assert sorted(permutation(6, np.random.RandomState(2))) == list(range(6))

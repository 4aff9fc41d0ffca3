import pytest

from cilkit.errors import DataError
from cilkit.utils.metrics import (
    accuracy,
    average_accuracy,
    entropy_accuracy_quartiles,
    final_accuracy,
    pair_error_rates,
    selection_accuracy,
)


def test_accuracy_is_a_count_ratio():
    assert accuracy([0, 1, 2, 2], [0, 1, 1, 2]) == 0.75
    assert accuracy([3], [3]) == 1.0


def test_accuracy_errors():
    with pytest.raises(DataError):
        accuracy([0, 1], [0])
    with pytest.raises(DataError):
        accuracy([], [])


def test_average_and_final():
    stages = [0.9, 0.8, 0.7]
    assert average_accuracy(stages) == pytest.approx(0.8)
    assert final_accuracy(stages) == 0.7
    with pytest.raises(DataError):
        average_accuracy([])
    with pytest.raises(DataError):
        final_accuracy([])


def test_selection_accuracy():
    assert selection_accuracy([1, 2, 2, 1], [1, 2, 1, 1]) == 0.75


def test_entropy_quartiles_rank_by_entropy():
    entropies = [0.1, 0.9, 0.2, 0.8, 0.3, 0.7, 0.4, 0.6]
    correct = [True, False, True, False, True, True, False, False]
    assert entropy_accuracy_quartiles(entropies, correct) == [1.0, 0.5, 0.5, 0.0]


def test_entropy_quartiles_need_four_points():
    with pytest.raises(DataError):
        entropy_accuracy_quartiles([0.1, 0.2, 0.3], [True, True, False])


def test_pair_error_rates():
    predictions = [0, 0, 2, 3, 3]
    labels = [0, 1, 2, 3, 2]
    pair_error, other_error = pair_error_rates(predictions, labels, [(0, 1)])
    assert pair_error == 0.5
    assert other_error == pytest.approx(1 / 3)
    assert pair_error_rates([0], [0], [])[0] is None

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from cilkit.errors import ConfigError, DataError, ProtocolError
from cilkit.utils.datasets import (
    Dataset,
    ProtocolSpec,
    SyntheticConfig,
    build_stream,
    export_feature_dataset,
    export_stream,
    load_feature_dataset,
    make_auxiliary_dataset,
    make_synthetic_stream,
    split_classes,
)
from cilkit.utils.prng import LCG64, shuffled


@pytest.mark.parametrize(
    "total, base, increment, tasks",
    [(100, 0, 10, 10), (100, 0, 5, 20), (200, 0, 20, 10), (200, 100, 20, 6)],
)
def test_protocol_task_counts(total, base, increment, tasks):
    spec = ProtocolSpec(total_classes=total, base=base, increment=increment)
    partition = split_classes(spec)
    assert len(partition) == tasks == spec.num_tasks
    assert sorted(c for chunk in partition for c in chunk) == list(range(total))
    if base:
        assert len(partition[0]) == base
        assert all(len(chunk) == increment for chunk in partition[1:])


def test_split_is_deterministic_and_shuffled():
    spec = ProtocolSpec(total_classes=50, increment=10)
    assert split_classes(spec) == split_classes(spec)
    assert [c for chunk in split_classes(spec) for c in chunk] != list(range(50))
    other = ProtocolSpec(total_classes=50, increment=10, shuffle_seed=7)
    assert split_classes(other) != split_classes(spec)


def test_indivisible_protocol_is_rejected():
    with pytest.raises(ProtocolError):
        split_classes(ProtocolSpec(total_classes=50, base=5, increment=10))
    with pytest.raises(ProtocolError):
        split_classes(ProtocolSpec(total_classes=55, increment=10))


def test_lcg_sequence_is_documented():
    rng = LCG64(0)
    assert rng.next_u64() == 1442695040888963407
    assert rng.next_u64() == (6364136223846793005 * 1442695040888963407 + 1442695040888963407) % 2**64


def test_lcg_below_stays_in_range():
    rng = LCG64(1993)
    draws = [rng.below(7) for _ in range(500)]
    assert min(draws) == 0 and max(draws) == 6


def test_shuffle_is_a_permutation():
    assert sorted(shuffled(range(30), 1993)) == list(range(30))
    assert shuffled([], 1) == []


def test_synthetic_sizes(tiny_stream, tiny_synthetic):
    assert tiny_stream.num_tasks == 2
    for task in tiny_stream.tasks:
        assert len(task.train) == len(task.classes) * tiny_synthetic.train_per_class
        assert len(task.test) == len(task.classes) * tiny_synthetic.test_per_class
        assert task.train.x.shape[1:] == (3, 4)


def test_stream_labels_follow_arrival_order(tiny_stream):
    assert tiny_stream.tasks[0].classes == [0, 1]
    assert tiny_stream.tasks[1].classes == [2, 3]
    assert sorted(tiny_stream.class_order) == [0, 1, 2, 3]
    assert tiny_stream.task_of_class().tolist() == [1, 1, 2, 2]


def test_test_union_grows_by_stage(tiny_stream):
    assert len(tiny_stream.test_union(1)) == 12
    assert len(tiny_stream.test_union(2)) == 24
    with pytest.raises(DataError):
        tiny_stream.test_union(3)


def test_zero_noise_makes_identical_instances():
    cfg = SyntheticConfig(num_classes=4, train_per_class=5, test_per_class=2, noise_std=0.0, confusable_pairs=0)
    stream = make_synthetic_stream(cfg, ProtocolSpec(total_classes=4, increment=2))
    data = stream.tasks[0].train
    first = data.x[data.y == data.y[0]]
    assert np.all(first == first[0])


def test_confusable_pairs_span_tasks():
    cfg = SyntheticConfig(confusable_pairs=4)
    stream = make_synthetic_stream(cfg, ProtocolSpec())
    owners = stream.task_of_class()
    assert len(stream.confusable_pairs) == 4
    for a, b in stream.confusable_pairs:
        assert owners[a] != owners[b]


def test_synthetic_config_checks():
    with pytest.raises(ConfigError):
        make_synthetic_stream(SyntheticConfig(num_classes=40), ProtocolSpec(total_classes=50))
    assert SyntheticConfig(num_classes=4, confusable_pairs=3).problems()


def test_auxiliary_dataset_shape():
    data = make_auxiliary_dataset(5, 3, token_dim=4, seq_len=2, noise_std=0.1, seed=7)
    assert data.x.shape == (15, 2, 4)
    assert_array_equal(data.classes, np.arange(5))


def test_build_stream_rejects_missing_test_classes():
    train = Dataset(np.zeros((4, 1, 2)), [0, 1, 2, 3])
    test = Dataset(np.zeros((3, 1, 2)), [0, 1, 2])
    with pytest.raises(DataError):
        build_stream(train, test, ProtocolSpec(total_classes=4, increment=2))


def test_build_stream_maps_original_labels():
    train = Dataset(np.arange(4, dtype=float).reshape(4, 1, 1), [10, 20, 30, 40])
    test = Dataset(np.arange(4, dtype=float).reshape(4, 1, 1), [40, 30, 20, 10])
    spec = ProtocolSpec(total_classes=4, increment=2)
    stream = build_stream(train, test, spec)
    for task in stream.tasks:
        for x, y in zip(task.train.x, task.train.y):
            assert stream.class_order[y] == [10, 20, 30, 40][int(x[0, 0])]


def test_export_and_reload_is_bit_exact(tmp_path, tiny_stream):
    paths = export_stream(tiny_stream, tmp_path)
    train = load_feature_dataset(paths["train"], seq_len=3, token_dim=4)
    merged_x = np.concatenate([t.train.x for t in tiny_stream.tasks])
    merged_y = np.asarray(tiny_stream.class_order)[np.concatenate([t.train.y for t in tiny_stream.tasks])]
    assert_array_equal(train.x, merged_x)
    assert_array_equal(train.y, merged_y)


def test_reloaded_files_rebuild_the_same_stream(tmp_path, tiny_stream, tiny_protocol):
    paths = export_stream(tiny_stream, tmp_path)
    rebuilt = build_stream(load_feature_dataset(paths["train"]), load_feature_dataset(paths["test"]), tiny_protocol)
    assert rebuilt.class_order == tiny_stream.class_order
    for original, copy in zip(tiny_stream.tasks, rebuilt.tasks):
        assert_array_equal(np.sort(original.train.x, axis=0), np.sort(copy.train.x, axis=0))


def test_load_small_file(tmp_path):
    path = tmp_path / "three.csv"
    path.write_text("label,x_0_0,x_0_1\n0,1.0,2.0\n1,3.0,4.0\n0,5.0,6.0\n")
    data = load_feature_dataset(str(path))
    assert len(data) == 3
    assert data.x.shape == (3, 1, 2)


def test_load_reports_row_number(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("label,x_0_0,x_0_1\n0,1.0,2.0\n1,3.0\n")
    with pytest.raises(DataError, match="row 3"):
        load_feature_dataset(str(path))
    path.write_text("label,x_0_0,x_0_1\n0,1.0,abc\n")
    with pytest.raises(DataError, match="row 2"):
        load_feature_dataset(str(path))


def test_load_checks_expected_shape(tmp_path):
    path = export_feature_dataset(Dataset(np.zeros((2, 2, 3)), [0, 1]), str(tmp_path / "d.csv"))
    with pytest.raises(DataError):
        load_feature_dataset(path, seq_len=3, token_dim=3)
    with pytest.raises(DataError):
        load_feature_dataset(str(tmp_path / "missing.csv"))


def test_load_rejects_invalid_utf8(tmp_path):
    path = tmp_path / "binary.csv"
    path.write_bytes(b"label,x_0_0\n0,\xff\xfe\n")
    with pytest.raises(DataError, match="UTF-8"):
        load_feature_dataset(str(path))

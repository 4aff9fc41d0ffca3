import json
import os

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from cilkit.errors import CheckpointError
from cilkit.models import BackboneConfig, flatten_adapter
from cilkit.services.fusion_service import fuse
from cilkit.services.inference_service import ALL_STRATEGIES, InferenceEngine
from cilkit.utils.checkpoint import (
    MANIFEST_FILE,
    WEIGHTS_FILE,
    load_adapter,
    load_backbone,
    load_checkpoint,
    save_adapter,
    save_backbone,
    save_checkpoint,
)


def read_bytes(directory):
    with open(os.path.join(directory, MANIFEST_FILE), "rb") as m, open(os.path.join(directory, WEIGHTS_FILE), "rb") as w:
        return m.read(), w.read()


@pytest.fixture
def saved(trained_state, tmp_path):
    return save_checkpoint(trained_state, str(tmp_path / "model"))


def test_save_load_save_is_byte_identical(saved, tmp_path):
    state = load_checkpoint(saved)
    again = save_checkpoint(state, str(tmp_path / "again"))
    assert read_bytes(saved) == read_bytes(again)


def test_loaded_state_matches_original(saved, trained_state):
    state = load_checkpoint(saved, backbone_config=trained_state.backbone.config)
    assert state.num_tasks == trained_state.num_tasks
    assert state.classifier.class_to_task == trained_state.classifier.class_to_task
    assert_array_equal(state.classifier.W, trained_state.classifier.W)
    for loaded, original in zip(state.task_adapters, trained_state.task_adapters):
        assert loaded.task_id == original.task_id
        assert loaded.equals(original)
    assert state.universal.is_universal
    assert state.universal.equals(trained_state.universal)
    assert [s.task_id for s in state.statistics] == [1, 2]
    assert all(not p.requires_grad for p in state.backbone.parameters())


def test_refusing_loaded_adapters_reproduces_universal(saved):
    state = load_checkpoint(saved)
    assert fuse(state.task_adapters).equals(state.universal)


def test_loaded_state_predicts_identically(saved, trained_state, tiny_stream):
    x = tiny_stream.test_union(2).x
    before = InferenceEngine(trained_state).predict_all(x)
    after = InferenceEngine(load_checkpoint(saved)).predict_all(x)
    for strategy in ALL_STRATEGIES:
        assert_array_equal(before[strategy.name].classes, after[strategy.name].classes)
        assert_array_equal(before[strategy.name].combined_probs, after[strategy.name].combined_probs)


def test_mismatched_backbone_config_is_rejected(saved, tiny_backbone_config):
    other = BackboneConfig(**{**tiny_backbone_config.to_dict(), "embed_dim": 12, "mlp_hidden": 24})
    with pytest.raises(CheckpointError):
        load_checkpoint(saved, backbone_config=other)


def test_truncated_weights_are_rejected(saved):
    path = os.path.join(saved, WEIGHTS_FILE)
    with open(path, "rb") as handle:
        raw = handle.read()
    with open(path, "wb") as handle:
        handle.write(raw[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(saved)
    with open(path, "wb") as handle:
        handle.write(raw[:-3])
    with pytest.raises(CheckpointError):
        load_checkpoint(saved)


def test_trailing_weights_are_rejected(saved):
    with open(os.path.join(saved, WEIGHTS_FILE), "ab") as handle:
        handle.write(np.zeros(2).tobytes())
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(saved)


def test_unknown_version_and_kind_are_rejected(saved, tmp_path):
    manifest_path = os.path.join(saved, MANIFEST_FILE)
    with open(manifest_path) as handle:
        manifest = json.load(handle)
    manifest["version"] = 99
    with open(manifest_path, "w") as handle:
        json.dump(manifest, handle)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(saved)
    with pytest.raises(CheckpointError):
        load_adapter(saved)
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "nowhere"))


def test_adapter_round_trip(trained_state, tmp_path):
    path = save_adapter(trained_state.universal, str(tmp_path / "universal"))
    loaded = load_adapter(path)
    assert loaded.is_universal
    assert_array_equal(flatten_adapter(loaded).values, flatten_adapter(trained_state.universal).values)
    with pytest.raises(CheckpointError):
        load_backbone(path)


def test_backbone_round_trip(tiny_backbone, tmp_path):
    path = save_backbone(tiny_backbone, str(tmp_path / "backbone"))
    loaded = load_backbone(path, backbone_config=tiny_backbone.config)
    assert loaded.frozen
    before, after = tiny_backbone.snapshot(), loaded.snapshot()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def edit_manifest(directory, change):
    manifest_path = os.path.join(directory, MANIFEST_FILE)
    with open(manifest_path) as handle:
        manifest = json.load(handle)
    change(manifest)
    with open(manifest_path, "w") as handle:
        json.dump(manifest, handle)


def test_manifest_entry_without_shape_is_rejected(trained_state, tmp_path):
    path = save_adapter(trained_state.task_adapters[0], str(tmp_path / "adapter"))
    edit_manifest(path, lambda m: m["tensors"][0].pop("shape"))
    with pytest.raises(CheckpointError, match="malformed manifest"):
        load_adapter(path)


def test_manifest_with_non_list_tensors_is_rejected(trained_state, tmp_path):
    path = save_adapter(trained_state.task_adapters[0], str(tmp_path / "adapter"))
    edit_manifest(path, lambda m: m.update(tensors={"W": 1}))
    with pytest.raises(CheckpointError, match="list"):
        load_adapter(path)


@pytest.mark.parametrize(
    "change",
    [
        lambda m: m["statistics"][0].pop("classes"),
        lambda m: m["adapters"][0].pop("task_id"),
        lambda m: m.update(classifier={"embed_dim": m["classifier"]["embed_dim"], "class_to_task": []}),
    ],
    ids=["statistics-classes", "adapter-task-id", "class-map-type"],
)
def test_incomplete_model_manifest_is_rejected(saved, change):
    edit_manifest(saved, change)
    with pytest.raises(CheckpointError):
        load_checkpoint(saved)

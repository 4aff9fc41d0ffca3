"""
Checkpoint persistence

A checkpoint is a directory holding ``manifest.json`` and ``weights.bin``.
The manifest names the format, its version and the kind of object stored
(model, adapter or backbone), echoes the configuration and lists every
tensor as {name, shape, offset, count}; offsets and counts are in float64
elements. ``weights.bin`` is the concatenation of those tensors as
little-endian float64, in manifest order.
"""

from collections import OrderedDict
import contextlib
import json
import logging
import os

import numpy as np

from cilkit.errors import CheckpointError
from cilkit.models import (
    UNIVERSAL,
    AdapterSet,
    Backbone,
    BackboneConfig,
    Classifier,
    ClassStatistics,
    ModelState,
)
from cilkit.tensor import Tensor

logger = logging.getLogger(__name__)

FORMAT_NAME = "cilkit-checkpoint"
FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.json"
WEIGHTS_FILE = "weights.bin"
BLOB_DTYPE = np.dtype("<f8")

KINDS = ("model", "adapter", "backbone")


class _BlobWriter:
    def __init__(self):
        self.entries = []
        self.chunks = []
        self.offset = 0

    def add(self, name, array):
        array = np.ascontiguousarray(array, dtype=BLOB_DTYPE)
        self.entries.append(
            {"name": name, "shape": list(array.shape), "offset": self.offset, "count": int(array.size)}
        )
        self.chunks.append(array.tobytes())
        self.offset += array.size


def _write(path, kind, header, blob):
    os.makedirs(path, exist_ok=True)
    manifest = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "kind": kind, "tensors": blob.entries}
    manifest.update(header)
    with open(os.path.join(path, MANIFEST_FILE), "w") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")
    with open(os.path.join(path, WEIGHTS_FILE), "wb") as handle:
        handle.write(b"".join(blob.chunks))
    logger.debug(f"Wrote {kind} checkpoint to {path}: {len(blob.entries)} tensors, {blob.offset} values")
    return path


@contextlib.contextmanager
def _manifest_fields(path):
    """Report missing or mistyped manifest fields as CheckpointError"""
    try:
        yield
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise CheckpointError(f"{path}: malformed manifest ({type(e).__name__}: {e})") from None


def _read(path, kind):
    """Return (manifest, {name: array}) after validating format, kind and sizes"""
    manifest_path = os.path.join(path, MANIFEST_FILE)
    weights_path = os.path.join(path, WEIGHTS_FILE)
    if not os.path.isfile(manifest_path) or not os.path.isfile(weights_path):
        raise CheckpointError(f"{path}: expected {MANIFEST_FILE} and {WEIGHTS_FILE}")
    try:
        with open(manifest_path) as handle:
            manifest = json.load(handle)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{manifest_path}: not valid JSON ({e})") from None
    if not isinstance(manifest, dict):
        raise CheckpointError(f"{manifest_path}: expected a JSON object")

    if manifest.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{path}: not a {FORMAT_NAME} checkpoint")
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {manifest.get('version')!r}")
    if manifest.get("kind") != kind:
        raise CheckpointError(f"{path}: holds a {manifest.get('kind')!r} checkpoint, expected {kind!r}")

    with open(weights_path, "rb") as handle:
        raw = handle.read()
    if len(raw) % BLOB_DTYPE.itemsize:
        raise CheckpointError(f"{weights_path}: size {len(raw)} is not a whole number of float64 values")
    values = np.frombuffer(raw, dtype=BLOB_DTYPE)

    tensors = OrderedDict()
    expected_offset = 0
    entries = manifest.get("tensors", [])
    if not isinstance(entries, list):
        raise CheckpointError(f"{path}: manifest 'tensors' must be a list")
    with _manifest_fields(path):
        for entry in entries:
            name = entry["name"]
            shape = tuple(int(n) for n in entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            if entry["count"] != count or entry["offset"] != expected_offset:
                raise CheckpointError(f"{path}: manifest entry {name!r} is inconsistent")
            end = expected_offset + count
            if end > values.size:
                raise CheckpointError(f"{weights_path}: truncated at tensor {name!r}")
            tensors[name] = values[expected_offset:end].reshape(shape).astype(np.float64)
            expected_offset = end
    if expected_offset != values.size:
        raise CheckpointError(f"{weights_path}: {values.size - expected_offset} trailing values not in the manifest")
    return manifest, tensors


def _take(tensors, name, path):
    try:
        return tensors.pop(name)
    except KeyError:
        raise CheckpointError(f"{path}: missing tensor {name!r}") from None


def _check_backbone_config(stored, expected, path):
    if expected is not None and stored != expected:
        raise CheckpointError(
            f"{path}: checkpoint backbone {stored.to_dict()} does not match expected {expected.to_dict()}"
        )


def _backbone_config(manifest, path):
    try:
        return BackboneConfig(**manifest["backbone_config"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: unreadable backbone config ({e})") from None


# Writers
def _add_adapters(blob, prefix, adapters):
    for block in range(adapters.num_blocks):
        blob.add(f"{prefix}/block_{block}/W_down", adapters.down[block].data)
        blob.add(f"{prefix}/block_{block}/W_up", adapters.up[block].data)


def _adapter_header(adapters):
    return {
        "task_id": adapters.task_id,
        "num_blocks": adapters.num_blocks,
        "embed_dim": adapters.embed_dim,
        "rank": adapters.rank,
    }


def save_checkpoint(state, path):
    """Write a full ModelState"""
    blob = _BlobWriter()
    for name, param in state.backbone.params.items():
        blob.add(f"backbone/{name}", param.data)
    for task_id, block in zip(state.classifier.block_tasks, state.classifier.blocks):
        blob.add(f"classifier/task_{task_id}", block.data)
    for adapters in state.task_adapters:
        _add_adapters(blob, f"adapters/task_{adapters.task_id}", adapters)
    if state.universal is not None:
        _add_adapters(blob, "universal", state.universal)
    for stats in state.statistics:
        blob.add(f"statistics/task_{stats.task_id}/means", stats.means)
        blob.add(f"statistics/task_{stats.task_id}/variances", stats.variances)

    header = {
        "backbone_config": state.backbone.config.to_dict(),
        "classifier": {
            "embed_dim": state.classifier.embed_dim,
            "block_tasks": list(state.classifier.block_tasks),
            "class_to_task": {str(c): t for c, t in sorted(state.classifier.class_to_task.items())},
        },
        "adapters": [_adapter_header(a) for a in state.task_adapters],
        "universal": _adapter_header(state.universal) if state.universal is not None else None,
        "statistics": [
            {"task_id": s.task_id, "classes": s.classes.tolist(), "counts": s.counts.tolist()}
            for s in state.statistics
        ],
        "config_echo": state.config_echo,
    }
    return _write(path, "model", header, blob)


def save_adapter(adapters, path):
    blob = _BlobWriter()
    _add_adapters(blob, "adapter", adapters)
    return _write(path, "adapter", _adapter_header(adapters), blob)


def save_backbone(backbone, path):
    blob = _BlobWriter()
    for name, param in backbone.params.items():
        blob.add(name, param.data)
    return _write(path, "backbone", {"backbone_config": backbone.config.to_dict()}, blob)


# Readers
def _read_adapters(tensors, prefix, header, path):
    try:
        num_blocks, embed_dim, rank = header["num_blocks"], header["embed_dim"], header["rank"]
        task_id = header["task_id"]
    except (KeyError, TypeError):
        raise CheckpointError(f"{path}: incomplete adapter header for {prefix!r}") from None
    down, up = [], []
    for block in range(num_blocks):
        down.append(_take(tensors, f"{prefix}/block_{block}/W_down", path))
        up.append(_take(tensors, f"{prefix}/block_{block}/W_up", path))
        if down[-1].shape != (embed_dim, rank) or up[-1].shape != (rank, embed_dim):
            raise CheckpointError(f"{path}: {prefix} block {block} does not match d={embed_dim}, r={rank}")
    return AdapterSet(down, up, UNIVERSAL if task_id == UNIVERSAL else int(task_id)).freeze()


def _build_backbone(config, tensors, prefix, path):
    reference = Backbone._init_params(config)
    params = OrderedDict()
    for name, template in reference.items():
        array = _take(tensors, f"{prefix}{name}", path)
        if array.shape != template.shape:
            raise CheckpointError(f"{path}: backbone tensor {name!r} has shape {array.shape}, expected {template.shape}")
        params[name] = Tensor(array)
    backbone = Backbone(config, params=params)
    backbone.freeze()
    return backbone


def load_backbone(path, backbone_config=None):
    manifest, tensors = _read(path, "backbone")
    config = _backbone_config(manifest, path)
    _check_backbone_config(config, backbone_config, path)
    backbone = _build_backbone(config, tensors, "", path)
    if tensors:
        raise CheckpointError(f"{path}: unexpected tensors {list(tensors)}")
    return backbone


def load_adapter(path):
    manifest, tensors = _read(path, "adapter")
    adapters = _read_adapters(tensors, "adapter", manifest, path)
    if tensors:
        raise CheckpointError(f"{path}: unexpected tensors {list(tensors)}")
    return adapters


def load_checkpoint(path, backbone_config=None):
    """
    Read a ModelState written by save_checkpoint

    Args:
        path: checkpoint directory
        backbone_config: when given, the stored backbone must match it

    Returns:
        ModelState with every weight frozen
    """
    manifest, tensors = _read(path, "model")
    config = _backbone_config(manifest, path)
    _check_backbone_config(config, backbone_config, path)
    backbone = _build_backbone(config, tensors, "backbone/", path)

    with _manifest_fields(path):
        head = manifest.get("classifier") or {}
        if head.get("embed_dim") != config.embed_dim:
            raise CheckpointError(
                f"{path}: classifier width {head.get('embed_dim')} does not match d={config.embed_dim}"
            )
        classifier = Classifier(config.embed_dim)
        class_to_task = {int(c): t for c, t in head.get("class_to_task", {}).items()}
        for task_id in head.get("block_tasks", []):
            classes = sorted(c for c, owner in class_to_task.items() if owner == task_id)
            classifier.add_classes(classes, task_id, weights=_take(tensors, f"classifier/task_{task_id}", path))
        classifier.freeze()

        task_adapters = [
            _read_adapters(tensors, f"adapters/task_{h['task_id']}", h, path) for h in manifest.get("adapters", [])
        ]
        for adapters in task_adapters:
            adapters.check_compatible(config.num_blocks, config.embed_dim)
        universal = None
        if manifest.get("universal") is not None:
            universal = _read_adapters(tensors, "universal", manifest["universal"], path)

        statistics = []
        for entry in manifest.get("statistics", []):
            prefix = f"statistics/task_{entry['task_id']}"
            statistics.append(
                ClassStatistics(
                    task_id=entry["task_id"],
                    classes=entry["classes"],
                    means=_take(tensors, f"{prefix}/means", path),
                    variances=_take(tensors, f"{prefix}/variances", path),
                    counts=entry["counts"],
                )
            )
    if tensors:
        raise CheckpointError(f"{path}: unexpected tensors {list(tensors)}")

    state = ModelState(
        backbone=backbone,
        classifier=classifier,
        task_adapters=task_adapters,
        universal=universal,
        statistics=statistics,
        config_echo=manifest.get("config_echo") or {},
    )
    logger.info(f"Loaded checkpoint {path}: {state.num_tasks} tasks, {classifier.num_classes} classes")
    return state

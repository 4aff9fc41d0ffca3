import logging

import numpy as np

from cilkit.errors import DataError, ShapeError
from cilkit.tensor import Tensor, as_tensor, concat

logger = logging.getLogger(__name__)

CLASSIFIER_INIT_STD = 0.02


class Classifier:
    """
    Growing linear head f(x) = W^T phi(x)

    Columns are stored per task (d x |task classes|) so that one task's
    block can be trained while the others stay fixed; ``W`` is their
    concatenation in class order.
    """

    def __init__(self, embed_dim):
        self.embed_dim = embed_dim
        self.blocks = []
        self.block_tasks = []
        self.class_to_task = {}

    def __repr__(self):
        return f"<Classifier d={self.embed_dim} classes={self.num_classes} tasks={len(self.blocks)}>"

    @property
    def num_classes(self):
        return len(self.class_to_task)

    @property
    def W(self):
        if not self.blocks:
            return np.zeros((self.embed_dim, 0))
        return np.concatenate([b.data for b in self.blocks], axis=1)

    def parameters(self):
        return list(self.blocks)

    def task_block(self, task_id):
        return self.blocks[self.block_tasks.index(task_id)]

    def add_classes(self, class_ids, task_id, rng=None, weights=None):
        """
        Append one column per new class, owned by ``task_id``

        Class ids must continue the existing range (0..K-1) so that column
        index equals class id.
        """
        class_ids = [int(c) for c in class_ids]
        overlap = sorted(set(class_ids) & set(self.class_to_task))
        if overlap:
            raise DataError(f"classes {overlap} already belong to earlier tasks")
        expected = list(range(self.num_classes, self.num_classes + len(class_ids)))
        if sorted(class_ids) != expected:
            raise DataError(f"new classes must be {expected[0]}..{expected[-1]}, got {sorted(class_ids)}")
        if task_id in self.block_tasks:
            raise DataError(f"task {task_id} already has classifier columns")

        if weights is None:
            rng = rng or np.random.default_rng(0)
            weights = rng.normal(0.0, CLASSIFIER_INIT_STD, size=(self.embed_dim, len(class_ids)))
        block = Tensor(weights, requires_grad=True)
        if block.shape != (self.embed_dim, len(class_ids)):
            raise ShapeError("classifier block shape", block.shape, (self.embed_dim, len(class_ids)))
        self.blocks.append(block)
        self.block_tasks.append(task_id)
        for c in sorted(class_ids):
            self.class_to_task[c] = task_id
        return block

    def drop_task(self, task_id):
        """Remove the columns of the most recently added task"""
        if not self.block_tasks or self.block_tasks[-1] != task_id:
            raise DataError(f"task {task_id} does not own the last classifier block")
        self.blocks.pop()
        self.block_tasks.pop()
        self.class_to_task = {c: t for c, t in self.class_to_task.items() if t != task_id}

    def set_trainable(self, task_ids=None):
        """Enable gradients on the given tasks' columns (all when None)"""
        for block, owner in zip(self.blocks, self.block_tasks):
            block.requires_grad = task_ids is None or owner in task_ids
            block.zero_grad()

    def freeze(self):
        for block in self.blocks:
            block.requires_grad = False
            block.zero_grad()

    def logits(self, features):
        """W^T phi for one feature (d,) or a batch (B, d)"""
        features = as_tensor(features)
        if features.shape[-1] != self.embed_dim:
            raise ShapeError("feature dimension mismatch", features.shape, (self.embed_dim,))
        if not self.blocks:
            raise DataError("classifier has no classes yet")
        single = features.ndim == 1
        if single:
            features = features.reshape(1, self.embed_dim)
        parts = [features @ block for block in self.blocks]
        out = parts[0] if len(parts) == 1 else concat(parts, axis=1)
        return out.reshape(self.num_classes) if single else out

    def copy(self):
        clone = Classifier(self.embed_dim)
        for block, owner in zip(self.blocks, self.block_tasks):
            clone.blocks.append(Tensor(block.data))
            clone.block_tasks.append(owner)
        clone.class_to_task = dict(self.class_to_task)
        return clone


def logits(feature, classifier):
    """f(x) = W^T phi(x)"""
    return classifier.logits(feature)

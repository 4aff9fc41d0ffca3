"""
Bottleneck adapters and their flattened task-vector form

An AdapterSet holds one (W_down, W_up) pair per transformer block. A
TaskVector is the same numbers laid out flat: block order, W_down before
W_up, row-major inside each matrix. The manifest records that layout so
``unflatten`` can invert it exactly.
"""

from dataclasses import dataclass, field
import logging

import numpy as np

from cilkit.errors import ShapeError
from cilkit.tensor import Tensor, relu

logger = logging.getLogger(__name__)

UNIVERSAL = "universal"

ADAPTER_INIT_STD = 0.02


class AdapterSet:
    """Per-block W_down (d x r) and W_up (r x d) for one task"""

    def __init__(self, down, up, task_id):
        if len(down) != len(up) or not down:
            raise ShapeError("adapter set needs one W_down and one W_up per block", (len(down),), (len(up),))
        down = [d if isinstance(d, Tensor) else Tensor(d) for d in down]
        up = [u if isinstance(u, Tensor) else Tensor(u) for u in up]
        embed_dim, rank = down[0].shape
        for block, (w_down, w_up) in enumerate(zip(down, up)):
            if w_down.shape != (embed_dim, rank):
                raise ShapeError(f"W_down of block {block} has inconsistent shape", w_down.shape, (embed_dim, rank))
            if w_up.shape != (rank, embed_dim):
                raise ShapeError(f"W_up of block {block} has inconsistent shape", w_up.shape, (rank, embed_dim))
        if task_id != UNIVERSAL and (not isinstance(task_id, int) or task_id < 1):
            raise ValueError(f"task_id must be an integer >= 1 or UNIVERSAL, got {task_id!r}")
        self.down = down
        self.up = up
        self.task_id = task_id

    def __repr__(self):
        return f"<AdapterSet task={self.task_id} blocks={self.num_blocks} r={self.rank}>"

    @classmethod
    def initialize(cls, num_blocks, embed_dim, rank, task_id, rng):
        """W_down ~ N(0, 0.02^2), W_up = 0, so the residual starts at zero"""
        down = [
            Tensor(rng.normal(0.0, ADAPTER_INIT_STD, size=(embed_dim, rank)), requires_grad=True)
            for _ in range(num_blocks)
        ]
        up = [Tensor(np.zeros((rank, embed_dim)), requires_grad=True) for _ in range(num_blocks)]
        return cls(down, up, task_id)

    @classmethod
    def zeros(cls, num_blocks, embed_dim, rank, task_id=1):
        down = [np.zeros((embed_dim, rank)) for _ in range(num_blocks)]
        up = [np.zeros((rank, embed_dim)) for _ in range(num_blocks)]
        return cls(down, up, task_id)

    @property
    def num_blocks(self):
        return len(self.down)

    @property
    def embed_dim(self):
        return self.down[0].shape[0]

    @property
    def rank(self):
        return self.down[0].shape[1]

    @property
    def is_universal(self):
        return self.task_id == UNIVERSAL

    def parameters(self):
        params = []
        for w_down, w_up in zip(self.down, self.up):
            params.extend([w_down, w_up])
        return params

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.zero_grad()
        return self

    def copy(self, task_id=None):
        """Detached deep copy"""
        return AdapterSet(
            [Tensor(d.data) for d in self.down],
            [Tensor(u.data) for u in self.up],
            self.task_id if task_id is None else task_id,
        )

    def check_compatible(self, num_blocks, embed_dim):
        if self.num_blocks != num_blocks or self.embed_dim != embed_dim:
            raise ShapeError(
                "adapter set does not match backbone (blocks, d)",
                (self.num_blocks, self.embed_dim),
                (num_blocks, embed_dim),
            )

    def same_shape(self, other):
        return (
            self.num_blocks == other.num_blocks
            and self.embed_dim == other.embed_dim
            and self.rank == other.rank
        )

    def residual(self, x_i, block):
        """ReLU(x_i W_down) W_up"""
        if not 0 <= block < self.num_blocks:
            raise IndexError(f"block {block} out of range [0, {self.num_blocks})")
        return relu(x_i @ self.down[block]) @ self.up[block]

    def equals(self, other):
        """Bitwise equality of every weight"""
        if not self.same_shape(other):
            return False
        return all(
            np.array_equal(a.data, b.data) for a, b in zip(self.parameters(), other.parameters())
        )


@dataclass(frozen=True)
class ManifestEntry:
    block: int
    name: str
    rows: int
    cols: int

    @property
    def count(self):
        return self.rows * self.cols


@dataclass
class TaskVector:
    values: np.ndarray
    manifest: list = field(default_factory=list)
    task_id: object = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)

    def __len__(self):
        return self.values.size

    @property
    def expected_length(self):
        return sum(entry.count for entry in self.manifest)

    def same_layout(self, other):
        return list(self.manifest) == list(other.manifest)


def adapter_manifest(num_blocks, embed_dim, rank):
    manifest = []
    for block in range(num_blocks):
        manifest.append(ManifestEntry(block, "W_down", embed_dim, rank))
        manifest.append(ManifestEntry(block, "W_up", rank, embed_dim))
    return manifest


def flatten_adapter(adapters):
    """v = Flatten(A): block order, W_down before W_up, row-major"""
    values = np.concatenate([p.data.reshape(-1) for p in adapters.parameters()])
    manifest = adapter_manifest(adapters.num_blocks, adapters.embed_dim, adapters.rank)
    return TaskVector(values=values.copy(), manifest=manifest, task_id=adapters.task_id)


def unflatten(vector, task_id=None):
    """Inverse of flatten_adapter"""
    if not vector.manifest:
        raise ShapeError("task vector has an empty manifest")
    if len(vector) != vector.expected_length:
        raise ShapeError("task vector length does not match its manifest", (len(vector),), (vector.expected_length,))

    down, up = {}, {}
    offset = 0
    for entry in vector.manifest:
        matrix = vector.values[offset : offset + entry.count].reshape(entry.rows, entry.cols).copy()
        offset += entry.count
        if entry.name == "W_down":
            down[entry.block] = matrix
        elif entry.name == "W_up":
            up[entry.block] = matrix
        else:
            raise ShapeError(f"unknown manifest matrix name {entry.name!r}")

    blocks = sorted(down)
    if blocks != sorted(up) or blocks != list(range(len(blocks))):
        raise ShapeError("manifest does not describe W_down/W_up for blocks 0..L-1")
    owner = vector.task_id if task_id is None else task_id
    return AdapterSet([down[b] for b in blocks], [up[b] for b in blocks], owner if owner is not None else UNIVERSAL)

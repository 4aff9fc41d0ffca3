"""
Universal adapter fusion

Task vectors are merged per parameter: the consensus sign is the sign of
their sum, the magnitude is the extreme value on the consensus side, and the
universal vector is magnitude * sign. Dimensions whose sum is exactly zero
fuse to zero.
"""

from dataclasses import dataclass
import logging
import math

import numpy as np

from cilkit.errors import ShapeError
from cilkit.models import UNIVERSAL, TaskVector, flatten_adapter, unflatten
from cilkit.utils.performance import timer

logger = logging.getLogger(__name__)


@dataclass
class FusionResult:
    sign: np.ndarray
    magnitude: np.ndarray
    universal: TaskVector


def _stack(vectors):
    if not vectors:
        raise ValueError("fusion needs at least one task vector")
    first = vectors[0]
    for i, v in enumerate(vectors[1:], start=2):
        if not first.same_layout(v) or len(first) != len(v):
            raise ShapeError(f"task vector {i} does not share the layout of vector 1", (len(v),), (len(first),))
    return np.stack([v.values for v in vectors])


def sign_vector(vectors):
    """sgn(sum_i v^i) per dimension; an exactly zero sum gives 0"""
    stacked = _stack(vectors)
    # fsum is exact, so the sign cannot depend on the order of the vectors
    sums = np.array([math.fsum(column) for column in stacked.T])
    return np.sign(sums).astype(np.int8)


def magnitude_vector(vectors, sign):
    """|max_i v^i_j| where sign > 0, |min_i v^i_j| where sign < 0, else 0"""
    stacked = _stack(vectors)
    sign = np.asarray(sign)
    if sign.shape != (stacked.shape[1],):
        raise ShapeError("sign vector does not match the task vectors", sign.shape, (stacked.shape[1],))
    magnitude = np.zeros(stacked.shape[1])
    positive, negative = sign > 0, sign < 0
    magnitude[positive] = np.abs(stacked.max(axis=0)[positive])
    magnitude[negative] = np.abs(stacked.min(axis=0)[negative])
    return magnitude


def consensus_magnitude(vectors, sign):
    """
    Largest |v^i_j| among the vectors whose entry carries the consensus sign

    Equal to ``magnitude_vector``: a positive sum needs at least one positive
    entry, so the maximum is that entry (and symmetrically for negatives).
    """
    stacked = _stack(vectors)
    sign = np.asarray(sign)
    agrees = np.sign(stacked) == sign[np.newaxis, :]
    magnitude = np.where(agrees, np.abs(stacked), 0.0).max(axis=0)
    magnitude[sign == 0] = 0.0
    return magnitude


def fuse_vectors(vectors):
    """Fuse task vectors that share one manifest"""
    sign = sign_vector(vectors)
    magnitude = magnitude_vector(vectors, sign)
    values = magnitude * sign
    universal = TaskVector(values=values, manifest=list(vectors[0].manifest), task_id=UNIVERSAL)
    return FusionResult(sign=sign, magnitude=magnitude, universal=universal)


@timer
def fuse(adapter_sets):
    """
    Merge trained adapter sets into the universal adapter

    Returns:
        AdapterSet tagged UNIVERSAL
    """
    if not adapter_sets:
        raise ValueError("cannot fuse an empty list of adapter sets")
    first = adapter_sets[0]
    for other in adapter_sets[1:]:
        if not first.same_shape(other):
            raise ShapeError(
                "adapter sets differ in shape",
                (first.num_blocks, first.embed_dim, first.rank),
                (other.num_blocks, other.embed_dim, other.rank),
            )
    result = fuse_vectors([flatten_adapter(a) for a in adapter_sets])
    zero_share = float(np.mean(result.sign == 0))
    logger.debug(f"Fused {len(adapter_sets)} adapter sets; {zero_share:.1%} of parameters have zero consensus")
    return unflatten(result.universal, task_id=UNIVERSAL)

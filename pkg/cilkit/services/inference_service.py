"""
Adapter selection and prediction strategies

Every task adapter scores an input; the adapter with the lowest prediction
entropy is selected and, in the ensemble strategy, its class probabilities
are averaged with the universal adapter's. Ties go to the lowest index.
"""

from dataclasses import dataclass
from enum import Enum
import logging
import math

import numpy as np

from cilkit.errors import CILError, DataError
from cilkit.models import UNIVERSAL
from cilkit.tensor import no_grad, softmax

logger = logging.getLogger(__name__)

EVAL_BATCH = 256

# selected_tasks value for predictions made by the universal adapter alone
UNIVERSAL_INDEX = 0


class StrategyKind(str, Enum):
    ENSEMBLE = "ensemble"
    ENTROPY_ONLY = "entropy_only"
    UNIVERSAL_ONLY = "universal_only"
    MAXLOGIT_BASELINE = "maxlogit_baseline"


@dataclass(frozen=True)
class InferenceStrategy:
    kind: StrategyKind = StrategyKind.ENSEMBLE

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))

    @classmethod
    def from_name(cls, name):
        try:
            return cls(StrategyKind(name))
        except ValueError:
            choices = ", ".join(k.value for k in StrategyKind)
            raise ValueError(f"unknown strategy {name!r}; choose from {choices}") from None

    @property
    def name(self):
        return self.kind.value

    @property
    def needs_universal(self):
        return self.kind in (StrategyKind.ENSEMBLE, StrategyKind.UNIVERSAL_ONLY)


ALL_STRATEGIES = tuple(InferenceStrategy(kind) for kind in StrategyKind)


@dataclass
class Prediction:
    class_id: int
    selected_task: object
    per_adapter_entropy: np.ndarray
    combined_probs: np.ndarray


@dataclass
class BatchOutputs:
    """Every adapter's logits and probabilities for one batch, computed once"""

    task_ids: list
    task_logits: np.ndarray  # (t, B, K)
    task_probs: np.ndarray  # (t, B, K)
    entropies: np.ndarray  # (t, B)
    universal_probs: np.ndarray = None  # (B, K)

    @property
    def selected(self):
        """Index of the minimum-entropy adapter per instance"""
        return np.argmin(self.entropies, axis=0)


@dataclass
class BatchPredictions:
    classes: np.ndarray
    selected_tasks: np.ndarray
    entropies: np.ndarray
    combined_probs: np.ndarray

    def __len__(self):
        return self.classes.size


def entropy(probs):
    """Shannon entropy in nats; zero entries contribute nothing"""
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs < 0):
        raise DataError("probabilities must be non-negative")
    terms = np.zeros_like(probs)
    positive = probs > 0
    terms[positive] = probs[positive] * np.log(probs[positive])
    value = -terms.sum(axis=-1)
    # rounding can push the sum a hair outside [0, ln K]
    return np.clip(value, 0.0, math.log(probs.shape[-1]))


def predict_probs(x, adapters, classifier, backbone):
    """softmax(W^T phi(x; A)) over every class the head knows"""
    with no_grad():
        return softmax(classifier.logits(backbone.embed(x, adapters)), axis=-1).data


def select_from_probs(prob_vectors):
    """
    Argmin-entropy index over per-adapter probability vectors

    Returns:
        (index, entropies); the lowest index wins ties
    """
    if len(prob_vectors) == 0:
        raise ValueError("selection needs at least one adapter")
    entropies = np.array([float(entropy(p)) for p in prob_vectors])
    return int(np.argmin(entropies)), entropies


def select_adapter(x, task_adapters, classifier, backbone):
    """The task adapter whose prediction on one instance has minimal entropy"""
    index, entropies = select_from_probs([predict_probs(x, a, classifier, backbone) for a in task_adapters])
    return task_adapters[index], entropies


def _combine(kind, outputs):
    """Apply one strategy to precomputed outputs"""
    batch = outputs.task_probs.shape[1]
    rows = np.arange(batch)
    selected = outputs.selected
    task_ids = np.asarray(outputs.task_ids)

    if kind == StrategyKind.MAXLOGIT_BASELINE:
        flat = outputs.task_logits.transpose(1, 0, 2).reshape(batch, -1)
        winner = np.argmax(flat, axis=1)
        adapter, classes = np.divmod(winner, outputs.task_logits.shape[2])
        combined = outputs.task_probs[adapter, rows]
        return BatchPredictions(classes, task_ids[adapter], outputs.entropies.T, combined)

    if kind == StrategyKind.UNIVERSAL_ONLY:
        combined = outputs.universal_probs
        chosen = np.full(batch, UNIVERSAL_INDEX)
    elif kind == StrategyKind.ENTROPY_ONLY:
        combined = outputs.task_probs[selected, rows]
        chosen = task_ids[selected]
    else:
        combined = (outputs.task_probs[selected, rows] + outputs.universal_probs) / 2.0
        chosen = task_ids[selected]
    return BatchPredictions(np.argmax(combined, axis=1), chosen, outputs.entropies.T, combined)


class InferenceEngine:
    """Scores batches under a ModelState with any set of strategies"""

    def __init__(self, state, batch_size=EVAL_BATCH):
        if not state.task_adapters:
            raise CILError("model has no trained task adapters")
        self.state = state
        self.batch_size = batch_size

    def _check(self, strategies):
        for strategy in strategies:
            if strategy.needs_universal and self.state.universal is None:
                raise CILError(f"strategy {strategy.name} needs the universal adapter; fuse first")

    def batch_outputs(self, x):
        """Logits, probabilities and entropies of every adapter on one batch"""
        state = self.state
        task_logits = []
        with no_grad():
            for adapters in state.task_adapters:
                task_logits.append(state.classifier.logits(state.backbone.embed(x, adapters)).data)
            universal_probs = None
            if state.universal is not None:
                universal_probs = softmax(
                    state.classifier.logits(state.backbone.embed(x, state.universal)), axis=-1
                ).data
        task_logits = np.stack(task_logits)
        task_probs = softmax(task_logits, axis=-1).data
        return BatchOutputs(
            task_ids=[a.task_id for a in state.task_adapters],
            task_logits=task_logits,
            task_probs=task_probs,
            entropies=entropy(task_probs),
            universal_probs=universal_probs,
        )

    def predict_all(self, x, strategies=ALL_STRATEGIES):
        """strategy name -> BatchPredictions, all strategies sharing each forward pass"""
        self._check(strategies)
        x = np.asarray(x, dtype=np.float64)
        parts = {s.name: [] for s in strategies}
        for start in range(0, x.shape[0], self.batch_size):
            outputs = self.batch_outputs(x[start : start + self.batch_size])
            for strategy in strategies:
                parts[strategy.name].append(_combine(strategy.kind, outputs))
        return {
            name: BatchPredictions(
                classes=np.concatenate([p.classes for p in chunks]),
                selected_tasks=np.concatenate([p.selected_tasks for p in chunks]),
                entropies=np.concatenate([p.entropies for p in chunks]),
                combined_probs=np.concatenate([p.combined_probs for p in chunks]),
            )
            for name, chunks in parts.items()
        }

    def predict_batch(self, x, strategy):
        return self.predict_all(x, [strategy])[strategy.name]


def predict(x, state, strategy=InferenceStrategy()):
    """Prediction for one instance (S, D_in)"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"predict expects one (S, D_in) instance, got shape {x.shape}")
    result = InferenceEngine(state).predict_batch(x[np.newaxis], strategy)
    selected = int(result.selected_tasks[0])
    return Prediction(
        class_id=int(result.classes[0]),
        selected_task=UNIVERSAL if selected == UNIVERSAL_INDEX else selected,
        per_adapter_entropy=result.entropies[0],
        combined_probs=result.combined_probs[0],
    )
